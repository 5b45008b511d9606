"""Scenario orchestration: wires two link partners to a pair of seeded
channels, runs bring-up / enumeration / bulk / sustained-load phases, and
records structured traces and stats.

Trace format: one JSON object per line with keys sorted, so files are
grep-able, stream-decodable, and byte-identical across runs with the same
configuration and seed.  Every record carries the simulated time `t` (ps)
and a global record index `i` that makes the ordering strict.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

import numpy as np

from . import line_coding as lc
from .link_layer import LinkConfig, LinkLayer
from .ltssm import Ltssm, LtssmConfig, LtssmState
from .phy_model import Phy, standard_lfps_table
from .protocol_layer import (
    DEFAULT_RETRY_BUDGET, DeviceDescriptorSet, DeviceProtocol, HostProtocol,
    PmtWorkload, TransferStats, make_pattern,
)
from .sim_core import (
    ActivityEnd, ActivityStart, Channel, ChannelConfig, MS, NS, Scheduler,
    SECOND, SymbolBlock, US,
)


class Tracer:
    """Collects trace records into memory and/or a JSON-lines file."""

    def __init__(self, scheduler: Scheduler, path: str | None = None,
                 keep_records: bool = False, enabled: bool | None = None):
        self.scheduler = scheduler
        self.path = path
        self.records: list[dict] | None = [] if keep_records else None
        self._fh = open(path, "w") if path else None
        self.enabled = bool(path or keep_records) if enabled is None else enabled
        self._index = 0

    def emit(self, side: str, layer: str, kind: str, **fields) -> None:
        if not self.enabled:
            return
        record = {"t": self.scheduler.now, "i": self._index,
                  "side": side, "layer": layer, "kind": kind}
        record.update(fields)
        self._index += 1
        if self.records is not None:
            self.records.append(record)
        if self._fh is not None:
            self._fh.write(json.dumps(record, sort_keys=True,
                                      separators=(",", ":")) + "\n")

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None


class TraceError(ValueError):
    def __init__(self, line_no: int, detail: str):
        super().__init__(f"line {line_no}: {detail}")
        self.line_no = line_no


def read_trace(path: str) -> list[dict]:
    """Parse a trace file back into records; validates order and content."""
    records: list[dict] = []
    last = (-1, -1)
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise TraceError(line_no, f"not valid JSON ({exc.msg})") from None
            for key in ("t", "i", "side", "layer", "kind"):
                if key not in rec:
                    raise TraceError(line_no, f"missing field {key!r}")
            order = (rec["t"], rec["i"])
            if order <= last:
                raise TraceError(line_no, "records out of time order")
            last = order
            records.append(rec)
    return records


def format_trace_record(rec: dict) -> str:
    t_us = rec["t"] / 1e6
    head = f"{t_us:14.6f}us {rec['side']:<7} {rec['layer']:<8} {rec['kind']:<18}"
    extras = " ".join(f"{k}={rec[k]}" for k in sorted(rec)
                      if k not in ("t", "i", "side", "layer", "kind"))
    return (head + " " + extras).rstrip()


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass
class ScenarioConfig:
    """Everything a scenario needs; serializes to a flat key=value file."""

    seed: int = 1
    ber: float = 0.0
    latency_ps: int = 100 * NS
    partner_present: bool = True
    scale_divisor: int = 1000
    tseq_count: int = 64
    ts2_count: int = 8
    recovery_ts2_count: int = 2
    training_timeout_ps: int = 2 * MS
    wake_timeout_ps: int = 2 * MS
    detect_delay_ps: int = 1 * US
    detect_retry_ps: int = 100 * US
    start_jitter_ps: int = 2 * US
    credits: int = 4
    max_packet: int = 1024
    burst: int = 16
    pending_ack_timeout_ps: int = 10 * US
    credit_timeout_ps: int = 50 * US
    retry_budget: int = DEFAULT_RETRY_BUDGET
    transfer_bytes: int = 64 * 1024 * 1024
    direction: str = "in"
    pattern: str = "counter"
    bringup_horizon_ps: int = 20 * MS

    def validate(self) -> None:
        if self.seed < 0:
            raise ValueError("seed must be non-negative")
        if not 0.0 <= self.ber <= 1.0:
            raise ValueError("ber must lie in [0, 1]")
        if self.latency_ps < 0:
            raise ValueError("latency must be non-negative")
        if self.scale_divisor < 1:
            raise ValueError("scale_divisor must be >= 1")
        if not 1 <= self.burst <= 16:
            raise ValueError("burst must be in 1..16")
        if not 1 <= self.credits <= 4:
            raise ValueError("credits must be in 1..4")
        if not 1 <= self.max_packet <= 1024:
            raise ValueError("max_packet must be in 1..1024")
        if self.transfer_bytes < 0:
            raise ValueError("transfer_bytes must be non-negative")
        if self.direction not in ("in", "out"):
            raise ValueError("direction must be 'in' or 'out'")
        if self.pattern not in ("counter", "random"):
            raise ValueError("pattern must be 'counter' or 'random'")
        if self.retry_budget < 1:
            raise ValueError("retry_budget must be >= 1")
        if self.start_jitter_ps < 0:
            raise ValueError("start_jitter_ps must be non-negative")
        for name in ("tseq_count", "ts2_count", "recovery_ts2_count"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("training_timeout_ps", "wake_timeout_ps", "detect_delay_ps",
                     "detect_retry_ps", "pending_ack_timeout_ps",
                     "credit_timeout_ps", "bringup_horizon_ps"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    def to_text(self) -> str:
        lines = ["# usb3sim scenario configuration"]
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if isinstance(value, bool):
                value = "true" if value else "false"
            elif isinstance(value, float):
                value = repr(value)
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ScenarioConfig":
        fields = {f.name: f for f in dataclasses.fields(cls)}
        values: dict = {}
        for line_no, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"config line {line_no}: expected key = value")
            key, _, val = line.partition("=")
            key, val = key.strip(), val.strip()
            if key not in fields:
                raise ValueError(f"config line {line_no}: unknown key {key!r}")
            ftype = fields[key].type
            if ftype == "bool":
                if val.lower() not in ("true", "false"):
                    raise ValueError(f"config line {line_no}: bad bool {val!r}")
                values[key] = val.lower() == "true"
            elif ftype == "int":
                values[key] = int(val, 0)
            elif ftype == "float":
                values[key] = float(val)
            else:
                values[key] = val
        cfg = cls(**values)
        cfg.validate()
        return cfg

    def save(self, path: str) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_text())

    @classmethod
    def load(cls, path: str) -> "ScenarioConfig":
        with open(path) as fh:
            return cls.from_text(fh.read())


# ---------------------------------------------------------------------------
# Partner model and scenario
# ---------------------------------------------------------------------------

class PartnerModel:
    """One side of the link: PHY + LTSSM + link layer + protocol engine."""

    def __init__(self, side: str, scheduler: Scheduler, tx: Channel,
                 cfg: ScenarioConfig, tracer: Tracer,
                 descriptors: DeviceDescriptorSet | None = None):
        self.side = side
        table = standard_lfps_table(cfg.scale_divisor)
        self.phy = Phy(side, scheduler, tx, table, tracer,
                       detect_delay=cfg.detect_delay_ps)
        self.ltssm = Ltssm(side, scheduler, self.phy, LtssmConfig(
            tseq_count=cfg.tseq_count, ts2_count=cfg.ts2_count,
            recovery_ts2_count=cfg.recovery_ts2_count,
            training_timeout=cfg.training_timeout_ps,
            wake_timeout=cfg.wake_timeout_ps,
            detect_retry=cfg.detect_retry_ps), tracer)
        self.link = LinkLayer(side, scheduler, tx, LinkConfig(
            credits=cfg.credits, max_payload=cfg.max_packet,
            pending_ack_timeout=cfg.pending_ack_timeout_ps,
            credit_timeout=cfg.credit_timeout_ps), tracer)
        if side == "device":
            self.protocol = DeviceProtocol(scheduler, self.link, tracer,
                                           descriptors)
        else:
            self.protocol = HostProtocol(scheduler, self.link, tracer)

        self.link.data_gate = lambda: self.ltssm.state is LtssmState.U0
        self.link.rx_gate = lambda: self.ltssm.state in (
            LtssmState.U0, LtssmState.RECOVERY)
        self.link.request_recovery = self.ltssm.request_recovery
        self.ltssm.on_u0 = self.link.on_u0
        self.ltssm.on_link_reset = self.link.full_reset

    def on_line_item(self, item) -> None:
        if isinstance(item, ActivityStart):
            self.ltssm.line_activity_start(item.detail)
        elif isinstance(item, ActivityEnd):
            self.ltssm.line_activity_end(item.detail)
        elif isinstance(item, SymbolBlock):
            self.phy.receive_symbols(item)
        else:
            self.link.on_frame(item)


@dataclass(slots=True)
class BringupReport:
    success: bool
    time_to_u0_ps: int | None
    host_state: str
    device_state: str
    host_bursts_sent: int
    device_bursts_sent: int
    events: int

    def as_dict(self) -> dict:
        return {"success": self.success, "time_to_u0_ps": self.time_to_u0_ps,
                "host_state": self.host_state, "device_state": self.device_state,
                "host_bursts_sent": self.host_bursts_sent,
                "device_bursts_sent": self.device_bursts_sent,
                "events": self.events}


def _counter_sum(link: LinkLayer, names: tuple[str, ...]) -> int:
    return sum(getattr(link.counters, n) for n in names)


_CRC_COUNTERS = ("crc16_fail", "crc5_fail", "payload_crc_fail")


class Scenario:
    """Builds both partners on a shared clock and runs the phases."""

    def __init__(self, cfg: ScenarioConfig, trace_path: str | None = None,
                 keep_trace: bool = False,
                 descriptors: DeviceDescriptorSet | None = None):
        cfg.validate()
        self.cfg = cfg
        self.scheduler = Scheduler()
        self.tracer = Tracer(self.scheduler, trace_path, keep_trace)

        seeds = np.random.SeedSequence(cfg.seed).generate_state(4)
        ch_cfg = dict(latency=cfg.latency_ps, bit_error_rate=cfg.ber)
        self.ch_h2d = Channel(self.scheduler,
                              ChannelConfig(rng_seed=int(seeds[0]), **ch_cfg),
                              sink=None, name="h2d")
        self.ch_d2h = Channel(self.scheduler,
                              ChannelConfig(rng_seed=int(seeds[1]), **ch_cfg),
                              sink=None, name="d2h")
        self.host = PartnerModel("host", self.scheduler, self.ch_h2d, cfg,
                                 self.tracer)
        self.device = PartnerModel("device", self.scheduler, self.ch_d2h, cfg,
                                   self.tracer, descriptors)
        self.ch_h2d.sink = self.device.on_line_item
        self.ch_d2h.sink = self.host.on_line_item

        if not cfg.partner_present:
            self.host.phy.remote_termination = False
            self.device.phy.remote_termination = False

        jitter_rng = np.random.Generator(np.random.PCG64(int(seeds[2])))
        span = cfg.start_jitter_ps + 1
        self._start_at = {
            "host": int(jitter_rng.integers(span)),
            "device": int(jitter_rng.integers(span)),
        }
        self.pattern_seed = int(seeds[3])
        self._started = False

    def close(self) -> None:
        self.tracer.close()

    # -- phases

    def _start_partners(self) -> None:
        if self._started:
            return
        self._started = True
        self.scheduler.schedule(self._start_at["host"],
                                self._start_side, self.host, target="scenario")
        self.scheduler.schedule(self._start_at["device"],
                                self._start_side, self.device, target="scenario")

    def _start_side(self, model: PartnerModel) -> None:
        if model.side == "host" and not self.cfg.partner_present:
            return  # unplugged: never drives the line
        model.ltssm.start()

    def both_u0(self) -> bool:
        return self.host.ltssm.in_u0 and self.device.ltssm.in_u0

    def settle(self, duration: int = 20 * US) -> None:
        """Let in-flight acknowledgments drain (e.g. before low power)."""
        self.scheduler.run_until(self.scheduler.now + duration)

    def run_bringup(self) -> BringupReport:
        self._start_partners()
        deadline = self.scheduler.now + self.cfg.bringup_horizon_ps
        stats = self.scheduler.run_until(deadline, stop=self.both_u0)
        success = self.both_u0()
        t_u0 = None
        if success:
            t_u0 = max(self.host.ltssm.time_to_first_u0,
                       self.device.ltssm.time_to_first_u0)
        return BringupReport(
            success=success, time_to_u0_ps=t_u0,
            host_state=self.host.ltssm.state.value,
            device_state=self.device.ltssm.state.value,
            host_bursts_sent=self.host.phy.bursts_sent,
            device_bursts_sent=self.device.phy.bursts_sent,
            events=stats.events_dispatched)

    def run_enumerate(self):
        """Returns (DeviceInfo | None, error | None)."""
        if not self.both_u0():
            return None, "link not in U0"
        result = {}

        def done(info, error):
            result["info"] = info
            result["error"] = error

        self.host.protocol.enumerate(done)
        self.scheduler.run_until(self.scheduler.now + 50 * MS,
                                 stop=lambda: "error" in result)
        if "error" not in result:
            return None, "enumeration did not complete"
        return result["info"], result["error"]

    def _transfer_horizon(self, total: int) -> int:
        # generous cap: a 5 MB/s floor plus slack for recovery excursions
        return self.scheduler.now + max(100 * MS, total * 200_000 + 200 * MS)

    def run_bulk(self, direction: str | None = None, total: int | None = None,
                 burst: int | None = None) -> TransferStats:
        cfg = self.cfg
        direction = direction or cfg.direction
        total = cfg.transfer_bytes if total is None else total
        burst = burst or cfg.burst
        stats = TransferStats()
        if not self.both_u0():
            stats.intact = False
            stats.aborted = "link not in U0"
            return stats
        if total == 0:
            stats.finalize()
            return stats

        pattern = make_pattern(cfg.pattern, total, self.pattern_seed)
        before = self._counters_snapshot()
        done: dict = {}

        def complete(sink):
            done["sink"] = sink

        start = self.scheduler.now
        if direction == "in":
            self.device.protocol.prime_bulk_in(pattern, total, burst,
                                               max_packet=cfg.max_packet)
            sink = self.host.protocol.start_bulk_in(
                pattern, total, burst, complete, retry_budget=cfg.retry_budget,
                max_packet=cfg.max_packet)
            source = self.device.protocol.bulk_in
        else:
            sink = self.device.protocol.prime_bulk_out(
                pattern, total, burst, complete, retry_budget=cfg.retry_budget,
                max_packet=cfg.max_packet)
            source = self.host.protocol.start_bulk_out(
                pattern, total, burst, max_packet=cfg.max_packet)

        self.scheduler.run_until(self._transfer_horizon(total),
                                 stop=lambda: "sink" in done)
        end = self.scheduler.now
        if "sink" not in done:
            stats.intact = False
            stats.aborted = "transfer did not complete before horizon"

        stats.bytes_moved = sink.delivered
        stats.elapsed_ps = end - start
        stats.protocol_retries = source.protocol_retries
        stats.intact = stats.intact and sink.intact
        stats.aborted = stats.aborted or sink.failure
        self._fold_counters(stats, before)
        stats.finalize()
        self.tracer.emit("host", "protocol", "transfer_done",
                         direction=direction, bytes=stats.bytes_moved,
                         elapsed_ps=stats.elapsed_ps,
                         intact=stats.intact)
        return stats

    def run_pmt(self, workload: PmtWorkload,
                burst: int | None = None) -> TransferStats:
        """Sustained offered load into EP1; tracks source queue growth."""
        cfg = self.cfg
        burst = burst or cfg.burst
        stats = TransferStats()
        if not self.both_u0():
            stats.intact = False
            stats.aborted = "link not in U0"
            return stats
        total = workload.total_bytes
        if total == 0:
            stats.extras.update({"offered_mbps": workload.offered_load_mbps,
                                 "max_queue_events": 0,
                                 "final_queue_events": 0,
                                 "events_generated": 0})
            stats.finalize()
            return stats
        pattern = make_pattern(cfg.pattern, total, self.pattern_seed)
        before = self._counters_snapshot()
        done: dict = {}
        state = {"available": 0, "events": 0, "max_queue": 0}

        source = self.device.protocol.prime_bulk_in(pattern, total, burst,
                                                    max_packet=cfg.max_packet)
        source.available_bytes_fn = lambda: state["available"]
        sink = self.host.protocol.start_bulk_in(
            pattern, total, burst, lambda s: done.setdefault("sink", s),
            retry_budget=cfg.retry_budget, max_packet=cfg.max_packet)

        n_events = total // workload.event_bytes

        def arrival():
            state["events"] += 1
            state["available"] += workload.event_bytes
            backlog = (state["available"] - source.sent_bytes) // workload.event_bytes
            if backlog > state["max_queue"]:
                state["max_queue"] = backlog
            source.pump()
            if state["events"] < n_events:
                self.scheduler.schedule(
                    self.scheduler.now + workload.interval_ps, arrival,
                    target="workload")

        start = self.scheduler.now
        self.scheduler.schedule(start, arrival, target="workload")
        self.scheduler.run_until(start + workload.duration_ps + 200 * MS,
                                 stop=lambda: "sink" in done)
        end = self.scheduler.now
        if "sink" not in done:
            stats.intact = False
            stats.aborted = "workload did not drain before horizon"
        stats.bytes_moved = sink.delivered
        stats.elapsed_ps = end - start
        stats.protocol_retries = source.protocol_retries
        stats.intact = stats.intact and sink.intact
        stats.aborted = stats.aborted or sink.failure
        self._fold_counters(stats, before)
        final_backlog = (state["available"] - source.sent_bytes) // workload.event_bytes
        stats.extras.update({
            "offered_mbps": workload.offered_load_mbps,
            "max_queue_events": state["max_queue"],
            "final_queue_events": final_backlog,
            "events_generated": state["events"],
        })
        stats.finalize()
        return stats

    # -- counter bookkeeping

    def _counters_snapshot(self) -> dict:
        out = {}
        for model in (self.host, self.device):
            c = model.link.counters
            out[model.side] = (c.link_retries,
                               _counter_sum(model.link, _CRC_COUNTERS),
                               c.recoveries_requested)
        return out

    def _fold_counters(self, stats: TransferStats, before: dict) -> None:
        for model in (self.host, self.device):
            c = model.link.counters
            b = before[model.side]
            stats.link_retries += c.link_retries - b[0]
            stats.crc_errors += _counter_sum(model.link, _CRC_COUNTERS) - b[1]
            stats.recoveries += c.recoveries_requested - b[2]


def stats_json(payload: dict) -> str:
    """Canonical machine-readable stats rendering (byte-stable per run)."""
    return json.dumps(payload, sort_keys=True, indent=2) + "\n"
