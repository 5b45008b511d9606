"""PHY behavior built on a bare gigabit transceiver: LFPS signaling,
receiver detection with the phystatus handshake, electrical idle, and the
symbol path used while training.

LFPS bursts are square waves well below the line rate, so they travel as
timed line-occupancy markers rather than symbols; the receive side
classifies a burst from its measured duration (and, once two bursts have
been seen, the repeat interval) against the transmitter timing table.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace

import numpy as np

from . import line_coding as lc
from .sim_core import (
    MS, NS, US, SYMBOL_TIME, WORD_TIME, Channel, Scheduler, SymbolBlock,
)


class LfpsKind(enum.Enum):
    POLLING = "Polling"
    PING = "Ping"
    RESET = "Reset"
    U1_EXIT = "U1Exit"
    U2_EXIT = "U2Exit"
    U1_WAKEUP = "U1Wakeup"


class PhyError(RuntimeError):
    pass


@dataclass(frozen=True, slots=True)
class LfpsTiming:
    """Burst/repeat windows for one LFPS kind (picoseconds)."""

    kind: LfpsKind
    t_burst_min: int
    t_burst_max: int
    t_burst_normal: int | None = None
    min_cycles: int | None = None
    t_repeat_min: int | None = None
    t_repeat_normal: int | None = None
    t_repeat_max: int | None = None

    def __post_init__(self):
        lo, hi = self.t_burst_min, self.t_burst_max
        if self.t_burst_normal is not None and not lo <= self.t_burst_normal <= hi:
            raise ValueError(f"{self.kind}: burst normal outside [min, max]")
        if lo > hi:
            raise ValueError(f"{self.kind}: burst min > max")
        if self.t_repeat_min is not None:
            if self.t_repeat_normal is not None and not (
                    self.t_repeat_min <= self.t_repeat_normal <= self.t_repeat_max):
                raise ValueError(f"{self.kind}: repeat normal outside [min, max]")

    def burst_in_window(self, duration: int) -> bool:
        return self.t_burst_min <= duration <= self.t_burst_max

    def repeat_in_window(self, interval: int) -> bool:
        if self.t_repeat_min is None:
            return True
        return self.t_repeat_min <= interval <= self.t_repeat_max


def standard_lfps_table(scale_divisor: int = 1) -> dict[LfpsKind, LfpsTiming]:
    """SuperSpeed transmitter timing windows.

    `scale_divisor` shrinks the millisecond-range rows (Ping repeat, warm
    reset burst) so desk scenarios stay short; microsecond-range rows keep
    their real values so their windows remain self-consistent.  Conformance
    checks use divisor 1.
    """
    if scale_divisor < 1:
        raise ValueError("scale_divisor must be >= 1")
    d = scale_divisor
    return {
        LfpsKind.POLLING: LfpsTiming(
            LfpsKind.POLLING,
            t_burst_min=int(0.6 * US), t_burst_normal=1 * US, t_burst_max=int(1.4 * US),
            t_repeat_min=6 * US, t_repeat_normal=10 * US, t_repeat_max=14 * US),
        LfpsKind.PING: LfpsTiming(
            LfpsKind.PING,
            t_burst_min=40 * NS, t_burst_max=200 * NS, min_cycles=2,
            t_repeat_min=160 * MS // d, t_repeat_normal=200 * MS // d,
            t_repeat_max=240 * MS // d),
        LfpsKind.RESET: LfpsTiming(
            LfpsKind.RESET,
            t_burst_min=80 * MS // d, t_burst_normal=100 * MS // d,
            t_burst_max=120 * MS // d),
        LfpsKind.U1_EXIT: LfpsTiming(
            LfpsKind.U1_EXIT, t_burst_min=600 * NS, t_burst_max=2 * MS),
        LfpsKind.U2_EXIT: LfpsTiming(
            LfpsKind.U2_EXIT, t_burst_min=80 * US, t_burst_max=2 * MS),
        LfpsKind.U1_WAKEUP: LfpsTiming(
            LfpsKind.U1_WAKEUP, t_burst_min=80 * US, t_burst_max=10 * MS),
    }


LFPS_PERIOD = 32 * NS          # two all-ones words + two all-zeros words
LFPS_PERIOD_MIN = 20 * NS
LFPS_PERIOD_MAX = 100 * NS

# Cycles emitted per burst; durations land inside each kind's window for any
# scale divisor (only ms-range rows scale).
_BURST_CYCLES = {
    LfpsKind.POLLING: 32,      # 1.024 us
    LfpsKind.PING: 2,          # 64 ns
    LfpsKind.U1_EXIT: 32,      # 1.024 us
    LfpsKind.U2_EXIT: 4096,    # 131.072 us
    LfpsKind.U1_WAKEUP: 4096,  # 131.072 us
}


@dataclass(frozen=True, slots=True)
class LfpsBurst:
    """One emitted burst: square-wave period, cycle count, repeat spacing."""

    t_period: int
    n_cycles: int
    start: int
    t_repeat: int | None = None

    def __post_init__(self):
        if not LFPS_PERIOD_MIN <= self.t_period <= LFPS_PERIOD_MAX:
            raise ValueError(f"t_period {self.t_period} ps outside [20 ns, 100 ns]")

    @property
    def duration(self) -> int:
        return self.n_cycles * self.t_period


def burst_plan(kind: LfpsKind, table: dict[LfpsKind, LfpsTiming], start: int) -> LfpsBurst:
    """Concrete burst parameters for one kind out of the timing table."""
    timing = table[kind]
    if kind is LfpsKind.RESET:
        cycles = timing.t_burst_normal // LFPS_PERIOD
    else:
        cycles = _BURST_CYCLES[kind]
    return LfpsBurst(t_period=LFPS_PERIOD, n_cycles=cycles, start=start,
                     t_repeat=timing.t_repeat_normal)


def lfps_classify(duration: int, repeat: int | None,
                  context: tuple[LfpsKind, ...],
                  table: dict[LfpsKind, LfpsTiming]) -> LfpsKind | None:
    """Match a measured burst against the timing windows.

    Kinds expected in the current LTSSM context are tried first, in order;
    that disambiguates overlapping windows (a 1 us burst fits both Polling
    and U1 Exit).  Returns None when nothing matches.
    """
    def fits(kind: LfpsKind) -> bool:
        t = table[kind]
        if not t.burst_in_window(duration):
            return False
        if repeat is not None and not t.repeat_in_window(repeat):
            return False
        return True

    for kind in context:
        if fits(kind):
            return kind
    hits = [k for k in table if fits(k)]
    if len(hits) == 1:
        return hits[0]
    return None


# ---------------------------------------------------------------------------
# PIPE-style signal state and the 40-bit word path
# ---------------------------------------------------------------------------

@dataclass(slots=True)
class PipeSignals:
    txdetectrx: int = 0
    txelecidle: int = 1
    txpd: int = 0
    rxpd: int = 0
    rxelecidle: int = 1
    phystatus: int = 0


@dataclass(frozen=True, slots=True)
class PhyWord:
    """One 40-bit transceiver word: four symbols, 8 ns of line time."""

    bits: int
    bypass_8b10b: bool = False

    def __post_init__(self):
        if not 0 <= self.bits < (1 << 40):
            raise ValueError("PhyWord is 40 bits")


ALL_ONES_WORD = PhyWord((1 << 40) - 1, bypass_8b10b=True)
ALL_ZEROS_WORD = PhyWord(0, bypass_8b10b=True)


def pack_lfps_words(n_cycles: int) -> list[PhyWord]:
    """Word stream for `n_cycles` LFPS cycles with 8b10b bypassed.

    One 40-bit word covers 8 ns, under half the 32 ns square-wave period, so
    the high level spans two all-ones words and the low level two all-zeros
    words: 4 words per cycle.
    """
    cycle = [ALL_ONES_WORD, ALL_ONES_WORD, ALL_ZEROS_WORD, ALL_ZEROS_WORD]
    return cycle * n_cycles


def lfps_generation_allowed(pipe: PipeSignals) -> bool:
    """Transmitter signal states that permit LFPS.

    Link initiation drives LFPS from powered lanes with txdetectrx and
    txelecidle asserted; waking a partner drives it from powered-down lanes
    (txpd = rxpd = 1) with txelecidle low.
    """
    init_ok = (pipe.txpd == 0 and pipe.rxpd == 0
               and pipe.txdetectrx == 1 and pipe.txelecidle == 1)
    wake_ok = pipe.txpd == 1 and pipe.rxpd == 1 and pipe.txelecidle == 0
    return init_ok or wake_ok


RECEIVER_DETECT_DELAY = 1 * US
PHYSTATUS_PULSE = WORD_TIME  # one control interval


class Phy:
    """Per-side PHY: LFPS transmit/receive, receiver detect, symbol path.

    Callbacks (wired by the owner after construction):
      on_phystatus(present: bool)
      on_lfps(kind_or_none, burst_duration, repeat_or_none)
      on_lfps_tx_done(kind)            -- single-shot kinds (warm reset)
      on_set_block(kind)               -- one clean ordered set received
      on_set_detection(kind)           -- n_consecutive clean sets received
    """

    def __init__(self, side: str, scheduler: Scheduler, tx: Channel,
                 table: dict[LfpsKind, LfpsTiming], tracer,
                 detect_delay: int = RECEIVER_DETECT_DELAY):
        self.side = side
        self.scheduler = scheduler
        self.tx = tx
        self.table = table
        self.tracer = tracer
        self.detect_delay = detect_delay
        self.pipe = PipeSignals()
        self.remote_termination = True
        self.data_mode = False

        self.on_phystatus = None
        self.on_lfps = None
        self.on_lfps_tx_done = None
        self.on_set_block = None
        self.on_set_detection = None

        self._lfps_kind: LfpsKind | None = None
        self._lfps_timer = None
        self._burst_in_progress = False
        self.bursts_sent = 0
        self.bursts_seen = 0
        self.symbol_decode_errors = 0

        # receive-side burst measurement
        self._rx_burst_start: int | None = None
        self._rx_prev_start: int | None = None

        # symbol path state
        self._tx_rd = lc.RD_MINUS
        self._rx_rd = lc.RD_MINUS
        self._scanner = lc.OrderedSetScanner()

    # -- LFPS transmit ------------------------------------------------------

    def start_lfps(self, kind: LfpsKind) -> None:
        if not lfps_generation_allowed(self.pipe):
            raise PhyError("LFPS not permitted in this signal state")
        self.stop_lfps()
        self._lfps_kind = kind
        self._emit_burst()

    def stop_lfps(self) -> None:
        if self._lfps_timer is not None:
            self._lfps_timer.cancel()
            self._lfps_timer = None
        self._lfps_kind = None

    def _emit_burst(self) -> None:
        kind = self._lfps_kind
        if kind is None:
            return
        now = self.scheduler.now
        burst = burst_plan(kind, self.table, now)
        start, end = self.tx.send_activity(burst.duration, (kind, burst))
        burst = replace(burst, start=start)
        self._burst_in_progress = True
        self.bursts_sent += 1
        self.scheduler.schedule(end, self._burst_done, kind, target=f"{self.side}.phy")
        self.tracer.emit(self.side, "phy", "lfps_burst",
                         lfps=kind.value, start=start, duration=burst.duration,
                         period=burst.t_period, cycles=burst.n_cycles)
        if burst.t_repeat is not None:
            self._lfps_timer = self.scheduler.schedule(
                start + burst.t_repeat, self._emit_burst, target=f"{self.side}.phy")
        else:
            self._lfps_timer = None

    def _burst_done(self, kind: LfpsKind) -> None:
        self._burst_in_progress = False
        if self._lfps_timer is None and self._lfps_kind is kind:
            # single-shot kinds finish here
            self._lfps_kind = None
            if self.on_lfps_tx_done is not None:
                self.on_lfps_tx_done(kind)

    @property
    def transmitting(self) -> bool:
        return self._burst_in_progress or self.data_mode

    # -- LFPS receive ---------------------------------------------------------

    def line_activity_start(self, detail) -> None:
        self.pipe.rxelecidle = 0
        now = self.scheduler.now
        # A long quiet gap invalidates the repeat measurement.
        if self._rx_prev_start is not None and now - self._rx_prev_start > 4 * (
                self.table[LfpsKind.POLLING].t_repeat_max):
            self._rx_prev_start = None
        self._rx_burst_start = now

    def line_activity_end(self, detail, context: tuple[LfpsKind, ...]) -> None:
        self.pipe.rxelecidle = 1
        if self._rx_burst_start is None:
            return
        now = self.scheduler.now
        duration = now - self._rx_burst_start
        repeat = None
        if self._rx_prev_start is not None:
            repeat = self._rx_burst_start - self._rx_prev_start
        self._rx_prev_start = self._rx_burst_start
        self._rx_burst_start = None
        self.bursts_seen += 1
        kind = lfps_classify(duration, repeat, context, self.table)
        self.tracer.emit(self.side, "phy", "lfps_rx",
                         lfps=kind.value if kind else "unrecognized",
                         duration=duration, repeat=repeat if repeat is not None else -1)
        if self.on_lfps is not None:
            self.on_lfps(kind, duration, repeat)

    # -- receiver detection ---------------------------------------------------

    def receiver_detect(self) -> None:
        """Kick off a detect; phystatus pulses when the result is ready."""
        if self.transmitting:
            raise PhyError("detect during active transmit")
        if self.pipe.phystatus:
            raise PhyError("detect while phystatus handshake pending")
        self.pipe.txdetectrx = 1
        self.pipe.txelecidle = 1
        self.scheduler.schedule(self.scheduler.now + self.detect_delay,
                                self._detect_complete, target=f"{self.side}.phy")

    def _detect_complete(self) -> None:
        present = self.remote_termination
        self.pipe.phystatus = 1
        self.scheduler.schedule(self.scheduler.now + PHYSTATUS_PULSE,
                                self._phystatus_low, target=f"{self.side}.phy")
        self.tracer.emit(self.side, "phy", "receiver_detect",
                         present=present)
        if self.on_phystatus is not None:
            self.on_phystatus(present)

    def _phystatus_low(self) -> None:
        self.pipe.phystatus = 0

    # -- symbol path ------------------------------------------------------------

    def set_data_mode(self, on: bool) -> None:
        """Turn the transceiver data path on/off; resets codec state."""
        self.data_mode = on
        self.pipe.txelecidle = 0 if on else 1
        if on:
            self.pipe.txdetectrx = 0
            self._tx_rd = lc.RD_MINUS
            self._rx_rd = lc.RD_MINUS
            self._scanner = lc.OrderedSetScanner()
            self._rx_prev_start = None

    def send_ordered_set(self, kind: str, count: int = 1) -> int:
        """Encode and transmit `count` back-to-back set blocks; returns tx end."""
        if not self.data_mode:
            raise PhyError("ordered set transmit with transceivers off")
        end = self.scheduler.now
        for _ in range(count):
            symbols, self._tx_rd = lc.ordered_set_make(kind, self._tx_rd)
            end = self.tx.send(SymbolBlock(symbols, label=kind))
        return end

    def receive_symbols(self, block: SymbolBlock) -> None:
        decoded, self._rx_rd = lc.decode_stream(block.symbols, self._rx_rd,
                                                resync_on_comma=True)
        self.symbol_decode_errors += sum(1 for d in decoded if not d.ok)
        blocks, detections = self._scanner.feed(decoded)
        for kind, _pos in blocks:
            if self.on_set_block is not None:
                self.on_set_block(kind)
        for det in detections:
            self.tracer.emit(self.side, "phy", "set_detected", set=det.kind)
            if self.on_set_detection is not None:
                self.on_set_detection(det.kind)
