"""Protocol engines for both sides: the device's endpoint management (EP0
control/enumeration, EP1 bulk-in, EP2 bulk-out) and the host's enumeration
manager plus bulk transfer engine.

Transaction packets and data packet headers share one 12-byte field layout
(documented on ProtoFields).  Bulk transfers use a go-back-N style window:
the receiving side grants `burst` packets with an ACK transaction packet
and re-grants on every accepted packet; a corrupted payload triggers an
ACK with the retry flag, which rewinds the sender to the failed sequence
number.  Header loss never reaches this layer because the link layer
retransmits headers (with their payloads) until acknowledged.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field

import numpy as np

from .link_layer import (
    DPP_OVERHEAD, HP_SYMBOLS, LC_SYMBOLS, LinkLayer, PacketType,
)
from .sim_core import MS, SECOND, SYMBOL_TIME, US, Scheduler

DATA_SEQ_MOD = 32
MAX_BURST = 16
EP0, EP_BULK_IN, EP_BULK_OUT = 0, 1, 2
DIR_OUT, DIR_IN = 0, 1

VENDOR_ID = 0x1209
PRODUCT_ID = 0x5357
BCD_DEVICE = 0x0100
DEVICE_ADDRESS = 1

CONTROL_OP_TIMEOUT = 2 * MS
DEFAULT_RETRY_BUDGET = 16


class TpSubtype(enum.IntEnum):
    ACK = 1
    STALL = 2
    STATUS = 3


FLAG_RETRY = 0x01
FLAG_SETUP = 0x01  # data-header flag


_FIELDS = struct.Struct("<BBBBBBH")


@dataclass(frozen=True, slots=True)
class ProtoFields:
    """12-byte header body shared by TPs and DPHs.

    Layout: address, endpoint | dir<<7, code (TP subtype / DPH flags),
    flags (TP retry bit), data sequence, nump, length (LE16), 4 reserved
    zero bytes.
    """

    address: int
    ep: int
    direction: int
    code: int = 0
    flags: int = 0
    seq: int = 0
    nump: int = 0
    length: int = 0

    def pack(self) -> bytes:
        return _FIELDS.pack(self.address, self.ep | (self.direction << 7),
                            self.code, self.flags, self.seq, self.nump,
                            self.length) + b"\x00\x00\x00\x00"

    @staticmethod
    def unpack(raw: bytes) -> "ProtoFields":
        a, epdir, code, flags, seq, nump, length = _FIELDS.unpack(raw[:8])
        return ProtoFields(a, epdir & 0x7F, epdir >> 7, code, flags, seq,
                           nump, length)


# ---------------------------------------------------------------------------
# Standard requests and descriptors
# ---------------------------------------------------------------------------

REQ_GET_DESCRIPTOR = 6
REQ_SET_ADDRESS = 5
REQ_SET_CONFIGURATION = 9

DESC_DEVICE = 1
DESC_CONFIGURATION = 2
DESC_STRING = 3
DESC_INTERFACE = 4
DESC_ENDPOINT = 5
DESC_SS_COMPANION = 0x30


@dataclass(frozen=True, slots=True)
class SetupPacket:
    bm_request_type: int
    b_request: int
    w_value: int
    w_index: int
    w_length: int

    def pack(self) -> bytes:
        return struct.pack("<BBHHH", self.bm_request_type, self.b_request,
                           self.w_value, self.w_index, self.w_length)

    @staticmethod
    def unpack(raw: bytes) -> "SetupPacket":
        return SetupPacket(*struct.unpack("<BBHHH", raw))


def get_descriptor(desc_type: int, index: int, length: int) -> SetupPacket:
    return SetupPacket(0x80, REQ_GET_DESCRIPTOR, (desc_type << 8) | index, 0, length)


def set_address(address: int) -> SetupPacket:
    return SetupPacket(0x00, REQ_SET_ADDRESS, address, 0, 0)


def set_configuration(value: int) -> SetupPacket:
    return SetupPacket(0x00, REQ_SET_CONFIGURATION, value, 0, 0)


class EndpointKind(enum.Enum):
    CONTROL = "control"
    BULK_IN = "bulk-in"
    BULK_OUT = "bulk-out"


@dataclass(frozen=True, slots=True)
class EndpointConfig:
    number: int
    kind: EndpointKind
    max_packet: int = 1024
    burst_depth: int = MAX_BURST

    def __post_init__(self):
        if not 1 <= self.burst_depth <= MAX_BURST:
            raise ValueError("burst_depth must be in 1..16")
        if not 1 <= self.max_packet <= 1024:
            raise ValueError("max_packet must be in 1..1024")


def _string_descriptor(text: str) -> bytes:
    data = text.encode("utf-16-le")
    return bytes([2 + len(data), DESC_STRING]) + data


@dataclass(slots=True)
class DeviceDescriptorSet:
    """The device's byte-exact descriptor tables served over EP0."""

    device: bytes
    configuration: bytes      # configuration + interface + endpoints + companions
    strings: dict[int, bytes]

    @classmethod
    def default(cls, burst: int = MAX_BURST, max_packet: int = 1024) -> "DeviceDescriptorSet":
        device = struct.pack(
            "<BBHBBBBHHHBBBB",
            18, DESC_DEVICE, 0x0300, 0, 0, 0, 9,
            VENDOR_ID, PRODUCT_ID, BCD_DEVICE, 1, 2, 3, 1)
        interface = struct.pack("<BBBBBBBBB", 9, DESC_INTERFACE, 0, 0, 2,
                                0xFF, 0, 0, 0)
        ep_in = struct.pack("<BBBBHB", 7, DESC_ENDPOINT, 0x80 | EP_BULK_IN,
                            0x02, max_packet, 0)
        ep_out = struct.pack("<BBBBHB", 7, DESC_ENDPOINT, EP_BULK_OUT,
                             0x02, max_packet, 0)
        companion = struct.pack("<BBBBH", 6, DESC_SS_COMPANION, burst - 1, 0, 0)
        tail = interface + ep_in + companion + ep_out + companion
        config = struct.pack("<BBHBBBBB", 9, DESC_CONFIGURATION,
                             9 + len(tail), 1, 1, 0, 0x80, 0x32) + tail
        strings = {
            0: bytes([4, DESC_STRING, 0x09, 0x04]),  # en-US language id
            1: _string_descriptor("usb3sim"),
            2: _string_descriptor("SuperSpeed Bulk Function"),
            3: _string_descriptor("0001"),
        }
        return cls(device, config, strings)

    def descriptor(self, desc_type: int, index: int) -> bytes | None:
        if desc_type == DESC_DEVICE and index == 0:
            return self.device
        if desc_type == DESC_CONFIGURATION and index == 0:
            return self.configuration
        if desc_type == DESC_STRING:
            return self.strings.get(index)
        return None

    def validate(self) -> None:
        if len(self.device) != 18 or self.device[1] != DESC_DEVICE:
            raise ValueError("malformed device descriptor")
        total = struct.unpack_from("<H", self.configuration, 2)[0]
        if total != len(self.configuration):
            raise ValueError("configuration wTotalLength disagrees with content")


class EnumerationError(RuntimeError):
    def __init__(self, phase: str, detail: str):
        super().__init__(f"{phase}: {detail}")
        self.phase = phase
        self.detail = detail


def parse_device_descriptor(raw: bytes) -> dict:
    if len(raw) != 18 or raw[0] != 18 or raw[1] != DESC_DEVICE:
        raise EnumerationError("device-parse", f"bad device descriptor ({len(raw)} bytes)")
    (_, _, bcd_usb, dclass, dsub, dproto, mps0, vid, pid, bcd_dev,
     i_man, i_prod, i_ser, num_cfg) = struct.unpack("<BBHBBBBHHHBBBB", raw)
    return {"bcd_usb": bcd_usb, "class": dclass, "subclass": dsub,
            "protocol": dproto, "max_packet0_exp": mps0, "vendor_id": vid,
            "product_id": pid, "bcd_device": bcd_dev, "num_configurations": num_cfg,
            "i_manufacturer": i_man, "i_product": i_prod, "i_serial": i_ser}


def parse_configuration(raw: bytes) -> tuple[dict, list[EndpointConfig]]:
    """Walk the configuration hierarchy; raises on any length inconsistency."""
    phase = "configuration-parse"
    if len(raw) < 9 or raw[1] != DESC_CONFIGURATION:
        raise EnumerationError(phase, "missing configuration descriptor")
    total, n_ifaces, cfg_value = struct.unpack_from("<HBB", raw, 2)
    if total != len(raw):
        raise EnumerationError(phase, f"wTotalLength {total} != {len(raw)} bytes read")
    info = {"configuration_value": cfg_value, "num_interfaces": n_ifaces}
    endpoints: list[EndpointConfig] = []
    pos = 9
    declared_eps = 0
    while pos < len(raw):
        if pos + 2 > len(raw):
            raise EnumerationError(phase, "truncated descriptor header")
        length, dtype = raw[pos], raw[pos + 1]
        if length < 2 or pos + length > len(raw):
            raise EnumerationError(phase, f"descriptor overruns buffer at {pos}")
        body = raw[pos:pos + length]
        if dtype == DESC_INTERFACE:
            declared_eps += body[4]
        elif dtype == DESC_ENDPOINT:
            addr, attr = body[2], body[3]
            mps = struct.unpack_from("<H", body, 4)[0]
            if attr & 0x3 != 0x02:
                raise EnumerationError(phase, f"endpoint {addr:#x} is not bulk")
            comp_pos = pos + length
            if comp_pos + 6 > len(raw) or raw[comp_pos + 1] != DESC_SS_COMPANION:
                raise EnumerationError(phase, f"endpoint {addr:#x} lacks companion")
            burst = raw[comp_pos + 2] + 1
            kind = EndpointKind.BULK_IN if addr & 0x80 else EndpointKind.BULK_OUT
            endpoints.append(EndpointConfig(addr & 0x0F, kind, mps, burst))
            pos = comp_pos + 6
            continue
        pos += length
    if len(endpoints) != declared_eps:
        raise EnumerationError(
            phase, f"interface declares {declared_eps} endpoints, found {len(endpoints)}")
    return info, endpoints


@dataclass(slots=True)
class DeviceInfo:
    address: int
    vendor_id: int
    product_id: int
    bcd_usb: int
    configuration_value: int
    endpoints: list[EndpointConfig]
    bulk_in: EndpointConfig | None
    bulk_out: EndpointConfig | None
    device_descriptor: bytes
    configuration_descriptor: bytes


# ---------------------------------------------------------------------------
# Data patterns
# ---------------------------------------------------------------------------

class CounterPattern:
    """Stream of 32-bit little-endian incrementing words.

    A corrupted delivery pinpoints its own offset, which makes integrity
    failures easy to localize in traces.
    """

    name = "counter"

    def __init__(self, total: int):
        self.total = total
        words = (total + 3) // 4
        self._data = np.arange(words, dtype="<u4").tobytes()[:total]

    def slice(self, offset: int, n: int) -> bytes:
        return self._data[offset:offset + n]


class RandomPattern:
    name = "random"

    def __init__(self, total: int, seed: int = 0):
        self.total = total
        rng = np.random.Generator(np.random.PCG64(seed))
        self._data = rng.integers(0, 256, size=total, dtype=np.uint8).tobytes()

    def slice(self, offset: int, n: int) -> bytes:
        return self._data[offset:offset + n]


def make_pattern(name: str, total: int, seed: int = 0):
    if name == "counter":
        return CounterPattern(total)
    if name == "random":
        return RandomPattern(total, seed)
    raise ValueError(f"unknown pattern: {name}")


# ---------------------------------------------------------------------------
# Transfer accounting
# ---------------------------------------------------------------------------

@dataclass(slots=True)
class TransferStats:
    bytes_moved: int = 0
    elapsed_ps: int = 0
    effective_rate_mbps: float | None = None
    link_retries: int = 0
    protocol_retries: int = 0
    crc_errors: int = 0
    recoveries: int = 0
    intact: bool = True
    aborted: str | None = None
    extras: dict = field(default_factory=dict)

    def finalize(self) -> None:
        if self.bytes_moved > 0 and self.elapsed_ps > 0:
            # decimal MB/s: bytes per picosecond times 1e6
            self.effective_rate_mbps = self.bytes_moved * 1e6 / self.elapsed_ps
        else:
            self.effective_rate_mbps = None

    def as_dict(self) -> dict:
        d = {
            "bytes_moved": self.bytes_moved,
            "elapsed_ps": self.elapsed_ps,
            "effective_rate_mbps": self.effective_rate_mbps,
            "link_retries": self.link_retries,
            "protocol_retries": self.protocol_retries,
            "crc_errors": self.crc_errors,
            "recoveries": self.recoveries,
            "intact": self.intact,
            "aborted": self.aborted,
        }
        d.update(self.extras)
        return d


def ideal_bulk_rate_mbps(max_packet: int = 1024) -> float:
    """Closed-form steady-state rate on an ideal channel.

    Per delivered packet the data lane carries the data packet header, the
    payload frame, and the LGOOD+LCRD pair acknowledging the opposite
    direction's per-packet ACK transaction packet.  One symbol is 2 ns.
    """
    per_packet_symbols = HP_SYMBOLS + (max_packet + DPP_OVERHEAD) + 2 * LC_SYMBOLS
    return max_packet * 1e6 / (per_packet_symbols * SYMBOL_TIME)


@dataclass(frozen=True, slots=True)
class PmtWorkload:
    """Sustained waveform-readout load: fixed-size events at a fixed rate."""

    event_bytes: int = 2000      # 1000 samples x 2 bytes
    event_rate_hz: int = 50_000
    duration_ps: int = 1 * SECOND

    @property
    def offered_load_mbps(self) -> float:
        return self.event_bytes * self.event_rate_hz / 1e6

    @property
    def total_bytes(self) -> int:
        return self.event_bytes * (self.event_rate_hz * self.duration_ps // SECOND)

    @property
    def interval_ps(self) -> int:
        if self.event_rate_hz == 0:
            return self.duration_ps
        return SECOND // self.event_rate_hz


def workload_preset_pmt(event_rate_hz: int = 50_000) -> PmtWorkload:
    return PmtWorkload(event_rate_hz=event_rate_hz)


# ---------------------------------------------------------------------------
# Bulk engines
# ---------------------------------------------------------------------------

class BulkSource:
    """Sender half of a bulk pipe: streams data packets inside the window
    granted by the receiver's ACKs, rewinding on a retry request."""

    def __init__(self, engine: "ProtocolEngine", ep: int, direction: int,
                 pattern, total: int, max_packet: int, burst: int):
        self.engine = engine
        self.ep = ep
        self.direction = direction
        self.pattern = pattern
        self.total = total
        self.max_packet = max_packet
        self.burst = burst
        self.packets_total = (total + max_packet - 1) // max_packet
        self.next_idx = 0
        self.window_base = 0
        self.window_grant = 0
        self.protocol_retries = 0
        self.available_bytes_fn = None   # None means the whole pattern is ready

    def start(self, implicit_window: bool) -> None:
        if implicit_window:
            self.window_grant = self.burst
        self.pump()

    def _abs_index(self, seq5: int) -> int:
        # reconstruct an absolute packet index from a mod-32 sequence near
        # the current window (window <= 16 keeps this unambiguous)
        delta = (seq5 - (self.window_base % DATA_SEQ_MOD)) % DATA_SEQ_MOD
        if delta <= MAX_BURST:
            return self.window_base + delta
        return max(0, self.window_base + delta - DATA_SEQ_MOD)

    def on_ack(self, f: ProtoFields) -> None:
        target = self._abs_index(f.seq)
        if f.flags & FLAG_RETRY:
            self.protocol_retries += 1
            self.next_idx = target
            self.window_base = target
        else:
            self.window_base = max(self.window_base, target)
        self.window_grant = max(self.window_grant, 1) if f.nump == 0 else f.nump
        self.pump()

    def _available_packets(self) -> int:
        if self.available_bytes_fn is None:
            return self.packets_total
        avail = self.available_bytes_fn()
        if avail >= self.total:
            return self.packets_total
        return avail // self.max_packet

    def pump(self) -> None:
        limit = min(self.packets_total,
                    self.window_base + self.window_grant,
                    self._available_packets())
        while self.next_idx < limit:
            idx = self.next_idx
            self.next_idx += 1
            off = idx * self.max_packet
            chunk = self.pattern.slice(off, min(self.max_packet, self.total - off))
            self.engine.send_dp(self.ep, self.direction, idx % DATA_SEQ_MOD,
                                chunk, nump=self.burst)

    @property
    def sent_bytes(self) -> int:
        full = self.next_idx * self.max_packet
        return min(full, self.total)


class BulkSink:
    """Receiver half: verifies in-order delivery against the source pattern,
    grants window with rolling ACKs, asks for a rewind on corruption.

    The grant collapses to one packet on a retry and doubles back up to
    `burst` on each in-order acceptance: rewinds discard the whole in-flight
    window, so re-opening it eagerly multiplies traffic on a bad channel
    while an ideal channel never shrinks the grant at all.
    """

    def __init__(self, engine: "ProtocolEngine", ep: int, grant_direction: int,
                 pattern, total: int, max_packet: int, burst: int,
                 retry_budget: int, on_complete):
        self.engine = engine
        self.ep = ep
        self.grant_direction = grant_direction  # direction field in our ACKs
        self.pattern = pattern
        self.total = total
        self.max_packet = max_packet
        self.burst = burst
        self.retry_budget = retry_budget
        self.on_complete = on_complete
        self.packets_total = (total + max_packet - 1) // max_packet
        self.expected_idx = 0
        self.delivered = 0
        self.mismatched_bytes = 0
        self.protocol_retry_requests = 0
        self._grant = burst
        self._retry_round_idx = -1
        self._retry_rounds = 0
        self._awaiting_retry_for = -1
        self.done = False
        self.failure: str | None = None

    def start(self) -> None:
        """Initial window grant (the transfer initiation for IN pipes)."""
        if self.packets_total == 0:
            self._finish(None)
            return
        self._send_ack(retry=False)

    def _send_ack(self, retry: bool) -> None:
        if retry:
            self._grant = 1
        self.engine.send_tp(self.ep, self.grant_direction, TpSubtype.ACK,
                            seq=self.expected_idx % DATA_SEQ_MOD,
                            nump=self._grant, retry=retry)

    def on_data(self, f: ProtoFields, payload: bytes | None, ok: bool) -> None:
        if self.done:
            return
        delta = (f.seq - (self.expected_idx % DATA_SEQ_MOD)) % DATA_SEQ_MOD
        if ok and delta == 0:
            off = self.expected_idx * self.max_packet
            want = self.pattern.slice(off, min(self.max_packet, self.total - off))
            if payload != want:
                self.mismatched_bytes += sum(
                    1 for a, b in zip(payload, want) if a != b) or 1
            self.delivered += len(payload)
            self.expected_idx += 1
            self._retry_rounds = 0
            self._awaiting_retry_for = -1
            self._grant = min(self.burst, self._grant * 2)
            if self.expected_idx >= self.packets_total:
                self.done = True
                self._send_ack(retry=False)  # final window close
                self._finish(None)
            else:
                self._send_ack(retry=False)
            return
        if delta == 0:
            # the expected packet arrived but its payload was bad
            self._request_retry()
        elif 1 <= delta <= MAX_BURST:
            # a later packet: the expected one was lost in flight
            if self._awaiting_retry_for != self.expected_idx:
                self._request_retry()
        # packets behind the expectation are stale duplicates: drop silently

    def _request_retry(self) -> None:
        self.protocol_retry_requests += 1
        if self._retry_round_idx == self.expected_idx:
            self._retry_rounds += 1
        else:
            self._retry_round_idx = self.expected_idx
            self._retry_rounds = 1
        if self._retry_rounds > self.retry_budget:
            self.done = True
            self._finish(f"retry budget exhausted at packet {self.expected_idx}")
            return
        self._awaiting_retry_for = self.expected_idx
        self._send_ack(retry=True)

    def _finish(self, failure: str | None) -> None:
        self.done = True
        self.failure = failure
        if self.on_complete is not None:
            self.on_complete(self)

    @property
    def intact(self) -> bool:
        return (self.failure is None and self.mismatched_bytes == 0
                and self.delivered == self.total)


# ---------------------------------------------------------------------------
# Engines
# ---------------------------------------------------------------------------

class ProtocolEngine:
    """Shared plumbing: routes link deliveries, builds TPs and DPs."""

    def __init__(self, side: str, scheduler: Scheduler, link: LinkLayer, tracer):
        self.side = side
        self.scheduler = scheduler
        self.link = link
        self.tracer = tracer
        link.deliver = self._deliver
        self.peer_address = 0   # address field stamped on outgoing packets

    # -- send helpers

    def send_tp(self, ep: int, direction: int, subtype: TpSubtype, *,
                seq: int = 0, nump: int = 0, retry: bool = False,
                address: int | None = None) -> None:
        f = ProtoFields(self.peer_address if address is None else address,
                        ep, direction, int(subtype),
                        FLAG_RETRY if retry else 0, seq, nump, 0)
        self.link.tx_header(PacketType.TRANSACTION, f.pack())
        tr = self.tracer
        if tr.enabled:
            tr.emit(self.side, "protocol", "tx_tp", ep=ep,
                    subtype=TpSubtype(subtype).name, seq=seq, retry=int(retry))

    def send_dp(self, ep: int, direction: int, seq: int, payload: bytes, *,
                nump: int = 0, setup: bool = False,
                address: int | None = None) -> None:
        f = ProtoFields(self.peer_address if address is None else address,
                        ep, direction, FLAG_SETUP if setup else 0, 0, seq,
                        nump, len(payload))
        self.link.tx_data(f.pack(), payload)
        tr = self.tracer
        if tr.enabled:
            tr.emit(self.side, "protocol", "tx_dp", ep=ep, seq=seq,
                    length=len(payload), setup=int(setup))

    # -- receive routing

    def _deliver(self, pkt, payload, ok: bool) -> None:
        f = ProtoFields.unpack(pkt.type_fields)
        if pkt.packet_type == PacketType.TRANSACTION:
            self.on_tp(f)
        elif pkt.packet_type == PacketType.DATA_HEADER:
            self.on_dp(f, payload, ok)
        else:
            self.on_lmp(f)

    def on_tp(self, f: ProtoFields) -> None:
        raise NotImplementedError

    def on_dp(self, f: ProtoFields, payload, ok: bool) -> None:
        raise NotImplementedError

    def on_lmp(self, f: ProtoFields) -> None:
        self.tracer.emit(self.side, "protocol", "rx_lmp", ep=f.ep)


class DeviceState(enum.Enum):
    DEFAULT = "default"
    ADDRESSED = "addressed"
    CONFIGURED = "configured"


class DeviceProtocol(ProtocolEngine):
    """Endpoint management: EP0 standard requests, EP1/EP2 bulk."""

    def __init__(self, scheduler: Scheduler, link: LinkLayer, tracer,
                 descriptors: DeviceDescriptorSet | None = None):
        super().__init__("device", scheduler, link, tracer)
        self.descriptors = descriptors or DeviceDescriptorSet.default()
        self.state = DeviceState.DEFAULT
        self.address = 0
        self._setup: SetupPacket | None = None
        self._pending_in: bytes | None = None
        self._pending_action: tuple | None = None
        self._stalled = False
        self.bulk_in: BulkSource | None = None
        self.bulk_out: BulkSink | None = None
        self.requests_seen: list[str] = []

    # -- priming (the device-side firmware configuration)

    def prime_bulk_in(self, pattern, total: int, burst: int,
                      max_packet: int = 1024) -> BulkSource:
        self.bulk_in = BulkSource(self, EP_BULK_IN, DIR_IN, pattern, total,
                                  max_packet, burst)
        self.bulk_in.start(implicit_window=False)  # waits for the host grant
        return self.bulk_in

    def prime_bulk_out(self, pattern, total: int, burst: int, on_complete,
                       retry_budget: int = DEFAULT_RETRY_BUDGET,
                       max_packet: int = 1024) -> BulkSink:
        self.bulk_out = BulkSink(self, EP_BULK_OUT, DIR_OUT, pattern, total,
                                 max_packet, burst, retry_budget, on_complete)
        return self.bulk_out

    # -- routing

    def _addressed_to_us(self, f: ProtoFields) -> bool:
        return f.address == self.address

    def on_tp(self, f: ProtoFields) -> None:
        if not self._addressed_to_us(f):
            return
        if f.ep == EP0:
            self._control_tp(f)
        elif f.ep == EP_BULK_IN and f.code == TpSubtype.ACK and self.bulk_in:
            if self.state is DeviceState.CONFIGURED:
                self.bulk_in.on_ack(f)

    def on_dp(self, f: ProtoFields, payload, ok: bool) -> None:
        if not self._addressed_to_us(f):
            return
        if f.ep == EP0 and f.code & FLAG_SETUP:
            if ok:
                self._handle_setup(SetupPacket.unpack(payload))
            else:
                # ask the host to resend the setup payload
                self.send_tp(EP0, DIR_OUT, TpSubtype.ACK, retry=True,
                             address=f.address)
        elif f.ep == EP_BULK_OUT and self.bulk_out is not None:
            if self.state is DeviceState.CONFIGURED:
                self.bulk_out.on_data(f, payload, ok)

    # -- EP0 control

    def _handle_setup(self, setup: SetupPacket) -> None:
        self._setup = setup
        self._pending_in = None
        self._pending_action = None
        self._stalled = False
        req = setup.b_request
        self.requests_seen.append(f"req{req}")
        self.tracer.emit("device", "protocol", "setup", request=req,
                         value=setup.w_value, length=setup.w_length)
        if req == REQ_GET_DESCRIPTOR:
            data = self.descriptors.descriptor(setup.w_value >> 8,
                                               setup.w_value & 0xFF)
            if data is None:
                self._stalled = True
            else:
                self._pending_in = data[:setup.w_length]
        elif req == REQ_SET_ADDRESS:
            self._pending_action = ("address", setup.w_value & 0x7F)
        elif req == REQ_SET_CONFIGURATION:
            # configuration changes need an address first
            if self.state is DeviceState.DEFAULT or setup.w_value not in (0, 1):
                self._stalled = True
            else:
                self._pending_action = ("configure", setup.w_value)
        else:
            self._stalled = True

    def _control_tp(self, f: ProtoFields) -> None:
        sub = f.code
        if sub == TpSubtype.ACK:
            if self._stalled:
                self.send_tp(EP0, DIR_IN, TpSubtype.STALL, address=f.address)
            elif self._pending_in is not None:
                self.send_dp(EP0, DIR_IN, 0, self._pending_in,
                             address=f.address)
        elif sub == TpSubtype.STATUS:
            if self._stalled:
                self.send_tp(EP0, DIR_IN, TpSubtype.STALL, address=f.address)
                return
            self.send_tp(EP0, DIR_IN, TpSubtype.ACK, address=f.address)
            if self._pending_action is not None:
                kind, value = self._pending_action
                self._pending_action = None
                if kind == "address":
                    self.address = value
                    if self.state is DeviceState.DEFAULT:
                        self.state = DeviceState.ADDRESSED
                elif kind == "configure":
                    self.state = (DeviceState.CONFIGURED if value == 1
                                  else DeviceState.ADDRESSED)
            self._pending_in = None


class HostProtocol(ProtocolEngine):
    """Enumeration manager and bulk transfer engine."""

    def __init__(self, scheduler: Scheduler, link: LinkLayer, tracer):
        super().__init__("host", scheduler, link, tracer)
        self._op = None          # outstanding control operation
        self._op_timer = None
        self.device_info: DeviceInfo | None = None
        self.bulk_in: BulkSink | None = None
        self.bulk_out: BulkSource | None = None

    # -- control transfers

    def control(self, setup: SetupPacket, on_done) -> None:
        """Run one control transfer; on_done(data | None, error | None)."""
        if self._op is not None:
            raise RuntimeError("one control operation at a time")
        self._op = {"setup": setup, "phase": "data" if setup.w_length else "status",
                    "data": None, "on_done": on_done}
        self._op_timer = self.scheduler.schedule(
            self.scheduler.now + CONTROL_OP_TIMEOUT, self._op_timeout,
            target="host.protocol")
        self.send_dp(EP0, DIR_OUT, 0, setup.pack(), setup=True)
        if setup.w_length:
            self.send_tp(EP0, DIR_IN, TpSubtype.ACK, nump=1)
        else:
            self.send_tp(EP0, DIR_OUT, TpSubtype.STATUS)

    def _op_timeout(self) -> None:
        self._finish_op(None, "control timeout")

    def _finish_op(self, data, error) -> None:
        op = self._op
        if op is None:
            return
        self._op = None
        if self._op_timer is not None:
            self._op_timer.cancel()
            self._op_timer = None
        op["on_done"](data, error)

    def on_tp(self, f: ProtoFields) -> None:
        op = self._op
        if f.ep == EP0 and op is not None:
            if f.code == TpSubtype.STALL:
                self._finish_op(None, f"stall on request {op['setup'].b_request}")
            elif f.code == TpSubtype.ACK:
                if f.flags & FLAG_RETRY:
                    # device missed the setup payload
                    self.send_dp(EP0, DIR_OUT, 0, op["setup"].pack(), setup=True)
                    if op["phase"] == "data":
                        self.send_tp(EP0, DIR_IN, TpSubtype.ACK, nump=1)
                    else:
                        self.send_tp(EP0, DIR_OUT, TpSubtype.STATUS)
                elif op["phase"] == "status":
                    self._finish_op(op["data"], None)
            return
        if f.ep == EP_BULK_OUT and f.code == TpSubtype.ACK and self.bulk_out:
            self.bulk_out.on_ack(f)

    def on_dp(self, f: ProtoFields, payload, ok: bool) -> None:
        op = self._op
        if f.ep == EP0 and op is not None and op["phase"] == "data":
            if ok:
                op["data"] = payload
                op["phase"] = "status"
                self.send_tp(EP0, DIR_OUT, TpSubtype.STATUS)
            else:
                self.send_tp(EP0, DIR_IN, TpSubtype.ACK, retry=True, nump=1)
            return
        if f.ep == EP_BULK_IN and self.bulk_in is not None:
            self.bulk_in.on_data(f, payload, ok)

    # -- enumeration

    def enumerate(self, on_done) -> None:
        """GET_DESCRIPTOR(device), SET_ADDRESS, GET_DESCRIPTOR(configuration,
        header then full), SET_CONFIGURATION; on_done(DeviceInfo?, error?)."""
        ctx: dict = {}

        def fail(error: str) -> None:
            self.tracer.emit("host", "protocol", "enumeration_failed", error=error)
            on_done(None, error)

        def step_device(data, error):
            if error:
                return fail(f"get-device-descriptor: {error}")
            try:
                ctx["device"] = parse_device_descriptor(data)
            except EnumerationError as exc:
                return fail(str(exc))
            ctx["device_raw"] = data
            self.control(set_address(DEVICE_ADDRESS), step_address)

        def step_address(_data, error):
            if error:
                return fail(f"set-address: {error}")
            self.peer_address = DEVICE_ADDRESS
            self.control(get_descriptor(DESC_CONFIGURATION, 0, 9), step_cfg_header)

        def step_cfg_header(data, error):
            if error:
                return fail(f"get-configuration-header: {error}")
            if data is None or len(data) < 9:
                return fail("get-configuration-header: short response")
            total = struct.unpack_from("<H", data, 2)[0]
            self.control(get_descriptor(DESC_CONFIGURATION, 0, total), step_cfg_full)

        def step_cfg_full(data, error):
            if error:
                return fail(f"get-configuration: {error}")
            try:
                ctx["config"], ctx["endpoints"] = parse_configuration(data)
            except EnumerationError as exc:
                return fail(str(exc))
            ctx["config_raw"] = data
            self.control(set_configuration(ctx["config"]["configuration_value"]),
                         step_configured)

        def step_configured(_data, error):
            if error:
                return fail(f"set-configuration: {error}")
            eps = ctx["endpoints"]
            info = DeviceInfo(
                address=DEVICE_ADDRESS,
                vendor_id=ctx["device"]["vendor_id"],
                product_id=ctx["device"]["product_id"],
                bcd_usb=ctx["device"]["bcd_usb"],
                configuration_value=ctx["config"]["configuration_value"],
                endpoints=eps,
                bulk_in=next((e for e in eps if e.kind is EndpointKind.BULK_IN), None),
                bulk_out=next((e for e in eps if e.kind is EndpointKind.BULK_OUT), None),
                device_descriptor=ctx["device_raw"],
                configuration_descriptor=ctx["config_raw"])
            self.device_info = info
            self.tracer.emit("host", "protocol", "enumerated",
                             vid=info.vendor_id, pid=info.product_id)
            on_done(info, None)

        self.control(get_descriptor(DESC_DEVICE, 0, 18), step_device)

    # -- bulk transfers

    def start_bulk_in(self, pattern, total: int, burst: int, on_complete,
                      retry_budget: int = DEFAULT_RETRY_BUDGET,
                      max_packet: int = 1024) -> BulkSink:
        self.bulk_in = BulkSink(self, EP_BULK_IN, DIR_IN, pattern, total,
                                max_packet, burst, retry_budget, on_complete)
        self.bulk_in.start()
        return self.bulk_in

    def start_bulk_out(self, pattern, total: int, burst: int,
                       max_packet: int = 1024) -> BulkSource:
        self.bulk_out = BulkSource(self, EP_BULK_OUT, DIR_OUT, pattern, total,
                                   max_packet, burst)
        self.bulk_out.start(implicit_window=True)
        return self.bulk_out
