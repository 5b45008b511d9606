"""Header-packet exchange with sequence numbers, LGOOD/LCRD flow control,
LBAD/LRTY error signaling and retransmission.

Wire framing and the corruption model
-------------------------------------
In U0 the lane carries frames rather than raw symbols: a frame knows its
exact symbol count (so serialization time is exact) and how channel bit
flips land on its fields.  A flip inside a framing marker destroys the
frame boundary and the receiver sees an unrecognizable garble; flips
anywhere else corrupt the protected bytes so the CRC checks genuinely
fail.  `wire_image` produces the real scrambled/encoded symbol stream for
any frame, and the tests pin frame.n_symbols to its length, which keeps
the fast path's timing honest against the codec.

Reliability is layered: LBAD/LRTY handle detected header corruption, a
pending-ack timer resends the retry buffer when acknowledgments go
missing, and a credit-starvation timer escalates to LTSSM Recovery (which
resets credit state on U0 re-entry) when LCRDs are lost.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from collections import deque

from . import line_coding as lc
from .sim_core import US, Channel, Scheduler

SEQ_MOD = 8
DEFAULT_CREDITS = 4
HEADER_BODY_LEN = 12
MAX_PAYLOAD = 1024

# Frame geometry (symbols).  Markers are distinct K-symbol quadruplets.
HP_FRAMING = 4
HP_SYMBOLS = HP_FRAMING + HEADER_BODY_LEN + 2 + 2   # body + crc16 + lcw
DPP_START = 4
DPP_END = 4
DPP_CRC_SYMBOLS = 4
DPP_OVERHEAD = DPP_START + DPP_CRC_SYMBOLS + DPP_END
LC_FRAMING = 4
LC_SYMBOLS = LC_FRAMING + 2

_K = lc.k_code
FRAME_MARKERS = {
    "header": (_K(27, 7), _K(27, 7), _K(27, 7), _K(23, 7)),
    "payload_start": (_K(28, 2), _K(28, 2), _K(28, 2), _K(23, 7)),
    "payload_end": (_K(29, 7), _K(29, 7), _K(29, 7), _K(23, 7)),
    "link_command": (_K(28, 3), _K(28, 3), _K(28, 3), _K(23, 7)),
}


class PacketType(enum.IntEnum):
    LINK_MANAGEMENT = 1
    TRANSACTION = 2
    DATA_HEADER = 3


@dataclass(frozen=True, slots=True)
class HeaderPacket:
    """12-byte protocol body protected by CRC-16 plus an 11-bit link
    control word (sequence + type) protected by CRC-5."""

    seq: int
    packet_type: int
    type_fields: bytes
    crc16: int
    link_control_word: int
    crc5: int

    def body_ok(self) -> bool:
        return lc.crc16_check(self.type_fields, self.crc16)

    def lcw_ok(self) -> bool:
        if not lc.crc5_check(self.link_control_word, self.crc5):
            return False
        return (self.link_control_word & 0x7) == self.seq


def make_header_packet(seq: int, packet_type: int, type_fields: bytes) -> HeaderPacket:
    if len(type_fields) != HEADER_BODY_LEN:
        raise ValueError(f"header body must be {HEADER_BODY_LEN} bytes")
    if not 0 <= seq < SEQ_MOD:
        raise ValueError("header sequence out of range")
    lcw = seq | (int(packet_type) << 3)
    return HeaderPacket(seq, int(packet_type), bytes(type_fields),
                        lc.crc16_header(type_fields), lcw, lc.crc5_lcw(lcw))


class LinkCommandKind(enum.Enum):
    LGOOD = "LGOOD"
    LCRD = "LCRD"
    LBAD = "LBAD"
    LRTY = "LRTY"


_LC_CLASS = {LinkCommandKind.LGOOD: 0, LinkCommandKind.LCRD: 1,
             LinkCommandKind.LBAD: 2, LinkCommandKind.LRTY: 3}
_LC_BY_CLASS = {v: k for k, v in _LC_CLASS.items()}
CREDIT_SLOTS = "ABCD"


@dataclass(frozen=True, slots=True)
class LinkCommand:
    kind: LinkCommandKind
    value: int = 0  # LGOOD: seq; LCRD: slot index 0..3

    @property
    def word(self) -> int:
        return (_LC_CLASS[self.kind] << 8) | (self.value & 0xFF)

    @staticmethod
    def from_word(word: int) -> "LinkCommand | None":
        cls = (word >> 8) & 0x7
        kind = _LC_BY_CLASS.get(cls)
        if kind is None:
            return None
        return LinkCommand(kind, word & 0xFF)


# ---------------------------------------------------------------------------
# Wire frames
# ---------------------------------------------------------------------------

@dataclass(frozen=True, slots=True)
class Garble:
    """A transmission whose framing was destroyed by noise."""

    n_symbols: int
    was: str


def _flip_bytes(data: bytes, hits: list[tuple[int, int]]) -> bytes:
    buf = bytearray(data)
    for byte_idx, bit in hits:
        buf[byte_idx] ^= 1 << bit
    return bytes(buf)


@dataclass(frozen=True, slots=True)
class HeaderFrame:
    packet: HeaderPacket

    @property
    def n_symbols(self) -> int:
        return HP_SYMBOLS

    def corrupted_by(self, channel: Channel) -> object:
        positions = channel.draw_flip_positions(HP_SYMBOLS * 10)
        if not positions:
            return self
        body_hits: list[tuple[int, int]] = []
        crc16 = self.packet.crc16
        lcw16 = (self.packet.link_control_word << 5) | self.packet.crc5
        for pos in positions:
            sym, bit = divmod(pos, 10)
            if sym < HP_FRAMING:
                return Garble(HP_SYMBOLS, "header")
            bit &= 7
            sym -= HP_FRAMING
            if sym < HEADER_BODY_LEN:
                body_hits.append((sym, bit))
            elif sym < HEADER_BODY_LEN + 2:
                crc16 ^= 1 << (8 * (HEADER_BODY_LEN + 1 - sym) + bit)
            else:
                lcw16 ^= 1 << (8 * (HEADER_BODY_LEN + 3 - sym) + bit)
        pkt = self.packet
        damaged = HeaderPacket(pkt.seq, pkt.packet_type,
                               _flip_bytes(pkt.type_fields, body_hits) if body_hits
                               else pkt.type_fields,
                               crc16 & 0xFFFF, (lcw16 >> 5) & 0x7FF, lcw16 & 0x1F)
        return HeaderFrame(damaged)


@dataclass(frozen=True, slots=True)
class PayloadFrame:
    payload: bytes
    crc32: int

    @property
    def n_symbols(self) -> int:
        return len(self.payload) + DPP_OVERHEAD

    def corrupted_by(self, channel: Channel) -> object:
        n = self.n_symbols
        positions = channel.draw_flip_positions(n * 10)
        if not positions:
            return self
        body_hits: list[tuple[int, int]] = []
        crc = self.crc32
        end_start = DPP_START + len(self.payload) + DPP_CRC_SYMBOLS
        for pos in positions:
            sym, bit = divmod(pos, 10)
            if sym < DPP_START or sym >= end_start:
                return Garble(n, "payload")
            bit &= 7
            sym -= DPP_START
            if sym < len(self.payload):
                body_hits.append((sym, bit))
            else:
                crc ^= 1 << (8 * (len(self.payload) + 3 - sym) + bit)
        data = _flip_bytes(self.payload, body_hits) if body_hits else self.payload
        return PayloadFrame(data, crc & 0xFFFFFFFF)


@dataclass(frozen=True, slots=True)
class LinkCommandFrame:
    word: int   # 11-bit command word
    crc5: int

    @property
    def n_symbols(self) -> int:
        return LC_SYMBOLS

    def corrupted_by(self, channel: Channel) -> object:
        positions = channel.draw_flip_positions(LC_SYMBOLS * 10)
        if not positions:
            return self
        wire16 = (self.word << 5) | self.crc5
        for pos in positions:
            sym, bit = divmod(pos, 10)
            if sym < LC_FRAMING:
                return Garble(LC_SYMBOLS, "link_command")
            wire16 ^= 1 << (8 * (LC_FRAMING + 1 - sym) + (bit & 7))
        return LinkCommandFrame((wire16 >> 5) & 0x7FF, wire16 & 0x1F)


_LC_FRAME_CACHE: dict[LinkCommand, LinkCommandFrame] = {}


def link_command_frame(cmd: LinkCommand) -> LinkCommandFrame:
    frame = _LC_FRAME_CACHE.get(cmd)
    if frame is None:
        frame = _LC_FRAME_CACHE[cmd] = LinkCommandFrame(cmd.word, lc.crc5_lcw(cmd.word))
    return frame


def wire_image(frame, scrambler: lc.ScramblerState | None = None,
               rd: int = lc.RD_MINUS) -> tuple[list[int], lc.ScramblerState, int]:
    """Exact symbol stream for a frame: markers raw, data scrambled+encoded.

    Control (K) symbols bypass the scrambler, matching the convention that
    the keystream only advances over data symbols.
    """
    state = scrambler if scrambler is not None else lc.ScramblerState()
    items: list[tuple[int, bool]] = []

    def marker(name):
        for k in FRAME_MARKERS[name]:
            items.append((k, True))

    def data(raw: bytes):
        nonlocal state
        out, state = lc.scramble(raw, state)
        for b in out:
            items.append((b, False))

    if isinstance(frame, HeaderFrame):
        pkt = frame.packet
        marker("header")
        data(pkt.type_fields)
        data(struct.pack(">H", pkt.crc16))
        data(struct.pack(">H", (pkt.link_control_word << 5) | pkt.crc5))
    elif isinstance(frame, PayloadFrame):
        marker("payload_start")
        data(frame.payload)
        data(struct.pack(">I", frame.crc32))
        marker("payload_end")
    elif isinstance(frame, LinkCommandFrame):
        marker("link_command")
        data(struct.pack(">H", (frame.word << 5) | frame.crc5))
    else:
        raise TypeError(f"not a wire frame: {frame!r}")
    symbols, rd = lc.encode_stream(items, rd)
    return list(int(s) for s in symbols), state, rd


# ---------------------------------------------------------------------------
# Link layer state machine
# ---------------------------------------------------------------------------

@dataclass(slots=True)
class LinkConfig:
    credits: int = DEFAULT_CREDITS
    max_payload: int = MAX_PAYLOAD
    pending_ack_timeout: int = 10 * US
    credit_timeout: int = 50 * US

    def validate(self) -> None:
        if not 1 <= self.credits <= 4:
            raise ValueError("credits must be in 1..4")
        if not 1 <= self.max_payload <= MAX_PAYLOAD:
            raise ValueError(f"max_payload must be in 1..{MAX_PAYLOAD}")
        if self.pending_ack_timeout <= 0 or self.credit_timeout <= 0:
            raise ValueError("timeouts must be positive")


@dataclass(slots=True)
class LinkCounters:
    tx_headers: int = 0
    tx_payloads: int = 0
    rx_headers_ok: int = 0
    rx_payloads_ok: int = 0
    crc16_fail: int = 0
    crc5_fail: int = 0
    payload_crc_fail: int = 0
    lbad_sent: int = 0
    lrty_sent: int = 0
    link_retries: int = 0
    dup_headers: int = 0
    seq_errors: int = 0
    orphan_payloads: int = 0
    stale_lgood: int = 0
    violations: int = 0
    garbles: int = 0
    dropped_out_of_state: int = 0
    dropped_in_drop_mode: int = 0
    lgood_sent: int = 0
    lcrd_sent: int = 0
    recoveries_requested: int = 0

    def as_dict(self) -> dict:
        return {f: getattr(self, f) for f in self.__dataclass_fields__}


class _RetrySlot:
    __slots__ = ("packet", "payload_frame", "attempts")

    def __init__(self, packet: HeaderPacket, payload_frame: PayloadFrame | None):
        self.packet = packet
        self.payload_frame = payload_frame
        self.attempts = 1


class LinkLayer:
    """One side's link state: transmit queue, retry buffer, rx sequencing.

    Wired after construction:
      deliver(packet, payload, payload_ok)  -- upward delivery
      data_gate() -> bool                   -- may transmit new headers (U0)
      rx_gate() -> bool                     -- may accept traffic (U0/Recovery)
      request_recovery()                    -- credit starvation escalation
    """

    def __init__(self, side: str, scheduler: Scheduler, tx: Channel,
                 cfg: LinkConfig, tracer):
        cfg.validate()
        self.side = side
        self.scheduler = scheduler
        self.tx = tx
        self.cfg = cfg
        self.tracer = tracer
        self.counters = LinkCounters()

        self.deliver = None
        self.data_gate = lambda: True
        self.rx_gate = lambda: True
        self.request_recovery = None

        self._queue: deque[tuple[int, bytes, bytes | None]] = deque()
        self._retry: deque[_RetrySlot] = deque()
        self.next_seq = 0
        self.remote_credits = cfg.credits
        self._tx_slot_expect = 0    # next LCRD slot letter we should receive

        self.expected_seq = 0
        self._rx_slot_next = 0      # next LCRD slot letter we will send
        self._drop_mode = False
        self._pending_payload: HeaderPacket | None = None

        self._pending_timer = None
        self._pending_head_id = None
        self._credit_timer = None

    # -- transmit side ---------------------------------------------------------

    def submit(self, packet_type: int, type_fields: bytes,
               payload: bytes | None = None) -> None:
        """Queue a header (with optional data payload) for transmission."""
        if len(type_fields) != HEADER_BODY_LEN:
            raise ValueError(f"header body must be {HEADER_BODY_LEN} bytes")
        if payload is not None:
            if not 1 <= len(payload) <= self.cfg.max_payload:
                raise ValueError("payload length out of range")
            if packet_type != PacketType.DATA_HEADER:
                raise ValueError("payload requires a data packet header")
        self._queue.append((packet_type, bytes(type_fields), payload))
        self._pump()

    def tx_header(self, packet_type: int, type_fields: bytes) -> None:
        self.submit(packet_type, type_fields, None)

    def tx_data(self, type_fields: bytes, payload: bytes) -> None:
        self.submit(PacketType.DATA_HEADER, type_fields, payload)

    def _pump(self) -> None:
        sent = False
        while (self._queue and self.remote_credits > 0
               and len(self._retry) < self.cfg.credits and self.data_gate()):
            ptype, fields, payload = self._queue.popleft()
            pkt = make_header_packet(self.next_seq, ptype, fields)
            self.next_seq = (self.next_seq + 1) % SEQ_MOD
            self.remote_credits -= 1
            pf = None
            if payload is not None:
                pf = PayloadFrame(payload, lc.crc32_payload(payload))
            slot = _RetrySlot(pkt, pf)
            self._retry.append(slot)
            self._transmit_slot(slot, first=True)
            sent = True
        if sent:
            self._arm_pending_timer()
        self._watch_credits()

    def _transmit_slot(self, slot: _RetrySlot, first: bool) -> None:
        self.counters.tx_headers += 1
        self.tx.send(HeaderFrame(slot.packet))
        if slot.payload_frame is not None:
            self.counters.tx_payloads += 1
            self.tx.send(slot.payload_frame)
        tr = self.tracer
        if tr.enabled:
            tr.emit(self.side, "link", "tx_header", seq=slot.packet.seq,
                    ptype=int(slot.packet.packet_type),
                    attempt=slot.attempts,
                    payload=len(slot.payload_frame.payload) if slot.payload_frame else 0)

    def _send_command(self, cmd: LinkCommand) -> None:
        self.tx.send(link_command_frame(cmd))
        tr = self.tracer
        if tr.enabled:
            tr.emit(self.side, "link", "tx_lc", lc=cmd.kind.value, value=cmd.value)

    def _retransmit_all(self, reason: str) -> None:
        if not self._retry:
            return
        self.counters.lrty_sent += 1
        self.counters.link_retries += len(self._retry)
        self._send_command(LinkCommand(LinkCommandKind.LRTY))
        for slot in self._retry:
            slot.attempts += 1
            self._transmit_slot(slot, first=False)
        self.tracer.emit(self.side, "link", "retransmit",
                         reason=reason, slots=len(self._retry))
        self._arm_pending_timer(force=True)

    # pending-ack watchdog: resend the whole buffer when the head sits
    # unacknowledged too long (lost header or lost LGOOD).
    def _arm_pending_timer(self, force: bool = False) -> None:
        if not self._retry:
            return
        head_id = id(self._retry[0])
        if not force and self._pending_timer is not None and self._pending_head_id == head_id:
            return
        if self._pending_timer is not None:
            self._pending_timer.cancel()
        self._pending_head_id = head_id
        self._pending_timer = self.scheduler.schedule(
            self.scheduler.now + self.cfg.pending_ack_timeout,
            self._pending_fire, head_id, target=f"{self.side}.link")

    def _pending_fire(self, head_id: int) -> None:
        self._pending_timer = None
        if not self._retry:
            return
        if id(self._retry[0]) == head_id:
            self._retransmit_all("ack_timeout")
        else:
            self._arm_pending_timer()

    # credit watchdog: a sender starved of credits with work pending means
    # LCRDs were lost; Recovery resets the credit state on both sides.
    def _watch_credits(self) -> None:
        starved = bool(self._queue) and self.remote_credits == 0
        if starved and self._credit_timer is None:
            self._credit_timer = self.scheduler.schedule(
                self.scheduler.now + self.cfg.credit_timeout,
                self._credit_fire, target=f"{self.side}.link")
        elif not starved and self._credit_timer is not None:
            self._credit_timer.cancel()
            self._credit_timer = None

    def _credit_fire(self) -> None:
        self._credit_timer = None
        if self._queue and self.remote_credits == 0:
            self.counters.recoveries_requested += 1
            self.tracer.emit(self.side, "link", "credit_starved",
                             queued=len(self._queue))
            if self.request_recovery is not None:
                self.request_recovery()

    # -- receive side -------------------------------------------------------------

    def on_frame(self, item) -> None:
        if isinstance(item, Garble):
            self.counters.garbles += 1
            if self._pending_payload is not None and item.was == "payload":
                self._resolve_payload(None, False)
            return
        if isinstance(item, LinkCommandFrame):
            self._rx_link_command(item)
            return
        if not self.rx_gate():
            self.counters.dropped_out_of_state += 1
            return
        if isinstance(item, HeaderFrame):
            self._rx_header(item.packet)
        elif isinstance(item, PayloadFrame):
            self._rx_payload(item)
        else:
            raise TypeError(f"unexpected line item: {item!r}")

    def _rx_header(self, pkt: HeaderPacket) -> None:
        if self._pending_payload is not None:
            # expected payload never showed up in recognizable form
            self._resolve_payload(None, False)
        if not pkt.lcw_ok():
            self.counters.crc5_fail += 1
            self._header_bad()
            return
        if not pkt.body_ok():
            self.counters.crc16_fail += 1
            self._header_bad()
            return
        if self._drop_mode:
            self.counters.dropped_in_drop_mode += 1
            return
        delta = (self.expected_seq - pkt.seq) % SEQ_MOD
        if delta == 0:
            self.expected_seq = (self.expected_seq + 1) % SEQ_MOD
            self.counters.rx_headers_ok += 1
            self.counters.lgood_sent += 1
            self._send_command(LinkCommand(LinkCommandKind.LGOOD, pkt.seq))
            self.counters.lcrd_sent += 1
            self._send_command(LinkCommand(LinkCommandKind.LCRD, self._rx_slot_next))
            self._rx_slot_next = (self._rx_slot_next + 1) % 4
            tr = self.tracer
            if tr.enabled:
                tr.emit(self.side, "link", "rx_header", seq=pkt.seq,
                        ptype=int(pkt.packet_type), crc_ok=True)
            if pkt.packet_type == PacketType.DATA_HEADER:
                self._pending_payload = pkt
            elif self.deliver is not None:
                self.deliver(pkt, None, True)
        elif delta <= self.cfg.credits:
            # retry of something already acknowledged; ack again, no credit
            self.counters.dup_headers += 1
            self.counters.lgood_sent += 1
            self._send_command(LinkCommand(LinkCommandKind.LGOOD, pkt.seq))
        else:
            self.counters.seq_errors += 1
            self._header_bad()

    def _header_bad(self) -> None:
        if not self._drop_mode:
            self._drop_mode = True
            self.counters.lbad_sent += 1
            self._send_command(LinkCommand(LinkCommandKind.LBAD))
        else:
            self.counters.dropped_in_drop_mode += 1

    def _rx_payload(self, frame: PayloadFrame) -> None:
        if self._pending_payload is None:
            self.counters.orphan_payloads += 1
            return
        ok = lc.crc32_check(frame.payload, frame.crc32)
        if not ok:
            self.counters.payload_crc_fail += 1
        else:
            self.counters.rx_payloads_ok += 1
        self._resolve_payload(frame.payload if ok else None, ok)

    def _resolve_payload(self, payload: bytes | None, ok: bool) -> None:
        pkt = self._pending_payload
        self._pending_payload = None
        if self.deliver is not None:
            self.deliver(pkt, payload, ok)

    def _rx_link_command(self, frame: LinkCommandFrame) -> None:
        if not lc.crc5_check(frame.word, frame.crc5):
            self.counters.crc5_fail += 1
            return
        cmd = LinkCommand.from_word(frame.word)
        if cmd is None:
            self.counters.violations += 1
            return
        tr = self.tracer
        if tr.enabled:
            tr.emit(self.side, "link", "rx_lc", lc=cmd.kind.value, value=cmd.value)
        if cmd.kind is LinkCommandKind.LGOOD:
            self._on_lgood(cmd.value & 0x7)
        elif cmd.kind is LinkCommandKind.LCRD:
            self._on_lcrd(cmd.value & 0x3)
        elif cmd.kind is LinkCommandKind.LBAD:
            self._retransmit_all("lbad")
        elif cmd.kind is LinkCommandKind.LRTY:
            self._drop_mode = False

    def _on_lgood(self, n: int) -> None:
        if self._retry and self._retry[0].packet.seq == n:
            self._retry.popleft()
            if self._pending_timer is not None:
                self._pending_timer.cancel()
                self._pending_timer = None
            self._arm_pending_timer()
            self._pump()
            return
        if not self._retry or ((self._retry[0].packet.seq - n) % SEQ_MOD) <= self.cfg.credits:
            self.counters.stale_lgood += 1  # re-ack after a retry race
        else:
            self.counters.violations += 1

    def _on_lcrd(self, slot: int) -> None:
        if slot != self._tx_slot_expect:
            self.counters.violations += 1
        self._tx_slot_expect = (slot + 1) % 4
        if self.remote_credits >= self.cfg.credits:
            self.counters.violations += 1
            return
        self.remote_credits += 1
        self._watch_credits()
        self._pump()

    # -- LTSSM hooks -------------------------------------------------------------------

    def on_u0(self, first: bool) -> None:
        if first:
            self.full_reset()
        else:
            # Recovery re-entry: credit state re-synchronizes, sequence
            # numbers survive, unacknowledged headers go out again.
            self.remote_credits = self.cfg.credits
            self._tx_slot_expect = 0
            self._rx_slot_next = 0
            self._drop_mode = False
            if self._pending_payload is not None:
                self._resolve_payload(None, False)
            if self._retry:
                self._retransmit_all("recovery")
            self._pump()

    def full_reset(self) -> None:
        """Hard link reset: sequences, credits and buffers start over.

        Anything still unacknowledged is re-queued ahead of new work so no
        submission is silently lost across a retrain.
        """
        requeue = [(s.packet.packet_type, s.packet.type_fields,
                    s.payload_frame.payload if s.payload_frame else None)
                   for s in self._retry]
        self._retry.clear()
        for entry in reversed(requeue):
            self._queue.appendleft(entry)
        self.next_seq = 0
        self.expected_seq = 0
        self.remote_credits = self.cfg.credits
        self._tx_slot_expect = 0
        self._rx_slot_next = 0
        self._drop_mode = False
        self._pending_payload = None
        for t in (self._pending_timer, self._credit_timer):
            if t is not None:
                t.cancel()
        self._pending_timer = None
        self._credit_timer = None
        self._pump()

    def is_quiescent(self) -> bool:
        return not self._retry and not self._queue and self._pending_payload is None

    @property
    def credits_available(self) -> int:
        return self.remote_credits

    @property
    def retry_depth(self) -> int:
        return len(self._retry)
