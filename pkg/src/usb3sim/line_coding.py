"""Symbol-level codecs: 8b10b, the 16-bit line scrambler, CRCs, ordered sets.

Everything here is a pure function over explicit state values, so the same
code serves the transmit path, the receive path and the test oracles.

The 8b10b tables are generated from the 5b/6b and 3b/4b sub-block columns
rather than transcribed as 1024 rows; generation asserts that no 10-bit
pattern decodes ambiguously.  Symbols are 10-bit integers with bit layout
``abcdei fghj`` (bit 9 = a).
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

RD_MINUS = -1
RD_PLUS = +1

# ---------------------------------------------------------------------------
# 8b10b code tables (sub-block construction)
# ---------------------------------------------------------------------------

# 5b/6b column: EDCBA index -> (abcdei at RD-, abcdei at RD+)
_D5B6B = (
    (0b100111, 0b011000),  # D.00
    (0b011101, 0b100010),  # D.01
    (0b101101, 0b010010),  # D.02
    (0b110001, 0b110001),  # D.03
    (0b110101, 0b001010),  # D.04
    (0b101001, 0b101001),  # D.05
    (0b011001, 0b011001),  # D.06
    (0b111000, 0b000111),  # D.07
    (0b111001, 0b000110),  # D.08
    (0b100101, 0b100101),  # D.09
    (0b010101, 0b010101),  # D.10
    (0b110100, 0b110100),  # D.11
    (0b001101, 0b001101),  # D.12
    (0b101100, 0b101100),  # D.13
    (0b011100, 0b011100),  # D.14
    (0b010111, 0b101000),  # D.15
    (0b011011, 0b100100),  # D.16
    (0b100011, 0b100011),  # D.17
    (0b010011, 0b010011),  # D.18
    (0b110010, 0b110010),  # D.19
    (0b001011, 0b001011),  # D.20
    (0b101010, 0b101010),  # D.21
    (0b011010, 0b011010),  # D.22
    (0b111010, 0b000101),  # D.23
    (0b110011, 0b001100),  # D.24
    (0b100110, 0b100110),  # D.25
    (0b010110, 0b010110),  # D.26
    (0b110110, 0b001001),  # D.27
    (0b001110, 0b001110),  # D.28
    (0b101110, 0b010001),  # D.29
    (0b011110, 0b100001),  # D.30
    (0b101011, 0b010100),  # D.31
)

# 3b/4b column: HGF index -> (fghj at RD-, fghj at RD+); 7 has two forms.
_D3B4B = (
    (0b1011, 0b0100),  # D.x.0
    (0b1001, 0b1001),  # D.x.1
    (0b0101, 0b0101),  # D.x.2
    (0b1100, 0b0011),  # D.x.3
    (0b1101, 0b0010),  # D.x.4
    (0b1010, 0b1010),  # D.x.5
    (0b0110, 0b0110),  # D.x.6
)
_D3B4B_P7 = (0b1110, 0b0001)  # primary D.x.7
_D3B4B_A7 = (0b0111, 0b1000)  # alternate D.x.7

# Alternate .7 avoids run-length hazards; selected by the disparity entering
# the 3b/4b block.
_A7_AT_MINUS = frozenset({17, 18, 20})
_A7_AT_PLUS = frozenset({11, 13, 14})

# The 12 control codes, as full 10-bit RD- patterns; RD+ is the complement.
_K_RD_MINUS = {
    (28, 0): 0b0011110100,
    (28, 1): 0b0011111001,
    (28, 2): 0b0011110101,
    (28, 3): 0b0011110011,
    (28, 4): 0b0011110010,
    (28, 5): 0b0011111010,
    (28, 6): 0b0011110110,
    (28, 7): 0b0011111000,
    (23, 7): 0b1110101000,
    (27, 7): 0b1101101000,
    (29, 7): 0b1011101000,
    (30, 7): 0b0111101000,
}

K_CODES = tuple(sorted((x | (y << 5)) for (x, y) in _K_RD_MINUS))
COMMA = 28 | (5 << 5)  # K28.5, first symbol of every ordered set


def k_code(x: int, y: int) -> int:
    """Byte value of control code K.x.y."""
    if (x, y) not in _K_RD_MINUS:
        raise ValueError(f"K.{x}.{y} is not one of the 12 legal control codes")
    return x | (y << 5)


class CodecError(ValueError):
    """Illegal encode input or undecodable symbol."""


class DisparityError(CodecError):
    """Symbol is in the code table but not legal at the current disparity."""


def _disp(bits: int, width: int) -> int:
    return 2 * bin(bits).count("1") - width


def _build_tables():
    encode: dict[tuple[int, bool, int], tuple[int, int]] = {}
    decode: dict[int, tuple[int, bool, int]] = {}  # symbol -> (byte, is_k, rd_in)

    def put(byte, is_k, rd_in, symbol):
        rd_out = rd_in + _disp(symbol, 10)
        assert rd_out in (RD_MINUS, RD_PLUS), (byte, is_k, rd_in, bin(symbol))
        encode[(byte, is_k, rd_in)] = (symbol, rd_out)
        prior = decode.get(symbol)
        if prior is not None:
            assert prior[:2] == (byte, is_k), (
                f"ambiguous symbol {symbol:010b}: {prior[:2]} vs {(byte, is_k)}")
        decode[symbol] = (byte, is_k, rd_in)

    for byte in range(256):
        x, y = byte & 0x1F, byte >> 5
        for rd in (RD_MINUS, RD_PLUS):
            six = _D5B6B[x][0 if rd == RD_MINUS else 1]
            rd_mid = rd + _disp(six, 6)
            if y == 7:
                use_alt = (rd_mid == RD_MINUS and x in _A7_AT_MINUS) or (
                    rd_mid == RD_PLUS and x in _A7_AT_PLUS)
                pair = _D3B4B_A7 if use_alt else _D3B4B_P7
            else:
                pair = _D3B4B[y]
            four = pair[0 if rd_mid == RD_MINUS else 1]
            put(byte, False, rd, (six << 4) | four)

    for (x, y), pattern in _K_RD_MINUS.items():
        byte = x | (y << 5)
        put(byte, True, RD_MINUS, pattern)
        put(byte, True, RD_PLUS, pattern ^ 0x3FF)

    # rd legality per symbol: some balanced symbols appear at both rd values
    # with the same pattern and must accept either.
    legal_rd: dict[int, set[int]] = {}
    for (byte, is_k, rd), (symbol, _) in encode.items():
        legal_rd.setdefault(symbol, set()).add(rd)
    return encode, decode, legal_rd


_ENCODE, _DECODE, _LEGAL_RD = _build_tables()
LEGAL_SYMBOLS = frozenset(_DECODE)


def encode_8b10b(byte: int, is_k: bool, rd: int) -> tuple[int, int]:
    """Encode one byte; returns (10-bit symbol, next running disparity)."""
    if rd not in (RD_MINUS, RD_PLUS):
        raise CodecError(f"running disparity must be -1 or +1, got {rd}")
    if not 0 <= byte <= 0xFF:
        raise CodecError(f"byte out of range: {byte}")
    try:
        return _ENCODE[(byte, bool(is_k), rd)]
    except KeyError:
        raise CodecError(f"K.{byte & 0x1F}.{byte >> 5} is not a legal control code") from None


def decode_8b10b(symbol: int, rd: int) -> tuple[int, bool, int]:
    """Decode one symbol; returns (byte, is_k, next running disparity).

    Raises CodecError for patterns outside the code table and DisparityError
    for table patterns arriving at the wrong running disparity.
    """
    if rd not in (RD_MINUS, RD_PLUS):
        raise CodecError(f"running disparity must be -1 or +1, got {rd}")
    entry = _DECODE.get(symbol & 0x3FF)
    if entry is None:
        raise CodecError(f"code violation: {symbol & 0x3FF:010b}")
    byte, is_k, _ = entry
    if rd not in _LEGAL_RD[symbol & 0x3FF]:
        raise DisparityError(f"disparity error: {symbol & 0x3FF:010b} at rd {rd:+d}")
    return byte, is_k, rd + _disp(symbol & 0x3FF, 10)


@dataclass(slots=True)
class DecodedSymbol:
    byte: int
    is_k: bool
    ok: bool
    error: str = ""


def encode_stream(items, rd: int = RD_MINUS) -> tuple[np.ndarray, int]:
    """Encode (byte, is_k) pairs into a symbol array, threading disparity."""
    out = np.empty(len(items), dtype=np.uint16)
    for i, (byte, is_k) in enumerate(items):
        sym, rd = encode_8b10b(byte, is_k, rd)
        out[i] = sym
    return out, rd


def decode_stream(symbols, rd: int = RD_MINUS, resync_on_comma: bool = True) -> tuple[list[DecodedSymbol], int]:
    """Decode a symbol array, flagging rather than raising on bad symbols.

    With `resync_on_comma` the decoder re-learns the running disparity from
    each comma pattern (K28.5 is distinct at both disparities), so a noise
    burst cannot poison everything after it.
    """
    comma_m, _ = _ENCODE[(COMMA, True, RD_MINUS)]
    comma_p, _ = _ENCODE[(COMMA, True, RD_PLUS)]
    out: list[DecodedSymbol] = []
    for raw in np.asarray(symbols, dtype=np.uint16):
        s = int(raw) & 0x3FF
        if resync_on_comma:
            if s == comma_m:
                rd = RD_MINUS
            elif s == comma_p:
                rd = RD_PLUS
        try:
            byte, is_k, rd = decode_8b10b(s, rd)
            out.append(DecodedSymbol(byte, is_k, True))
        except DisparityError as exc:
            byte, is_k, _ = _DECODE[s]
            rd = rd + _disp(s, 10)
            if rd not in (RD_MINUS, RD_PLUS):
                rd = RD_MINUS if rd < 0 else RD_PLUS
            out.append(DecodedSymbol(byte, is_k, False, str(exc)))
        except CodecError as exc:
            out.append(DecodedSymbol(0, False, False, str(exc)))
    return out, rd


# ---------------------------------------------------------------------------
# Scrambler
# ---------------------------------------------------------------------------

SCRAMBLER_POLY = 0x0039   # x^16 + x^5 + x^4 + x^3 + 1 (feedback mask)
SCRAMBLER_RESET = 0xFFFF  # applied when link training completes

_PERIOD = 65535  # state period of the primitive degree-16 polynomial


@dataclass(frozen=True, slots=True)
class ScramblerState:
    lfsr: int = SCRAMBLER_RESET

    def __post_init__(self):
        if not 1 <= self.lfsr <= 0xFFFF:
            raise ValueError("scrambler LFSR must be a non-zero 16-bit value")


def _lfsr_step(state: int) -> tuple[int, int]:
    """One Galois step: emits the MSB, folds it back through the taps."""
    out = (state >> 15) & 1
    state = (state << 1) & 0xFFFF
    if out:
        state ^= SCRAMBLER_POLY
    return out, state


def keystream_byte(state: int) -> tuple[int, int]:
    """Next keystream byte (MSB-first bits) and the successor state."""
    byte = 0
    for _ in range(8):
        bit, state = _lfsr_step(state)
        byte = (byte << 1) | bit
    return byte, state


class _KeystreamCache:
    """Full-period keystream so bulk scrambling is a numpy XOR.

    The state period is 65535 steps; 65535 bytes later the LFSR is back at
    its starting state, so the byte stream from any state is a rotation of
    one canonical cycle.
    """

    def __init__(self):
        self.bytes: np.ndarray | None = None
        self.index_of_state: dict[int, int] | None = None
        self.state_at: list[int] | None = None

    def build(self) -> None:
        if self.bytes is not None:
            return
        stream = np.empty(_PERIOD, dtype=np.uint8)
        states = [0] * _PERIOD
        index = {}
        state = SCRAMBLER_RESET
        for i in range(_PERIOD):
            states[i] = state
            index[state] = i
            b, state = keystream_byte(state)
            stream[i] = b
        assert state == SCRAMBLER_RESET
        self.bytes = stream
        self.index_of_state = index
        self.state_at = states


_CACHE = _KeystreamCache()


def scramble(data: bytes, state: ScramblerState) -> tuple[bytes, ScramblerState]:
    """XOR `data` with the LFSR keystream; returns (output, new state)."""
    n = len(data)
    if n == 0:
        return b"", state
    if n < 64:
        out = bytearray(n)
        s = state.lfsr
        for i, b in enumerate(data):
            k, s = keystream_byte(s)
            out[i] = b ^ k
        return bytes(out), ScramblerState(s)
    _CACHE.build()
    start = _CACHE.index_of_state[state.lfsr]
    idx = (start + np.arange(n)) % _PERIOD
    ks = _CACHE.bytes[idx]
    out = np.frombuffer(data, dtype=np.uint8) ^ ks
    new_state = _CACHE.state_at[(start + n) % _PERIOD]
    return out.tobytes(), ScramblerState(new_state)


def descramble(data: bytes, state: ScramblerState) -> tuple[bytes, ScramblerState]:
    """Inverse of scramble given the same starting state (XOR involution)."""
    return scramble(data, state)


# ---------------------------------------------------------------------------
# CRC engines
# ---------------------------------------------------------------------------

@dataclass(frozen=True, slots=True)
class CrcSpec:
    """Parameters of a reflected/unreflected bit-serial CRC."""

    name: str
    width: int
    poly: int
    init: int
    refin: bool
    refout: bool
    xorout: int


CRC16_HEADER = CrcSpec("crc16-header", 16, 0x8005, 0x0000, True, True, 0x0000)
CRC32_PAYLOAD = CrcSpec("crc32-payload", 32, 0x04C11DB7, 0xFFFFFFFF, True, True, 0xFFFFFFFF)
CRC5_LCW = CrcSpec("crc5-lcw", 5, 0x05, 0x1F, True, True, 0x1F)

MAX_PAYLOAD = 1024


def _reflect(value: int, width: int) -> int:
    out = 0
    for _ in range(width):
        out = (out << 1) | (value & 1)
        value >>= 1
    return out


def _make_table(spec: CrcSpec) -> list[int]:
    # Reflected specs run LSB-first; table indexed by input byte.
    table = []
    top = 1 << (spec.width - 1)
    mask = (1 << spec.width) - 1
    poly = _reflect(spec.poly, spec.width) if spec.refin else spec.poly
    for byte in range(256):
        if spec.refin:
            crc = byte
            for _ in range(8):
                crc = (crc >> 1) ^ poly if crc & 1 else crc >> 1
        else:
            crc = byte << (spec.width - 8) if spec.width >= 8 else byte
            for _ in range(8):
                crc = ((crc << 1) ^ spec.poly if crc & top else crc << 1) & mask
        table.append(crc & mask)
    return table


_CRC16_TABLE = _make_table(CRC16_HEADER)


def crc16_header(data: bytes) -> int:
    """CRC-16 over a 12-byte header body (any length accepted)."""
    crc = CRC16_HEADER.init
    for b in data:
        crc = (crc >> 8) ^ _CRC16_TABLE[(crc ^ b) & 0xFF]
    return crc ^ CRC16_HEADER.xorout


def crc32_payload(data: bytes) -> int:
    """CRC-32 over a data packet payload (max 1024 bytes)."""
    if len(data) > MAX_PAYLOAD:
        raise ValueError(f"payload exceeds {MAX_PAYLOAD} bytes: {len(data)}")
    # zlib implements exactly the reflected 0x04C11DB7 / all-ones profile.
    return zlib.crc32(data) & 0xFFFFFFFF


def _crc5_compute(word11: int) -> int:
    poly = _reflect(CRC5_LCW.poly, 5)
    crc = CRC5_LCW.init
    for i in range(11):
        bit = (word11 >> i) & 1
        crc = (crc >> 1) ^ poly if (crc ^ bit) & 1 else crc >> 1
    return (crc ^ CRC5_LCW.xorout) & 0x1F


# every link command and header emits one of these; the input space is tiny
_CRC5_TABLE = tuple(_crc5_compute(w) for w in range(1 << 11))


def crc5_lcw(word11: int) -> int:
    """CRC-5 over an 11-bit link control word (LSB-first bit order)."""
    if not 0 <= word11 < (1 << 11):
        raise ValueError("link control word must fit in 11 bits")
    return _CRC5_TABLE[word11]


def crc16_check(data: bytes, crc: int) -> bool:
    return crc16_header(data) == crc


def crc32_check(data: bytes, crc: int) -> bool:
    return crc32_payload(data) == crc


def crc5_check(word11: int, crc: int) -> bool:
    return crc5_lcw(word11) == crc


# ---------------------------------------------------------------------------
# Training ordered sets
# ---------------------------------------------------------------------------

TSEQ = "TSEQ"
TS1 = "TS1"
TS2 = "TS2"

TSEQ_LEN = 32
TS_LEN = 16
DETECT_CONSECUTIVE = 2

# Block contents: a comma, one identifying byte repeated, and a
# link-configuration byte at a fixed slot (zero in every desk scenario).
_TS_CONFIG_SLOT = 5
_SET_ID_BYTE = {TSEQ: 0xB5, TS1: 0x4A, TS2: 0x45}
_SET_LEN = {TSEQ: TSEQ_LEN, TS1: TS_LEN, TS2: TS_LEN}

ORDERED_SET_KINDS = (TSEQ, TS1, TS2)


def ordered_set_items(kind: str, link_config: int = 0) -> list[tuple[int, bool]]:
    """(byte, is_k) contents of one ordered set block."""
    if kind not in _SET_LEN:
        raise ValueError(f"unknown ordered set kind: {kind}")
    body = [(COMMA, True)]
    for i in range(1, _SET_LEN[kind]):
        if i == _TS_CONFIG_SLOT and kind in (TS1, TS2):
            body.append((link_config & 0xFF, False))
        else:
            body.append((_SET_ID_BYTE[kind], False))
    return body


def ordered_set_make(kind: str, rd: int = RD_MINUS, link_config: int = 0) -> tuple[np.ndarray, int]:
    """Encode one ordered set block starting from running disparity `rd`."""
    return encode_stream(ordered_set_items(kind, link_config), rd)


@dataclass(slots=True)
class SetDetection:
    kind: str
    position: int          # symbol index of the first block of the clean run
    block_positions: list[int] = field(default_factory=list)


class OrderedSetScanner:
    """Streaming recognizer for TSEQ/TS1/TS2 blocks.

    Feeds on decoded symbols; a comma opens a candidate block and any
    mismatch or decode error abandons it.  `blocks` callbacks fire per clean
    block, and a detection is reported after `n_consecutive` clean blocks of
    the same kind (mixed-kind runs reset the counter).
    """

    def __init__(self, n_consecutive: int = DETECT_CONSECUTIVE):
        self.n_consecutive = n_consecutive
        self.templates = {k: ordered_set_items(k) for k in ORDERED_SET_KINDS}
        self.position = 0
        self._candidates: dict[str, int] | None = None
        self._block_start = 0
        self._run_kind: str | None = None
        self._run_count = 0
        self._run_start = 0

    def _reset_block(self):
        self._candidates = None

    def _abandon_run(self):
        self._run_kind = None
        self._run_count = 0

    def feed(self, decoded: list[DecodedSymbol]) -> tuple[list[tuple[str, int]], list[SetDetection]]:
        """Returns (clean blocks seen, detections completed) for this chunk."""
        blocks: list[tuple[str, int]] = []
        detections: list[SetDetection] = []
        for item in decoded:
            pos = self.position
            self.position += 1
            if item.ok and item.is_k and item.byte == COMMA:
                # A comma always restarts block matching.
                self._candidates = {k: 1 for k in self.templates}
                self._block_start = pos
                continue
            if self._candidates is None:
                self._abandon_run()
                continue
            if not item.ok:
                self._reset_block()
                self._abandon_run()
                continue
            still = {}
            done_kind = None
            for kind, idx in self._candidates.items():
                want_byte, want_k = self.templates[kind][idx]
                if item.byte == want_byte and item.is_k == want_k:
                    if idx + 1 == len(self.templates[kind]):
                        done_kind = kind
                    else:
                        still[kind] = idx + 1
            if done_kind is not None:
                blocks.append((done_kind, self._block_start))
                if self._run_kind == done_kind:
                    self._run_count += 1
                else:
                    self._run_kind = done_kind
                    self._run_count = 1
                    self._run_start = self._block_start
                if self._run_count == self.n_consecutive:
                    detections.append(SetDetection(done_kind, self._run_start))
                    self._run_count = 0
                    self._run_kind = None
                self._reset_block()
            elif still:
                self._candidates = still
            else:
                self._reset_block()
                self._abandon_run()
        return blocks, detections


def ordered_set_scan(symbols, rd: int = RD_MINUS,
                     n_consecutive: int = DETECT_CONSECUTIVE) -> list[tuple[str, int]]:
    """Scan a raw symbol stream; returns [(kind, position), ...] detections."""
    decoded, _ = decode_stream(symbols, rd)
    scanner = OrderedSetScanner(n_consecutive)
    _, detections = scanner.feed(decoded)
    return [(d.kind, d.position) for d in detections]
