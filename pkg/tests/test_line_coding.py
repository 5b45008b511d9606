"""Codec suites: 8b10b, scrambler, CRC engines, ordered sets.

Oracles here are deliberately independent re-derivations: the 8b10b
sub-block membership lists are transcribed again from the published code
tables (as strings, not shared with the implementation), the scrambler and
CRC oracles are naive bit-serial versions of the documented parameters,
and disparity is audited with plain popcount arithmetic.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from usb3sim import line_coding as lc

# ---------------------------------------------------------------------------
# independent transcription of the published 8b10b sub-tables (RD- column)
# ---------------------------------------------------------------------------

ORACLE_5B6B_RDM = """
100111 011101 101101 110001 110101 101001 011001 111000
111001 100101 010101 110100 001101 101100 011100 010111
011011 100011 010011 110010 001011 101010 011010 111010
110011 100110 010110 110110 001110 101110 011110 101011
""".split()

ORACLE_3B4B_RDM = "1011 1001 0101 1100 1101 1010 0110".split()
ORACLE_P7_RDM, ORACLE_A7_RDM = "1110", "0111"

ORACLE_K_RDM = {
    (28, 0): "0011110100", (28, 1): "0011111001", (28, 2): "0011110101",
    (28, 3): "0011110011", (28, 4): "0011110010", (28, 5): "0011111010",
    (28, 6): "0011110110", (28, 7): "0011111000", (23, 7): "1110101000",
    (27, 7): "1101101000", (29, 7): "1011101000", (30, 7): "0111101000",
}


def _disp(bits: str) -> int:
    return 2 * bits.count("1") - len(bits)


def _complement(bits: str) -> str:
    return "".join("1" if c == "0" else "0" for c in bits)


def oracle_encode(byte: int, rd: int) -> str:
    """Second, independent transcription of the data encoding rules.

    The RD+ form of a sub-block is the complement when the block is
    unbalanced or one of the two balanced-but-alternating entries (D.7 in
    the 6b column, D.x.3 in the 4b column); the 4b column is selected by
    the disparity left behind by the 6b block, with the alternate .7 used
    where the primary would create a run-length hazard.
    """
    x, y = byte & 0x1F, byte >> 5
    six_m = ORACLE_5B6B_RDM[x]
    six_flips = _disp(six_m) != 0 or six_m == "111000"
    six = six_m if (rd == -1 or not six_flips) else _complement(six_m)
    rd_mid = rd + _disp(six)
    if y == 7:
        use_alt = (rd_mid == -1 and x in (17, 18, 20)) or (
            rd_mid == +1 and x in (11, 13, 14))
        four_m = ORACLE_A7_RDM if use_alt else ORACLE_P7_RDM
        four_flips = True
    else:
        four_m = ORACLE_3B4B_RDM[y]
        four_flips = _disp(four_m) != 0 or four_m == "1100"
    four = four_m if (rd_mid == -1 or not four_flips) else _complement(four_m)
    return six + four


def oracle_legal_symbols() -> set[int]:
    """Every legal 10-bit pattern, rebuilt from the oracle encoder."""
    legal = set()
    for byte in range(256):
        for rd in (-1, +1):
            legal.add(int(oracle_encode(byte, rd), 2))
    for pattern in ORACLE_K_RDM.values():
        legal.add(int(pattern, 2))
        legal.add(int(pattern, 2) ^ 0x3FF)
    return legal


KNOWN_VECTORS = [
    # (byte, is_k, rd, expected symbol bits)
    (0x00, False, -1, "1001110100"),   # D0.0
    (0x00, False, +1, "0110001011"),
    (0x4A, False, -1, "0101010101"),   # D10.2, the classic idle pattern
    (0xBC, True, -1, "0011111010"),    # K28.5 comma
    (0xBC, True, +1, "1100000101"),
    (0xEB, False, +1, "1101001000"),   # D11.7 alternate form
    (0xF1, False, -1, "1000110111"),   # D17.7 alternate form
]


class Test8b10b:
    @pytest.mark.parametrize("byte,is_k,rd,bits", KNOWN_VECTORS)
    def test_known_vectors(self, byte, is_k, rd, bits):
        sym, _ = lc.encode_8b10b(byte, is_k, rd)
        assert f"{sym:010b}" == bits

    def test_exhaustive_data_encoding_matches_oracle(self):
        for byte in range(256):
            for rd in (-1, +1):
                sym, _ = lc.encode_8b10b(byte, False, rd)
                assert f"{sym:010b}" == oracle_encode(byte, rd), (byte, rd)

    def test_exhaustive_round_trip(self):
        for byte in range(256):
            for rd in (-1, +1):
                sym, rd_out = lc.encode_8b10b(byte, False, rd)
                assert lc.decode_8b10b(sym, rd) == (byte, False, rd_out)
        for kb in lc.K_CODES:
            for rd in (-1, +1):
                sym, rd_out = lc.encode_8b10b(kb, True, rd)
                assert lc.decode_8b10b(sym, rd) == (kb, True, rd_out)

    def test_running_disparity_stays_unit(self):
        rd = -1
        for byte in list(range(256)) * 2:
            _, rd = lc.encode_8b10b(byte, False, rd)
            assert rd in (-1, +1)

    def test_disparity_update_matches_popcount(self):
        # rd' - rd must equal 2*popcount - 10, computed independently
        for byte in range(256):
            for rd in (-1, +1):
                sym, rd_out = lc.encode_8b10b(byte, False, rd)
                assert rd_out - rd == 2 * bin(sym).count("1") - 10

    def test_alternate_encoding_exactly_when_subblocks_unbalanced(self):
        # symbols differ between disparities iff either sub-block changes
        for byte in range(256):
            x, y = byte & 0x1F, byte >> 5
            sym_m, _ = lc.encode_8b10b(byte, False, -1)
            sym_p, _ = lc.encode_8b10b(byte, False, +1)
            six_m = ORACLE_5B6B_RDM[x]
            six_changes = (2 * six_m.count("1") != 6) or six_m == "111000"
            if y == 7:
                four_changes = True
            else:
                four_m = ORACLE_3B4B_RDM[y]
                four_changes = (2 * four_m.count("1") != 4) or four_m == "1100"
            assert (sym_m != sym_p) == (six_changes or four_changes), byte

    def test_exhaustive_decode_legality_against_oracle(self):
        legal = oracle_legal_symbols()
        for pattern in range(1024):
            decodable = False
            for rd in (-1, +1):
                try:
                    lc.decode_8b10b(pattern, rd)
                    decodable = True
                except lc.CodecError:
                    pass
            assert decodable == (pattern in legal), f"{pattern:010b}"

    def test_single_bit_flip_detection_rate(self):
        # a flipped symbol must decode to an error or to a different byte;
        # silent aliasing to the same byte is impossible
        detected = 0
        total = 0
        for byte in range(0, 256, 7):
            for rd in (-1, +1):
                sym, _ = lc.encode_8b10b(byte, False, rd)
                for bit in range(10):
                    total += 1
                    try:
                        got, is_k, _ = lc.decode_8b10b(sym ^ (1 << bit), rd)
                        assert (got, is_k) != (byte, False)
                    except lc.CodecError:
                        detected += 1
        assert detected / total > 0.5  # most flips break the code outright

    def test_illegal_k_code_rejected(self):
        with pytest.raises(lc.CodecError):
            lc.encode_8b10b(0x00, True, -1)  # K28.0 is legal, K0.0 is not

    def test_disparity_error_is_distinct(self):
        # D0.0 at RD- has +2 disparity; presenting it at RD+ is a
        # disparity error, not a code violation
        sym, _ = lc.encode_8b10b(0x00, False, -1)
        with pytest.raises(lc.DisparityError):
            lc.decode_8b10b(sym, +1)


def bit_serial_keystream(n: int, state: int = 0xFFFF) -> bytes:
    """Naive Fibonacci-free reference: same documented Galois recipe,
    implemented independently bit by bit."""
    out = bytearray()
    for _ in range(n):
        byte = 0
        for _ in range(8):
            msb = (state >> 15) & 1
            state = (state << 1) & 0xFFFF
            if msb:
                state ^= 0x0039  # x^16 + x^5 + x^4 + x^3 + 1
            byte = (byte << 1) | msb
        out.append(byte)
    return bytes(out)


class TestScrambler:
    def test_first_keystream_byte_matches_bit_serial_reference(self):
        got, _ = lc.scramble(b"\x00", lc.ScramblerState())
        assert got == bit_serial_keystream(1)

    def test_keystream_prefix_matches_reference(self):
        got, _ = lc.scramble(b"\x00" * 300, lc.ScramblerState())
        assert got == bit_serial_keystream(300)

    def test_zero_input_yields_raw_keystream(self):
        ks, state = lc.scramble(b"\x00" * 64, lc.ScramblerState())
        data = bytes(range(64))
        mixed, state2 = lc.scramble(data, lc.ScramblerState())
        assert bytes(a ^ b for a, b in zip(ks, data)) == mixed
        assert state == state2

    @given(st.binary(min_size=0, max_size=3000),
           st.integers(min_value=1, max_value=0xFFFF))
    @settings(max_examples=60, deadline=None)
    def test_descramble_inverts_scramble(self, data, seed):
        state = lc.ScramblerState(seed)
        out, _ = lc.scramble(data, state)
        back, _ = lc.descramble(out, state)
        assert back == data

    def test_fast_path_agrees_with_byte_at_a_time(self):
        state = lc.ScramblerState()
        slow = bytearray()
        s = state
        for _ in range(500):
            b, s = lc.scramble(b"\x00", s)
            slow += b
        fast, s_fast = lc.scramble(b"\x00" * 500, state)
        assert bytes(slow) == fast
        assert s_fast == s

    def test_state_never_zero(self):
        with pytest.raises(ValueError):
            lc.ScramblerState(0)

    def test_full_period(self):
        state = 0xFFFF
        for _ in range(65535):
            _, state = lc._lfsr_step(state)
        assert state == 0xFFFF


def long_division_crc(data_bits: list[int], width: int, poly: int,
                      init: int, xorout: int) -> int:
    """Textbook bit-serial long division over GF(2), MSB-first."""
    reg = init
    top = 1 << (width - 1)
    mask = (1 << width) - 1
    for bit in data_bits:
        fb = ((reg >> (width - 1)) & 1) ^ bit
        reg = (reg << 1) & mask
        if fb:
            reg ^= poly
    return (reg ^ xorout) & mask


def reflect(v: int, width: int) -> int:
    out = 0
    for _ in range(width):
        out = (out << 1) | (v & 1)
        v >>= 1
    return out


def oracle_crc16(data: bytes) -> int:
    bits = []
    for byte in data:
        bits.extend((byte >> i) & 1 for i in range(8))  # reflected input
    return reflect(long_division_crc(bits, 16, 0x8005, 0x0000, 0x0000), 16)


def oracle_crc32(data: bytes) -> int:
    bits = []
    for byte in data:
        bits.extend((byte >> i) & 1 for i in range(8))
    return reflect(long_division_crc(bits, 32, 0x04C11DB7, 0xFFFFFFFF, 0), 32) ^ 0xFFFFFFFF


def oracle_crc5(word11: int) -> int:
    bits = [(word11 >> i) & 1 for i in range(11)]
    return reflect(long_division_crc(bits, 5, 0x05, 0x1F, 0), 5) ^ 0x1F


class TestCrc:
    def test_empty_payload_is_init_residue(self):
        assert lc.crc16_header(b"") == oracle_crc16(b"")
        assert lc.crc32_payload(b"") == oracle_crc32(b"")

    @given(st.binary(min_size=0, max_size=64))
    @settings(max_examples=80, deadline=None)
    def test_crc16_matches_long_division_oracle(self, data):
        assert lc.crc16_header(data) == oracle_crc16(data)

    @given(st.binary(min_size=0, max_size=64))
    @settings(max_examples=80, deadline=None)
    def test_crc32_matches_long_division_oracle(self, data):
        assert lc.crc32_payload(data) == oracle_crc32(data)

    def test_crc5_matches_long_division_oracle_exhaustively(self):
        for word in range(1 << 11):
            assert lc.crc5_lcw(word) == oracle_crc5(word)

    def test_crc16_detects_every_single_bit_flip_in_header(self):
        header = bytes(range(12))
        good = lc.crc16_header(header)
        for pos in range(96):
            bad = bytearray(header)
            bad[pos // 8] ^= 1 << (pos % 8)
            assert lc.crc16_header(bytes(bad)) != good

    def test_crc32_detects_every_single_bit_flip_in_payload(self):
        payload = bytes((i * 37) & 0xFF for i in range(1024))
        good = lc.crc32_payload(payload)
        data = np.frombuffer(payload, dtype=np.uint8)
        for pos in range(0, 8192):
            bad = bytearray(payload)
            bad[pos // 8] ^= 1 << (pos % 8)
            assert lc.crc32_payload(bytes(bad)) != good

    def test_crc5_detects_every_single_bit_flip(self):
        for word in (0, 0x2AA, 0x7FF, 0x123):
            good = lc.crc5_lcw(word)
            for bit in range(11):
                assert lc.crc5_lcw(word ^ (1 << bit)) != good

    def test_appended_crc_self_check(self):
        payload = b"the payload under test"
        crc = lc.crc32_payload(payload)
        assert lc.crc32_check(payload, crc)
        assert not lc.crc32_check(payload + b"x", crc)

    def test_oversize_payload_rejected(self):
        with pytest.raises(ValueError):
            lc.crc32_payload(b"\x00" * 1025)


class TestOrderedSets:
    def test_make_then_scan_detects_at_position_zero(self):
        syms1, rd = lc.ordered_set_make(lc.TS1)
        syms2, _ = lc.encode_stream(lc.ordered_set_items(lc.TS1), rd)
        stream = np.concatenate([syms1, syms2])
        assert lc.ordered_set_scan(stream) == [(lc.TS1, 0)]

    def test_block_shapes(self):
        assert len(lc.ordered_set_items(lc.TSEQ)) == 32
        assert len(lc.ordered_set_items(lc.TS1)) == 16
        assert len(lc.ordered_set_items(lc.TS2)) == 16
        for kind in lc.ORDERED_SET_KINDS:
            assert lc.ordered_set_items(kind)[0] == (lc.COMMA, True)

    def test_detection_survives_one_corrupt_block(self):
        rd = lc.RD_MINUS
        chunks = []
        for i in range(4):
            syms, rd = lc.encode_stream(lc.ordered_set_items(lc.TSEQ), rd)
            if i == 1:
                syms = syms.copy()
                syms[5] ^= 0x3FF  # destroy one symbol mid-stream
            chunks.append(syms)
        stream = np.concatenate(chunks)
        hits = lc.ordered_set_scan(stream)
        # blocks 2 and 3 are the clean consecutive pair
        assert hits == [(lc.TSEQ, 64)]

    def test_random_data_never_detects(self):
        rng = np.random.Generator(np.random.PCG64(3))
        data = [(int(b), False) for b in rng.integers(0, 256, 400)
                ]
        syms, _ = lc.encode_stream(data)
        assert lc.ordered_set_scan(syms) == []

    @given(st.integers(min_value=0, max_value=37))
    @settings(max_examples=20, deadline=None)
    def test_scan_position_invariance(self, prefix_len):
        rd = lc.RD_MINUS
        prefix, rd = lc.encode_stream([(0x55, False)] * prefix_len, rd)
        s1, rd = lc.encode_stream(lc.ordered_set_items(lc.TS2), rd)
        s2, _ = lc.encode_stream(lc.ordered_set_items(lc.TS2), rd)
        stream = np.concatenate([prefix, s1, s2])
        assert lc.ordered_set_scan(stream) == [(lc.TS2, prefix_len)]

    def test_block_and_detection_counts(self):
        rd = lc.RD_MINUS
        chunks = []
        for _ in range(6):
            syms, rd = lc.encode_stream(lc.ordered_set_items(lc.TS2), rd)
            chunks.append(syms)
        decoded, _ = lc.decode_stream(np.concatenate(chunks))
        scanner = lc.OrderedSetScanner()
        blocks, detections = scanner.feed(decoded)
        assert len(blocks) == 6
        assert len(detections) == 3  # one per two consecutive clean blocks

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError):
            lc.ordered_set_items("TS9")
