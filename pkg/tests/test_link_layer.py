"""Link layer: sequencing, credits, acknowledgment, retry, integrity."""

import pytest

from conftest import LinkPair, fields_for, index_of, payload_for, run_random_exchange
from usb3sim import line_coding as lc
from usb3sim.link_layer import (
    DPP_OVERHEAD, HP_SYMBOLS, LC_SYMBOLS, Garble, HeaderFrame, HeaderPacket,
    LinkCommand, LinkCommandKind, LinkCommandFrame, PacketType, PayloadFrame,
    link_command_frame, make_header_packet, wire_image,
)
from usb3sim.sim_core import MS, US


class TestHeaderPacket:
    def test_crc_fields_are_consistent(self):
        pkt = make_header_packet(3, PacketType.TRANSACTION, bytes(range(12)))
        assert pkt.body_ok() and pkt.lcw_ok()
        assert pkt.link_control_word & 0x7 == 3

    def test_bad_body_length_rejected(self):
        with pytest.raises(ValueError):
            make_header_packet(0, PacketType.TRANSACTION, bytes(11))

    def test_link_command_word_round_trip(self):
        for cmd in (LinkCommand(LinkCommandKind.LGOOD, 5),
                    LinkCommand(LinkCommandKind.LCRD, 2),
                    LinkCommand(LinkCommandKind.LBAD),
                    LinkCommand(LinkCommandKind.LRTY)):
            assert LinkCommand.from_word(cmd.word) == cmd


class TestWireImage:
    def test_header_frame_symbol_count_matches_timing_model(self):
        pkt = make_header_packet(0, PacketType.TRANSACTION, bytes(12))
        frame = HeaderFrame(pkt)
        symbols, _, _ = wire_image(frame)
        assert len(symbols) == frame.n_symbols == HP_SYMBOLS

    def test_payload_frame_symbol_count_matches_timing_model(self):
        for n in (1, 17, 1024):
            data = bytes(range(n % 251)) * 5
            data = data[:n] if len(data) >= n else data + bytes(n - len(data))
            frame = PayloadFrame(data, lc.crc32_payload(data))
            symbols, _, _ = wire_image(frame)
            assert len(symbols) == frame.n_symbols == n + DPP_OVERHEAD

    def test_link_command_symbol_count_matches_timing_model(self):
        frame = link_command_frame(LinkCommand(LinkCommandKind.LGOOD, 1))
        symbols, _, _ = wire_image(frame)
        assert len(symbols) == frame.n_symbols == LC_SYMBOLS

    def test_wire_symbols_are_all_legal_code_points(self):
        pkt = make_header_packet(5, PacketType.DATA_HEADER, bytes(range(12)))
        symbols, _, _ = wire_image(HeaderFrame(pkt))
        rd = lc.RD_MINUS
        for s in symbols:
            _, _, rd = lc.decode_8b10b(s, rd)


class TestSequencingAndCredits:
    def test_first_packet_has_seq_zero(self, link_pair):
        link_pair.a.submit(PacketType.TRANSACTION, fields_for(0))
        link_pair.run_slices(1 * MS)
        assert [p.seq for p, _, _ in link_pair.delivered_b] == [0]

    def test_credit_exhaustion_queues_fifth_packet(self):
        pair = LinkPair()
        pair.ch_ab.sink = lambda item: None  # partner never acknowledges
        for i in range(5):
            pair.a.submit(PacketType.TRANSACTION, fields_for(i))
        assert pair.a.counters.tx_headers == 4
        assert pair.a.retry_depth == 4
        assert pair.a.remote_credits == 0
        assert len(pair.a._queue) == 1

    def test_ninth_packet_wraps_to_seq_zero(self, link_pair):
        for i in range(9):
            link_pair.a.submit(PacketType.TRANSACTION, fields_for(i))
        assert link_pair.run_slices(5 * MS)
        seqs = [p.seq for p, _, _ in link_pair.delivered_b]
        assert seqs == [0, 1, 2, 3, 4, 5, 6, 7, 0]

    def test_lgood_pops_buffer_but_credit_waits_for_lcrd(self):
        pair = LinkPair()
        pair.ch_ab.sink = lambda item: None
        pair.a.submit(PacketType.TRANSACTION, fields_for(0))
        assert pair.a.retry_depth == 1
        assert pair.a.remote_credits == 3
        pair.a._rx_link_command(link_command_frame(
            LinkCommand(LinkCommandKind.LGOOD, 0)))
        assert pair.a.retry_depth == 0
        assert pair.a.remote_credits == 3  # still held
        pair.a._rx_link_command(link_command_frame(
            LinkCommand(LinkCommandKind.LCRD, 0)))
        assert pair.a.remote_credits == 4

    def test_lcrd_with_full_credits_counts_violation(self, link_pair):
        a = link_pair.a
        assert a.remote_credits == 4
        a._rx_link_command(link_command_frame(
            LinkCommand(LinkCommandKind.LCRD, 0)))
        assert a.remote_credits == 4
        assert a.counters.violations == 1

    def test_out_of_order_lgood_counts_violation(self):
        pair = LinkPair()
        pair.ch_ab.sink = lambda item: None
        for i in range(3):
            pair.a.submit(PacketType.TRANSACTION, fields_for(i))
        pair.a._rx_link_command(link_command_frame(
            LinkCommand(LinkCommandKind.LGOOD, 2)))  # head is 0
        assert pair.a.counters.violations == 1
        assert pair.a.retry_depth == 3


class TestErrorSignaling:
    def test_corrupted_crc16_triggers_lbad_and_no_lgood(self):
        pair = LinkPair()
        pkt = make_header_packet(0, PacketType.TRANSACTION, fields_for(0))
        bad = HeaderPacket(pkt.seq, pkt.packet_type, pkt.type_fields,
                           pkt.crc16 ^ 1, pkt.link_control_word, pkt.crc5)
        pair.b.on_frame(HeaderFrame(bad))
        assert pair.b.counters.crc16_fail == 1
        assert pair.b.counters.lbad_sent == 1
        assert pair.b.counters.lgood_sent == 0
        assert pair.delivered_b == []

    def test_lbad_causes_lrty_and_in_order_retransmission(self):
        pair = LinkPair()
        sent = []
        pair.ch_ab.sink = lambda item: None
        pair.ch_ab.send = lambda item, now=None: sent.append(item) or 0
        payloads = [payload_for(i) for i in range(3)]
        for i in range(3):
            pair.a.submit(PacketType.DATA_HEADER, fields_for(i), payloads[i])
        del sent[:]
        pair.a._rx_link_command(link_command_frame(
            LinkCommand(LinkCommandKind.LBAD)))
        kinds = [type(f).__name__ for f in sent]
        assert kinds[0] == "LinkCommandFrame"  # the retry marker
        assert LinkCommand.from_word(sent[0].word).kind is LinkCommandKind.LRTY
        headers = [f.packet.seq for f in sent if isinstance(f, HeaderFrame)]
        assert headers == [0, 1, 2]
        resent_payloads = [f.payload for f in sent
                           if isinstance(f, PayloadFrame)]
        assert resent_payloads == payloads  # retry buffer is immutable
        assert pair.a.counters.link_retries == 3
        assert pair.a.counters.lrty_sent == 1

    def test_duplicate_after_retry_dropped_and_relgooded(self):
        pair = LinkPair()
        pkt = make_header_packet(0, PacketType.TRANSACTION, fields_for(0))
        pair.b.on_frame(HeaderFrame(pkt))
        assert len(pair.delivered_b) == 1
        pair.b.on_frame(HeaderFrame(pkt))  # retry race duplicate
        assert len(pair.delivered_b) == 1
        assert pair.b.counters.dup_headers == 1
        assert pair.b.counters.lgood_sent == 2
        assert pair.b.counters.lcrd_sent == 1  # no second credit

    def test_skipped_sequence_is_lbad(self):
        # expecting 0, seq 2 arrives: 0 and 1 were lost in flight
        pair = LinkPair()
        pkt = make_header_packet(2, PacketType.TRANSACTION, fields_for(0))
        pair.b.on_frame(HeaderFrame(pkt))
        assert pair.b.counters.seq_errors == 1
        assert pair.b.counters.lbad_sent == 1

    def test_window_behind_sequence_is_treated_as_duplicate(self):
        # anything up to `credits` behind the expectation is a retry echo
        pair = LinkPair()
        pkt = make_header_packet(6, PacketType.TRANSACTION, fields_for(0))
        pair.b.on_frame(HeaderFrame(pkt))
        assert pair.b.counters.dup_headers == 1
        assert pair.delivered_b == []

    def test_drop_mode_holds_until_lrty(self):
        pair = LinkPair()
        bad = make_header_packet(2, PacketType.TRANSACTION, fields_for(9))
        pair.b.on_frame(HeaderFrame(bad))          # skipped sequence: LBAD
        good = make_header_packet(0, PacketType.TRANSACTION, fields_for(1))
        pair.b.on_frame(HeaderFrame(good))         # dropped in drop mode
        assert pair.delivered_b == []
        assert pair.b.counters.dropped_in_drop_mode == 1
        pair.b.on_frame(link_command_frame(LinkCommand(LinkCommandKind.LRTY)))
        pair.b.on_frame(HeaderFrame(good))
        assert [index_of(p) for p, _, _ in pair.delivered_b] == [1]

    def test_orphan_payload_discarded_silently(self):
        pair = LinkPair()
        frame = PayloadFrame(b"abc", lc.crc32_payload(b"abc"))
        pair.b.on_frame(frame)
        assert pair.b.counters.orphan_payloads == 1
        assert pair.delivered_b == []

    def test_garbled_payload_reports_failure_upward(self):
        pair = LinkPair()
        pkt = make_header_packet(0, PacketType.DATA_HEADER, fields_for(0))
        pair.b.on_frame(HeaderFrame(pkt))
        assert pair.delivered_b == []  # payload still pending
        pair.b.on_frame(Garble(100, "payload"))
        assert len(pair.delivered_b) == 1
        _, payload, ok = pair.delivered_b[0]
        assert payload is None and not ok

    def test_bad_payload_crc_reports_failure_upward(self):
        pair = LinkPair()
        pkt = make_header_packet(0, PacketType.DATA_HEADER, fields_for(0))
        pair.b.on_frame(HeaderFrame(pkt))
        pair.b.on_frame(PayloadFrame(b"abc", 0xDEADBEEF))
        (_, payload, ok), = pair.delivered_b
        assert payload is None and not ok
        assert pair.b.counters.payload_crc_fail == 1


class TestTimers:
    def test_lost_lgood_recovers_via_ack_timeout(self):
        # B acknowledges but every link command toward A is dropped once
        pair = LinkPair()
        dropped = {"n": 0}
        orig = pair.ch_ba.send

        def lossy(item, now=None):
            if isinstance(item, LinkCommandFrame) and dropped["n"] < 2:
                dropped["n"] += 1
                return pair.scheduler.now
            return orig(item, now)

        pair.ch_ba.send = lossy
        pair.a.submit(PacketType.TRANSACTION, fields_for(7))
        assert pair.run_slices(5 * MS)
        assert [index_of(p) for p, _, _ in pair.delivered_b] == [7]
        assert pair.a.counters.link_retries >= 1
        assert pair.b.counters.dup_headers >= 1

    def test_credit_starvation_requests_recovery(self):
        pair = LinkPair()
        # swallow LCRDs permanently: credits can never return
        orig = pair.ch_ba.send

        def no_credits(item, now=None):
            if isinstance(item, LinkCommandFrame):
                cmd = LinkCommand.from_word(item.word)
                if cmd and cmd.kind is LinkCommandKind.LCRD:
                    return pair.scheduler.now
            return orig(item, now)

        pair.ch_ba.send = no_credits
        for i in range(8):
            pair.a.submit(PacketType.TRANSACTION, fields_for(i))
        pair.run_slices(2 * MS)
        assert pair.recoveries >= 1
        assert pair.a.counters.recoveries_requested >= 1
        # recovery restored credits, so everything still got through
        assert [index_of(p) for p, _, _ in pair.delivered_b] == list(range(8))


class TestRandomizedExchanges:
    """Spot volume here; the acceptance suite runs the full thousand."""

    @pytest.mark.parametrize("seed", range(40))
    def test_exactly_once_in_order(self, seed):
        out = run_random_exchange(seed)
        assert out["finished"], f"exchange stuck at ber={out['ber']}"
        assert out["got_b"] == out["submitted_ab"]
        assert out["got_a"] == out["submitted_ba"]
        assert 0 <= out["credits"]["lo"] <= out["credits"]["hi"] <= 4

    def test_valid_payloads_always_carry_original_bytes(self):
        # headers arrive exactly once; payload retry on corruption belongs
        # to the protocol layer, but whatever passes CRC must be pristine
        pair = LinkPair(seed=5, ber=1e-3)
        payloads = {i: payload_for(i, 128) for i in range(24)}
        for i, data in payloads.items():
            pair.a.submit(PacketType.DATA_HEADER, fields_for(i), data)
        assert pair.run_slices(200 * MS)
        headers = [index_of(p) for p, _, _ in pair.delivered_b]
        assert headers == list(range(24))
        for p, pl, ok in pair.delivered_b:
            if ok:
                assert pl == payloads[index_of(p)]
