"""Scheduler, clock and channel model tests."""

import numpy as np
import pytest

from usb3sim.sim_core import (
    BIT_TIME, NS, SYMBOL_TIME, US, CausalityError, Channel, ChannelConfig,
    Scheduler, SymbolBlock,
)


def make_channel(scheduler, sink=None, **kw):
    cfg = ChannelConfig(**kw)
    return Channel(scheduler, cfg, sink or (lambda item: None))


class TestScheduler:
    def test_schedule_at_current_time_dispatches_first(self):
        s = Scheduler()
        order = []
        s.schedule(0, order.append, "now")
        s.schedule(10, order.append, "later")
        s.run_until(100)
        assert order == ["now", "later"]

    def test_equal_timestamps_dispatch_in_insertion_order(self):
        s = Scheduler()
        order = []
        h1 = s.schedule(100, order.append, "first")
        h2 = s.schedule(100, order.append, "second")
        assert h1.event.sequence < h2.event.sequence
        s.run_until(100)
        assert order == ["first", "second"]

    def test_scheduling_in_the_past_is_a_causality_violation(self):
        s = Scheduler()
        s.schedule(100, lambda: None)
        s.run_until(100)
        with pytest.raises(CausalityError, match="causality violation"):
            s.schedule(50, lambda: None)

    def test_empty_queue_advances_clock_to_deadline(self):
        s = Scheduler()
        stats = s.run_until(1 * US)
        assert stats.events_dispatched == 0
        assert stats.final_time == 1 * US
        assert s.now == 1 * US

    def test_all_events_below_deadline_dispatch(self):
        s = Scheduler()
        hits = []
        for t in (10, 20, 30):
            s.schedule(t, hits.append, t)
        stats = s.run_until(100)
        assert stats.events_dispatched == 3
        assert hits == [10, 20, 30]

    def test_event_chain_arithmetic(self):
        # 125 hops of 8 ns each land exactly on 1 us
        s = Scheduler()
        state = {"count": 0}

        def hop():
            state["count"] += 1
            if state["count"] < 125:
                s.schedule(s.now + 8 * NS, hop)

        s.schedule(8 * NS, hop)
        stats = s.run_until(2 * US, stop=lambda: state["count"] == 125)
        assert state["count"] == 125
        assert s.now == 1 * US
        assert stats.events_dispatched == 125

    def test_cancelled_events_do_not_fire(self):
        s = Scheduler()
        hits = []
        h = s.schedule(10, hits.append, "no")
        s.schedule(20, hits.append, "yes")
        h.cancel()
        s.run_until(100)
        assert hits == ["yes"]

    def test_handler_never_sees_clock_before_its_timestamp(self):
        s = Scheduler()
        seen = []

        def probe(expected):
            seen.append((expected, s.now))

        for t in (5, 15, 15, 40):
            s.schedule(t, probe, t)
        s.run_until(100)
        assert all(now == expected for expected, now in seen)


class TestChannelNoise:
    def test_zero_ber_is_identity(self):
        s = Scheduler()
        ch = make_channel(s, bit_error_rate=0.0, rng_seed=1)
        symbols = np.arange(100, dtype=np.uint16) % 1024
        out, flips = ch.corrupt_symbols(symbols)
        assert flips == 0
        assert np.array_equal(out, symbols)

    def test_ber_one_complements_every_bit(self):
        s = Scheduler()
        ch = make_channel(s, bit_error_rate=1.0, rng_seed=1)
        symbols = np.array([0, 0x3FF, 0x155], dtype=np.uint16)
        out, flips = ch.corrupt_symbols(symbols)
        assert flips == 30
        assert np.array_equal(out, symbols ^ 0x3FF)

    def test_flip_count_matches_reference_rng_replay(self):
        # the documented recipe: PCG64(seed), one uniform draw per bit,
        # flip when the draw is below the error rate
        seed, ber, n_symbols = 42, 1e-3, 10_000
        s = Scheduler()
        ch = make_channel(s, bit_error_rate=ber, rng_seed=seed)
        symbols = np.zeros(n_symbols, dtype=np.uint16)
        out, flips = ch.corrupt_symbols(symbols)

        ref = np.random.Generator(np.random.PCG64(seed))
        expected_mask = ref.random(n_symbols * 10) < ber
        assert flips == int(expected_mask.sum())
        # and the flips landed where the mask says
        weights = 1 << np.arange(9, -1, -1, dtype=np.uint16)
        expected = (expected_mask.reshape(n_symbols, 10) * weights).sum(
            axis=1).astype(np.uint16)
        assert np.array_equal(out, expected)

    def test_flip_positions_are_distinct_and_counted(self):
        s = Scheduler()
        ch = make_channel(s, bit_error_rate=0.02, rng_seed=9)
        pos = ch.draw_flip_positions(10_000)
        assert len(pos) == len(set(pos))
        assert ch.flips_injected == len(pos)
        assert all(0 <= p < 10_000 for p in pos)


class TestChannelTiming:
    def test_serialization_time_formula(self):
        # delivery = send + latency + bits x 200 ps
        s = Scheduler()
        ch = make_channel(s, latency=100 * NS)
        symbols = np.zeros(10_000, dtype=np.uint16)
        delivered, at = ch.transmit_symbols(symbols)
        assert at == 100 * NS + 10_000 * 10 * BIT_TIME
        assert np.array_equal(delivered, symbols)

    def test_back_to_back_sends_serialize(self):
        s = Scheduler()
        got = []
        ch = make_channel(s, latency=10 * NS)
        ch.sink = got.append
        b = SymbolBlock(np.zeros(5, dtype=np.uint16))
        end1 = ch.send(b)
        end2 = ch.send(b)
        assert end1 == 5 * SYMBOL_TIME
        assert end2 == 10 * SYMBOL_TIME  # waits for the line
        s.run_until(1 * US)
        assert len(got) == 2

    def test_empty_symbol_transmit_rejected(self):
        s = Scheduler()
        ch = make_channel(s)
        with pytest.raises(ValueError):
            ch.transmit_symbols(np.array([], dtype=np.uint16))

    def test_determinism_same_seed_same_noise(self):
        def run(seed):
            s = Scheduler()
            ch = make_channel(s, bit_error_rate=1e-3, rng_seed=seed)
            out, flips = ch.corrupt_symbols(np.zeros(5000, dtype=np.uint16))
            return out.tobytes(), flips

        a = run(7)
        b = run(7)
        c = run(8)
        assert a == b
        assert a != c


class TestChannelConfig:
    @pytest.mark.parametrize("kw", [
        {"latency": -1},
        {"bit_error_rate": -0.1},
        {"bit_error_rate": 1.5},
    ])
    def test_rejects_bad_values(self, kw):
        with pytest.raises(ValueError):
            ChannelConfig(**kw).validate()
