"""Shared fixtures: a bare two-ended link (no LTSSM) for link-layer tests
and the randomized exchange runner used by both the unit suite and the
acceptance suite."""

import struct

import numpy as np
import pytest

from usb3sim.harness import Tracer
from usb3sim.link_layer import LinkConfig, LinkLayer, PacketType
from usb3sim.sim_core import Channel, ChannelConfig, MS, NS, Scheduler, US


class LinkPair:
    """Two link layers wired back to back over seeded channels.

    Recovery requests are modeled as both sides re-entering U0 shortly
    after, which is what the LTSSM produces at desk scale.
    """

    def __init__(self, seed=0, ber=0.0, latency=100 * NS, credits=4,
                 pending_ack_timeout=10 * US, credit_timeout=50 * US):
        self.scheduler = Scheduler()
        tracer = Tracer(self.scheduler)
        cfg = lambda s: LinkConfig(credits=credits,
                                   pending_ack_timeout=pending_ack_timeout,
                                   credit_timeout=credit_timeout)
        ss = np.random.SeedSequence(seed).generate_state(2)
        self.ch_ab = Channel(self.scheduler,
                             ChannelConfig(latency, ber, int(ss[0])), None, "a2b")
        self.ch_ba = Channel(self.scheduler,
                             ChannelConfig(latency, ber, int(ss[1])), None, "b2a")
        self.a = LinkLayer("A", self.scheduler, self.ch_ab, cfg("a"), tracer)
        self.b = LinkLayer("B", self.scheduler, self.ch_ba, cfg("b"), tracer)
        self.ch_ab.sink = self.b.on_frame
        self.ch_ba.sink = self.a.on_frame
        self.delivered_a: list[tuple] = []
        self.delivered_b: list[tuple] = []
        self.a.deliver = lambda p, pl, ok: self.delivered_a.append((p, pl, ok))
        self.b.deliver = lambda p, pl, ok: self.delivered_b.append((p, pl, ok))
        self.recoveries = 0
        self.a.request_recovery = self._recover
        self.b.request_recovery = self._recover
        self._recovering = False

    def _recover(self):
        if self._recovering:
            return
        self._recovering = True
        self.recoveries += 1
        self.scheduler.schedule(self.scheduler.now + 2 * US, self._reenter)

    def _reenter(self):
        self._recovering = False
        self.a.on_u0(first=False)
        self.b.on_u0(first=False)

    def quiescent(self):
        return self.a.is_quiescent() and self.b.is_quiescent()

    def run_slices(self, horizon, slice_ps=5 * US, probe=None):
        """Advance in slices until quiescent; probe runs between slices."""
        deadline = self.scheduler.now + horizon
        while self.scheduler.now < deadline:
            self.scheduler.run_until(
                min(deadline, self.scheduler.now + slice_ps))
            if probe is not None:
                probe(self)
            if self.quiescent() and self.scheduler.pending == 0:
                break
        return self.quiescent()


@pytest.fixture
def link_pair():
    return LinkPair()


def fields_for(index: int) -> bytes:
    return struct.pack("<I", index) + bytes(8)


def index_of(packet) -> int:
    return struct.unpack_from("<I", packet.type_fields)[0]


def payload_for(index: int, length: int = 64) -> bytes:
    word = struct.pack("<I", index * 2654435761 % (1 << 32))
    return (word * ((length + 3) // 4))[:length]


def run_random_exchange(seed: int, max_packets: int = 32) -> dict:
    """One randomized lossy exchange; returns what each side delivered.

    Submissions happen at seeded random times in both directions; the
    channel corrupts at a seeded random error rate.  The reference model
    for a reliable in-order link is simply the submission order.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    ber = float(rng.choice([0.0, 1e-5, 1e-4, 1e-3, 5e-3]))
    pair = LinkPair(seed=seed + 1, ber=ber)
    n_ab = int(rng.integers(1, max_packets + 1))
    n_ba = int(rng.integers(0, max_packets + 1))
    credit_extremes = {"lo": 99, "hi": -1}
    submitted_ab: list[int] = []
    submitted_ba: list[int] = []

    def submit(link, idx, log):
        log.append(idx)
        if rng.random() < 0.5:
            link.submit(PacketType.DATA_HEADER, fields_for(idx),
                        payload_for(idx))
        else:
            link.submit(PacketType.TRANSACTION, fields_for(idx))

    for idx in range(n_ab):
        at = int(rng.integers(0, 200 * US))
        pair.scheduler.schedule(at, submit, pair.a, idx, submitted_ab)
    for idx in range(n_ba):
        at = int(rng.integers(0, 200 * US))
        pair.scheduler.schedule(at, submit, pair.b, idx, submitted_ba)

    def probe(p):
        for link in (p.a, p.b):
            credit_extremes["lo"] = min(credit_extremes["lo"],
                                        link.remote_credits)
            credit_extremes["hi"] = max(credit_extremes["hi"],
                                        link.remote_credits)
            assert 0 <= link.remote_credits <= 4
            assert link.retry_depth <= 4

    finished = pair.run_slices(horizon=400 * MS, probe=probe)
    return {
        "pair": pair,
        "ber": ber,
        "finished": finished,
        "submitted_ab": submitted_ab,
        "submitted_ba": submitted_ba,
        "got_b": [index_of(p) for p, _, _ in pair.delivered_b],
        "got_a": [index_of(p) for p, _, _ in pair.delivered_a],
        "credits": credit_extremes,
    }
