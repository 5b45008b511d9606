"""Deterministic discrete-event core for a dual-simplex serial link.

Simulated time is an integer count of picoseconds, so one line bit at
5 Gb/s is exactly 200 ps and every LFPS window, timeout and serialization
delay reduces to exact integer arithmetic.  A single scheduler drives both
link partners; all randomness comes from per-channel PCG64 generators
seeded from the scenario configuration, which makes any run repeatable
bit-for-bit.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass

import numpy as np

# One simulated tick is one picosecond.
PS = 1
NS = 1_000
US = 1_000_000
MS = 1_000_000_000
SECOND = 1_000_000_000_000

BIT_TIME = 200                        # ps per line bit at 5 Gb/s
SYMBOL_BITS = 10
SYMBOL_TIME = SYMBOL_BITS * BIT_TIME  # 2 ns per 10-bit symbol
WORD_SYMBOLS = 4
WORD_TIME = WORD_SYMBOLS * SYMBOL_TIME  # 8 ns per 40-bit transceiver word


def fmt_time(ps: int) -> str:
    """Render a picosecond count in the most readable unit."""
    if ps >= MS:
        return f"{ps / MS:.6g} ms"
    if ps >= US:
        return f"{ps / US:.6g} us"
    if ps >= NS:
        return f"{ps / NS:.6g} ns"
    return f"{ps} ps"


class CausalityError(RuntimeError):
    """An event was scheduled before the current simulated time."""


@dataclass(frozen=True, slots=True)
class SimEvent:
    """A scheduled callback: fires at `at`, FIFO among equal timestamps."""

    at: int
    target: str
    payload: object
    sequence: int


@dataclass(slots=True)
class RunStats:
    events_dispatched: int
    final_time: int


class EventHandle:
    """Returned by Scheduler.schedule; supports cancellation."""

    __slots__ = ("event", "fn", "args", "cancelled")

    def __init__(self, event: SimEvent, fn, args):
        self.event = event
        self.fn = fn
        self.args = args
        self.cancelled = False

    def cancel(self) -> None:
        self.cancelled = True


class Scheduler:
    """Single global event queue shared by both link partners.

    Ties are broken by insertion sequence so that two runs with the same
    configuration dispatch events in the same order.
    """

    def __init__(self):
        self._now = 0
        self._heap: list[tuple[int, int, EventHandle]] = []
        self._seq = 0
        self._dispatched = 0

    @property
    def now(self) -> int:
        return self._now

    @property
    def pending(self) -> int:
        return sum(1 for _, _, h in self._heap if not h.cancelled)

    def schedule(self, at: int, fn, *args, target: str = "") -> EventHandle:
        if at < self._now:
            raise CausalityError(
                f"causality violation: schedule at {at} ps with clock at {self._now} ps"
            )
        handle = EventHandle(SimEvent(at, target, args, self._seq), fn, args)
        heapq.heappush(self._heap, (at, self._seq, handle))
        self._seq += 1
        return handle

    def schedule_event(self, event: SimEvent) -> EventHandle:
        """Queue a pre-built event whose payload is a zero-argument callable."""
        return self.schedule(event.at, event.payload, target=event.target)

    def run_until(self, deadline: int, stop=None) -> RunStats:
        """Dispatch every event with `at` <= deadline, then set the clock to it.

        `stop` is an optional predicate polled after each dispatch; when it
        returns true the loop ends early with the clock at the last event.
        """
        dispatched = 0
        heap = self._heap
        while heap:
            at, _, handle = heap[0]
            if at > deadline:
                break
            heapq.heappop(heap)
            if handle.cancelled:
                continue
            self._now = at
            handle.fn(*handle.args)
            dispatched += 1
            if stop is not None and stop():
                self._dispatched += dispatched
                return RunStats(dispatched, self._now)
        self._now = max(self._now, deadline)
        self._dispatched += dispatched
        return RunStats(dispatched, self._now)


@dataclass(frozen=True, slots=True)
class ChannelConfig:
    """One direction of the serial medium.

    `bit_error_rate` flips each transmitted line bit independently; the
    PCG64 stream seeded by `rng_seed` makes the corruption repeatable.
    """

    latency: int = 100 * NS
    bit_error_rate: float = 0.0
    rng_seed: int = 0

    def validate(self) -> None:
        if self.latency < 0:
            raise ValueError("channel latency must be non-negative")
        if not (0.0 <= self.bit_error_rate <= 1.0):
            raise ValueError("bit_error_rate must lie in [0, 1]")


@dataclass(frozen=True, slots=True)
class SymbolBlock:
    """A contiguous run of 10-bit line symbols (one ordered set, usually)."""

    symbols: np.ndarray  # uint16, values < 1024
    label: str = ""

    @property
    def n_symbols(self) -> int:
        return int(self.symbols.size)

    def corrupted_by(self, channel: "Channel") -> "SymbolBlock":
        out, flips = channel.corrupt_symbols(self.symbols)
        if flips == 0:
            return self
        return SymbolBlock(out, self.label)


# Line occupancy markers for sub-rate signaling (LFPS), which carries no
# symbols: the receiver only observes when its squelch detector opens/closes.
@dataclass(frozen=True, slots=True)
class ActivityStart:
    detail: object


@dataclass(frozen=True, slots=True)
class ActivityEnd:
    detail: object


class Channel:
    """Serializer + delay line + bit-error injector for one direction.

    Transmissions occupy the line back-to-back: a new item starts no
    earlier than the end of the previous one.  Delivery happens at
    serialization end plus the configured flight latency.
    """

    def __init__(self, scheduler: Scheduler, config: ChannelConfig, sink, name: str = "channel"):
        config.validate()
        self.scheduler = scheduler
        self.cfg = config
        self.sink = sink
        self.name = name
        self.rng = np.random.Generator(np.random.PCG64(config.rng_seed))
        self.busy_until = 0
        self.flips_injected = 0
        self.items_sent = 0

    # -- noise ------------------------------------------------------------

    def corrupt_symbols(self, symbols: np.ndarray) -> tuple[np.ndarray, int]:
        """Flip each of the 10 bits per symbol independently with p = BER."""
        a = np.asarray(symbols, dtype=np.uint16)
        ber = self.cfg.bit_error_rate
        if ber <= 0.0:
            return a, 0
        if ber >= 1.0:
            self.flips_injected += a.size * SYMBOL_BITS
            return a ^ np.uint16(0x3FF), a.size * SYMBOL_BITS
        mask = self.rng.random(a.size * SYMBOL_BITS) < ber
        flips = int(mask.sum())
        if flips == 0:
            return a, 0
        self.flips_injected += flips
        weights = (1 << np.arange(SYMBOL_BITS - 1, -1, -1, dtype=np.uint16))
        xor = (mask.reshape(a.size, SYMBOL_BITS) * weights).sum(axis=1).astype(np.uint16)
        return a ^ xor, flips

    def draw_flip_positions(self, n_bits: int) -> tuple[int, ...]:
        """Bit positions hit by noise in an n_bits transmission.

        Sampling a Binomial(n, BER) count and then distinct uniform positions
        is distribution-identical to per-bit Bernoulli draws but costs O(1)
        RNG work on clean frames, which dominate at desk-scale error rates.
        """
        ber = self.cfg.bit_error_rate
        if ber <= 0.0:
            return ()
        if ber >= 1.0:
            self.flips_injected += n_bits
            return tuple(range(n_bits))
        k = int(self.rng.binomial(n_bits, ber))
        if k == 0:
            return ()
        hit: set[int] = set()
        while len(hit) < k:
            hit.add(int(self.rng.integers(n_bits)))
        self.flips_injected += k
        return tuple(sorted(hit))

    # -- transport ---------------------------------------------------------

    def send(self, item, now: int | None = None) -> int:
        """Serialize `item` (anything with n_symbols/corrupted_by), deliver later.

        Returns the serialization-end time on the transmit side.
        """
        t = self.scheduler.now if now is None else now
        start = max(t, self.busy_until)
        end = start + item.n_symbols * SYMBOL_TIME
        self.busy_until = end
        delivered = item if self.cfg.bit_error_rate <= 0.0 else item.corrupted_by(self)
        self.scheduler.schedule(end + self.cfg.latency, self.sink, delivered,
                                target=self.name)
        self.items_sent += 1
        return end

    def send_activity(self, duration: int, detail: object, now: int | None = None) -> tuple[int, int]:
        """Occupy the line with sub-rate signaling for `duration`.

        The far end receives ActivityStart/ActivityEnd markers; no symbol
        content travels, so the bit-error process does not apply.
        """
        t = self.scheduler.now if now is None else now
        start = max(t, self.busy_until)
        end = start + duration
        self.busy_until = end
        self.scheduler.schedule(start + self.cfg.latency, self.sink,
                                ActivityStart(detail), target=self.name)
        self.scheduler.schedule(end + self.cfg.latency, self.sink,
                                ActivityEnd(detail), target=self.name)
        return start, end

    def transmit_symbols(self, symbols, now: int | None = None) -> tuple[np.ndarray, int]:
        """One-shot symbol transport: returns (delivered symbols, delivery time).

        Delivery time is serialization start + bits x 200 ps + latency.
        """
        a = np.asarray(symbols, dtype=np.uint16)
        if a.size == 0:
            raise ValueError("symbol sequence must be non-empty")
        t = self.scheduler.now if now is None else now
        start = max(t, self.busy_until)
        end = start + a.size * SYMBOL_TIME
        self.busy_until = end
        delivered, _ = self.corrupt_symbols(a)
        return delivered, end + self.cfg.latency
