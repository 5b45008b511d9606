"""Link Training and Status State Machine for both link partners.

The high-level flow is receiver detect, LFPS polling handshake, TSEQ
equalizer training, TS1/TS2 handshake, then U0 operation with U1/U2
low-power excursions (exit via LFPS and a short Recovery re-handshake) and
warm reset.  The (state, event) -> (state, actions) map is a plain dict so
its determinism and totality can be checked by enumeration; anything not in
the map is ignored and trace-logged, the way hardware shrugs off stray
events from an asynchronous partner.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

from . import line_coding as lc
from .phy_model import LfpsKind, Phy
from .sim_core import MS, US, Scheduler


class LtssmState(enum.Enum):
    RX_DETECT = "RxDetect"
    POLLING_LFPS = "Polling.LFPS"
    POLLING_TSEQ = "Polling.TSEQ"
    POLLING_TS1TS2 = "Polling.TS1TS2"
    U0 = "U0"
    U1 = "U1"
    U2 = "U2"
    RECOVERY = "Recovery"
    RESET = "Reset"


class Action(enum.Enum):
    START_DETECT = enum.auto()
    SCHEDULE_DETECT_RETRY = enum.auto()
    START_POLLING_LFPS = enum.auto()
    STOP_LFPS = enum.auto()
    DATA_ON = enum.auto()
    DATA_OFF = enum.auto()
    SEND_TSEQ_BURST = enum.auto()
    START_TS_HANDSHAKE = enum.auto()
    START_RECOVERY_HANDSHAKE = enum.auto()
    ENTER_U0 = enum.auto()
    ENTER_LOW_POWER = enum.auto()
    SEND_WAKE_LFPS = enum.auto()
    ANSWER_WAKE = enum.auto()
    ARM_WAKE_TIMEOUT = enum.auto()
    SEND_RESET_LFPS = enum.auto()
    RESET_SETTLE = enum.auto()
    LINK_RESET = enum.auto()


@dataclass(frozen=True, slots=True)
class LtssmEvent:
    kind: str
    arg: object
    at: int


S = LtssmState
A = Action

# (state, (event kind, discriminant)) -> (next state, actions).  Events carry
# the simulated time of their cause; discriminants are the payload values the
# transition depends on.
TRANSITIONS: dict[tuple[LtssmState, tuple], tuple[LtssmState, tuple[Action, ...]]] = {
    (S.RX_DETECT, ("phystatus", True)): (S.POLLING_LFPS, (A.START_POLLING_LFPS,)),
    (S.RX_DETECT, ("phystatus", False)): (S.RX_DETECT, (A.SCHEDULE_DETECT_RETRY,)),
    (S.RX_DETECT, ("timeout", "detect_retry")): (S.RX_DETECT, (A.START_DETECT,)),

    (S.POLLING_LFPS, ("lfps", LfpsKind.POLLING)): (
        S.POLLING_TSEQ, (A.STOP_LFPS, A.DATA_ON, A.SEND_TSEQ_BURST)),
    (S.POLLING_LFPS, ("timeout", "training")): (
        S.RX_DETECT, (A.STOP_LFPS, A.START_DETECT)),

    (S.POLLING_TSEQ, ("tseq_done", None)): (S.POLLING_TS1TS2, (A.START_TS_HANDSHAKE,)),
    (S.POLLING_TSEQ, ("timeout", "training")): (S.RX_DETECT, (A.DATA_OFF, A.START_DETECT)),

    (S.POLLING_TS1TS2, ("handshake", None)): (S.U0, (A.ENTER_U0,)),
    (S.POLLING_TS1TS2, ("timeout", "training")): (S.RX_DETECT, (A.DATA_OFF, A.START_DETECT)),

    (S.U0, ("go_low_power", "U1")): (S.U1, (A.ENTER_LOW_POWER,)),
    (S.U0, ("go_low_power", "U2")): (S.U2, (A.ENTER_LOW_POWER,)),
    (S.U0, ("set_detected", lc.TS1)): (S.RECOVERY, (A.START_RECOVERY_HANDSHAKE,)),
    (S.U0, ("recovery_request", None)): (S.RECOVERY, (A.START_RECOVERY_HANDSHAKE,)),
    # Partner fell back to Rx.Detect and is polling again: retrain from scratch.
    (S.U0, ("lfps", LfpsKind.POLLING)): (
        S.RX_DETECT, (A.DATA_OFF, A.LINK_RESET, A.START_DETECT)),

    (S.U1, ("wake", None)): (S.U1, (A.SEND_WAKE_LFPS, A.ARM_WAKE_TIMEOUT)),
    (S.U1, ("lfps", LfpsKind.U1_EXIT)): (
        S.RECOVERY, (A.ANSWER_WAKE, A.START_RECOVERY_HANDSHAKE)),
    (S.U1, ("lfps", LfpsKind.U1_WAKEUP)): (
        S.RECOVERY, (A.ANSWER_WAKE, A.START_RECOVERY_HANDSHAKE)),
    (S.U1, ("timeout", "wake")): (S.RESET, (A.DATA_OFF, A.SEND_RESET_LFPS)),

    (S.U2, ("wake", None)): (S.U2, (A.SEND_WAKE_LFPS, A.ARM_WAKE_TIMEOUT)),
    (S.U2, ("lfps", LfpsKind.U2_EXIT)): (
        S.RECOVERY, (A.ANSWER_WAKE, A.START_RECOVERY_HANDSHAKE)),
    (S.U2, ("timeout", "wake")): (S.RESET, (A.DATA_OFF, A.SEND_RESET_LFPS)),

    (S.RECOVERY, ("handshake", None)): (S.U0, (A.ENTER_U0,)),
    (S.RECOVERY, ("timeout", "training")): (
        S.RX_DETECT, (A.DATA_OFF, A.LINK_RESET, A.START_DETECT)),

    (S.RESET, ("reset_burst_done", None)): (S.RX_DETECT, (A.LINK_RESET, A.START_DETECT)),
}

# Warm reset is reachable from every state, both self-initiated and on
# seeing the partner's reset LFPS.
for _state in S:
    TRANSITIONS.setdefault(
        (_state, ("reset_request", None)),
        (S.RESET, (A.STOP_LFPS, A.DATA_OFF, A.SEND_RESET_LFPS)))
    if _state is not S.RESET:
        TRANSITIONS.setdefault(
            (_state, ("lfps", LfpsKind.RESET)),
            (S.RESET, (A.STOP_LFPS, A.DATA_OFF, A.LINK_RESET, A.RESET_SETTLE)))


def transition(state: LtssmState, event_key: tuple) -> tuple[LtssmState, tuple[Action, ...]]:
    """Pure transition map; unknown events keep the state with no actions."""
    return TRANSITIONS.get((state, event_key), (state, ()))


# Which LFPS kinds make sense in each state; used to disambiguate
# overlapping timing windows during classification.
EXPECTED_LFPS: dict[LtssmState, tuple[LfpsKind, ...]] = {
    S.RX_DETECT: (LfpsKind.POLLING, LfpsKind.RESET),
    S.POLLING_LFPS: (LfpsKind.POLLING, LfpsKind.RESET),
    S.POLLING_TSEQ: (LfpsKind.POLLING, LfpsKind.RESET),
    S.POLLING_TS1TS2: (LfpsKind.POLLING, LfpsKind.RESET),
    S.U0: (LfpsKind.PING, LfpsKind.RESET, LfpsKind.POLLING),
    S.U1: (LfpsKind.U1_EXIT, LfpsKind.U1_WAKEUP, LfpsKind.RESET),
    S.U2: (LfpsKind.U2_EXIT, LfpsKind.RESET),
    S.RECOVERY: (LfpsKind.RESET,),
    S.RESET: (LfpsKind.RESET,),
}

_WAKE_KIND = {S.U1: LfpsKind.U1_EXIT, S.U2: LfpsKind.U2_EXIT}

RESET_SETTLE_DELAY = 1 * US


@dataclass(slots=True)
class LtssmConfig:
    tseq_count: int = 64
    ts2_count: int = 8
    recovery_ts2_count: int = 2
    training_timeout: int = 2 * MS
    wake_timeout: int = 2 * MS
    detect_retry: int = 100 * US

    def validate(self) -> None:
        for name in ("tseq_count", "ts2_count", "recovery_ts2_count"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("training_timeout", "wake_timeout", "detect_retry"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


class Ltssm:
    """One link partner's training state machine, driving its PHY.

    Hooks (wired by the owner):
      on_u0(first_entry: bool)   -- U0 (re-)entered
      on_low_power()             -- U1/U2 entered
      on_link_reset()            -- link-layer state must fully reset
    """

    def __init__(self, side: str, scheduler: Scheduler, phy: Phy,
                 config: LtssmConfig, tracer):
        config.validate()
        self.side = side
        self.scheduler = scheduler
        self.phy = phy
        self.cfg = config
        self.tracer = tracer

        self.state = S.RX_DETECT
        self.entered_at = 0
        self.u0_entries = 0
        self.time_to_first_u0: int | None = None
        self.tseq_sent_total = 0

        self.on_u0 = None
        self.on_low_power = None
        self.on_link_reset = None

        self._timers: dict[str, object] = {}
        self._ignored_events = 0
        self._prev_state = S.RX_DETECT
        self._polling_seen = 0
        # training sequencer counters; reset on every transition
        self._tseq_sent = 0
        self._ts_phase = ""          # "", "TS1", "TS2"
        self._ts2_sent = 0
        self._ts2_seen = 0
        self._ts_target = 0
        self._ts_tail: int | None = None
        self._ts_partner_seen = False
        self._wake_burst_sent = False

        phy.on_phystatus = self._on_phystatus
        phy.on_lfps = self._on_lfps
        phy.on_lfps_tx_done = self._on_lfps_tx_done
        phy.on_set_block = self._on_set_block
        phy.on_set_detection = self._on_set_detection

    # -- public surface ------------------------------------------------------

    @property
    def in_u0(self) -> bool:
        return self.state is S.U0

    @property
    def data_allowed(self) -> bool:
        return self.state is S.U0

    def start(self) -> None:
        """Begin bring-up from Rx.Detect."""
        self._act_start_detect()

    def inject(self, kind: str, arg: object = None) -> None:
        self._step(kind, arg)

    def request_low_power(self, target: str, quiescent: bool) -> bool:
        """U1/U2 entry; refused unless the link layer reports itself idle."""
        if self.state is not S.U0:
            return False
        if not quiescent:
            self.tracer.emit(self.side, "ltssm", "low_power_refused", target=target)
            return False
        self._step("go_low_power", target)
        return True

    def request_wake(self) -> bool:
        if self.state not in (S.U1, S.U2):
            return False
        self._step("wake", None)
        return True

    def request_reset(self) -> None:
        self._step("reset_request", None)

    def request_recovery(self) -> None:
        self._step("recovery_request", None)

    # -- PHY receive glue -----------------------------------------------------

    def line_activity_start(self, detail) -> None:
        self.phy.line_activity_start(detail)

    def line_activity_end(self, detail) -> None:
        # classification runs against what this state expects
        self.phy.line_activity_end(detail, EXPECTED_LFPS[self.state])

    def _on_lfps(self, kind: LfpsKind | None, duration: int, repeat: int | None) -> None:
        if kind is None:
            return  # unrecognized bursts are ignored by rule
        if kind is LfpsKind.POLLING and self.state is S.POLLING_LFPS:
            # Polling detection completes after two bursts, and we keep
            # polling a few repeat intervals more so a late-starting partner
            # is guaranteed to see our bursts too.
            self._polling_seen += 1
            if self._polling_seen == 2:
                guard = 4 * self.phy.table[LfpsKind.POLLING].t_repeat_normal
                self.scheduler.schedule(
                    self.scheduler.now + guard, self._polling_detected,
                    self.entered_at, target=f"{self.side}.ltssm")
            return
        self._step("lfps", kind)

    def _polling_detected(self, entered_at: int) -> None:
        if self.state is S.POLLING_LFPS and self.entered_at == entered_at:
            self._step("lfps", LfpsKind.POLLING)

    def _on_phystatus(self, present: bool) -> None:
        self._step("phystatus", present)

    def _on_lfps_tx_done(self, kind: LfpsKind) -> None:
        if kind is LfpsKind.RESET:
            self._step("reset_burst_done", None)

    # -- event core -------------------------------------------------------------

    def _step(self, kind: str, arg: object) -> None:
        event = LtssmEvent(kind, arg, self.scheduler.now)
        key = (self.state, (kind, arg))
        hit = TRANSITIONS.get(key)
        if hit is None:
            self._ignored_events += 1
            self.tracer.emit(self.side, "ltssm", "ignored_event",
                             state=self.state.value, event=kind,
                             arg=getattr(arg, "value", arg))
            return
        new_state, actions = hit
        old = self.state
        if new_state is not old:
            self._prev_state = old
            self._enter(new_state, event)
        self.tracer.emit(self.side, "ltssm", "transition",
                         old=old.value, event=kind,
                         arg=getattr(arg, "value", arg), new=new_state.value)
        for action in actions:
            self._ACTIONS[action](self, arg)

    def _enter(self, new_state: LtssmState, event: LtssmEvent) -> None:
        self.state = new_state
        self.entered_at = event.at
        self._tseq_sent = 0
        self._ts_phase = ""
        self._ts2_sent = 0
        self._ts2_seen = 0
        self._ts_tail = None
        self._ts_partner_seen = False
        self._polling_seen = 0
        if new_state in (S.U1, S.U2):
            self._wake_burst_sent = False

    # -- timers -------------------------------------------------------------------

    def _arm(self, name: str, delay: int) -> None:
        self._cancel(name)
        self._timers[name] = self.scheduler.schedule(
            self.scheduler.now + delay, self._step, "timeout", name,
            target=f"{self.side}.ltssm")

    def _cancel(self, name: str) -> None:
        t = self._timers.pop(name, None)
        if t is not None:
            t.cancel()

    # -- actions ---------------------------------------------------------------------

    def _act_start_detect(self, _arg=None) -> None:
        self._cancel("wake")
        self.phy.pipe.txpd = 0
        self.phy.pipe.rxpd = 0
        if self.phy.transmitting:
            # an LFPS burst is still draining; come back for the detect
            self._arm("detect_retry", self.cfg.detect_retry)
            return
        self.phy.receiver_detect()

    def _act_detect_retry(self, _arg=None) -> None:
        self._arm("detect_retry", self.cfg.detect_retry)

    def _act_start_polling_lfps(self, _arg=None) -> None:
        self._arm("training", self.cfg.training_timeout)
        self.phy.start_lfps(LfpsKind.POLLING)

    def _act_stop_lfps(self, _arg=None) -> None:
        self.phy.stop_lfps()

    def _act_data_on(self, _arg=None) -> None:
        self.phy.pipe.txpd = 0
        self.phy.pipe.rxpd = 0
        self.phy.set_data_mode(True)

    def _act_data_off(self, _arg=None) -> None:
        self.phy.set_data_mode(False)

    def _act_send_tseq(self, _arg=None) -> None:
        self._send_next_tseq()

    def _send_next_tseq(self) -> None:
        if self.state is not S.POLLING_TSEQ:
            return
        end = self.phy.send_ordered_set(lc.TSEQ)
        self._tseq_sent += 1
        self.tseq_sent_total += 1
        if self._tseq_sent >= self.cfg.tseq_count:
            self.scheduler.schedule(end, self._step, "tseq_done", None,
                                    target=f"{self.side}.ltssm")
        else:
            self.scheduler.schedule(end, self._send_next_tseq,
                                    target=f"{self.side}.ltssm")

    def _act_start_ts_handshake(self, _arg=None) -> None:
        self._ts_target = self.cfg.ts2_count
        self._ts_phase = lc.TS1
        self._send_next_ts()

    def _act_start_recovery_handshake(self, _arg=None) -> None:
        self._arm("training", self.cfg.training_timeout)
        self._cancel("wake")
        self._act_data_on()
        self._ts_target = self.cfg.recovery_ts2_count
        self._ts_phase = lc.TS1
        self._send_next_ts()

    def _send_next_ts(self) -> None:
        """TS1 until the partner's sets are detected, then TS2 until the
        counts close, plus a tail of extra TS2s so a partner one noisy block
        short still finishes."""
        if self.state not in (S.POLLING_TS1TS2, S.RECOVERY) or not self._ts_phase:
            return
        if self._ts_phase == lc.TS1 and self._ts_partner_seen:
            self._ts_phase = lc.TS2
        kind = self._ts_phase
        end = self.phy.send_ordered_set(kind)
        if kind == lc.TS2:
            self._ts2_sent += 1
            if self._ts_tail is not None:
                self._ts_tail -= 1
                if self._ts_tail <= 0:
                    self.scheduler.schedule(end, self._step, "handshake", None,
                                            target=f"{self.side}.ltssm")
                    return
            elif (self._ts2_sent >= self._ts_target
                  and self._ts2_seen >= self._ts_target):
                self._ts_tail = self._ts_target
        self.scheduler.schedule(end, self._send_next_ts, target=f"{self.side}.ltssm")

    def _on_set_block(self, kind: str) -> None:
        if kind == lc.TS2 and self.state in (S.POLLING_TS1TS2, S.RECOVERY):
            self._ts2_seen += 1

    def _on_set_detection(self, kind: str) -> None:
        if self.state in (S.POLLING_TS1TS2, S.RECOVERY):
            if kind in (lc.TS1, lc.TS2):
                self._ts_partner_seen = True
        elif self.state is S.U0 and kind == lc.TS1:
            self._step("set_detected", lc.TS1)

    def _act_enter_u0(self, _arg=None) -> None:
        self._cancel("training")
        self._cancel("wake")
        first = self.u0_entries == 0
        self.u0_entries += 1
        if first:
            self.time_to_first_u0 = self.scheduler.now
        if self.on_u0 is not None:
            self.on_u0(first)

    def _act_enter_low_power(self, _arg=None) -> None:
        self.phy.set_data_mode(False)
        # powered-down lanes with txelecidle low: the wake-signaling condition
        self.phy.pipe.txpd = 1
        self.phy.pipe.rxpd = 1
        self.phy.pipe.txelecidle = 0
        if self.on_low_power is not None:
            self.on_low_power()

    def _act_send_wake_lfps(self, _arg=None) -> None:
        if not self._wake_burst_sent:
            self._wake_burst_sent = True
            self.phy.start_lfps(_WAKE_KIND[self.state])

    def _act_answer_wake(self, _arg=None) -> None:
        # Partner-initiated exit: answer with our own burst before retraining.
        # The answer serializes ahead of the TS1 stream on the same line.
        if not self._wake_burst_sent:
            self._wake_burst_sent = True
            kind = _WAKE_KIND.get(self._prev_state, LfpsKind.U1_EXIT)
            self.phy.start_lfps(kind)

    def _act_arm_wake_timeout(self, _arg=None) -> None:
        self._arm("wake", self.cfg.wake_timeout)

    def _act_send_reset_lfps(self, _arg=None) -> None:
        self.phy.stop_lfps()
        # reset signaling uses the powered-down condition
        self.phy.pipe.txpd = 1
        self.phy.pipe.rxpd = 1
        self.phy.pipe.txelecidle = 0
        self.phy.start_lfps(LfpsKind.RESET)

    def _act_reset_settle(self, _arg=None) -> None:
        self.scheduler.schedule(self.scheduler.now + RESET_SETTLE_DELAY,
                                self._step, "reset_burst_done", None,
                                target=f"{self.side}.ltssm")

    def _act_link_reset(self, _arg=None) -> None:
        if self.on_link_reset is not None:
            self.on_link_reset()

    _ACTIONS = {
        A.START_DETECT: _act_start_detect,
        A.SCHEDULE_DETECT_RETRY: _act_detect_retry,
        A.START_POLLING_LFPS: _act_start_polling_lfps,
        A.STOP_LFPS: _act_stop_lfps,
        A.DATA_ON: _act_data_on,
        A.DATA_OFF: _act_data_off,
        A.SEND_TSEQ_BURST: _act_send_tseq,
        A.START_TS_HANDSHAKE: _act_start_ts_handshake,
        A.START_RECOVERY_HANDSHAKE: _act_start_recovery_handshake,
        A.ENTER_U0: _act_enter_u0,
        A.ENTER_LOW_POWER: _act_enter_low_power,
        A.SEND_WAKE_LFPS: _act_send_wake_lfps,
        A.ANSWER_WAKE: _act_answer_wake,
        A.ARM_WAKE_TIMEOUT: _act_arm_wake_timeout,
        A.SEND_RESET_LFPS: _act_send_reset_lfps,
        A.RESET_SETTLE: _act_reset_settle,
        A.LINK_RESET: _act_link_reset,
    }
