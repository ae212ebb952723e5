"""Transmission protocols for the slotted collision channel.

A protocol maps a player's own transmission history -- the only feedback an
acknowledgment-only player ever gets -- and the current slot index to a
transmission probability. This module defines the protocol families used
throughout the package:

* age-based: the probability depends only on the slot index,
* backoff: the probability depends only on the number of the player's past
  transmissions (all of which were unsuccessful while she is still pending),
* deadline: age-based, forced to probability 1 from a deadline slot onward,
* two-player stationary: the probability is indexed by the number of quiet
  slots since the player's last own transmission (or the game start).

Protocol values are immutable after construction and safe to share across
concurrent simulation workers; ``decide`` is a pure function.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Sequence

History = Sequence[int]


class ProtocolClass(Enum):
    GENERAL = "general"
    AGE_BASED = "age_based"
    BACKOFF = "backoff"
    DEADLINE = "deadline"
    TWO_PLAYER_STATIONARY = "two_player_stationary"


@dataclass(frozen=True)
class ProtocolSpec:
    """A decision-rule family: (history, slot) -> transmission probability."""

    kind: ProtocolClass
    rule: Callable[[History, int], float]
    params: dict

    def __repr__(self) -> str:
        return f"ProtocolSpec({self.kind.value}, params={self.params})"


def _check_probability(p: float, what: str) -> float:
    if not (0.0 <= p <= 1.0):
        raise ValueError(f"{what} must lie in [0, 1], got {p!r}")
    return float(p)


def _check_history(history: History) -> None:
    for bit in history:
        if bit not in (0, 1):
            raise ValueError(f"history values must be 0 or 1, got {bit!r}")


def decide(spec: ProtocolSpec, history: History, t: int) -> float:
    """Transmission probability of a pending player at slot ``t``.

    ``history`` is the player's own attempt record for slots ``1 .. t-1``;
    its length must equal ``t - 1``.
    """
    if t < 1:
        raise ValueError(f"slot index must be >= 1, got {t}")
    if len(history) != t - 1:
        raise ValueError(
            f"history length {len(history)} does not match slot {t} "
            f"(expected {t - 1})"
        )
    _check_history(history)
    return _check_probability(spec.rule(history, t), "decision probability")


def trailing_quiet_run(history: History) -> int:
    """Number of consecutive quiet slots at the end of a history."""
    run = 0
    for bit in reversed(history):
        if bit:
            break
        run += 1
    return run


# --- decision rules -----------------------------------------------------
#
# Rules are small frozen dataclasses rather than closures so that protocol
# values stay picklable for process-based simulation workers.


@dataclass(frozen=True)
class _AgeRule:
    probs: tuple
    tail: float

    def __call__(self, history: History, t: int) -> float:
        if t <= len(self.probs):
            return self.probs[t - 1]
        return self.tail


@dataclass(frozen=True)
class _BackoffRule:
    probs: tuple
    tail: float

    def __call__(self, history: History, t: int) -> float:
        failures = 0
        for bit in history:
            if bit:
                failures += 1
        if failures < len(self.probs):
            return self.probs[failures]
        return self.tail


@dataclass(frozen=True)
class _TwoPlayerEquilibriumRule:
    """Transmit with probability 2/3 at the start or right after an own
    transmission; with probability 1 after a quiet slot."""

    def __call__(self, history: History, t: int) -> float:
        if t == 1 or history[-1] == 1:
            return 2.0 / 3.0
        return 1.0


@dataclass(frozen=True)
class _StationaryRule:
    p_seq: tuple

    def __call__(self, history: History, t: int) -> float:
        run = trailing_quiet_run(history)
        return self.p_seq[min(run, len(self.p_seq) - 1)]


@dataclass(frozen=True)
class _DeadlineRule:
    schedule: "DeadlineSchedule"

    def __call__(self, history: History, t: int) -> float:
        return self.schedule.transmission_probability(t)


@dataclass(frozen=True)
class _PrefixThenBaseRule:
    prefix: tuple
    base_rule: Callable[[History, int], float]

    def __call__(self, history: History, t: int) -> float:
        if t <= len(self.prefix):
            return float(self.prefix[t - 1])
        return self.base_rule(history, t)


# --- constructors -------------------------------------------------------


def make_two_player_equilibrium() -> ProtocolSpec:
    """The two-player equilibrium protocol: 2/3 after an own transmission or
    at the first slot, 1 after a quiet slot."""
    return ProtocolSpec(
        kind=ProtocolClass.TWO_PLAYER_STATIONARY,
        rule=_TwoPlayerEquilibriumRule(),
        params={"p_seq": (2.0 / 3.0, 1.0)},
    )


def make_stationary_two_player(p_seq: Sequence[float]) -> ProtocolSpec:
    """Stationary protocol transmitting with probability ``p_seq[j]`` after
    ``j`` consecutive quiet slots since the player's last own transmission.

    The quiet-slot counter resets on every own transmission. Beyond the end
    of the sequence the last value repeats, so the rule is total.
    """
    if len(p_seq) == 0:
        raise ValueError("p_seq must contain at least one probability")
    probs = tuple(_check_probability(p, "p_seq entry") for p in p_seq)
    return ProtocolSpec(
        kind=ProtocolClass.TWO_PLAYER_STATIONARY,
        rule=_StationaryRule(probs),
        params={"p_seq": probs},
    )


def make_age_based(probs: Sequence[float], tail: float) -> ProtocolSpec:
    """Age-based protocol: ``probs[t-1]`` for slots within the sequence,
    ``tail`` afterward. Ignores the history entirely."""
    probs = tuple(_check_probability(p, "probs entry") for p in probs)
    tail = _check_probability(tail, "tail")
    return ProtocolSpec(
        kind=ProtocolClass.AGE_BASED,
        rule=_AgeRule(probs, tail),
        params={"probs": probs, "tail": tail},
    )


def make_backoff(probs: Sequence[float], tail: float) -> ProtocolSpec:
    """Backoff protocol: probability indexed by the number of the player's
    past (unsuccessful) transmissions, ``tail`` beyond the sequence end."""
    probs = tuple(_check_probability(p, "probs entry") for p in probs)
    tail = _check_probability(tail, "tail")
    return ProtocolSpec(
        kind=ProtocolClass.BACKOFF,
        rule=_BackoffRule(probs, tail),
        params={"probs": probs, "tail": tail},
    )


@dataclass(frozen=True)
class DeadlineSchedule:
    """Interval layout of the deadline protocol for ``n`` players.

    The ``t0 - 1`` slots before the deadline are partitioned into ``k + 1``
    intervals. Interval ``j`` (1-based) has length ``interval_lengths[j-1]``
    and per-slot transmission probability ``interval_probs[j-1] = 1/n_j``
    with the real-valued ``n_j = beta**j * n``. From ``t0`` on the
    probability is 1.
    """

    n: int
    beta: float
    k: int
    n_values: tuple
    interval_lengths: tuple
    interval_probs: tuple
    t0: int

    @property
    def boundaries(self) -> tuple:
        """Cumulative last slot of each interval."""
        out = []
        acc = 0
        for length in self.interval_lengths:
            acc += length
            out.append(acc)
        return tuple(out)

    def interval_index(self, t: int) -> int:
        """1-based interval containing slot ``t`` (valid for 1 <= t < t0)."""
        if not 1 <= t < self.t0:
            raise ValueError(f"slot {t} is not before the deadline {self.t0}")
        acc = 0
        for j, length in enumerate(self.interval_lengths, start=1):
            acc += length
            if t <= acc:
                return j
        raise AssertionError("interval lengths do not cover the pre-deadline slots")

    def transmission_probability(self, t: int) -> float:
        if t >= self.t0:
            return 1.0
        return self.interval_probs[self.interval_index(t) - 1]


def make_deadline_schedule(n: int, beta: float) -> DeadlineSchedule:
    """Materialize the deadline-protocol schedule for ``n`` players.

    ``k`` is the unique integer with ``beta**(k+1) * n <= sqrt(n) <
    beta**k * n`` (the comparison with sqrt(n) is strict, so an exact tie
    ``beta**j * n == sqrt(n)`` disqualifies ``j`` as ``k``). Interval
    lengths are ``floor((e/beta) * n_j)`` for ``j <= k`` and ``n`` for the
    final interval; the deadline is one past their sum.
    """
    if n < 2:
        raise ValueError(f"player count must be >= 2, got {n}")
    if not 0.0 < beta < 1.0:
        raise ValueError(f"beta must lie in (0, 1), got {beta}")
    sqrt_n = math.sqrt(n)
    k = 0
    while beta ** (k + 1) * n > sqrt_n:
        k += 1
    n_values = tuple(beta ** j * n for j in range(1, k + 2))
    lengths = [math.floor((math.e / beta) * nj) for nj in n_values[:-1]]
    lengths.append(n)
    # n_j can drop below 1 for very small n; the emitted probability is
    # clamped so the protocol stays well-formed.
    probs = tuple(min(1.0, 1.0 / nj) for nj in n_values)
    t0 = 1 + sum(lengths)
    return DeadlineSchedule(
        n=n,
        beta=beta,
        k=k,
        n_values=n_values,
        interval_lengths=tuple(lengths),
        interval_probs=probs,
        t0=t0,
    )


def make_deadline_protocol(schedule: DeadlineSchedule) -> ProtocolSpec:
    """Age-based protocol emitting the schedule's per-interval probability
    before the deadline and 1 from the deadline onward."""
    return ProtocolSpec(
        kind=ProtocolClass.DEADLINE,
        rule=_DeadlineRule(schedule),
        params={"n": schedule.n, "beta": schedule.beta, "schedule": schedule},
    )


# --- helpers over age-like protocols ------------------------------------

_AGE_LIKE = (ProtocolClass.AGE_BASED, ProtocolClass.DEADLINE)


def is_age_like(spec: ProtocolSpec) -> bool:
    """True when the decision depends only on the slot index."""
    return spec.kind in _AGE_LIKE


def age_probability(spec: ProtocolSpec, t: int) -> float:
    """Transmission probability of an age-like protocol at slot ``t``."""
    if not is_age_like(spec):
        raise ValueError(f"protocol of class {spec.kind.value} is not age-based")
    if t < 1:
        raise ValueError(f"slot index must be >= 1, got {t}")
    return spec.rule((), t)


def is_non_blocking(spec: ProtocolSpec) -> bool:
    """True when an age-based protocol never transmits with probability 1.

    Only age-based specs are supported: their probability sequence is fully
    enumerable (finite prefix plus constant tail), so the predicate is
    decidable. Deadline protocols are blocking by construction.
    """
    if spec.kind == ProtocolClass.DEADLINE:
        return False
    if spec.kind != ProtocolClass.AGE_BASED:
        raise ValueError(
            f"non-blocking predicate is only defined for age-based protocols, "
            f"got {spec.kind.value}"
        )
    probs = spec.params["probs"]
    tail = spec.params["tail"]
    return all(p < 1.0 for p in probs) and tail < 1.0


# --- JSON serialization --------------------------------------------------
#
# Documents have the shape {"class": <tag>, "params": {...}}. Deviation
# protocols nest their base protocol document under params["base"].


def to_json_dict(spec: ProtocolSpec) -> dict:
    kind = spec.kind
    if kind == ProtocolClass.AGE_BASED:
        return {
            "class": "age_based",
            "params": {"probs": list(spec.params["probs"]), "tail": spec.params["tail"]},
        }
    if kind == ProtocolClass.BACKOFF:
        return {
            "class": "backoff",
            "params": {"probs": list(spec.params["probs"]), "tail": spec.params["tail"]},
        }
    if kind == ProtocolClass.DEADLINE:
        return {
            "class": "deadline",
            "params": {"n": spec.params["n"], "beta": spec.params["beta"]},
        }
    if kind == ProtocolClass.TWO_PLAYER_STATIONARY:
        if isinstance(spec.rule, _TwoPlayerEquilibriumRule):
            return {"class": "two_player_equilibrium", "params": {}}
        return {
            "class": "two_player_stationary",
            "params": {"p_seq": list(spec.params["p_seq"])},
        }
    if kind == ProtocolClass.GENERAL and isinstance(spec.rule, _PrefixThenBaseRule):
        return {
            "class": "deviation",
            "params": {
                "prefix": list(spec.params["prefix"]),
                "base": to_json_dict(spec.params["base"]),
            },
        }
    raise ValueError(f"protocol of class {kind.value} is not serializable")


def from_json_dict(doc: dict) -> ProtocolSpec:
    try:
        tag = doc["class"]
        params = doc.get("params", {})
    except (TypeError, KeyError) as exc:
        raise ValueError(f"malformed protocol document: {doc!r}") from exc
    if tag == "age_based":
        return make_age_based(params["probs"], params["tail"])
    if tag == "backoff":
        return make_backoff(params["probs"], params["tail"])
    if tag == "deadline":
        return make_deadline_protocol(make_deadline_schedule(params["n"], params["beta"]))
    if tag == "two_player_stationary":
        return make_stationary_two_player(params["p_seq"])
    if tag == "two_player_equilibrium":
        return make_two_player_equilibrium()
    if tag == "deviation":
        base = from_json_dict(params["base"])
        prefix = tuple(int(b) for b in params["prefix"])
        _check_history(prefix)
        return ProtocolSpec(
            kind=ProtocolClass.GENERAL,
            rule=_PrefixThenBaseRule(prefix, base.rule),
            params={"prefix": prefix, "base": base},
        )
    raise ValueError(f"unknown protocol class {tag!r}")


def to_json(spec: ProtocolSpec) -> str:
    return json.dumps(to_json_dict(spec), sort_keys=True)


def from_json(text: str) -> ProtocolSpec:
    return from_json_dict(json.loads(text))
