"""Deviation construction and equilibrium probing.

Builds prefix deviations (play a fixed 0/1 transmission pattern, then fall
back to the base protocol), computes deviator latencies exactly for
two-player stationary games, and runs the numeric probes showing that
age-based and backoff protocols with finite expected latency cannot be in
equilibrium.

Indifference logic: if a protocol is in equilibrium, a deviator who plays
any own-history pattern the protocol itself could have produced (a
"consistent" prefix) and then resumes the protocol must see exactly the
equilibrium latency. Measuring that equality, and constructing patterns
that break it, is what this module automates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np

from . import channel
from .chains import AbsorbingChain, hitting_times
from .protocols import (
    ProtocolClass,
    ProtocolSpec,
    _PrefixThenBaseRule,
    age_probability,
    decide,
    is_age_like,
    make_backoff,
)


class Verdict(Enum):
    PROFITABLE = "profitable"
    INDIFFERENT = "indifferent"
    UNPROFITABLE = "unprofitable"


def classify_gain(gain: float, tolerance: float) -> Verdict:
    if gain > tolerance:
        return Verdict.PROFITABLE
    if gain < -tolerance:
        return Verdict.UNPROFITABLE
    return Verdict.INDIFFERENT


@dataclass(frozen=True)
class DeviationSpec:
    """A deterministic 0/1 prefix followed by the base protocol."""

    prefix: tuple
    base: ProtocolSpec

    @property
    def tau_star(self) -> int:
        return len(self.prefix)


@dataclass(frozen=True)
class DeviationReport:
    """Outcome of one deviation comparison.

    ``gain = baseline_latency - deviation_latency``: positive gain means the
    deviation finishes faster than the baseline it is compared against.
    """

    baseline_latency: float
    baseline_stderr: float
    deviation_latency: float
    deviation_stderr: float
    gain: float
    tolerance: float
    verdict: Verdict
    method: str
    details: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "baseline_latency": self.baseline_latency,
            "baseline_stderr": self.baseline_stderr,
            "deviation_latency": self.deviation_latency,
            "deviation_stderr": self.deviation_stderr,
            "gain": self.gain,
            "tolerance": self.tolerance,
            "verdict": self.verdict.value,
            "method": self.method,
            "details": dict(self.details),
        }

    def format_table(self) -> str:
        rows = [
            ("baseline latency", f"{self.baseline_latency:.6f} +- {self.baseline_stderr:.6f}"),
            ("deviation latency", f"{self.deviation_latency:.6f} +- {self.deviation_stderr:.6f}"),
            ("gain", f"{self.gain:.6f}"),
            ("tolerance", f"{self.tolerance:.3g}"),
            ("verdict", self.verdict.value),
            ("method", self.method),
        ]
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k:<{width}}  {v}" for k, v in rows)


def _stage_seed(base_seed, stage: int):
    """128-bit Philox key for a named sub-experiment of a probe."""
    words = np.random.SeedSequence((base_seed, stage)).generate_state(2, np.uint64)
    return int(words[0]) | (int(words[1]) << 64)


# --- consistency and deviation construction ------------------------------

_CONSISTENCY_KINDS = (
    ProtocolClass.AGE_BASED,
    ProtocolClass.DEADLINE,
    ProtocolClass.BACKOFF,
    ProtocolClass.TWO_PLAYER_STATIONARY,
)


def consistency_probability(spec: ProtocolSpec, prefix: Sequence[int]) -> float:
    """Probability that a player following ``spec`` produces exactly this
    own-history prefix.

    Only protocol classes whose own-history process is autonomous (age-based,
    deadline, backoff, two-player stationary) are supported: for them the
    probability is the product of the per-slot decision probabilities, or
    their complements, along the prefix.
    """
    if spec.kind not in _CONSISTENCY_KINDS:
        raise ValueError(
            f"consistency probability is not computable for protocol class "
            f"{spec.kind.value}"
        )
    prob = 1.0
    for t, bit in enumerate(prefix, start=1):
        if bit not in (0, 1):
            raise ValueError(f"prefix values must be 0 or 1, got {bit!r}")
        q = decide(spec, tuple(prefix[: t - 1]), t)
        prob *= q if bit else 1.0 - q
        if prob == 0.0:
            return 0.0
    return prob


def build_deviation(dev: DeviationSpec) -> ProtocolSpec:
    """Protocol transmitting deterministically per the prefix, then
    delegating to the base rule with the accumulated history."""
    prefix = tuple(int(b) for b in dev.prefix)
    for bit in prefix:
        if bit not in (0, 1):
            raise ValueError(f"prefix values must be 0 or 1, got {bit!r}")
    return ProtocolSpec(
        kind=ProtocolClass.GENERAL,
        rule=_PrefixThenBaseRule(prefix, dev.base.rule),
        params={"prefix": prefix, "base": dev.base},
    )


# --- exact two-player analysis -------------------------------------------
#
# For a stationary base protocol the joint game state is just the pair of
# quiet-run counters (capped once the probability sequence becomes
# constant), so deviator latencies reduce to a finite hitting-time solve.


@lru_cache(maxsize=None)
def _pair_game_values(p_seq: tuple) -> tuple:
    """Hitting-time values for the joint stationary game.

    Returns ``(both, alone)`` where ``both[(jd, jo)]`` is the deviator's
    expected remaining latency when both players are pending with quiet runs
    ``jd``/``jo``, and ``alone[j]`` the expectation once only the deviator
    is left with quiet run ``j``.
    """
    L = len(p_seq)
    cap = L - 1
    states = []
    for jd in range(L):
        for jo in range(L):
            states.append(("both", jd, jo))
    for j in range(L):
        states.append(("alone", j))
    states.append("done")
    index = {s: i for i, s in enumerate(states)}
    m = len(states)
    P = np.zeros((m, m))
    for jd in range(L):
        a = p_seq[jd]
        for jo in range(L):
            b = p_seq[jo]
            i = index[("both", jd, jo)]
            P[i, index[("both", 0, 0)]] += a * b
            P[i, index["done"]] += a * (1.0 - b)
            P[i, index[("alone", min(jd + 1, cap))]] += (1.0 - a) * b
            P[i, index[("both", min(jd + 1, cap), min(jo + 1, cap))]] += (1.0 - a) * (1.0 - b)
    for j in range(L):
        i = index[("alone", j)]
        P[i, index["done"]] += p_seq[j]
        P[i, index[("alone", min(j + 1, cap))]] += 1.0 - p_seq[j]
    P[index["done"], index["done"]] = 1.0
    chain = AbsorbingChain(states=tuple(states), matrix=P, target="done")
    k = hitting_times(chain)
    both = {(jd, jo): k[("both", jd, jo)] for jd in range(L) for jo in range(L)}
    alone = {j: k[("alone", j)] for j in range(L)}
    return both, alone


def _stationary_p_seq(spec: ProtocolSpec) -> tuple:
    if spec.kind != ProtocolClass.TWO_PLAYER_STATIONARY:
        raise ValueError(
            "exact analysis needs a two-player stationary base protocol, "
            f"got class {spec.kind.value}"
        )
    return tuple(spec.params["p_seq"])


def stationary_baseline_latency(base: ProtocolSpec) -> float:
    """Expected latency when both players follow the stationary base."""
    both, _ = _pair_game_values(_stationary_p_seq(base))
    return both[(0, 0)]


def two_player_deviation_latency(base: ProtocolSpec, prefix: Sequence[int]) -> float:
    """Exact expected latency of a deviator playing ``prefix`` then ``base``
    against one opponent who follows ``base`` throughout.

    Enumerates the opponent's behavior over the prefix slots (his quiet-run
    counter is the only relevant state) and closes the recursion with the
    joint-game hitting times once the prefix is exhausted.
    """
    p_seq = _stationary_p_seq(base)
    L = len(p_seq)
    cap = L - 1
    prefix = tuple(int(b) for b in prefix)
    m = len(prefix)
    both, alone = _pair_game_values(p_seq)

    trailing = 0
    for bit in reversed(prefix):
        if bit:
            break
        trailing += 1

    def finish_alone_after(t: int) -> float:
        # Opponent exited at slot t; the deviator succeeds at her next
        # transmission, deterministic while the prefix lasts.
        for s in range(t + 1, m + 1):
            if prefix[s - 1] == 1:
                return float(s)
        return m + alone[min(trailing, cap)]

    total = 0.0
    stack = [(1, 0, 1.0)]
    while stack:
        t, jo, prob = stack.pop()
        if t > m:
            total += prob * (m + both[(min(trailing, cap), min(jo, cap))])
            continue
        b = p_seq[min(jo, cap)]
        if prefix[t - 1] == 1:
            if b > 0.0:
                stack.append((t + 1, 0, prob * b))
            if b < 1.0:
                total += prob * (1.0 - b) * t
        else:
            if b > 0.0:
                total += prob * b * finish_alone_after(t)
            if b < 1.0:
                stack.append((t + 1, jo + 1, prob * (1.0 - b)))
    return total


# --- indifference checks --------------------------------------------------


def check_prefix_indifference(
    base: ProtocolSpec,
    prefix: Sequence[int],
    n: int = 2,
    method: str = "analytic",
    trials: int = 100_000,
    horizon: Optional[int] = None,
    base_seed=0,
    tolerance: Optional[float] = None,
    workers: int = 1,
    require_consistent: bool = True,
) -> DeviationReport:
    """Compare the deviator who plays a consistent prefix (then the base
    protocol) against the all-base baseline.

    The prefix must have positive probability under the base protocol;
    otherwise the indifference argument does not apply and the check
    refuses. Pass ``require_consistent=False`` to evaluate the deviation's
    profitability anyway (useful for patterns the protocol itself would
    never produce, which is where profitable deviations hide). For an
    equilibrium base the verdict is Indifferent. The deviator occupies
    player slot 0.
    """
    prefix = tuple(int(b) for b in prefix)
    consistency = consistency_probability(base, prefix)
    if consistency == 0.0 and require_consistent:
        raise ValueError(
            f"prefix {prefix} is inconsistent with the base protocol "
            "(probability 0), so the indifference hypothesis fails; pass "
            "require_consistent=False to evaluate it anyway"
        )
    if method == "analytic":
        if n != 2:
            raise ValueError("analytic mode supports exactly 2 players")
        baseline = stationary_baseline_latency(base)
        deviation = two_player_deviation_latency(base, prefix)
        tol = 1e-9 if tolerance is None else tolerance
        gain = baseline - deviation
        return DeviationReport(
            baseline_latency=baseline,
            baseline_stderr=0.0,
            deviation_latency=deviation,
            deviation_stderr=0.0,
            gain=gain,
            tolerance=tol,
            verdict=classify_gain(gain, tol),
            method="analytic",
            details={"prefix": list(prefix), "consistency_probability": consistency},
        )
    if method != "monte-carlo":
        raise ValueError(f"unknown method {method!r}")
    if n < 2:
        raise ValueError("the deviation game needs at least 2 players")
    if horizon is None:
        horizon = channel.default_horizon(n)
    base_stats = channel.estimate_latency(
        [base] * n, trials, horizon, _stage_seed(base_seed, 0), workers=workers
    )
    _require_finite(base_stats, "baseline")
    dev_protocol = build_deviation(DeviationSpec(prefix=prefix, base=base))
    dev_stats = channel.estimate_latency(
        [dev_protocol] + [base] * (n - 1),
        trials,
        horizon,
        _stage_seed(base_seed, 1),
        workers=workers,
    )
    baseline = base_stats.per_player_mean[0]
    baseline_se = base_stats.per_player_stderr[0]
    deviation = dev_stats.per_player_mean[0]
    deviation_se = dev_stats.per_player_stderr[0]
    gain = baseline - deviation
    tol = 3.0 * math.hypot(baseline_se, deviation_se) if tolerance is None else tolerance
    return DeviationReport(
        baseline_latency=baseline,
        baseline_stderr=baseline_se,
        deviation_latency=deviation,
        deviation_stderr=deviation_se,
        gain=gain,
        tolerance=tol,
        verdict=classify_gain(gain, tol),
        method="monte-carlo",
        details={
            "prefix": list(prefix),
            "consistency_probability": consistency,
            "trials": trials,
            "horizon": horizon,
            "baseline_completion_prob": base_stats.completion_prob,
            "deviation_completion_prob": dev_stats.completion_prob,
        },
    )


def _require_finite(stats: channel.LatencyStats, label: str) -> None:
    if stats.completion_prob < 0.999:
        raise ValueError(
            f"{label} completion probability {stats.completion_prob:.6f} at "
            f"horizon {stats.horizon} is below 0.999; the finite-latency "
            "hypothesis looks violated, refusing to probe"
        )


def early_prefix_deviation_latencies(
    p1: float, p2: float, p3: float, base_latency: float
) -> tuple:
    """Expected latencies of the three shortest transmit-after-waiting
    deviations against a stationary opponent.

    The deviator transmits at slot 1, 2 or 3 (staying quiet before) and then
    resumes the base protocol, whose all-base latency is ``base_latency``:

    * transmit at once:   1 + p1 * base_latency
    * wait one, transmit: 2 + (1 - p1) * p2 * base_latency
    * wait two, transmit: 3 + (1 - p1) * (1 - p2) * p3 * base_latency
    """
    for name, p in (("p1", p1), ("p2", p2), ("p3", p3)):
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"{name} must lie in [0, 1], got {p}")
    if base_latency < 1.0:
        raise ValueError(f"base latency must be >= 1, got {base_latency}")
    return (
        1.0 + p1 * base_latency,
        2.0 + (1.0 - p1) * p2 * base_latency,
        3.0 + (1.0 - p1) * (1.0 - p2) * p3 * base_latency,
    )


@dataclass(frozen=True)
class ScanPoint:
    p: float
    baseline_latency: float
    best_deviation: str
    best_latency: float
    max_gain: float
    verdict: Verdict


def stationary_equilibrium_scan(
    grid: Sequence[float], tolerance: float = 1e-9
) -> list:
    """Scan the one-parameter stationary family (transmit with probability
    ``p`` after a collision, probability 1 after a quiet slot) for
    profitable unilateral deviations.

    Each grid point is tested against the persistent deviator (latency
    ``1 / (1 - p)``, since every slot the opponent stays quiet the deviator
    wins), the wait-two-then-transmit deviator, and every prefix deviation
    of length at most 3 that is consistent with the protocol. Only
    ``p = 2/3`` survives with no gain above tolerance.
    """
    from .chains import stationary_two_player_latency

    points = []
    for p in grid:
        if not 0.0 < p < 1.0:
            raise ValueError(f"grid values must lie in (0, 1), got {p}")
        base = _stationary_pair_protocol(p)
        baseline = stationary_two_player_latency(p)
        candidates = {"persistent": 1.0 / (1.0 - p), "001": two_player_deviation_latency(base, (0, 0, 1))}
        for length in (1, 2, 3):
            for bits in range(2 ** length):
                prefix = tuple((bits >> i) & 1 for i in reversed(range(length)))
                if consistency_probability(base, prefix) > 0.0:
                    label = "".join(str(b) for b in prefix)
                    candidates[label] = two_player_deviation_latency(base, prefix)
        best_label = min(candidates, key=candidates.get)
        best_latency = candidates[best_label]
        max_gain = baseline - best_latency
        points.append(
            ScanPoint(
                p=float(p),
                baseline_latency=baseline,
                best_deviation=best_label,
                best_latency=best_latency,
                max_gain=max_gain,
                verdict=Verdict.PROFITABLE if max_gain > tolerance else Verdict.INDIFFERENT,
            )
        )
    return points


def _stationary_pair_protocol(p: float) -> ProtocolSpec:
    from .protocols import make_stationary_two_player

    return make_stationary_two_player((p, 1.0))


# --- blocking-slot machinery ----------------------------------------------


def count_non_blocking(spec: ProtocolSpec, t: int) -> int:
    """Number of slots up to ``t`` where an age-based protocol transmits
    with probability strictly below 1."""
    if not is_age_like(spec):
        raise ValueError(f"protocol of class {spec.kind.value} is not age-based")
    if t < 0:
        raise ValueError(f"slot count must be >= 0, got {t}")
    return sum(1 for s in range(1, t + 1) if age_probability(spec, s) < 1.0)


def find_first_blocking_slot(spec: ProtocolSpec, n: int, limit: int) -> Optional[int]:
    """Smallest slot where the protocol forces a transmission right after a
    non-forced slot, with at least ``n - 1`` non-forced slots before it.

    Returns ``None`` when no such slot exists within ``limit``.
    """
    if not is_age_like(spec):
        raise ValueError(f"protocol of class {spec.kind.value} is not age-based")
    if n < 1:
        raise ValueError(f"player count must be >= 1, got {n}")
    non_blocking = 0
    prev = None
    for t in range(1, limit + 1):
        q = age_probability(spec, t)
        if (
            t >= 2
            and q == 1.0
            and prev is not None
            and prev < 1.0
            and non_blocking >= n - 1
        ):
            return t
        if q < 1.0:
            non_blocking += 1
        prev = q
    return None


def blocking_slot_probe(
    spec: ProtocolSpec,
    n: int,
    trials: int,
    horizon: Optional[int] = None,
    base_seed=0,
    limit: Optional[int] = None,
) -> DeviationReport:
    """Monte Carlo comparison of the two deterministic deviations that
    differ only at the first blocking slot tau.

    Both deviators copy the protocol's forced-transmission pattern before
    tau (quiet wherever the probability is below 1) and transmit at tau - 1;
    the "follow" deviator also transmits at tau, the "dodge" deviator stays
    quiet there, letting a single remaining opponent finish and clearing the
    channel for itself. For any finite-latency age-based protocol the dodge
    variant must come out strictly better, which is incompatible with
    equilibrium. The report's baseline is the follow deviator, the deviation
    is the dodge variant, and ``details`` carries the estimated probability
    of the exactly-two-pending event at tau that drives the separation.
    """
    if n < 2:
        raise ValueError(f"the probe needs at least 2 players, got {n}")
    if horizon is None:
        if spec.kind == ProtocolClass.DEADLINE:
            horizon = spec.params["schedule"].t0 + n
        else:
            horizon = channel.default_horizon(n)
    if limit is None:
        limit = horizon
    tau = find_first_blocking_slot(spec, n, limit)
    if tau is None:
        raise ValueError(
            f"no blocking slot with {n - 1} prior non-forced slots found "
            f"within {limit} slots"
        )
    base_stats = channel.estimate_latency(
        [spec] * n, trials, horizon, _stage_seed(base_seed, 0)
    )
    _require_finite(base_stats, "baseline")

    follow_bits = []
    for t in range(1, tau + 1):
        if t >= tau - 1:
            follow_bits.append(1)
        else:
            follow_bits.append(1 if age_probability(spec, t) == 1.0 else 0)
    dodge_bits = list(follow_bits)
    dodge_bits[tau - 1] = 0
    follow = build_deviation(DeviationSpec(prefix=tuple(follow_bits), base=spec))
    dodge = build_deviation(DeviationSpec(prefix=tuple(dodge_bits), base=spec))

    def deviator_run(protocol: ProtocolSpec, stage: int) -> tuple:
        profile = [protocol] + [spec] * (n - 1)
        times = np.empty(trials)
        two_pending = 0
        for i, result in enumerate(
            channel.iter_trials(profile, trials, horizon, _stage_seed(base_seed, stage))
        ):
            t_dev = result.success_times[0]
            times[i] = horizon if t_dev is None else t_dev
            if (t_dev is None or t_dev >= tau) and result.pending_at(tau) == 2:
                two_pending += 1
        return float(times.mean()), float(times.std(ddof=1) / math.sqrt(trials)), two_pending / trials

    follow_mean, follow_se, follow_two = deviator_run(follow, 1)
    dodge_mean, dodge_se, _ = deviator_run(dodge, 2)
    gain = follow_mean - dodge_mean
    tol = 3.0 * math.hypot(follow_se, dodge_se)
    return DeviationReport(
        baseline_latency=follow_mean,
        baseline_stderr=follow_se,
        deviation_latency=dodge_mean,
        deviation_stderr=dodge_se,
        gain=gain,
        tolerance=tol,
        verdict=classify_gain(gain, tol),
        method="monte-carlo",
        details={
            "blocking_slot": tau,
            "follow_prefix": follow_bits,
            "dodge_prefix": dodge_bits,
            "prob_exactly_two_pending": follow_two,
            "protocol_latency": base_stats.per_player_mean[0],
            "protocol_completion_prob": base_stats.completion_prob,
            "trials": trials,
            "horizon": horizon,
        },
    )


def backoff_zero_prefix_probe(
    spec: ProtocolSpec,
    n: int,
    trials: int,
    horizon: Optional[int] = None,
    base_seed=0,
) -> DeviationReport:
    """Witness the contradiction that rules out finite-latency backoff
    equilibria: stay quiet for floor(baseline latency) slots, then resume.

    The all-quiet prefix is always consistent with a backoff protocol whose
    first probability is below 1 (leading certain transmissions are stripped
    first, as they only shift the sequence). Any player using it finishes no
    earlier than slot tau + 1 > baseline, yet indifference would force
    equality with the baseline. The report's gain is baseline minus deviator
    latency; a significantly negative gain together with the hard
    ``latency >= tau + 1`` floor is the witness, recorded in ``details``.
    """
    if spec.kind != ProtocolClass.BACKOFF:
        raise ValueError(f"expected a backoff protocol, got {spec.kind.value}")
    if n < 2:
        raise ValueError(f"the probe needs at least 2 players, got {n}")
    probs = list(spec.params["probs"])
    tail = spec.params["tail"]
    shift = 0
    while shift < len(probs) and probs[shift] == 1.0:
        shift += 1
    if shift == len(probs) and tail == 1.0:
        raise ValueError(
            "every backoff probability is 1 (persistent player); the expected "
            "latency is infinite and the probe does not apply"
        )
    if shift:
        spec = make_backoff(probs[shift:] or (tail,), tail)
    if horizon is None:
        horizon = channel.default_horizon(n)
    base_stats = channel.estimate_latency(
        [spec] * n, trials, horizon, _stage_seed(base_seed, 0)
    )
    _require_finite(base_stats, "baseline")
    baseline = base_stats.per_player_mean[0]
    baseline_se = base_stats.per_player_stderr[0]
    tau = math.floor(baseline)
    deviator = build_deviation(DeviationSpec(prefix=(0,) * tau, base=spec))
    dev_stats = channel.estimate_latency(
        [deviator] + [spec] * (n - 1), trials, horizon, _stage_seed(base_seed, 1)
    )
    deviation = dev_stats.per_player_mean[0]
    deviation_se = dev_stats.per_player_stderr[0]
    gain = baseline - deviation
    tol = 3.0 * math.hypot(baseline_se, deviation_se)
    verdict = classify_gain(gain, tol)
    return DeviationReport(
        baseline_latency=baseline,
        baseline_stderr=baseline_se,
        deviation_latency=deviation,
        deviation_stderr=deviation_se,
        gain=gain,
        tolerance=tol,
        verdict=verdict,
        method="monte-carlo",
        details={
            "quiet_slots": tau,
            "deviator_latency_floor": tau + 1,
            "floor_exceeds_baseline": tau + 1 > baseline,
            "indifference_rejected": verdict != Verdict.INDIFFERENT,
            "contradiction_witnessed": (
                tau + 1 > baseline
                and deviation >= tau + 1 - 3.0 * deviation_se
                and verdict != Verdict.INDIFFERENT
            ),
            "stripped_leading_certain": shift,
            "trials": trials,
            "horizon": horizon,
            "baseline_completion_prob": base_stats.completion_prob,
        },
    )
