import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from contention.chains import stationary_two_player_latency
from contention.deviations import (
    DeviationSpec,
    Verdict,
    backoff_zero_prefix_probe,
    blocking_slot_probe,
    build_deviation,
    check_prefix_indifference,
    consistency_probability,
    count_non_blocking,
    early_prefix_deviation_latencies,
    find_first_blocking_slot,
    stationary_baseline_latency,
    stationary_equilibrium_scan,
    two_player_deviation_latency,
)
from contention.protocols import (
    decide,
    make_age_based,
    make_backoff,
    make_deadline_protocol,
    make_deadline_schedule,
    make_stationary_two_player,
    make_two_player_equilibrium,
)

F = make_two_player_equilibrium()

probs_mid = st.floats(min_value=0.05, max_value=0.95)


def all_prefixes(max_length):
    for length in range(1, max_length + 1):
        for code in range(2 ** length):
            yield tuple((code >> i) & 1 for i in reversed(range(length)))


# --- independent oracles --------------------------------------------------


def exact_deviator_latency(dev_prefix, opp_probs, tail, t=1):
    """Expected success time of a deterministic-prefix deviator against one
    age-based opponent, both falling back to a constant tail probability.

    Straight enumeration over the joint action tree; once both patterns are
    exhausted the continuation is the constant-probability pair game with
    the closed-form expectation (2 - q) / (2 q (1 - q)).
    """

    def alone_from(s):
        while s <= len(dev_prefix):
            if dev_prefix[s - 1] == 1:
                return float(s)
            s += 1
        return s - 1 + 1.0 / tail

    if t > len(dev_prefix) and t > len(opp_probs):
        return (t - 1) + (2 - tail) / (2 * tail * (1 - tail))
    a = float(dev_prefix[t - 1]) if t <= len(dev_prefix) else tail
    b = opp_probs[t - 1] if t <= len(opp_probs) else tail
    expected = 0.0
    for dev_tx, pa in ((1, a), (0, 1.0 - a)):
        if pa == 0.0:
            continue
        for opp_tx, pb in ((1, b), (0, 1.0 - b)):
            if pb == 0.0:
                continue
            pr = pa * pb
            if dev_tx and not opp_tx:
                expected += pr * t
            elif opp_tx and not dev_tx:
                expected += pr * alone_from(t + 1)
            else:
                expected += pr * exact_deviator_latency(dev_prefix, opp_probs, tail, t + 1)
    return expected


def exact_binary_backoff_baseline(levels=24):
    """Expected latency of two binary-exponential-backoff players, solved
    from the joint chain over equal failure counts (collisions are the only
    events that change counts, and they change both)."""
    probs = [2.0 ** -(k + 1) for k in range(levels)]
    cap = levels - 1
    size = levels + 1  # both-pending levels plus the absorbing state
    A = np.zeros((size, size))
    b = np.ones(size)
    for j in range(levels):
        p = probs[j]
        A[j, j] = 1.0 - (1.0 - p) ** 2
        A[j, min(j + 1, cap)] -= p * p
        # Opponent finishing first leaves a lone player at count j: 1/p more.
        b[j] = 1.0 + (1.0 - p) * p * (1.0 / p)
    A[levels, levels] = 1.0
    b[levels] = 0.0
    return float(np.linalg.solve(A, b)[0])


# --- consistency ------------------------------------------------------------


class TestConsistencyProbability:
    def test_equilibrium_prefix_examples(self):
        assert consistency_probability(F, (0, 1)) == pytest.approx(1 / 3, abs=1e-12)
        assert consistency_probability(F, (0, 0)) == 0.0

    def test_backoff_quiet_prefix(self):
        spec = make_backoff((0.5, 0.25), 0.25)
        assert consistency_probability(spec, (0, 0, 0)) == pytest.approx(0.125)

    def test_deadline_protocol_supported(self):
        q = make_deadline_protocol(make_deadline_schedule(100, 0.5))
        assert consistency_probability(q, (0, 0)) == pytest.approx((49 / 50) ** 2)

    def test_general_class_refused(self):
        g = build_deviation(DeviationSpec(prefix=(1,), base=F))
        with pytest.raises(ValueError):
            consistency_probability(g, (1,))

    @given(st.lists(st.integers(0, 1), max_size=8))
    def test_probability_in_unit_interval(self, prefix):
        spec = make_backoff((0.7, 0.4), 0.4)
        assert 0.0 <= consistency_probability(spec, tuple(prefix)) <= 1.0


class TestBuildDeviation:
    def test_prefix_is_deterministic(self):
        g = build_deviation(DeviationSpec(prefix=(1,), base=F))
        assert decide(g, (), 1) == 1.0

    def test_base_rule_sees_accumulated_history(self):
        g = build_deviation(DeviationSpec(prefix=(0, 0, 1), base=F))
        assert decide(g, (0, 0, 1), 4) == pytest.approx(2 / 3)

    def test_empty_prefix_equals_base(self):
        g = build_deviation(DeviationSpec(prefix=(), base=F))
        for length in range(11):
            for code in range(2 ** length):
                h = tuple((code >> i) & 1 for i in range(length))
                assert decide(g, h, length + 1) == decide(F, h, length + 1)


# --- exact two-player machinery ---------------------------------------------


class TestAnalyticIndifference:
    def test_equilibrium_gain_is_zero_for_all_consistent_prefixes(self):
        for prefix in all_prefixes(4):
            if consistency_probability(F, prefix) == 0.0:
                continue
            report = check_prefix_indifference(F, prefix, method="analytic")
            assert abs(report.gain) <= 1e-9
            assert report.verdict is Verdict.INDIFFERENT

    def test_inconsistent_prefix_refused(self):
        with pytest.raises(ValueError):
            check_prefix_indifference(F, (0, 0), method="analytic")

    def test_profitable_wait_two_against_aggressive_stationary(self):
        base = make_stationary_two_player((0.9, 1.0))
        report = check_prefix_indifference(
            base, (0, 0, 1), method="analytic", require_consistent=False
        )
        assert report.deviation_latency == pytest.approx(3.0, abs=1e-9)
        assert report.baseline_latency == pytest.approx(1.1 / 0.18, abs=1e-9)
        assert report.verdict is Verdict.PROFITABLE

    def test_baseline_matches_closed_form(self):
        for p in (0.2, 0.5, 2 / 3, 0.9):
            base = make_stationary_two_player((p, 1.0))
            assert stationary_baseline_latency(base) == pytest.approx(
                stationary_two_player_latency(p), abs=1e-9
            )

    @given(probs_mid, probs_mid, probs_mid)
    @settings(max_examples=40, deadline=None)
    def test_machinery_matches_short_prefix_closed_forms(self, p1, p2, p3):
        base = make_stationary_two_player((p1, p2, p3))
        alpha = stationary_baseline_latency(base)
        expected = early_prefix_deviation_latencies(p1, p2, p3, alpha)
        got = (
            two_player_deviation_latency(base, (1,)),
            two_player_deviation_latency(base, (0, 1)),
            two_player_deviation_latency(base, (0, 0, 1)),
        )
        for e, g in zip(expected, got):
            assert g == pytest.approx(e, rel=1e-9)

    def test_monte_carlo_mode_agrees(self):
        report = check_prefix_indifference(
            F, (0, 1), method="monte-carlo", trials=30_000, base_seed=17
        )
        assert report.verdict is Verdict.INDIFFERENT
        assert abs(report.gain) <= report.tolerance


class TestEarlyPrefixFormulas:
    def test_equilibrium_values(self):
        a1, a01, a001 = early_prefix_deviation_latencies(2 / 3, 1.0, 0.5, 3.0)
        assert a1 == pytest.approx(3.0, abs=1e-12)
        assert a01 == pytest.approx(3.0, abs=1e-12)

    @given(st.floats(min_value=0.0, max_value=1.0))
    def test_simultaneous_identities_force_two_plus_p2(self, p2):
        # alpha = 1 + p1*alpha and alpha = 2 + (1-p1)*p2*alpha together pin
        # alpha = 2 + p2 (choose p1 compatible with both).
        alpha = 2.0 + p2
        p1 = (alpha - 1.0) / alpha
        a1, a01, _ = early_prefix_deviation_latencies(p1, p2, 0.5, alpha)
        assert a1 == pytest.approx(alpha, abs=1e-12)
        assert a01 == pytest.approx(alpha, abs=1e-12)
        assert alpha == pytest.approx(2.0 + p2, abs=1e-12)

    def test_parameter_validation(self):
        with pytest.raises(ValueError):
            early_prefix_deviation_latencies(1.5, 0.5, 0.5, 3.0)
        with pytest.raises(ValueError):
            early_prefix_deviation_latencies(0.5, 0.5, 0.5, 0.5)


class TestEquilibriumScan:
    def test_only_two_thirds_is_indifferent(self):
        grid = sorted({round(0.05 * i, 2) for i in range(1, 20)} | {2 / 3})
        points = stationary_equilibrium_scan(grid, tolerance=1e-9)
        for pt in points:
            if abs(pt.p - 2 / 3) < 1e-12:
                assert pt.max_gain <= 1e-9
                assert pt.verdict is Verdict.INDIFFERENT
            else:
                assert pt.max_gain >= 0.05
                assert pt.verdict is Verdict.PROFITABLE

    def test_persistent_deviation_at_half(self):
        (pt,) = stationary_equilibrium_scan([0.5])
        assert pt.baseline_latency == pytest.approx(3.0, abs=1e-9)
        assert pt.best_latency <= 2.0 + 1e-9  # persistent deviator finishes in 2
        assert pt.max_gain >= 1.0 - 1e-9

    def test_wait_two_deviation_at_high_p(self):
        (pt,) = stationary_equilibrium_scan([0.9])
        assert pt.baseline_latency == pytest.approx(1.1 / 0.18, abs=1e-9)
        base = make_stationary_two_player((0.9, 1.0))
        wait_two = two_player_deviation_latency(base, (0, 0, 1))
        assert wait_two == pytest.approx(3.0, abs=1e-9)
        # Wait-two already gains ~3.111; the scan may find even better
        # prefixes (it does: quiet-transmit-quiet), never worse.
        assert pt.max_gain >= (1.1 / 0.18 - 3.0) - 1e-9
        assert pt.best_latency <= 3.0 + 1e-9

    def test_rejects_degenerate_grid_values(self):
        with pytest.raises(ValueError):
            stationary_equilibrium_scan([0.0])


# --- blocking-slot machinery -------------------------------------------------


class TestBlockingSlotSearch:
    def test_count_non_blocking_examples(self):
        assert count_non_blocking(make_age_based((1.0, 1.0, 1.0), 1.0), 5) == 0
        assert count_non_blocking(make_age_based((0.5, 1.0, 0.9, 1.0), 1.0), 4) == 2

    def test_deadline_protocol_counts_every_pre_deadline_slot(self):
        q = make_deadline_protocol(make_deadline_schedule(100, 0.5))
        assert count_non_blocking(q, 573) == 573

    def test_deadline_blocking_slot_is_the_deadline(self):
        q = make_deadline_protocol(make_deadline_schedule(100, 0.5))
        assert find_first_blocking_slot(q, 100, limit=600) == 574

    def test_never_blocking_protocol_has_none(self):
        spec = make_age_based((), 0.5)
        assert find_first_blocking_slot(spec, 2, limit=1000) is None

    def test_walkthrough_example(self):
        spec = make_age_based((1.0, 1.0, 0.5, 1.0), 1.0)
        assert find_first_blocking_slot(spec, 2, limit=10) == 4


class TestBlockingSlotProbe:
    def test_matches_exact_enumeration(self):
        spec = make_age_based((0.5, 0.5, 1.0), 0.5)
        report = blocking_slot_probe(spec, n=2, trials=20_000, base_seed=3)
        follow_exact = exact_deviator_latency((0, 1, 1), (0.5, 0.5, 1.0), 0.5)
        dodge_exact = exact_deviator_latency((0, 1, 0), (0.5, 0.5, 1.0), 0.5)
        assert follow_exact == pytest.approx(3.0)
        assert dodge_exact == pytest.approx(2.75)
        assert report.details["blocking_slot"] == 3
        assert abs(report.baseline_latency - follow_exact) < 5 * report.baseline_stderr
        assert abs(report.deviation_latency - dodge_exact) < 5 * report.deviation_stderr
        assert report.verdict is Verdict.PROFITABLE
        assert report.details["prob_exactly_two_pending"] == pytest.approx(0.25, abs=0.02)

    def test_three_pending_trials_cannot_distinguish_the_deviators(self):
        # With three or more players pending at the blocking slot, the
        # others' forced transmissions collide regardless of the deviator's
        # action there, so coupled runs (same per-trial streams) must be
        # identical; only exactly-two-pending trials can diverge.
        from contention.channel import run_trial

        spec = make_age_based((0.5, 0.5, 1.0), 0.5)
        tau = find_first_blocking_slot(spec, 3, 100)
        assert tau == 3
        follow = build_deviation(DeviationSpec(prefix=(0, 1, 1), base=spec))
        dodge = build_deviation(DeviationSpec(prefix=(0, 1, 0), base=spec))
        diverged = 0
        two_pending = 0
        for i in range(1500):
            a = run_trial([follow, spec, spec], horizon=200, seed=(404, i))
            b = run_trial([dodge, spec, spec], horizon=200, seed=(404, i))
            if a.pending_at(tau) >= 3:
                assert a.success_times == b.success_times
            elif a.pending_at(tau) == 2 and (
                a.success_times[0] is None or a.success_times[0] >= tau
            ):
                two_pending += 1
                diverged += a.success_times != b.success_times
        assert two_pending > 0
        assert diverged > 0

    def test_refuses_without_blocking_slot(self):
        with pytest.raises(ValueError):
            blocking_slot_probe(make_age_based((), 0.5), n=2, trials=100)

    def test_refuses_single_player(self):
        with pytest.raises(ValueError):
            blocking_slot_probe(make_age_based((0.5, 1.0), 0.5), n=1, trials=100)


class TestBackoffProbe:
    def test_witnesses_contradiction_for_binary_exponential_backoff(self):
        beb = make_backoff(tuple(2.0 ** -(k + 1) for k in range(24)), 2.0 ** -24)
        report = backoff_zero_prefix_probe(beb, n=2, trials=20_000, base_seed=11)
        exact = exact_binary_backoff_baseline()
        assert abs(report.baseline_latency - exact) < 5 * report.baseline_stderr
        assert report.details["quiet_slots"] == math.floor(exact)
        assert report.deviation_latency >= report.details["deviator_latency_floor"]
        assert report.verdict is Verdict.UNPROFITABLE
        assert report.details["contradiction_witnessed"]

    def test_leading_certain_transmissions_are_stripped(self):
        spec = make_backoff((1.0, 1.0, 0.5, 0.25), 0.25)
        report = backoff_zero_prefix_probe(spec, n=2, trials=5_000, base_seed=2)
        assert report.details["stripped_leading_certain"] == 2

    def test_persistent_backoff_refused(self):
        with pytest.raises(ValueError):
            backoff_zero_prefix_probe(make_backoff((1.0,), 1.0), n=2, trials=100)

    def test_single_player_refused(self):
        with pytest.raises(ValueError):
            backoff_zero_prefix_probe(make_backoff((0.5,), 0.5), n=1, trials=100)
