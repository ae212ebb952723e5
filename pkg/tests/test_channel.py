import pytest
from hypothesis import given
from hypothesis import strategies as st

from contention.channel import (
    SlotKind,
    classify_slot,
    default_horizon,
    estimate_latency,
    iter_trials,
    run_trial,
    run_trial_traced,
)
from contention.deviations import DeviationSpec, build_deviation
from contention.protocols import (
    make_age_based,
    make_backoff,
    make_stationary_two_player,
    make_two_player_equilibrium,
)

F = make_two_player_equilibrium()
PERSISTENT = make_stationary_two_player((1.0,))


class TestSlotClassification:
    def test_exhaustive_kinds(self):
        assert classify_slot([]).kind == SlotKind.IDLE
        assert classify_slot([3]).kind == SlotKind.SUCCESS
        assert classify_slot([3]).successful_player == 3
        assert classify_slot([1, 4]).kind == SlotKind.COLLISION

    @given(st.sets(st.integers(min_value=0, max_value=9)))
    def test_kind_matches_transmitter_count(self, players):
        outcome = classify_slot(sorted(players))
        expected = {0: SlotKind.IDLE, 1: SlotKind.SUCCESS}.get(
            len(players), SlotKind.COLLISION
        )
        assert outcome.kind == expected


class TestRunTrial:
    def test_single_persistent_player_finishes_first_slot(self):
        result = run_trial([PERSISTENT], horizon=10, seed=0)
        assert result.success_times == (1,)

    def test_two_persistent_players_never_finish(self):
        result = run_trial([PERSISTENT, PERSISTENT], horizon=100, seed=0)
        assert result.success_times == (None, None)
        assert result.slots_elapsed == 100

    def test_bit_reproducibility(self):
        a = run_trial([F, F], horizon=200, seed=1234)
        b = run_trial([F, F], horizon=200, seed=1234)
        assert a == b

    def test_seed_tuple_replays_a_trial_from_a_batch(self):
        batch = list(iter_trials([F, F], trials=5, horizon=100, base_seed=99))
        for i, result in enumerate(batch):
            assert run_trial([F, F], horizon=100, seed=(99, i)) == result

    @pytest.mark.parametrize("seed", range(8))
    def test_success_times_distinct_and_conserved(self, seed):
        profile = [F, make_backoff((0.5, 0.25), 0.25), make_age_based((0.4,), 0.7)]
        result = run_trial(profile, horizon=300, seed=seed)
        finite = [t for t in result.success_times if t is not None]
        assert len(finite) == len(set(finite))
        pending = sum(1 for t in result.success_times if t is None)
        assert len(finite) + pending == len(profile)

    def test_validation(self):
        with pytest.raises(ValueError):
            run_trial([], horizon=5, seed=0)
        with pytest.raises(ValueError):
            run_trial([F], horizon=0, seed=0)


class TestGhostFlips:
    def test_outcomes_unchanged_and_histories_full_length(self):
        for seed in range(10):
            plain = run_trial([F, F], horizon=100, seed=seed)
            ghost = run_trial([F, F], horizon=100, seed=seed, ghost_flips=True)
            assert ghost.success_times == plain.success_times
            assert ghost.slots_elapsed == plain.slots_elapsed
            assert all(len(h) == ghost.slots_elapsed for h in ghost.histories)

    def test_tuple_seed_ghost_stream(self):
        plain = run_trial([F, F], horizon=100, seed=(8, 3))
        ghost = run_trial([F, F], horizon=100, seed=(8, 3), ghost_flips=True)
        assert ghost.success_times == plain.success_times

    def test_recorded_histories_respect_success_slot(self):
        result = run_trial([F, F], horizon=100, seed=3, record_histories=True)
        for pid, t in enumerate(result.success_times):
            history = result.histories[pid]
            assert history[t - 1] == 1  # the winning transmission is logged


class TestTracedRuns:
    def test_two_persistent_players(self):
        _, trace = run_trial_traced([PERSISTENT, PERSISTENT], horizon=5, seed=1)
        assert trace == (2, 2, 2, 2, 2)

    def test_single_persistent_player(self):
        _, trace = run_trial_traced([PERSISTENT], horizon=5, seed=1)
        assert trace == (0,)

    def test_trace_matches_success_times(self):
        result, trace = run_trial_traced([F, F], horizon=100, seed=7)
        for slot, pending in enumerate(trace, start=1):
            expected = sum(
                1 for t in result.success_times if t is None or t > slot
            )
            assert pending == expected


class TestEstimateLatency:
    def test_reproducible_and_worker_independent(self):
        kwargs = dict(trials=2_000, horizon=100, base_seed=42)
        a = estimate_latency([F, F], **kwargs)
        b = estimate_latency([F, F], **kwargs)
        c = estimate_latency([F, F], **kwargs, workers=2)
        assert a == b == c

    def test_two_player_mean_matches_exact_value(self):
        # Chain analysis puts the expected latency at exactly 3.
        stats = estimate_latency([F, F], trials=100_000, horizon=10_000, base_seed=7)
        assert stats.completion_prob > 0.9999
        assert abs(stats.truncated_mean - 3.0) < 5 * stats.truncated_stderr

    def test_single_player_always_completes(self):
        spec = make_age_based((), 0.5)
        stats = estimate_latency([spec], trials=100_000, horizon=100, base_seed=5)
        assert stats.completion_prob == 1.0

    def test_wait_two_deviator_latency_is_three(self):
        g = build_deviation(DeviationSpec(prefix=(0, 0, 1), base=F))
        stats = estimate_latency([g, F], trials=100_000, horizon=10_000, base_seed=11)
        assert 2.95 <= stats.per_player_mean[0] <= 3.05

    def test_per_slot_pending_trace(self):
        stats = estimate_latency(
            [PERSISTENT, PERSISTENT],
            trials=50,
            horizon=10,
            base_seed=1,
            trace_pending=True,
        )
        assert stats.per_slot_pending == (2.0,) * 10

    def test_default_horizon_rule(self):
        assert default_horizon(2) == 100
        assert default_horizon(100) == 5000
