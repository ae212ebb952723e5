"""Slotted collision-channel simulator.

Every pending player holds one packet from slot 1 on. In each slot, every
pending player independently transmits with the probability her protocol
assigns to her own history; exactly one transmitter means success (the
player exits), two or more collide, zero leaves the channel idle. The game
runs until everyone has finished or a horizon is reached.

Randomness discipline
---------------------
All draws come from counter-based Philox streams. Trial ``i`` of a run with
root seed ``s`` uses the stream ``Philox(key=s, counter=[0, 0, 0, i])``, so
trials are reproducible and independent of scheduling; within a slot, the
per-player uniforms are consumed in ascending player-id order. Ghost draws
for already-finished players (see ``ghost_flips``) come from the parallel
stream ``counter=[0, 0, 1, i]`` and therefore never perturb outcomes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Iterator, Optional, Sequence

import numpy as np

from .protocols import ProtocolSpec

DEFAULT_QUANTILES = (0.5, 0.9, 0.99, 1.0)


class SlotKind(Enum):
    IDLE = "idle"
    SUCCESS = "success"
    COLLISION = "collision"


@dataclass(frozen=True)
class SlotOutcome:
    """Outcome of one slot: idle, a single success, or a collision."""

    kind: SlotKind
    transmitters: tuple

    @property
    def successful_player(self) -> Optional[int]:
        if self.kind == SlotKind.SUCCESS:
            return self.transmitters[0]
        return None


def classify_slot(transmitters: Sequence[int]) -> SlotOutcome:
    """Exhaustive, mutually exclusive slot classification."""
    tx = tuple(sorted(transmitters))
    if len(tx) == 0:
        return SlotOutcome(SlotKind.IDLE, tx)
    if len(tx) == 1:
        return SlotOutcome(SlotKind.SUCCESS, tx)
    return SlotOutcome(SlotKind.COLLISION, tx)


@dataclass(frozen=True)
class TrialResult:
    """Per-player success times from one simulated game.

    ``success_times[i]`` is the slot at which player ``i`` transmitted
    alone, or ``None`` when she was still pending at the horizon.
    """

    success_times: tuple
    slots_elapsed: int
    horizon: int
    histories: Optional[tuple] = None

    @property
    def players(self) -> int:
        return len(self.success_times)

    def finished(self, player: int) -> bool:
        return self.success_times[player] is not None

    @property
    def all_finished(self) -> bool:
        return all(t is not None for t in self.success_times)

    @property
    def max_latency(self) -> float:
        """Largest truncated success time, with unfinished players counted
        at the horizon."""
        return float(
            max(t if t is not None else self.horizon for t in self.success_times)
        )

    def pending_at(self, t: int) -> int:
        """Number of players still pending at the start of slot ``t``."""
        return sum(1 for s in self.success_times if s is None or s >= t)


@dataclass(frozen=True)
class LatencyStats:
    """Monte Carlo latency summary over independent trials.

    ``truncated_mean`` averages ``min(T_i, horizon)`` over all (player,
    trial) pairs; ``completion_prob`` is the fraction of those pairs that
    finished before the horizon. A possibly-infinite expectation is never
    reported as a plain mean: the completion probability always qualifies
    the truncated estimate.
    """

    trials: int
    players: int
    horizon: int
    completion_prob: float
    truncated_mean: float
    truncated_stderr: float
    per_player_mean: tuple
    per_player_stderr: tuple
    max_latency_quantiles: dict
    per_slot_pending: Optional[tuple] = None

    def to_dict(self) -> dict:
        return {
            "trials": self.trials,
            "players": self.players,
            "horizon": self.horizon,
            "completion_prob": self.completion_prob,
            "truncated_mean": self.truncated_mean,
            "truncated_stderr": self.truncated_stderr,
            "per_player_mean": list(self.per_player_mean),
            "per_player_stderr": list(self.per_player_stderr),
            "max_latency_quantiles": {str(q): v for q, v in self.max_latency_quantiles.items()},
        }


def default_horizon(players: int) -> int:
    """50 slots per player, enough to make truncation bias negligible for
    the finite-latency profiles analyzed here."""
    return 50 * max(1, players)


def chunk_bounds(trials: int, workers: int, min_chunk: int = 64) -> list:
    """Trial-index ranges for worker chunks.

    Since every trial has its own seed-derived stream, the chunking never
    changes results; small jobs collapse to a single inline chunk so worker
    processes are only spawned when they can pay for themselves.
    """
    workers = min(max(1, workers), max(1, trials // min_chunk))
    bounds = np.linspace(0, trials, workers + 1).astype(int)
    return [(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]


class _TrialStreams:
    """Cheap per-trial Philox streams: counter word 3 is the trial index,
    counter word 2 distinguishes the ghost stream."""

    def __init__(self, key):
        self._bit_gen = np.random.Philox(key=key)
        self.generator = np.random.Generator(self._bit_gen)

    def reset(self, index: int, stream: int = 0) -> np.random.Generator:
        state = self._bit_gen.state
        counter = state["state"]["counter"]
        counter[:] = 0
        counter[2] = stream
        counter[3] = index
        state["buffer_pos"] = 4
        self._bit_gen.state = state
        return self.generator


def _resolve_rng(seed) -> np.random.Generator:
    """Accepts an int root seed, a ``(root_seed, trial_index)`` pair
    matching the documented per-trial split, or a ready Generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    if isinstance(seed, tuple) and len(seed) == 2:
        key, index = seed
        return np.random.Generator(np.random.Philox(key=key, counter=[0, 0, 0, index]))
    return np.random.Generator(np.random.Philox(key=seed))


def _play(
    rules,
    horizon: int,
    rng: np.random.Generator,
    ghost_rng: Optional[np.random.Generator] = None,
    trace: Optional[list] = None,
    record_histories: bool = False,
):
    n = len(rules)
    histories = [[] for _ in range(n)]
    success = [None] * n
    pending = list(range(n))
    random = rng.random
    t = 0
    while pending and t < horizon:
        t += 1
        draws = random(len(pending)).tolist()
        transmitters = []
        for u, pid in zip(draws, pending):
            h = histories[pid]
            if u < rules[pid](h, t):
                h.append(1)
                transmitters.append(pid)
            else:
                h.append(0)
        if len(transmitters) == 1:
            pid = transmitters[0]
            success[pid] = t
            pending.remove(pid)
        if ghost_rng is not None:
            for pid in range(n):
                h = histories[pid]
                if len(h) < t:
                    h.append(1 if ghost_rng.random() < rules[pid](h, t) else 0)
        if trace is not None:
            trace.append(len(pending))
    return TrialResult(
        success_times=tuple(success),
        slots_elapsed=t,
        horizon=horizon,
        histories=tuple(tuple(h) for h in histories) if record_histories else None,
    )


def run_trial(
    profile: Sequence[ProtocolSpec],
    horizon: int,
    seed,
    record_histories: bool = False,
    ghost_flips: bool = False,
) -> TrialResult:
    """Simulate one game of ``len(profile)`` players up to ``horizon`` slots.

    Deterministic given the seed. With ``ghost_flips`` enabled, players keep
    flipping their protocol coins after finishing so their logged histories
    cover every simulated slot; the ghost draws come from a separate stream,
    so outcomes are identical with the flag on or off.
    """
    if len(profile) < 1:
        raise ValueError("profile must contain at least one player")
    if horizon < 1:
        raise ValueError(f"horizon must be >= 1, got {horizon}")
    rng = _resolve_rng(seed)
    ghost = None
    if ghost_flips:
        if isinstance(seed, tuple) and len(seed) == 2:
            key, index = seed
            ghost = np.random.Generator(
                np.random.Philox(key=key, counter=[0, 0, 1, index])
            )
        elif isinstance(seed, np.random.Generator):
            raise ValueError("ghost_flips needs a seed, not a ready Generator")
        else:
            ghost = np.random.Generator(np.random.Philox(key=seed, counter=[0, 0, 1, 0]))
        record_histories = True
    rules = [spec.rule for spec in profile]
    return _play(rules, horizon, rng, ghost_rng=ghost, record_histories=record_histories)


def run_trial_traced(
    profile: Sequence[ProtocolSpec], horizon: int, seed
) -> tuple:
    """Like :func:`run_trial`, additionally returning the number of pending
    players after each simulated slot."""
    if len(profile) < 1:
        raise ValueError("profile must contain at least one player")
    if horizon < 1:
        raise ValueError(f"horizon must be >= 1, got {horizon}")
    rng = _resolve_rng(seed)
    rules = [spec.rule for spec in profile]
    trace: list = []
    result = _play(rules, horizon, rng, trace=trace)
    return result, tuple(trace)


def iter_trials(
    profile: Sequence[ProtocolSpec],
    trials: int,
    horizon: int,
    base_seed,
    start: int = 0,
) -> Iterator[TrialResult]:
    """Yield ``trials`` independent trials, trial ``i`` on its documented
    per-trial stream. ``start`` offsets the trial index (used by workers)."""
    rules = [spec.rule for spec in profile]
    streams = _TrialStreams(base_seed)
    for i in range(start, start + trials):
        yield _play(rules, horizon, streams.reset(i))


def _chunk_stats(args) -> dict:
    profile, trials, horizon, base_seed, start, trace_pending = args
    n = len(profile)
    finished = 0
    total = 0
    mean_acc = 0.0
    mean_acc_sq = 0.0
    player_acc = [0.0] * n
    player_acc_sq = [0.0] * n
    max_latencies = []
    pending_sums: list = []
    rules = [spec.rule for spec in profile]
    streams = _TrialStreams(base_seed)
    for i in range(start, start + trials):
        trace = [] if trace_pending else None
        result = _play(rules, horizon, streams.reset(i), trace=trace)
        worst = 0
        trial_sum = 0.0
        for pid, s in enumerate(result.success_times):
            if s is None:
                s = horizon
            else:
                finished += 1
            total += 1
            trial_sum += s
            player_acc[pid] += s
            player_acc_sq[pid] += s * s
            if s > worst:
                worst = s
        # Latencies within a trial are correlated, so the pooled-mean error
        # is tracked over per-trial averages.
        trial_mean = trial_sum / n
        mean_acc += trial_mean
        mean_acc_sq += trial_mean * trial_mean
        max_latencies.append(worst)
        if trace_pending:
            if len(trace) > len(pending_sums):
                pending_sums.extend([0] * (len(trace) - len(pending_sums)))
            for idx, count in enumerate(trace):
                pending_sums[idx] += count
    return {
        "finished": finished,
        "total": total,
        "mean_sum": mean_acc,
        "mean_sum_sq": mean_acc_sq,
        "player_sum": player_acc,
        "player_sum_sq": player_acc_sq,
        "max_latencies": max_latencies,
        "pending_sums": pending_sums,
    }


def estimate_latency(
    profile: Sequence[ProtocolSpec],
    trials: int,
    horizon: Optional[int] = None,
    base_seed=0,
    workers: int = 1,
    quantiles: Sequence[float] = DEFAULT_QUANTILES,
    trace_pending: bool = False,
) -> LatencyStats:
    """Monte Carlo latency estimate over independent trials.

    Results depend only on ``base_seed`` and ``trials``: per-trial streams
    are derived by the counter split documented in the module header, and
    aggregation merges worker chunks in trial order, so any worker count
    reproduces the single-threaded output exactly.
    """
    if trials < 1:
        raise ValueError(f"trials must be >= 1, got {trials}")
    n = len(profile)
    if n < 1:
        raise ValueError("profile must contain at least one player")
    if horizon is None:
        horizon = default_horizon(n)
    parts = chunk_bounds(trials, workers)
    if len(parts) == 1:
        chunks = [_chunk_stats((profile, trials, horizon, base_seed, 0, trace_pending))]
    else:
        jobs = [
            (profile, b - a, horizon, base_seed, a, trace_pending) for a, b in parts
        ]
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=len(jobs)) as pool:
            chunks = list(pool.map(_chunk_stats, jobs))

    finished = sum(c["finished"] for c in chunks)
    total = sum(c["total"] for c in chunks)
    mean_acc = sum(c["mean_sum"] for c in chunks)
    mean_acc_sq = sum(c["mean_sum_sq"] for c in chunks)
    player_sum = np.sum([c["player_sum"] for c in chunks], axis=0)
    player_sum_sq = np.sum([c["player_sum_sq"] for c in chunks], axis=0)
    max_latencies = np.concatenate([np.asarray(c["max_latencies"], dtype=float) for c in chunks])

    mean = mean_acc / trials
    var = max(0.0, mean_acc_sq / trials - mean * mean)
    stderr = math.sqrt(var / trials)
    p_mean = player_sum / trials
    p_var = np.maximum(0.0, player_sum_sq / trials - p_mean ** 2)
    p_stderr = np.sqrt(p_var / trials)
    q_values = {float(q): float(np.quantile(max_latencies, q)) for q in quantiles}

    per_slot = None
    if trace_pending:
        longest = max(len(c["pending_sums"]) for c in chunks)
        sums = np.zeros(longest)
        for c in chunks:
            part = np.asarray(c["pending_sums"], dtype=float)
            sums[: len(part)] += part
        per_slot = tuple(float(x) / trials for x in sums)

    return LatencyStats(
        trials=trials,
        players=n,
        horizon=horizon,
        completion_prob=finished / total,
        truncated_mean=mean,
        truncated_stderr=stderr,
        per_player_mean=tuple(float(x) for x in p_mean),
        per_player_stderr=tuple(float(x) for x in p_stderr),
        max_latency_quantiles=q_values,
        per_slot_pending=per_slot,
    )
