"""Game-theoretic contention resolution on a slotted collision channel.

Simulation, exact Markov-chain analysis, and equilibrium probing for
acknowledgment-only transmission protocols: players learn about the channel
solely from the success or failure of their own transmission attempts.
"""

from .chains import (
    AbsorbingChain,
    InfiniteLatencyError,
    MdpSpec,
    best_response_chain,
    best_response_transition,
    evaluate_policy_grid,
    evaluate_stationary_policy,
    hitting_times,
    stationary_two_player_latency,
    two_player_protocol_chain,
    two_player_success_time,
)
from .channel import (
    LatencyStats,
    SlotKind,
    SlotOutcome,
    TrialResult,
    classify_slot,
    default_horizon,
    estimate_latency,
    iter_trials,
    run_trial,
    run_trial_traced,
)
from .deviations import (
    DeviationReport,
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
    stationary_equilibrium_scan,
    two_player_deviation_latency,
)
from .experiments import (
    EfficiencyReport,
    IntervalStats,
    interval_contraction_stats,
    run_efficiency_experiment,
    slot_success_probability,
)
from .protocols import (
    DeadlineSchedule,
    ProtocolClass,
    ProtocolSpec,
    decide,
    from_json,
    is_non_blocking,
    make_age_based,
    make_backoff,
    make_deadline_protocol,
    make_deadline_schedule,
    make_stationary_two_player,
    make_two_player_equilibrium,
    to_json,
)

__version__ = "0.1.0"
