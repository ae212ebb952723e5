"""Exact analysis of the two-player game via absorbing Markov chains.

The module provides a small hitting-time solver for absorbing chains and
uses it to evaluate the two-player contention game exactly: the chain for
two players both running the equilibrium protocol, the best-response chain
of a player who transmits with state-dependent probabilities against an
equilibrium opponent, and the generalized stationary chain whose hitting
time has the closed form (2 - p) / (2 p (1 - p)).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ROW_SUM_TOL = 1e-12
RESIDUAL_TOL = 1e-9


class InfiniteLatencyError(RuntimeError):
    """The target state is unreachable, so the expected hitting time is
    infinite."""


@dataclass(frozen=True)
class AbsorbingChain:
    """Finite Markov chain with a designated absorbing target state."""

    states: tuple
    matrix: np.ndarray
    target: str

    def __post_init__(self):
        P = np.asarray(self.matrix, dtype=float)
        object.__setattr__(self, "matrix", P)
        m = len(self.states)
        if P.shape != (m, m):
            raise ValueError(f"matrix shape {P.shape} does not match {m} states")
        if self.target not in self.states:
            raise ValueError(f"target {self.target!r} is not a state")
        if np.any(P < -ROW_SUM_TOL) or np.any(P > 1 + ROW_SUM_TOL):
            raise ValueError("transition probabilities must lie in [0, 1]")
        row_sums = P.sum(axis=1)
        if np.max(np.abs(row_sums - 1.0)) > ROW_SUM_TOL:
            raise ValueError(f"rows must sum to 1 within {ROW_SUM_TOL}: {row_sums}")
        ti = self.states.index(self.target)
        unit = np.zeros(m)
        unit[ti] = 1.0
        if np.max(np.abs(P[ti] - unit)) > ROW_SUM_TOL:
            raise ValueError("target row must be the unit vector on itself")

    def reaches_target(self) -> dict:
        """Which states reach the target with positive probability."""
        m = len(self.states)
        ti = self.states.index(self.target)
        support = self.matrix > 0.0
        reached = {ti}
        frontier = [ti]
        while frontier:
            j = frontier.pop()
            for i in range(m):
                if i not in reached and support[i, j]:
                    reached.add(i)
                    frontier.append(i)
        return {s: (i in reached) for i, s in enumerate(self.states)}


def hitting_times(chain: AbsorbingChain) -> dict:
    """Expected steps from each state to the target.

    Solves ``k[target] = 0`` and ``k[s] = 1 + sum_s' P[s, s'] k[s']`` for the
    remaining states, refusing with :class:`InfiniteLatencyError` when some
    state cannot reach the target at all.
    """
    reach = chain.reaches_target()
    unreachable = [s for s, ok in reach.items() if not ok]
    if unreachable:
        raise InfiniteLatencyError(
            f"states {unreachable} never reach {chain.target!r}; "
            "hitting times are infinite"
        )
    states = chain.states
    ti = states.index(chain.target)
    mask = np.ones(len(states), dtype=bool)
    mask[ti] = False
    Q = chain.matrix[np.ix_(mask, mask)]
    A = np.eye(Q.shape[0]) - Q
    b = np.ones(Q.shape[0])
    try:
        k = np.linalg.solve(A, b)
    except np.linalg.LinAlgError as exc:
        raise InfiniteLatencyError(f"hitting-time system is singular: {exc}") from exc
    residual = np.max(np.abs(A @ k - b))
    if residual > RESIDUAL_TOL:
        raise InfiniteLatencyError(
            f"hitting-time solve residual {residual:.3e} exceeds {RESIDUAL_TOL}"
        )
    full = np.zeros(len(states))
    full[mask] = k
    return {s: float(full[i]) for i, s in enumerate(states)}


def two_player_protocol_chain() -> AbsorbingChain:
    """Chain of the game where both players follow the two-player
    equilibrium protocol, from one player's perspective.

    States: A - both pending after an own transmission (or at the start);
    B - both pending, unknown to the player (she was quiet); C - only she
    is pending; D - she has succeeded.
    """
    states = ("A", "B", "C", "D")
    P = np.array(
        [
            [4 / 9, 1 / 9, 2 / 9, 2 / 9],
            [1.0, 0.0, 0.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
            [0.0, 0.0, 0.0, 1.0],
        ]
    )
    return AbsorbingChain(states=states, matrix=P, target="D")


def two_player_success_time(last_transmitted: int) -> float:
    """Expected success time of a pending player given her last-slot action.

    After a transmission (``last_transmitted=1``, or at the game start) the
    player sits in state A. After a quiet slot she is in B with probability
    1/3 and in C with probability 2/3, because the opponent's forced
    transmission succeeded unless she had collided with him.
    """
    if last_transmitted not in (0, 1):
        raise ValueError(f"last-slot action must be 0 or 1, got {last_transmitted}")
    k = hitting_times(two_player_protocol_chain())
    if last_transmitted:
        return k["A"]
    return (1 / 3) * k["B"] + (2 / 3) * k["C"]


def best_response_transition(a: float) -> np.ndarray:
    """One-step transition matrix of the best-response decision process
    for action ``a`` (the probability of transmitting this slot).

    State order: A (both pending, mutual knowledge), E (uncertain after one
    quiet slot), F (opponent gone, known), D (success).
    """
    if not 0.0 <= a <= 1.0:
        raise ValueError(f"action must lie in [0, 1], got {a}")
    return np.array(
        [
            [2 * a / 3, 1 - a, 0.0, a / 3],
            [a / 3, 0.0, 1 - a, 2 * a / 3],
            [0.0, 0.0, 1 - a, a],
            [0.0, 0.0, 0.0, 1.0],
        ]
    )


@dataclass(frozen=True)
class MdpSpec:
    """Undiscounted decision process faced by a player whose opponent runs
    the two-player equilibrium protocol.

    Actions are transmission probabilities in [0, 1]; each slot spent
    pending costs 1 and the success state D costs 0.
    """

    states: tuple = ("A", "E", "F", "D")
    step_costs: tuple = (1.0, 1.0, 1.0, 0.0)
    initial: tuple = (1.0, 0.0, 0.0, 0.0)

    def transition(self, a: float) -> np.ndarray:
        return best_response_transition(a)


def best_response_chain(p_a: float, p_e: float) -> AbsorbingChain:
    """Chain of a player transmitting with probability ``p_a`` in state A
    and ``p_e`` in state E (and 1 in F, the only sensible choice there),
    against an opponent on the two-player equilibrium protocol."""
    for name, p in (("p_a", p_a), ("p_e", p_e)):
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"{name} must lie in [0, 1], got {p}")
    states = ("A", "E", "F", "D")
    P = np.array(
        [
            [2 * p_a / 3, 1 - p_a, 0.0, p_a / 3],
            [p_e / 3, 0.0, 1 - p_e, 2 * p_e / 3],
            [0.0, 0.0, 0.0, 1.0],
            [0.0, 0.0, 0.0, 1.0],
        ]
    )
    return AbsorbingChain(states=states, matrix=P, target="D")


def evaluate_stationary_policy(p_a: float, p_e: float) -> tuple:
    """Expected latencies (from A, from E) of the stationary best-response
    policy ``(p_a, p_e)``. Both are policy-independent: 3 and 2."""
    k = hitting_times(best_response_chain(p_a, p_e))
    return k["A"], k["E"]


def stationary_two_player_latency(p: float) -> float:
    """Expected latency when both players run the stationary protocol that
    transmits with probability ``p`` after a collision (or at the start)
    and with probability 1 after one quiet slot.

    Solved from the generalized four-state chain and cross-checked against
    the closed form ``(2 - p) / (2 p (1 - p))``.
    """
    if not 0.0 < p < 1.0:
        raise InfiniteLatencyError(
            f"stationary protocol with p={p} never finishes: expected latency "
            "is infinite at p in {0, 1}"
        )
    q = 1.0 - p
    states = ("A", "B", "C", "D")
    P = np.array(
        [
            [p * p, q * q, p * q, p * q],
            [1.0, 0.0, 0.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
            [0.0, 0.0, 0.0, 1.0],
        ]
    )
    k = hitting_times(AbsorbingChain(states=states, matrix=P, target="D"))
    closed_form = (2.0 - p) / (2.0 * p * q)
    if abs(k["A"] - closed_form) > RESIDUAL_TOL * max(1.0, closed_form):
        raise AssertionError(
            f"chain solve {k['A']} disagrees with closed form {closed_form}"
        )
    return k["A"]


def evaluate_policy_grid(points: int = 21) -> list:
    """Latencies of the stationary best-response policy over an evenly
    spaced ``points x points`` grid on [0, 1]^2.

    Returns rows ``(p_a, p_e, latency_from_A, latency_from_E)``.
    """
    grid = np.linspace(0.0, 1.0, points)
    rows = []
    for p_a in grid:
        for p_e in grid:
            k_a, k_e = evaluate_stationary_policy(float(p_a), float(p_e))
            rows.append((float(p_a), float(p_e), k_a, k_e))
    return rows


# --- export helpers ------------------------------------------------------


def chain_to_dict(chain: AbsorbingChain) -> dict:
    return {
        "states": list(chain.states),
        "matrix": [[float(x) for x in row] for row in chain.matrix],
        "target": chain.target,
    }


def chain_from_dict(doc: dict) -> AbsorbingChain:
    return AbsorbingChain(
        states=tuple(doc["states"]),
        matrix=np.asarray(doc["matrix"], dtype=float),
        target=doc["target"],
    )


def chain_to_text(chain: AbsorbingChain) -> str:
    """Plain-text transition table, one row per state."""
    width = max(len(s) for s in chain.states)
    header = " " * (width + 2) + "  ".join(f"{s:>10}" for s in chain.states)
    lines = [header]
    for s, row in zip(chain.states, chain.matrix):
        cells = "  ".join(f"{x:10.6f}" for x in row)
        mark = "*" if s == chain.target else " "
        lines.append(f"{s:>{width}}{mark} {cells}")
    return "\n".join(lines)
