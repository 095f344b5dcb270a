"""Independent verification engines: exhaustive policy enumeration, exact
linear policy evaluation, and seeded Monte Carlo estimators.

Kept deliberately separate from the planner: matrices are rebuilt densely
from the model dictionaries and solved by partial-pivot elimination, so a
planner bug cannot silently propagate into its own check.
"""
from __future__ import annotations

import itertools
import random
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .mdp import NOHELP, TransitionModel, action_order, help_action, terminal_outcome
from .planner import PlannerError, RewardConfig

ENUMERATION_CAP = 12


class OracleError(ValueError):
    pass


@dataclass(frozen=True)
class PolicyEvaluation:
    success: dict[str, float]
    usage: dict[str, tuple[float, ...]]
    value: dict[str, float]


def _dense_arrays(model: TransitionModel, actions: Sequence[str]):
    states = model.nonterminal_states()
    index = {s: i for i, s in enumerate(states)}
    n = len(states)
    P = {a: np.zeros((n, n)) for a in actions}
    succ = {a: np.zeros(n) for a in actions}
    for a in actions:
        for s in states:
            row = model.row(s, a)
            if row is None:
                raise OracleError(f"missing action row ({s!r}, {a!r})")
            for s2, prob in row.items():
                outcome = terminal_outcome(s2)
                if outcome == "success":
                    succ[a][index[s]] += prob
                elif outcome is None:
                    P[a][index[s], index[s2]] += prob
    return states, index, P, succ


def exact_policy_eval(
    model: TransitionModel, policy: dict[str, str], cfg: RewardConfig
) -> PolicyEvaluation:
    """Solve the linear S/M systems for a fixed deterministic policy."""
    actions = action_order(cfg.n_help)
    states, index, P, succ = _dense_arrays(model, actions)
    n = len(states)
    P_pi = np.zeros((n, n))
    succ_pi = np.zeros(n)
    help_ind = np.zeros((cfg.n_help, n))
    for s in states:
        if s not in policy:
            raise OracleError(f"policy missing state {s!r}")
        a = policy[s]
        i = index[s]
        P_pi[i] = P[a][i]
        succ_pi[i] = succ[a][i]
        if a != NOHELP:
            help_ind[actions.index(a) - 1, i] = 1.0
    A = np.eye(n) - cfg.gamma * P_pi
    try:
        rhs = np.column_stack([cfg.gamma * succ_pi] + [help_ind[i] for i in range(cfg.n_help)])
        sol = np.linalg.solve(A, rhs) if n else np.zeros((0, 1 + cfg.n_help))
    except np.linalg.LinAlgError as exc:
        raise OracleError(f"singular policy-evaluation system: {exc}") from exc
    S = sol[:, 0]
    M = sol[:, 1:].T
    r = np.asarray(cfg.r)
    success = {s: float(S[index[s]]) for s in states}
    usage = {s: tuple(float(M[i, index[s]]) for i in range(cfg.n_help)) for s in states}
    value = {s: float(S[index[s]] - r @ M[:, index[s]]) for s in states}
    for s in sorted(model.support):
        outcome = terminal_outcome(s)
        if outcome is not None:
            win = 1.0 if outcome == "success" else 0.0
            success[s] = win
            usage[s] = tuple(0.0 for _ in range(cfg.n_help))
            value[s] = win
    return PolicyEvaluation(success=success, usage=usage, value=value)


@dataclass(frozen=True)
class EnumerationReport:
    starts: tuple[str, ...]
    policies: tuple[tuple[str, ...], ...]
    values: np.ndarray  # (n_policies, n_starts)
    best_policy: dict[str, str]
    best_value: dict[str, float]  # per start: max over all policies
    policy_count: int


def brute_force_optimal(
    model: TransitionModel, cfg: RewardConfig, starts: Sequence[str]
) -> EnumerationReport:
    """Enumerate every deterministic stationary policy and evaluate exactly."""
    states = model.nonterminal_states()
    if len(states) > ENUMERATION_CAP:
        raise OracleError(
            f"{len(states)} non-terminal states exceeds enumeration cap {ENUMERATION_CAP}"
        )
    actions = action_order(cfg.n_help)
    policies = []
    values = []
    best_mean = -np.inf
    best_policy: dict[str, str] = {}
    for combo in itertools.product(actions, repeat=len(states)):
        policy = dict(zip(states, combo))
        ev = exact_policy_eval(model, policy, cfg)
        row = [ev.value[s] for s in starts]
        policies.append(combo)
        values.append(row)
        mean = float(np.mean(row)) if row else 0.0
        if mean > best_mean:
            best_mean = mean
            best_policy = policy
    arr = np.asarray(values) if values else np.zeros((1, len(starts)))
    best_value = {s: float(arr[:, j].max()) for j, s in enumerate(starts)}
    return EnumerationReport(
        starts=tuple(starts),
        policies=tuple(policies),
        values=arr,
        best_policy=best_policy,
        best_value=best_value,
        policy_count=len(policies),
    )


@dataclass(frozen=True)
class MonteCarloEstimate:
    sr: float
    sr_se: float
    usage: tuple[float, ...]
    usage_se: tuple[float, ...]
    n: int


def monte_carlo_estimate(
    episode_fn: Callable[[random.Random], tuple[bool, Sequence[float]]],
    n: int,
    seed: int,
) -> MonteCarloEstimate:
    """Seeded mean/SE estimates of success rate and per-intervention usage.

    ``episode_fn`` runs one episode with the provided RNG and returns
    (success, usage_vector); episode i gets its own child RNG so estimates
    are reproducible and order-independent.
    """
    if n < 1:
        raise OracleError("n must be >= 1")
    wins = np.zeros(n)
    usage: np.ndarray | None = None
    for i in range(n):
        rng = random.Random(seed * 1_000_003 + i)
        won, u = episode_fn(rng)
        wins[i] = 1.0 if won else 0.0
        u = np.asarray(u, dtype=float)
        if usage is None:
            usage = np.zeros((n, len(u)))
        usage[i] = u
    assert usage is not None
    sr = float(wins.mean())
    sr_se = float(wins.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    u_mean = tuple(float(x) for x in usage.mean(axis=0))
    u_se = tuple(
        float(x) for x in (usage.std(axis=0, ddof=1) / np.sqrt(n) if n > 1 else np.zeros(usage.shape[1]))
    )
    return MonteCarloEstimate(sr=sr, sr_se=sr_se, usage=u_mean, usage_se=u_se, n=n)


def check_against_planner(report: EnumerationReport, planner_value: dict[str, float], tol: float = 1e-8) -> float:
    """Worst-case gap between planner values and enumerated optima at starts."""
    worst = 0.0
    for s in report.starts:
        worst = max(worst, abs(report.best_value[s] - planner_value[s]))
    if worst > tol:
        raise PlannerError(f"planner value deviates from enumeration by {worst:.3e}")
    return worst
