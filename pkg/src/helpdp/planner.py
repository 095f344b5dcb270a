"""Offline DP core: usage/policy fixed-point iteration, a value-iteration
reference solver, the V = S - r.M decomposition, and binary reward search
against a usage budget.

The fixed point is computed in two stages: synchronous (Jacobi) sweeps of
the usage/policy recursion until the max-norm change drops below epsilon,
then an exact polish that evaluates the stabilized policy by a sparse
linear solve and re-derives the policy from the exact values until it stops
changing.  The polish removes the O(epsilon / (1 - gamma)) iteration tail so
converged solutions satisfy the value decomposition to ~1e-12.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu

from .mdp import (
    NOHELP,
    SuccessModel,
    TransitionModel,
    action_order,
    help_action,
    is_terminal,
    terminal_outcome,
)

DM_ZERO_TOL = 1e-9  # |dM| below this defaults the paper-literal rule to nohelp
TIE_TOL = 1e-12  # branch values closer than this count as a tie (nohelp wins)


class PlannerError(ValueError):
    pass


class BudgetInfeasibleError(PlannerError):
    def __init__(self, budget: float, usage_at_hi: float, r_hi: float) -> None:
        super().__init__(
            f"budget infeasible within bounds: E[U]={usage_at_hi:.6g} > C={budget:.6g} at r={r_hi:.6g}"
        )
        self.budget = budget
        self.usage_at_hi = usage_at_hi
        self.r_hi = r_hi


@dataclass(frozen=True)
class RewardConfig:
    """Per-help costs and solver settings.

    ``r`` holds one nonnegative cost per intervention type; ``variant``
    selects the policy rule ('value_consistent' default, 'paper_literal'
    for the published threshold with success-weighted usage differences).
    """

    r: tuple[float, ...]
    gamma: float = 0.99
    epsilon: float = 1e-8
    max_iters: int = 10_000
    variant: str = "value_consistent"

    def __post_init__(self) -> None:
        if not self.r:
            raise PlannerError("at least one help cost is required")
        if any(ri < 0 for ri in self.r):
            raise PlannerError(f"help costs must be >= 0, got {self.r}")
        if not 0.0 < self.gamma <= 1.0:
            raise PlannerError(f"gamma must be in (0, 1], got {self.gamma}")
        if self.epsilon <= 0:
            raise PlannerError("epsilon must be positive")
        if self.max_iters < 1:
            raise PlannerError("max_iters must be positive")
        if self.variant not in ("value_consistent", "paper_literal"):
            raise PlannerError(f"unknown variant {self.variant!r}")

    @property
    def n_help(self) -> int:
        return len(self.r)


@dataclass(frozen=True)
class Solution:
    """Converged usage/success/policy tables plus the value function."""

    usage: dict[str, tuple[float, ...]]
    success: dict[str, float]
    policy: dict[str, str]
    value: dict[str, float]
    r: tuple[float, ...]
    gamma: float
    variant: str
    iterations_run: int
    converged: bool
    expected_usage: tuple[float, ...] | None = None
    iteration_deltas: tuple[float, ...] = field(default=(), repr=False)

    @property
    def n_help(self) -> int:
        return len(self.r)


@dataclass
class _Compiled:
    states: list[str]
    index: dict[str, int]
    actions: list[str]
    n_help: int
    P: dict[str, sparse.csr_matrix]  # non-terminal -> non-terminal mass
    succ: dict[str, np.ndarray]  # mass reaching terminal success


def _compile(model: TransitionModel, n_help: int, gamma: float) -> _Compiled:
    states = model.nonterminal_states()
    index = {s: i for i, s in enumerate(states)}
    actions = action_order(n_help)
    n = len(states)
    P: dict[str, sparse.csr_matrix] = {}
    succ: dict[str, np.ndarray] = {}
    for a in actions:
        rows, cols, vals = [], [], []
        sv = np.zeros(n)
        for s in states:
            row = model.row(s, a)
            if row is None:
                raise PlannerError(f"missing action row ({s!r}, {a!r})")
            i = index[s]
            for s2, p in row.items():
                outcome = terminal_outcome(s2)
                if outcome == "success":
                    sv[i] += p
                elif outcome == "failure":
                    continue
                else:
                    rows.append(i)
                    cols.append(index[s2])
                    vals.append(p)
        P[a] = sparse.csr_matrix((vals, (rows, cols)), shape=(n, n))
        succ[a] = sv
    comp = _Compiled(states=states, index=index, actions=actions, n_help=n_help, P=P, succ=succ)
    if gamma == 1.0:
        _check_absorbing(model, comp)
    return comp


def _check_absorbing(model: TransitionModel, comp: _Compiled) -> None:
    """Reject gamma=1 when some policy admits a terminal-free recurrent class.

    A nonempty set B of non-terminal states is trapping iff every s in B has
    some action whose whole successor support stays inside B; iterated
    removal finds the largest such B.
    """
    alive = set(comp.states)
    changed = True
    while changed:
        changed = False
        for s in list(alive):
            keeps = False
            for a in comp.actions:
                row = model.row(s, a)
                if row is not None and all(s2 in alive for s2 in row):
                    keeps = True
                    break
            if not keeps:
                alive.discard(s)
                changed = True
    if alive:
        raise PlannerError(f"improper chain: trapping non-terminal states {sorted(alive)[:5]}")


def _success_arrays(comp: _Compiled, success: SuccessModel) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    for a in comp.actions:
        vec = np.empty(len(comp.states))
        for s, i in comp.index.items():
            if not success.has(s, a):
                raise PlannerError(f"no success estimate for ({s!r}, {a!r})")
            vec[i] = success.get(s, a)
        out[a] = vec
    return out


def _branch_values(
    comp: _Compiled, cfg: RewardConfig, S: np.ndarray, M: np.ndarray
) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    """One synchronous application of the piecewise recursions per branch.

    Returns S_br[a] and M_br[a] (shape (K, n)); the help_i branch of M adds
    the immediate unit of usage for intervention i.
    """
    S_br: dict[str, np.ndarray] = {}
    M_br: dict[str, np.ndarray] = {}
    for ai, a in enumerate(comp.actions):
        S_br[a] = cfg.gamma * (comp.P[a] @ S + comp.succ[a])
        mb = cfg.gamma * (comp.P[a] @ M.T).T
        if ai > 0:
            mb[ai - 1] += 1.0
        M_br[a] = mb
    return S_br, M_br


def _select_value_consistent(
    comp: _Compiled,
    cfg: RewardConfig,
    S_br: dict[str, np.ndarray],
    M_br: dict[str, np.ndarray],
) -> np.ndarray:
    # help iff dS > r.dM, handled as a branch-value comparison so all sign
    # cases of (dS, dM) resolve without division; ties (within rounding
    # noise) keep nohelp, ties among helps keep the lowest index.
    r = np.asarray(cfg.r)
    best = np.zeros(len(comp.states), dtype=int)
    best_q = S_br[NOHELP] - r @ M_br[NOHELP]
    for ai, a in enumerate(comp.actions[1:], start=1):
        q = S_br[a] - r @ M_br[a]
        mask = q > best_q + TIE_TOL
        best[mask] = ai
        best_q = np.where(mask, q, best_q)
    return best


def _select_paper_literal(
    comp: _Compiled,
    cfg: RewardConfig,
    M_br: dict[str, np.ndarray],
    p: dict[str, np.ndarray],
) -> np.ndarray:
    if comp.n_help == 1:
        h = help_action(1)
        dp = p[h] - p[NOHELP]
        dM = p[h] * M_br[h][0] - p[NOHELP] * M_br[NOHELP][0]
        usable = np.abs(dM) >= DM_ZERO_TOL
        ratio = np.where(usable, dp / np.where(usable, dM, 1.0), 0.0)
        return np.where(usable & (cfg.r[0] < ratio), 1, 0)
    n = len(comp.states)
    choice = np.zeros(n, dtype=int)
    for si in range(n):
        passing = []
        for i in range(1, comp.n_help + 1):
            a = help_action(i)
            dp = p[a][si] - p[NOHELP][si]
            dM = p[a][si] * M_br[a][i - 1, si] - p[NOHELP][si] * M_br[NOHELP][i - 1, si]
            if abs(dM) >= DM_ZERO_TOL and cfg.r[i - 1] < dp / dM:
                passing.append(i)
        if not passing:
            continue
        # among passing helps, minimize the combined discounted cost
        costs = []
        for i in passing:
            a = help_action(i)
            costs.append(sum(cfg.r[j] * M_br[a][j, si] for j in range(comp.n_help)))
        choice[si] = passing[int(np.argmin(costs))]
    return choice


def _select(
    comp: _Compiled,
    cfg: RewardConfig,
    S_br: dict[str, np.ndarray],
    M_br: dict[str, np.ndarray],
    p: dict[str, np.ndarray] | None,
) -> np.ndarray:
    if cfg.variant == "paper_literal":
        assert p is not None
        return _select_paper_literal(comp, cfg, M_br, p)
    return _select_value_consistent(comp, cfg, S_br, M_br)


def _policy_rows(comp: _Compiled, choice: np.ndarray) -> tuple[sparse.csr_matrix, np.ndarray]:
    """Row-select each state's chosen-action transition row."""
    n = len(comp.states)
    parts, order = [], []
    succ_pi = np.zeros(n)
    for ai, a in enumerate(comp.actions):
        idx = np.where(choice == ai)[0]
        if idx.size == 0:
            continue
        parts.append(comp.P[a][idx])
        order.append(idx)
        succ_pi[idx] = comp.succ[a][idx]
    order_arr = np.concatenate(order)
    inv = np.empty(n, dtype=int)
    inv[order_arr] = np.arange(n)
    P_pi = sparse.vstack(parts, format="csr")[inv]
    return P_pi, succ_pi


def _exact_eval(
    comp: _Compiled, cfg: RewardConfig, choice: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Exact (S, M) for a fixed policy via one sparse LU factorization."""
    n = len(comp.states)
    if n == 0:
        return np.zeros(0), np.zeros((cfg.n_help, 0))
    P_pi, succ_pi = _policy_rows(comp, choice)
    A = (sparse.identity(n, format="csc") - cfg.gamma * P_pi).tocsc()
    try:
        lu = splu(A)
    except RuntimeError as exc:  # singular factor
        raise PlannerError(f"singular policy-evaluation system: {exc}") from exc
    S = lu.solve(cfg.gamma * succ_pi)
    M = np.zeros((cfg.n_help, n))
    for i in range(cfg.n_help):
        ind = (choice == i + 1).astype(float)
        M[i] = lu.solve(ind)
    return S, M


def _solve(
    model: TransitionModel, success: SuccessModel | None, cfg: RewardConfig
) -> Solution:
    comp = _compile(model, cfg.n_help, cfg.gamma)
    if cfg.variant == "paper_literal":
        if success is None:
            raise PlannerError("paper_literal variant requires a success model")
        p = _success_arrays(comp, success)
    else:
        p = None
    n = len(comp.states)
    idx = np.arange(n)

    S = np.zeros(n)
    M = np.zeros((cfg.n_help, n))
    choice = np.zeros(n, dtype=int)
    deltas: list[float] = []
    converged = False
    iterations = 0
    for iterations in range(1, cfg.max_iters + 1):
        S_br, M_br = _branch_values(comp, cfg, S, M)
        choice = _select(comp, cfg, S_br, M_br, p)
        if n:
            S_all = np.stack([S_br[a] for a in comp.actions])  # (A, n)
            M_all = np.stack([M_br[a] for a in comp.actions])  # (A, K, n)
            new_S = S_all[choice, idx]
            new_M = M_all[choice, :, idx].T
        else:
            new_S, new_M = S, M
        delta = 0.0
        if n:
            delta = max(
                float(np.max(np.abs(new_M - M))), float(np.max(np.abs(new_S - S)))
            )
        deltas.append(delta)
        S, M = new_S, new_M
        if delta < cfg.epsilon:
            converged = True
            break

    if converged and n:
        # Exact polish: evaluate the policy by linear solve, re-derive it from
        # the exact values, repeat until stable (finite, usually 1-2 rounds).
        seen: set[bytes] = set()
        for _ in range(100):
            S, M = _exact_eval(comp, cfg, choice)
            S_br, M_br = _branch_values(comp, cfg, S, M)
            new_choice = _select(comp, cfg, S_br, M_br, p)
            if np.array_equal(new_choice, choice):
                break
            key = new_choice.tobytes()
            if key in seen:
                break
            seen.add(key)
            choice = new_choice
        S, M = _exact_eval(comp, cfg, choice)
    elif n:
        S, M = _exact_eval(comp, cfg, choice)

    r = np.asarray(cfg.r)
    usage = {s: tuple(float(M[i, j]) for i in range(cfg.n_help)) for s, j in comp.index.items()}
    succ_tbl = {s: float(S[j]) for s, j in comp.index.items()}
    value = {s: float(S[j] - r @ M[:, j]) for s, j in comp.index.items()}
    policy = {s: comp.actions[choice[j]] for s, j in comp.index.items()}
    for s in sorted(model.support):
        outcome = terminal_outcome(s)
        if outcome is not None:
            win = 1.0 if outcome == "success" else 0.0
            usage[s] = tuple(0.0 for _ in range(cfg.n_help))
            succ_tbl[s] = win
            value[s] = win
    return Solution(
        usage=usage,
        success=succ_tbl,
        policy=policy,
        value=value,
        r=tuple(cfg.r),
        gamma=cfg.gamma,
        variant=cfg.variant,
        iterations_run=iterations,
        converged=converged,
        iteration_deltas=tuple(deltas),
    )


def usage_policy_iteration(
    model: TransitionModel, success: SuccessModel | None, cfg: RewardConfig
) -> Solution:
    """Single-intervention usage/policy fixed point (K must be 1)."""
    if cfg.n_help != 1:
        raise PlannerError("usage_policy_iteration handles K=1; use multi_usage_policy_iteration")
    return _solve(model, success, cfg)


def multi_usage_policy_iteration(
    model: TransitionModel, success: SuccessModel | None, cfg: RewardConfig
) -> Solution:
    """K >= 2 extension over per-intervention usage tables."""
    if cfg.n_help < 2:
        raise PlannerError("multi_usage_policy_iteration requires K >= 2")
    return _solve(model, success, cfg)


def solve(model: TransitionModel, success: SuccessModel | None, cfg: RewardConfig) -> Solution:
    """Dispatch to the single- or multi-intervention solver by K."""
    return _solve(model, success, cfg)


def value_iteration(
    model: TransitionModel, cfg: RewardConfig
) -> tuple[dict[str, float], dict[str, str]]:
    """Bellman-optimality reference solver under the same reward regime.

    Rewards: +1 at terminal success, 0 at failure, -r_i per help_i.  Used
    for equivalence testing against the usage/policy iteration.
    """
    comp = _compile(model, cfg.n_help, cfg.gamma)
    n = len(comp.states)
    rew = {a: 0.0 for a in comp.actions}
    for i in range(1, cfg.n_help + 1):
        rew[help_action(i)] = -cfg.r[i - 1]

    def _branches(V: np.ndarray) -> dict[str, np.ndarray]:
        return {
            a: rew[a] + cfg.gamma * (comp.P[a] @ V + comp.succ[a]) for a in comp.actions
        }

    def _greedy(V_br: dict[str, np.ndarray]) -> np.ndarray:
        best = np.zeros(n, dtype=int)
        best_v = V_br[NOHELP].copy()
        for ai, a in enumerate(comp.actions[1:], start=1):
            mask = V_br[a] > best_v + TIE_TOL
            best[mask] = ai
            best_v = np.where(mask, V_br[a], best_v)
        return best

    V = np.zeros(n)
    idx = np.arange(n)
    choice = np.zeros(n, dtype=int)
    for _ in range(cfg.max_iters):
        V_br = _branches(V)
        choice = _greedy(V_br)
        new_V = np.stack([V_br[a] for a in comp.actions])[choice, idx] if n else V
        delta = float(np.max(np.abs(new_V - V))) if n else 0.0
        V = new_V
        if delta < cfg.epsilon:
            break
    if n:
        seen: set[bytes] = set()
        for _ in range(100):
            S, M = _exact_eval(comp, cfg, choice)
            V = S - np.asarray(cfg.r) @ M
            new_choice = _greedy(_branches(V))
            if np.array_equal(new_choice, choice):
                break
            key = new_choice.tobytes()
            if key in seen:
                break
            seen.add(key)
            choice = new_choice
        S, M = _exact_eval(comp, cfg, choice)
        V = S - np.asarray(cfg.r) @ M

    values = {s: float(V[i]) for s, i in comp.index.items()}
    policy = {s: comp.actions[choice[i]] for s, i in comp.index.items()}
    for s in sorted(model.support):
        outcome = terminal_outcome(s)
        if outcome is not None:
            values[s] = 1.0 if outcome == "success" else 0.0
    return values, policy


def expected_usage(sol: Solution, starts: Sequence[str]) -> tuple[float, ...]:
    """Mean per-intervention usage over the given start states."""
    if not starts:
        raise PlannerError("no start states")
    acc = np.zeros(sol.n_help)
    for s in starts:
        if s not in sol.usage:
            raise PlannerError(f"unknown start state {s!r}")
        acc += np.asarray(sol.usage[s])
    return tuple(float(x) for x in acc / len(starts))


def with_expected_usage(sol: Solution, starts: Sequence[str]) -> Solution:
    return replace(sol, expected_usage=expected_usage(sol, starts))


def decomposition_residual(sol: Solution) -> float:
    """max_s |V_s - (S_s - sum_i r_i M_s^i)| over all states."""
    r = np.asarray(sol.r)
    worst = 0.0
    for s, v in sol.value.items():
        resid = abs(v - (sol.success[s] - float(r @ np.asarray(sol.usage[s]))))
        worst = max(worst, resid)
    return worst


@dataclass(frozen=True)
class SearchResult:
    r: float
    solution: Solution
    expected: float
    trace: tuple[tuple[float, float], ...]  # probed (r, E[U]) pairs


def reward_search(
    model: TransitionModel,
    success: SuccessModel | None,
    budget: float,
    bounds: tuple[float, float],
    starts: Sequence[str],
    cfg: RewardConfig | None = None,
    usage_tol: float = 0.0,
    max_steps: int = 60,
) -> SearchResult:
    """Bisect the help cost r until expected usage from the starts fits the
    budget.

    E[U](r) is a nonincreasing step function, so exact attainment of the
    budget is generally impossible; the result is the smallest probed
    feasible r, i.e. the maximal-usage feasible policy among probes, with
    the full probe trace attached.
    """
    r_lo, r_hi = bounds
    if r_lo < 0 or r_hi <= r_lo:
        raise PlannerError(f"bad bounds {bounds}")
    if budget < 0 or not np.isfinite(budget):
        raise PlannerError(f"budget must be finite and >= 0, got {budget}")
    base = cfg or RewardConfig(r=(0.0,))
    if base.n_help != 1:
        raise PlannerError("reward_search bisects a single scalar cost (K=1)")

    trace: list[tuple[float, float]] = []

    def probe(r: float) -> tuple[Solution, float]:
        sol = with_expected_usage(_solve(model, success, replace(base, r=(r,))), starts)
        eu = sum(sol.expected_usage)
        trace.append((r, eu))
        return sol, eu

    sol_hi, eu_hi = probe(r_hi)
    if eu_hi > budget:
        raise BudgetInfeasibleError(budget, eu_hi, r_hi)
    sol_lo, eu_lo = probe(r_lo)
    if eu_lo <= budget:
        return SearchResult(r=r_lo, solution=sol_lo, expected=eu_lo, trace=tuple(trace))

    lo, hi = r_lo, r_hi
    best_r, best_sol, best_eu = r_hi, sol_hi, eu_hi
    for _ in range(max_steps):
        mid = 0.5 * (lo + hi)
        sol, eu = probe(mid)
        if eu <= budget:
            hi, best_r, best_sol, best_eu = mid, mid, sol, eu
            if budget - eu <= usage_tol:
                break
        else:
            lo = mid
        if hi - lo < 1e-12:
            break
    return SearchResult(r=best_r, solution=best_sol, expected=best_eu, trace=tuple(trace))


def solution_to_dict(sol: Solution) -> dict:
    return {
        "r": list(sol.r),
        "gamma": sol.gamma,
        "variant": sol.variant,
        "converged": sol.converged,
        "iterations": sol.iterations_run,
        "expected_usage": list(sol.expected_usage) if sol.expected_usage else None,
        "policy": dict(sorted(sol.policy.items())),
        "usage": {s: list(u) for s, u in sorted(sol.usage.items())},
        "success": dict(sorted(sol.success.items())),
        "value": dict(sorted(sol.value.items())),
    }


def save_solution(sol: Solution, path: str | Path, extra: dict | None = None) -> None:
    doc = solution_to_dict(sol)
    if extra:
        doc.update(extra)
    Path(path).write_text(
        json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n", encoding="utf-8"
    )


def load_solution(path: str | Path) -> Solution:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    return Solution(
        usage={s: tuple(u) for s, u in doc["usage"].items()},
        success=doc["success"],
        policy=doc["policy"],
        value=doc["value"],
        r=tuple(doc["r"]),
        gamma=doc["gamma"],
        variant=doc["variant"],
        iterations_run=doc["iterations"],
        converged=doc["converged"],
        expected_usage=tuple(doc["expected_usage"]) if doc.get("expected_usage") else None,
    )
