import random

import numpy as np
import pytest

from helpdp import fixtures, oracle, planner
from helpdp.mdp import NOHELP, TransitionModel
from helpdp.planner import (
    BudgetInfeasibleError,
    PlannerError,
    RewardConfig,
    decomposition_residual,
    expected_usage,
    reward_search,
    solve,
    value_iteration,
    with_expected_usage,
)

G1 = dict(gamma=1.0)


def cfg1(r, **kw):
    return RewardConfig(r=(r,), **{**G1, **kw})


class TestSingleInterventionFixedPoint:
    def test_one_state_help_regime(self):
        model, succ = fixtures.mdp_a()
        sol = solve(model, succ, cfg1(0.5))
        assert sol.policy["s0"] == "help1"
        assert sol.usage["s0"][0] == pytest.approx(1.0, abs=1e-12)
        assert sol.success["s0"] == pytest.approx(0.9, abs=1e-12)
        assert sol.value["s0"] == pytest.approx(0.4, abs=1e-12)

    def test_one_state_nohelp_regime(self):
        model, succ = fixtures.mdp_a()
        sol = solve(model, succ, cfg1(0.8))
        assert sol.policy["s0"] == NOHELP
        assert sol.usage["s0"][0] == 0.0
        assert sol.value["s0"] == pytest.approx(0.2, abs=1e-12)

    def test_two_state_chain(self):
        model, succ = fixtures.mdp_b()
        sol = with_expected_usage(solve(model, succ, cfg1(0.3)), ["s0"])
        assert sol.policy == {"s0": NOHELP, "s1": "help1"}
        assert sol.expected_usage[0] == pytest.approx(1.0, abs=1e-12)
        assert sol.value["s0"] == pytest.approx(0.5, abs=1e-12)

    def test_zero_cost_helps_wherever_gain(self):
        for seed in range(5):
            model, succ = fixtures.random_mdp(seed, 5)
            sol = solve(model, succ, cfg1(0.0))
            enum = oracle.brute_force_optimal(model, cfg1(0.0), model.nonterminal_states())
            for s in model.nonterminal_states():
                assert sol.value[s] == pytest.approx(enum.best_value[s], abs=1e-9)

    def test_terminal_rows(self):
        model, succ = fixtures.mdp_a()
        sol = solve(model, succ, cfg1(0.5))
        assert sol.success[fixtures.T_SUCC] == 1.0
        assert sol.value[fixtures.T_FAIL] == 0.0
        assert sol.usage[fixtures.T_SUCC] == (0.0,)


class TestValueIteration:
    def test_one_state_help(self):
        model, _ = fixtures.mdp_a()
        values, policy = value_iteration(model, cfg1(0.5))
        assert values["s0"] == pytest.approx(0.4, abs=1e-9)
        assert policy["s0"] == "help1"

    def test_exact_tie_breaks_to_nohelp(self):
        model, _ = fixtures.mdp_a()
        values, policy = value_iteration(model, cfg1(0.7))
        assert values["s0"] == pytest.approx(0.2, abs=1e-9)
        assert policy["s0"] == NOHELP

    def test_terminal_success_value(self):
        model, _ = fixtures.mdp_b()
        for r in (0.0, 0.4, 2.0):
            values, _ = value_iteration(model, cfg1(r))
            assert values[fixtures.T_SUCC] == 1.0


class TestExpectedUsage:
    def test_chain_at_midrange_cost(self):
        model, succ = fixtures.mdp_b()
        sol = solve(model, succ, cfg1(0.3))
        assert expected_usage(sol, ["s0"])[0] == pytest.approx(1.0, abs=1e-12)

    def test_all_nohelp_zero(self):
        model, succ = fixtures.mdp_b()
        sol = solve(model, succ, cfg1(5.0))
        assert expected_usage(sol, ["s0", "s1"]) == (0.0,)

    def test_arithmetic_mean(self):
        model, succ = fixtures.mdp_b()
        sol = solve(model, succ, cfg1(0.3))
        sol = planner.Solution(
            usage={"a": (0.4,), "b": (1.2,)},
            success={}, policy={}, value={}, r=(0.3,), gamma=1.0,
            variant="value_consistent", iterations_run=1, converged=True,
        )
        assert expected_usage(sol, ["a", "b"])[0] == pytest.approx(0.8)

    def test_unknown_start_error(self):
        model, succ = fixtures.mdp_a()
        sol = solve(model, succ, cfg1(0.5))
        with pytest.raises(PlannerError, match="zz"):
            expected_usage(sol, ["zz"])


class TestRewardSearch:
    def test_midrange_budget(self):
        model, succ = fixtures.mdp_b()
        res = reward_search(model, succ, 1.0, (0.0, 2.0), ["s0"], cfg1(0.0))
        assert 0.2 < res.r < 0.7
        assert res.expected == pytest.approx(1.0, abs=1e-9)

    def test_loose_budget_returns_lower_bound(self):
        model, succ = fixtures.mdp_b()
        res = reward_search(model, succ, 2.0, (0.0, 2.0), ["s0"], cfg1(0.0))
        assert res.r == 0.0
        assert res.expected == pytest.approx(1.5, abs=1e-9)

    def test_zero_budget(self):
        model, succ = fixtures.mdp_b()
        res = reward_search(model, succ, 0.0, (0.0, 2.0), ["s0"], cfg1(0.0))
        assert res.expected == 0.0
        assert all(a == NOHELP for a in res.solution.policy.values())

    def test_infeasible_bounds(self):
        model, succ = fixtures.mdp_b()
        with pytest.raises(BudgetInfeasibleError):
            reward_search(model, succ, 0.0, (0.0, 0.1), ["s0"], cfg1(0.0))

    def test_trace_recorded(self):
        model, succ = fixtures.mdp_b()
        res = reward_search(model, succ, 1.0, (0.0, 2.0), ["s0"], cfg1(0.0))
        assert len(res.trace) >= 2
        assert all(len(pair) == 2 for pair in res.trace)

    def test_multi_cost_rejected(self):
        model, succ = fixtures.mdp_b()
        with pytest.raises(PlannerError, match="K=1"):
            reward_search(model, succ, 1.0, (0.0, 2.0), ["s0"], RewardConfig(r=(0.1, 0.1)))


def _with_clone_help2(model: TransitionModel, source_action: str) -> TransitionModel:
    probs = dict(model.probs)
    for (s, a), row in model.probs.items():
        if a == source_action:
            probs[(s, "help2")] = dict(row)
    return TransitionModel(probs=probs, support=model.support)


class TestMultiIntervention:
    def test_symmetric_clone_prefers_lower_index(self):
        model, succ = fixtures.mdp_b()
        model2 = _with_clone_help2(model, "help1")
        succ2 = fixtures._exact_success(model2, 2)
        cfg = RewardConfig(r=(0.3, 0.3), gamma=1.0)
        sol2 = solve(model2, succ2, cfg)
        sol1 = solve(model, succ, cfg1(0.3))
        for s, a in sol2.policy.items():
            assert a != "help2"
            assert a == sol1.policy[s]
        for s in model.nonterminal_states():
            total2 = sum(sol2.usage[s])
            assert total2 == pytest.approx(sol1.usage[s][0], abs=1e-9)

    def test_dominated_clone_of_nohelp_never_used(self):
        model, succ = fixtures.mdp_a()
        model2 = _with_clone_help2(model, NOHELP)
        succ2 = fixtures._exact_success(model2, 2)
        for r2 in (0.01, 0.3, 1.0):
            sol = solve(model2, succ2, RewardConfig(r=(0.5, r2), gamma=1.0))
            assert all(a != "help2" for a in sol.policy.values())

    def test_zero_costs_maximize_success(self):
        model, succ = fixtures.mdp_b()
        model2 = _with_clone_help2(model, "help1")
        succ2 = fixtures._exact_success(model2, 2)
        sol = solve(model2, succ2, RewardConfig(r=(0.0, 0.0), gamma=1.0))
        enum = oracle.brute_force_optimal(
            model2, RewardConfig(r=(0.0, 0.0), gamma=1.0), model2.nonterminal_states()
        )
        for s in model2.nonterminal_states():
            assert sol.value[s] == pytest.approx(enum.best_value[s], abs=1e-9)


class TestDecomposition:
    @pytest.mark.parametrize("r", [0.0, 0.1, 0.3, 0.5, 0.8, 1.2])
    def test_fixtures_residual(self, r):
        for fx in (fixtures.mdp_a, fixtures.mdp_b, fixtures.corridor_mdp):
            model, succ = fx()
            sol = solve(model, succ, cfg1(r))
            assert decomposition_residual(sol) < 1e-9

    def test_hand_value(self):
        model, succ = fixtures.mdp_a()
        sol = solve(model, succ, cfg1(0.5))
        assert sol.value["s0"] == pytest.approx(0.9 - 0.5 * 1.0, abs=1e-12)


class TestVariants:
    def test_flip_points(self):
        model, succ = fixtures.mdp_a()

        def flips_at(variant):
            lo, hi = 0.0, 2.0
            while hi - lo > 1e-11:
                mid = 0.5 * (lo + hi)
                sol = solve(model, succ, cfg1(mid, variant=variant))
                if sol.policy["s0"] == "help1":
                    lo = mid
                else:
                    hi = mid
            return 0.5 * (lo + hi)

        assert flips_at("value_consistent") == pytest.approx(0.7, abs=1e-9)
        assert flips_at("paper_literal") == pytest.approx(7 / 9, abs=1e-9)

    def test_value_consistent_dominates_on_grid(self):
        model, succ = fixtures.mdp_a()
        for r in np.linspace(0.0, 1.5, 50):
            sol_vc = solve(model, succ, cfg1(float(r), variant="value_consistent"))
            sol_pl = solve(model, succ, cfg1(float(r), variant="paper_literal"))
            ev_pl = oracle.exact_policy_eval(model, sol_pl.policy, cfg1(float(r)))
            assert sol_vc.value["s0"] >= ev_pl.value["s0"] - 1e-12


class TestProperties:
    def test_equivalence_with_value_iteration(self):
        for seed in range(20):
            rng = random.Random(seed)
            model, succ = fixtures.random_mdp(seed, rng.randint(3, 12))
            cfg = RewardConfig(r=(rng.uniform(0.05, 0.9),), gamma=0.99)
            sol = solve(model, succ, cfg)
            values, policy = value_iteration(model, cfg)
            for s in model.nonterminal_states():
                assert sol.value[s] == pytest.approx(values[s], abs=1e-8)

    def test_usage_monotone_in_cost(self):
        for seed in range(5):
            model, succ = fixtures.random_mdp(seed + 50, 6)
            start = model.nonterminal_states()[0]
            prev = float("inf")
            for r in np.linspace(0.0, 2.0, 50):
                sol = solve(model, succ, cfg1(float(r)))
                eu = sol.usage[start][0]
                assert eu <= prev + 1e-9
                prev = eu

    def test_convergence_flags(self):
        model, succ = fixtures.random_mdp(7, 20)
        sol = solve(model, succ, RewardConfig(r=(0.3,), gamma=0.99))
        assert sol.converged
        assert sol.iterations_run <= 10_000

    def test_deltas_shrink(self):
        model, succ = fixtures.random_mdp(11, 15)
        sol = solve(model, succ, RewardConfig(r=(0.2,), gamma=0.9))
        deltas = sol.iteration_deltas
        assert len(deltas) >= 2
        tail = deltas[len(deltas) // 2 :]
        assert all(b <= a + 1e-12 for a, b in zip(tail, tail[1:]))


class TestErrors:
    def test_missing_action_row(self):
        probs = {("s0", NOHELP): {fixtures.T_SUCC: 1.0}}
        model = TransitionModel(probs=probs, support=frozenset({"s0", fixtures.T_SUCC}))
        with pytest.raises(PlannerError, match="s0"):
            solve(model, None, cfg1(0.5))

    def test_improper_chain_at_gamma_one(self):
        probs = {
            ("s0", NOHELP): {"s0": 1.0},
            ("s0", "help1"): {"s0": 1.0},
        }
        model = TransitionModel(probs=probs, support=frozenset({"s0"}))
        with pytest.raises(PlannerError, match="improper chain"):
            solve(model, None, cfg1(0.5))

    def test_loop_allowed_when_discounted(self):
        probs = {
            ("s0", NOHELP): {"s0": 1.0},
            ("s0", "help1"): {fixtures.T_SUCC: 1.0},
        }
        model = TransitionModel(probs=probs, support=frozenset({"s0", fixtures.T_SUCC}))
        values, policy = value_iteration(model, RewardConfig(r=(0.1,), gamma=0.9))
        assert policy["s0"] == "help1"


def test_solution_file_roundtrip(tmp_path):
    model, succ = fixtures.mdp_b()
    sol = with_expected_usage(solve(model, succ, cfg1(0.3)), ["s0"])
    path = tmp_path / "solution.json"
    planner.save_solution(sol, path)
    back = planner.load_solution(path)
    assert back.policy == sol.policy
    assert back.usage == sol.usage
    assert back.value == sol.value
    assert back.expected_usage == sol.expected_usage
    assert back.converged == sol.converged
