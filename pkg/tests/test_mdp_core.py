import math
import random
from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpdp import fixtures
from helpdp.mdp import (
    NOHELP,
    CountTable,
    DataError,
    SuccessModel,
    canonical_action,
    estimate_success,
    help_action,
    help_index,
    is_terminal,
    normalize,
    terminal_key,
)
from conftest import always_branch, rollout_log, sample_next

T_SUCC = fixtures.T_SUCC
T_FAIL = fixtures.T_FAIL


class TestCountTable:
    def test_first_increment(self):
        table = CountTable()
        table.record("s0", NOHELP, T_SUCC)
        assert table.get("s0", NOHELP, T_SUCC) == 1
        assert table.total() == 1

    def test_additivity(self):
        table = CountTable()
        for _ in range(3):
            table.record("s0", NOHELP, T_SUCC)
        assert table.get("s0", NOHELP, T_SUCC) == 3
        assert table.total() == 3

    def test_terminal_source_rejected(self):
        table = CountTable()
        with pytest.raises(DataError, match="terminal source"):
            table.record(T_SUCC, "help1", "s0")

    def test_merge(self):
        a, b = CountTable(), CountTable()
        a.record("s0", NOHELP, "s1")
        b.record("s0", NOHELP, "s1", count=2)
        b.record("s1", "help1", T_FAIL)
        a.merge(b)
        assert a.get("s0", NOHELP, "s1") == 3
        assert a.total() == 4

    def test_save_load_roundtrip(self, tmp_path):
        table = CountTable()
        table.record("s0", NOHELP, "s1", 4)
        table.record("s1", "help1", T_SUCC, 2)
        path = tmp_path / "counts.jsonl"
        table.save(path)
        back = CountTable.load(path)
        assert list(back.items()) == list(table.items())


class TestNormalize:
    def test_three_to_one_split(self):
        table = CountTable()
        table.record("s0", NOHELP, "a", 3)
        table.record("s0", NOHELP, "b", 1)
        table.record("a", NOHELP, T_SUCC)
        table.record("b", NOHELP, T_FAIL)
        model = normalize(table)
        row = model.row("s0", NOHELP)
        assert row == {"a": 0.75, "b": 0.25}

    def test_single_outcome(self):
        table = CountTable()
        table.record("s0", "help1", "a", 5)
        table.record("a", NOHELP, T_SUCC)
        model = normalize(table)
        assert model.row("s0", "help1") == {"a": 1.0}

    def test_empty_table_error(self):
        with pytest.raises(DataError, match="no data"):
            normalize(CountTable())

    def test_monte_carlo_binomial_band(self):
        # 10,000 draws from the one-state fixture's 0.2/0.8 nohelp row
        model, _ = fixtures.mdp_a()
        row = model.row("s0", NOHELP)
        rng = random.Random(314159)
        table = CountTable()
        n = 10_000
        for _ in range(n):
            table.record("s0", NOHELP, sample_next(row, rng))
        est = normalize(table).row("s0", NOHELP)
        se = math.sqrt(0.2 * 0.8 / n)
        assert abs(est.get(T_SUCC, 0.0) - 0.2) <= 3 * se  # 0.012

    def test_rational_roundtrip(self):
        # exact frequency reproduction, checked in rational arithmetic
        counts = {("s0", NOHELP, "a"): 7, ("s0", NOHELP, "b"): 5, ("s0", NOHELP, T_FAIL): 1}
        table = CountTable()
        for (s, a, s2), c in counts.items():
            table.record(s, a, s2, c)
        table.record("a", NOHELP, T_SUCC)
        table.record("b", NOHELP, T_SUCC)
        model = normalize(table)
        row = model.row("s0", NOHELP)
        total = 13
        for s2 in ("a", "b", T_FAIL):
            expect = Fraction(counts[("s0", NOHELP, s2)], total)
            assert Fraction(row[s2]).limit_denominator(10**6) == expect

    def test_unobserved_rows_absent(self):
        table = CountTable()
        table.record("s0", NOHELP, T_SUCC)
        model = normalize(table)
        assert model.row("s0", "help1") is None

    def test_laplace_smoothing_stays_in_row(self):
        table = CountTable()
        table.record("s0", NOHELP, "a", 9)
        table.record("s0", NOHELP, "b", 1)
        table.record("a", NOHELP, T_SUCC)
        table.record("b", NOHELP, T_SUCC)
        model = normalize(table, alpha=1.0)
        row = model.row("s0", NOHELP)
        assert row["a"] == pytest.approx(10 / 12)
        assert row["b"] == pytest.approx(2 / 12)
        assert set(row) == {"a", "b"}


class TestActions:
    def test_help_alias(self):
        assert canonical_action("help") == "help1"
        assert help_index("help12") == 12

    def test_unknown_action(self):
        with pytest.raises(DataError):
            canonical_action("shout")

    @given(st.integers(min_value=1, max_value=50))
    def test_help_roundtrip(self, i):
        assert help_index(help_action(i)) == i


class TestStateKeys:
    def test_terminal_detection(self):
        assert is_terminal(terminal_key("end", "success"))
        assert is_terminal("room=3|outcome=failure")
        assert not is_terminal("room=3|outcome_pending=1")

    def test_terminal_key_validation(self):
        with pytest.raises(DataError):
            terminal_key("end", "draw")


class TestEstimateSuccess:
    def test_single_sample(self):
        model, _ = fixtures.mdp_a()
        log = rollout_log(model, always_branch(NOHELP), "s0", 1, seed=5)
        sm = estimate_success(log)
        won = log.episodes[0].outcome == "success"
        assert sm.get("s0", NOHELP) == (1.0 if won else 0.0)
        assert sm.n[("s0", NOHELP)] == 1

    def test_symmetry(self):
        from helpdp.rollouts import Episode, RolloutLog, Step

        log = RolloutLog()
        for i, outcome in enumerate(["success", "failure"]):
            final = T_SUCC if outcome == "success" else T_FAIL
            log.append(
                Episode("t0", i, (Step("s0", NOHELP),), final, outcome, 1)
            )
        sm = estimate_success(log)
        assert sm.get("s0", NOHELP) == 0.5

    def test_always_help_band_on_chain(self):
        # p(s1, help) should land within 3 SE of its exact value 0.8
        model, _ = fixtures.mdp_b()
        n = 10_000
        log = rollout_log(model, always_branch("help1"), "s0", n, seed=21)
        sm = estimate_success(log)
        visits = sm.n[("s1", "help1")]
        se = math.sqrt(0.8 * 0.2 / visits)
        assert abs(sm.get("s1", "help1") - 0.8) <= 3 * se

    def test_missing_outcome_error(self):
        from helpdp.rollouts import Episode, RolloutLog, Step

        log = RolloutLog([Episode("t9", 0, (Step("s0", NOHELP),), "s1", "running", 1)])
        with pytest.raises(DataError, match="t9:0"):
            estimate_success(log)

    def test_terminal_keys_forced(self):
        sm = SuccessModel(p={("s0", NOHELP): 0.4}, n={("s0", NOHELP): 5})
        assert sm.get(T_SUCC, "help1") == 1.0
        assert sm.get(T_FAIL, NOHELP) == 0.0

    def test_save_load_roundtrip(self, tmp_path):
        model, _ = fixtures.mdp_b()
        sm = estimate_success(rollout_log(model, always_branch(NOHELP), "s0", 50, seed=3))
        path = tmp_path / "success.jsonl"
        sm.save(path)
        back = SuccessModel.load(path)
        assert back.p == sm.p
        assert back.n == sm.n
        assert back.provenance == "empirical"


@settings(max_examples=40, deadline=None)
@given(st.data())
def test_normalized_rows_sum_to_one(data):
    states = [f"s{i}" for i in range(4)] + [T_SUCC, T_FAIL]
    table = CountTable()
    n_rows = data.draw(st.integers(min_value=1, max_value=6))
    for _ in range(n_rows):
        s = data.draw(st.sampled_from(states[:4]))
        a = data.draw(st.sampled_from([NOHELP, "help1"]))
        for s2 in data.draw(st.lists(st.sampled_from(states), min_size=1, max_size=4)):
            table.record(s, a, s2, data.draw(st.integers(min_value=1, max_value=9)))
    model = normalize(table)
    for (s, a), row in model.probs.items():
        assert abs(sum(row.values()) - 1.0) <= 1e-12
        assert all(0.0 <= p <= 1.0 for p in row.values())
