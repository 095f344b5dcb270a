"""End-to-end phases: randomized collection, model fitting, helper table
construction, evaluation metrics, and the threshold/self-regulation
baselines.

Episodes draw decision randomness and actor randomness from separate
child streams of the episode seed, so two behaviors that pick the same
branches produce byte-identical rollouts regardless of how many decision
draws each consumes.
"""
from __future__ import annotations

import hashlib
import random
from dataclasses import dataclass, replace
from typing import Callable, Iterable, Protocol, Sequence

from .env import (
    EnvState,
    Task,
    UctCounts,
    base_actor,
    env_step,
    initial_state,
    mcts_intervene,
    mcts_observe,
    strong_actor,
)
from .mdp import (
    NOHELP,
    CountTable,
    SuccessModel,
    TransitionModel,
    action_order,
    help_action,
    help_index,
    is_terminal,
    normalize,
    estimate_success,
)
from .planner import Solution
from .rollouts import Episode, RolloutLog, Step

UNKNOWN_FAILURE = "unknown|outcome=failure"


class PipelineError(ValueError):
    pass


def derive_seed(master: int, *parts) -> int:
    """Stable 63-bit child seed from a master seed and a label path."""
    h = hashlib.sha256()
    h.update(str(master).encode())
    for part in parts:
        h.update(b"/")
        h.update(str(part).encode())
    return int.from_bytes(h.digest()[:8], "big") >> 1


Decider = Callable[[EnvState, random.Random, int], str]


class Intervention(Protocol):
    def act(self, state: EnvState, rng: random.Random) -> str: ...


class StrongActorIntervention:
    """Help executed by the low-noise actor that tracks the object."""

    def __init__(self, eta: float = 0.05) -> None:
        self.eta = eta

    def reset(self) -> None:
        pass

    def act(self, state: EnvState, rng: random.Random) -> str:
        return strong_actor(state, rng, self.eta)


class MctsIntervention:
    """Help executed by a depth-1 UCT pick over base-actor proposals.

    Visit counts persist within an episode and steps executed by other
    policies feed back through :func:`mcts_observe`.
    """

    def __init__(
        self,
        q_fn: Callable[[EnvState, str], float],
        c: float = 0.25,
        k: int = 5,
        proposal_eta: float = 1.0,
        observe_factor: int = 5,
    ) -> None:
        self.q_fn = q_fn
        self.c = c
        self.k = k
        self.proposal_eta = proposal_eta
        self.observe_factor = observe_factor
        self.counts = UctCounts()

    def reset(self) -> None:
        self.counts = UctCounts()

    def act(self, state: EnvState, rng: random.Random) -> str:
        return mcts_intervene(
            state, self.q_fn, self.counts, rng, c=self.c, k=self.k, proposal_eta=self.proposal_eta
        )

    def observe(self, state_key: str, env_action: str) -> None:
        mcts_observe(self.counts, state_key, env_action, self.observe_factor)


def run_episode(
    task: Task,
    decide: Decider,
    interventions: Sequence[Intervention],
    seed: int,
    eta: float = 0.35,
) -> Episode:
    """Roll one episode; the decider picks a branch at every step."""
    rng_decide = random.Random(derive_seed(seed, "decide"))
    rng_act = random.Random(derive_seed(seed, "act"))
    for iv in interventions:
        reset = getattr(iv, "reset", None)
        if reset is not None:
            reset()
    state = initial_state(task)
    steps: list[Step] = []
    t = 0
    while not state.terminal:
        branch = decide(state, rng_decide, t)
        if branch == NOHELP:
            env_action = base_actor(state, rng_act, eta)
            executor = None
        else:
            idx = help_index(branch)
            if idx > len(interventions):
                raise PipelineError(f"unknown intervention index {idx}")
            executor = interventions[idx - 1]
            env_action = executor.act(state, rng_act)
            branch = help_action(idx)
        for iv in interventions:
            observe = getattr(iv, "observe", None)
            if observe is not None and iv is not executor:
                observe(state.key(), env_action)
        steps.append(Step(state=state.key(), action=branch, env_action=env_action))
        state = env_step(state, env_action)
        t += 1
    return Episode(
        task_id=task.task_id,
        seed=seed,
        steps=tuple(steps),
        final_state=state.key(),
        outcome=state.outcome or "failure",
        length=len(steps),
    )


def always(branch: str) -> Decider:
    def decide(state: EnvState, rng: random.Random, t: int) -> str:
        return branch

    return decide


def baseline_random(p: Sequence[float]) -> Decider:
    """Fire intervention i with probability p_i each step, at most one."""
    p = tuple(p)
    if any(x < 0 for x in p) or sum(p) > 1.0 + 1e-12:
        raise PipelineError(f"bad intervention probabilities {p}")

    def decide(state: EnvState, rng: random.Random, t: int) -> str:
        u = rng.random()
        acc = 0.0
        for i, pi in enumerate(p, start=1):
            acc += pi
            if u < acc:
                return help_action(i)
        return NOHELP

    return decide


def phase1_schedule(n_help: int) -> list[tuple[float, ...]]:
    """Default per-step intervention probabilities for collection runs."""
    singles = [0.0, 0.1, 0.3, 0.5, 0.7, 0.9, 1.0]
    if n_help == 1:
        return [(p,) for p in singles]
    if n_help == 2:
        sched: list[tuple[float, ...]] = [(p, 0.0) for p in singles]
        sched += [(0.0, p) for p in singles if p > 0.0]
        sched += [(0.1, 0.1), (0.3, 0.3), (0.1, 0.3), (0.3, 0.1)]
        return sched
    raise PipelineError(f"no default schedule for {n_help} interventions")


def collect_phase1(
    tasks: Sequence[Task],
    interventions: Sequence[Intervention],
    master_seed: int,
    schedule: Sequence[tuple[float, ...]] | None = None,
    n_seeds: int = 3,
    eta: float = 0.35,
) -> RolloutLog:
    """One episode per task x schedule entry x seed, everything recorded."""
    if not tasks:
        raise PipelineError("empty taskset")
    if schedule is None:
        schedule = phase1_schedule(len(interventions))
    log = RolloutLog()
    for task in tasks:
        for probs in schedule:
            decide = baseline_random(probs)
            for rep in range(n_seeds):
                seed = derive_seed(master_seed, "phase1", task.task_id, probs, rep)
                log.append(run_episode(task, decide, interventions, seed, eta=eta))
    return log


def fit_models(log: RolloutLog, alpha: float = 0.0) -> tuple[TransitionModel, SuccessModel]:
    return normalize(log.to_count_table(), alpha), estimate_success(log)


def truncate_counts(
    table: CountTable, fraction: float, seed: int, keep: str = "random"
) -> CountTable:
    """Drop all rows for a fraction of source states (coverage ablation).

    ``keep="random"`` removes a uniform subset; ``keep="frequent"`` retains
    the most-visited states, mimicking coverage loss in the tail.
    """
    if not 0.0 < fraction <= 1.0:
        raise PipelineError(f"fraction must be in (0, 1], got {fraction}")
    if keep == "random":
        states = sorted({s for (s, _, _), _ in table.items()})
        rng = random.Random(seed)
        rng.shuffle(states)
    elif keep == "frequent":
        totals: dict[str, int] = {}
        for (s, _, _), c in table.items():
            totals[s] = totals.get(s, 0) + c
        states = sorted(totals, key=lambda s: (-totals[s], s))
    else:
        raise PipelineError(f"unknown keep mode {keep!r}")
    kept = set(states[: max(1, round(fraction * len(states)))])
    out = CountTable()
    for (s, a, s2), c in table.items():
        if s in kept:
            out.record(s, a, s2, c)
    return out


def restrict_to_solvable(model: TransitionModel) -> TransitionModel:
    """Close the model over states that carry every action row.

    Successors outside that set are pessimistically remapped to a shared
    failure terminal, so the planner sees a complete absorbing chain.
    """
    actions = action_order(max(1, model.n_help))
    solvable = {
        s for s in model.nonterminal_states() if all(model.has_row(s, a) for a in actions)
    }
    if not solvable:
        raise PipelineError("no state has full action coverage")
    probs: dict[tuple[str, str], dict[str, float]] = {}
    support: set[str] = set(solvable)
    for (s, a), row in model.probs.items():
        if s not in solvable:
            continue
        out: dict[str, float] = {}
        for s2, p in row.items():
            if not is_terminal(s2) and s2 not in solvable:
                s2 = UNKNOWN_FAILURE
            out[s2] = out.get(s2, 0.0) + p
            support.add(s2)
        probs[(s, a)] = out
    return TransitionModel(probs=probs, support=frozenset(support))


@dataclass(frozen=True)
class HelperPolicy:
    """Lookup-table branch chooser distilled from a planner solution."""

    table: dict[str, str]
    training_mode: str  # "all_states" | "trajectory_only"
    fallback: str = NOHELP
    score_fn: Callable[[str], float] | None = None
    score_threshold: float | None = None

    def decide(self, state_key: str) -> str:
        if state_key in self.table:
            return self.table[state_key]
        if self.score_fn is not None and self.score_threshold is not None:
            try:
                if self.score_fn(state_key) > self.score_threshold:
                    return help_action(1)
            except Exception:
                pass
        return self.fallback

    def as_decider(self) -> Decider:
        def decide(state: EnvState, rng: random.Random, t: int) -> str:
            return self.decide(state.key())

        return decide


def pi_star_closure(sol: Solution, model: TransitionModel, start: str) -> tuple[set[str], bool]:
    """Non-terminal states reached by following the solved policy from a
    start; the flag is False if the expansion leaves the model's support."""
    if is_terminal(start):
        return set(), True
    seen: set[str] = set()
    stack = [start]
    ok = True
    while stack:
        s = stack.pop()
        if s in seen or is_terminal(s):
            continue
        seen.add(s)
        a = sol.policy.get(s)
        row = model.row(s, a) if a is not None else None
        if row is None:
            ok = False
            continue
        stack.extend(row)
    return seen, ok


def build_helper(
    sol: Solution,
    log: RolloutLog,
    model: TransitionModel,
    mode: str = "all_states",
    fallback: str = NOHELP,
) -> HelperPolicy:
    if not sol.converged:
        raise PipelineError("refusing to distill an unconverged solution")
    if mode == "all_states":
        return HelperPolicy(table=dict(sol.policy), training_mode=mode, fallback=fallback)
    if mode != "trajectory_only":
        raise PipelineError(f"unknown helper mode {mode!r}")
    table: dict[str, str] = {}
    for task_id, start in log.start_states().items():
        reached, ok = pi_star_closure(sol, model, start)
        if not ok:
            continue
        for s in reached:
            table[s] = sol.policy[s]
    return HelperPolicy(table=table, training_mode=mode, fallback=fallback)


def split_seen_unseen(
    starts: dict[str, str], sol: Solution, model: TransitionModel
) -> tuple[list[str], list[str]]:
    """Partition task ids by whether the policy expansion stays in support."""
    seen_ids: list[str] = []
    unseen_ids: list[str] = []
    for task_id in sorted(starts):
        _, ok = pi_star_closure(sol, model, starts[task_id])
        (seen_ids if ok else unseen_ids).append(task_id)
    return seen_ids, unseen_ids


def expected_usage_for_tasks(
    sol: Solution, starts: Iterable[str], default: float = 0.0
) -> tuple[float, ...]:
    """Mean planner usage over starts; off-support starts contribute the
    default (the nohelp fallback spends nothing there)."""
    total = [0.0] * sol.n_help
    n = 0
    for s in starts:
        n += 1
        u = sol.usage.get(s)
        for i in range(sol.n_help):
            total[i] += u[i] if u is not None else default
    if n == 0:
        raise PipelineError("no start states")
    return tuple(x / n for x in total)


@dataclass(frozen=True)
class Metrics:
    sr: float
    spl: float
    length: float
    usage: tuple[float, ...]
    n_episodes: int
    expected_usage: tuple[float, ...] | None = None

    def to_dict(self) -> dict:
        return {
            "SR": self.sr,
            "SPL": self.spl,
            "L": self.length,
            "U": list(self.usage),
            "EU": list(self.expected_usage) if self.expected_usage is not None else None,
            "episodes": self.n_episodes,
        }


def metrics_from_log(
    log: RolloutLog,
    tasks: Sequence[Task],
    n_help: int,
    expected: tuple[float, ...] | None = None,
) -> Metrics:
    if not len(log):
        raise PipelineError("no episodes")
    opt = {t.task_id: t.optimal_length for t in tasks}
    sr = spl = length = 0.0
    usage = [0.0] * n_help
    for ep in log:
        won = ep.outcome == "success"
        sr += won
        o = opt[ep.task_id]
        spl += (o / max(ep.length, o)) if won else 0.0
        length += ep.length
        for i, c in enumerate(ep.intervention_count(n_help)):
            usage[i] += c
    n = len(log)
    return Metrics(
        sr=sr / n,
        spl=spl / n,
        length=length / n,
        usage=tuple(u / n for u in usage),
        n_episodes=n,
        expected_usage=expected,
    )


def evaluate(
    decide: Decider,
    tasks: Sequence[Task],
    interventions: Sequence[Intervention],
    master_seed: int,
    n_seeds: int = 1,
    eta: float = 0.35,
    expected: tuple[float, ...] | None = None,
    seed_salt: str = "eval",
) -> tuple[Metrics, RolloutLog]:
    if not tasks:
        raise PipelineError("empty taskset")
    log = RolloutLog()
    for task in tasks:
        for rep in range(n_seeds):
            seed = derive_seed(master_seed, seed_salt, task.task_id, rep)
            log.append(run_episode(task, decide, interventions, seed, eta=eta))
    n_help = max(1, len(interventions))
    return metrics_from_log(log, tasks, n_help, expected), log


def state_score(success: SuccessModel, state_key: str) -> float:
    """Difficulty score 1 - p(s) with p taken under the base branch."""
    return 1.0 - success.get(state_key, NOHELP)


def calibrate_threshold(scores: Sequence[float], percent: float) -> float:
    """Cutpoint such that the top ``percent`` of the scores strictly exceed
    it; percent 0 never fires, percent 100 always does."""
    if not scores:
        raise PipelineError("no calibration scores")
    if not 0.0 <= percent <= 100.0:
        raise PipelineError(f"percent must be in [0, 100], got {percent}")
    ranked = sorted(scores, reverse=True)
    k = round(percent / 100.0 * len(ranked))
    if k <= 0:
        return ranked[0] + 1.0
    if k >= len(ranked):
        return ranked[-1] - 1.0
    return 0.5 * (ranked[k - 1] + ranked[k])


def statewise_threshold_policy(
    success: SuccessModel, states: Iterable[str], threshold: float
) -> dict[str, str]:
    """Help wherever the difficulty score clears the threshold."""
    return {
        s: help_action(1) if state_score(success, s) > threshold else NOHELP
        for s in states
        if not is_terminal(s)
    }


def statewise_decider(success: SuccessModel, threshold: float) -> Decider:
    def decide(state: EnvState, rng: random.Random, t: int) -> str:
        key = state.key()
        if not success.has(key, NOHELP):
            return NOHELP
        return help_action(1) if state_score(success, key) > threshold else NOHELP

    return decide


def _episode_triggered(ep: Episode, success: SuccessModel, threshold: float, limit: int | None = None) -> bool:
    states = [s.state for s in ep.steps]
    if limit is not None:
        states = states[:limit]
    return any(
        success.has(s, NOHELP) and state_score(success, s) > threshold for s in states
    )


def evaluate_taskwise_all_steps(
    success: SuccessModel,
    threshold: float,
    tasks: Sequence[Task],
    interventions: Sequence[Intervention],
    master_seed: int,
    n_seeds: int = 1,
    eta: float = 0.35,
) -> tuple[Metrics, RolloutLog]:
    """Full base run first; a triggered task restarts fully assisted.

    The probe run's steps count toward L but its zero interventions keep U
    untouched; outcome and usage come from the assisted rerun.
    """
    if not tasks:
        raise PipelineError("empty taskset")
    log = RolloutLog()
    extra_len: dict[str, int] = {}
    for task in tasks:
        for rep in range(n_seeds):
            seed = derive_seed(master_seed, "taskwise", task.task_id, rep)
            probe = run_episode(task, always(NOHELP), interventions, seed, eta=eta)
            if probe.outcome != "success" and _episode_triggered(probe, success, threshold):
                rerun_seed = derive_seed(master_seed, "taskwise-restart", task.task_id, rep)
                final = run_episode(task, always(help_action(1)), interventions, rerun_seed, eta=eta)
                extra_len[final.episode_id] = probe.length
                log.append(final)
            else:
                log.append(probe)
    n_help = max(1, len(interventions))
    metrics = metrics_from_log(log, tasks, n_help)
    if extra_len:
        bonus = sum(extra_len.values()) / len(log)
        metrics = replace(metrics, length=metrics.length + bonus)
    return metrics, log


def taskwise_first_window_decider(
    success: SuccessModel, threshold: float, window: int = 6
) -> Decider:
    """Observe the first ``window`` steps, then commit to full help if any
    of them scored above threshold."""
    fired = {"value": False}

    def decide(state: EnvState, rng: random.Random, t: int) -> str:
        if t == 0:
            fired["value"] = False
        if t < window:
            key = state.key()
            if success.has(key, NOHELP) and state_score(success, key) > threshold:
                fired["value"] = True
            return NOHELP
        return help_action(1) if fired["value"] else NOHELP

    return decide


@dataclass(frozen=True)
class SelfRegulationReport:
    threshold: float
    accuracy: float
    precision: float
    recall: float


def episode_difficulty(ep: Episode, score_fn: Callable[[str], float]) -> float:
    """Max difficulty score over the pre-final states of an episode."""
    scores = [score_fn(s.state) for s in ep.steps]
    if not scores:
        raise PipelineError(f"episode {ep.episode_id} has no steps")
    return max(scores)


def self_regulation_eval(
    score_fn: Callable[[str], float], val: RolloutLog, test: RolloutLog
) -> SelfRegulationReport:
    """Calibrate a halt threshold on validation accuracy, score the test
    split with success as the positive class."""

    def pairs(log: RolloutLog) -> list[tuple[float, bool]]:
        return [(episode_difficulty(ep, score_fn), ep.outcome == "success") for ep in log]

    val_pairs = pairs(val)
    if not val_pairs:
        raise PipelineError("empty validation split")
    labels = {won for _, won in val_pairs}
    if len(labels) < 2:
        raise PipelineError("validation split has a single outcome class")
    scores = sorted({s for s, _ in val_pairs})
    candidates = [scores[0] - 1.0]
    candidates += [0.5 * (a + b) for a, b in zip(scores, scores[1:])]
    candidates += [scores[-1] + 1.0]

    def accuracy(th: float, data: list[tuple[float, bool]]) -> float:
        hits = sum((s <= th) == won for s, won in data)
        return hits / len(data)

    threshold = max(candidates, key=lambda th: accuracy(th, val_pairs))
    test_pairs = pairs(test)
    if not test_pairs:
        raise PipelineError("empty test split")
    tp = sum(1 for s, won in test_pairs if s <= threshold and won)
    fp = sum(1 for s, won in test_pairs if s <= threshold and not won)
    fn = sum(1 for s, won in test_pairs if s > threshold and won)
    acc = accuracy(threshold, test_pairs)
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    return SelfRegulationReport(
        threshold=threshold, accuracy=acc, precision=precision, recall=recall
    )
