"""Synthetic multi-room object-search environment.

Rooms form a corridor (room i adjacent to i +/- 1).  The agent starts in
room 0, receives an ambiguous hint (a set of rooms containing the object at
episode start), and the object may be moved once mid-episode.  The base
actor is noisy-greedy over the hint; the strong actor tracks the object's
true room.  Dynamics are deterministic given the executed command, so all
stochasticity lives in the actors, which keeps exact model extraction a
matter of marginalizing actor noise.
"""
from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

from .mdp import NOHELP, SuccessModel, TransitionModel, help_action

EXPLORE = "explore"


class EnvError(ValueError):
    pass


class EnumerationTooLarge(EnvError):
    pass


def goto(room: int) -> str:
    return f"goto:{room}"


@dataclass(frozen=True)
class Task:
    task_id: str
    room_count: int
    object_location: int
    hint: tuple[int, ...]
    move_schedule: tuple[tuple[int, int], ...]
    max_steps: int
    optimal_length: int
    split: str = "train"

    def object_room(self, t: int) -> int:
        room = self.object_location
        for when, where in self.move_schedule:
            if when <= t:
                room = where
        return room

    def to_dict(self) -> dict:
        return {
            "task_id": self.task_id,
            "room_count": self.room_count,
            "object_location": self.object_location,
            "hint": list(self.hint),
            "move_schedule": [list(m) for m in self.move_schedule],
            "max_steps": self.max_steps,
            "optimal_length": self.optimal_length,
            "split": self.split,
        }

    @classmethod
    def from_dict(cls, rec: dict) -> "Task":
        return cls(
            task_id=rec["task_id"],
            room_count=rec["room_count"],
            object_location=rec["object_location"],
            hint=tuple(rec["hint"]),
            move_schedule=tuple(tuple(m) for m in rec["move_schedule"]),
            max_steps=rec["max_steps"],
            optimal_length=rec["optimal_length"],
            split=rec.get("split", "train"),
        )


@dataclass(frozen=True)
class EnvState:
    task: Task
    t: int
    room: int
    explored: frozenset[int]
    found: bool

    @property
    def moved(self) -> bool:
        return any(when <= self.t for when, _ in self.task.move_schedule)

    @property
    def outcome(self) -> str | None:
        if self.found:
            return "success"
        if self.t >= self.task.max_steps:
            return "failure"
        return None

    @property
    def terminal(self) -> bool:
        return self.outcome is not None

    def key(self) -> str:
        parts = [
            f"task={self.task.task_id}",
            "hint=" + ",".join(str(r) for r in self.task.hint),
            f"t={self.t}",
            f"room={self.room}",
            "explored=" + ",".join(str(r) for r in sorted(self.explored)),
            f"moved={int(self.moved)}",
        ]
        if self.outcome is not None:
            parts.append(f"outcome={self.outcome}")
        return "|".join(parts)


def initial_state(task: Task) -> EnvState:
    return EnvState(task=task, t=0, room=0, explored=frozenset(), found=False)


def legal_actions(state: EnvState) -> list[str]:
    acts = [EXPLORE]
    if state.room > 0:
        acts.append(goto(state.room - 1))
    if state.room + 1 < state.task.room_count:
        acts.append(goto(state.room + 1))
    return acts


def env_step(state: EnvState, action: str, rng: random.Random | None = None) -> EnvState:
    """Deterministic transition; ``rng`` is accepted for interface symmetry."""
    if state.terminal:
        raise EnvError("cannot step a terminal state")
    if action not in legal_actions(state):
        raise EnvError(f"illegal action {action!r} in room {state.room}")
    room = state.room
    explored = state.explored
    found = False
    if action == EXPLORE:
        found = room == state.task.object_room(state.t)
        explored = explored | {room}
    else:
        room = int(action.split(":", 1)[1])
    return EnvState(task=state.task, t=state.t + 1, room=room, explored=explored, found=found)


def _greedy_base(state: EnvState) -> str:
    """Move toward (then explore) the nearest unexplored hint room.

    Falls back to unexplored rooms once the hint is exhausted, then to
    re-exploring in place; ties break on the lower room index.
    """
    candidates = [r for r in state.task.hint if r not in state.explored]
    if not candidates:
        candidates = [r for r in range(state.task.room_count) if r not in state.explored]
    if not candidates:
        return EXPLORE
    target = min(candidates, key=lambda r: (abs(r - state.room), r))
    if target == state.room:
        return EXPLORE
    return goto(state.room + (1 if target > state.room else -1))


def _greedy_strong(state: EnvState) -> str:
    target = state.task.object_room(state.t)
    if target == state.room:
        return EXPLORE
    return goto(state.room + (1 if target > state.room else -1))


def _noisy(greedy: Callable[[EnvState], str], state: EnvState, rng: random.Random, eta: float) -> str:
    if eta > 0 and rng.random() < eta:
        return rng.choice(legal_actions(state))
    return greedy(state)


def base_actor(state: EnvState, rng: random.Random, eta: float = 0.35) -> str:
    return _noisy(_greedy_base, state, rng, eta)


def strong_actor(state: EnvState, rng: random.Random, eta: float = 0.05) -> str:
    return _noisy(_greedy_strong, state, rng, eta)


def action_distribution(
    greedy: Callable[[EnvState], str], state: EnvState, eta: float
) -> dict[str, float]:
    """Exact action law of a noisy-greedy actor."""
    legal = legal_actions(state)
    dist = {a: eta / len(legal) for a in legal}
    g = greedy(state)
    dist[g] = dist.get(g, 0.0) + (1.0 - eta)
    return dist


@dataclass(frozen=True)
class EnvConfig:
    room_count: int = 10
    max_steps: int = 6
    hint_sizes: tuple[tuple[int, float], ...] = ((4, 0.4), (5, 0.6))
    move_prob: float = 0.8
    eta: float = 0.35
    eta_strong: float = 0.05
    n_train: int = 1000
    n_val: int = 40
    n_test: int = 40

    def __post_init__(self) -> None:
        if self.room_count < 2:
            raise EnvError("need at least two rooms")
        if self.max_steps < 2:
            raise EnvError("need at least two steps")
        for size, weight in self.hint_sizes:
            if size < 1 or size > self.room_count:
                raise EnvError(f"infeasible hint size {size} for {self.room_count} rooms")
            if weight < 0:
                raise EnvError("hint size weights must be >= 0")
        if not 0.0 <= self.move_prob <= 1.0:
            raise EnvError("move_prob must be in [0, 1]")

    def to_dict(self) -> dict:
        return {
            "room_count": self.room_count,
            "max_steps": self.max_steps,
            "hint_sizes": {str(s): w for s, w in self.hint_sizes},
            "move_prob": self.move_prob,
            "eta": self.eta,
            "eta_strong": self.eta_strong,
            "n_train": self.n_train,
            "n_val": self.n_val,
            "n_test": self.n_test,
        }

    @classmethod
    def from_dict(cls, rec: dict) -> "EnvConfig":
        kwargs = dict(rec)
        if "hint_sizes" in kwargs:
            kwargs["hint_sizes"] = tuple(
                sorted((int(s), float(w)) for s, w in rec["hint_sizes"].items())
            )
        return cls(**kwargs)


@dataclass(frozen=True)
class TaskSet:
    train: tuple[Task, ...]
    val: tuple[Task, ...]
    test: tuple[Task, ...]

    def all(self) -> list[Task]:
        return list(self.train) + list(self.val) + list(self.test)

    def split(self, name: str) -> tuple[Task, ...]:
        return getattr(self, name)

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for task in self.all():
                fh.write(json.dumps(task.to_dict(), sort_keys=True, separators=(",", ":")) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "TaskSet":
        splits: dict[str, list[Task]] = {"train": [], "val": [], "test": []}
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                rec = json.loads(line)
                if "task_id" not in rec:
                    continue
                task = Task.from_dict(rec)
                splits[task.split].append(task)
        return cls(
            train=tuple(splits["train"]), val=tuple(splits["val"]), test=tuple(splits["test"])
        )


def shortest_success_length(
    room_count: int,
    object_location: int,
    move_schedule: Sequence[tuple[int, int]],
    max_steps: int,
) -> int | None:
    """Minimum steps for an omniscient agent; BFS over (time, room)."""

    def obj_room(t: int) -> int:
        room = object_location
        for when, where in move_schedule:
            if when <= t:
                room = where
        return room

    positions = {0}
    for t in range(max_steps):
        if obj_room(t) in positions:
            return t + 1
        nxt = set()
        for p in positions:
            nxt.add(p)  # waste a step exploring in place
            if p > 0:
                nxt.add(p - 1)
            if p + 1 < room_count:
                nxt.add(p + 1)
        positions = nxt
    return None


def generate_tasks(config: EnvConfig, seed: int) -> TaskSet:
    """Deterministic task generation; splits are disjoint by id prefix."""
    rng = random.Random(seed)
    sizes = [s for s, _ in config.hint_sizes]
    weights = [w for _, w in config.hint_sizes]

    def one(split: str, i: int) -> Task:
        for _ in range(200):
            obj = rng.randrange(config.room_count)
            size = rng.choices(sizes, weights=weights, k=1)[0]
            others = [r for r in range(config.room_count) if r != obj]
            hint = tuple(sorted([obj] + rng.sample(others, size - 1)))
            schedule: tuple[tuple[int, int], ...] = ()
            if config.move_prob > 0 and rng.random() < config.move_prob and config.max_steps >= 5:
                when = rng.randint(2, config.max_steps - 3)
                where = rng.choice([r for r in range(config.room_count) if r != obj])
                schedule = ((when, where),)
            opt = shortest_success_length(config.room_count, obj, schedule, config.max_steps)
            if opt is not None:
                return Task(
                    task_id=f"{split}{i:04d}",
                    room_count=config.room_count,
                    object_location=obj,
                    hint=hint,
                    move_schedule=schedule,
                    max_steps=config.max_steps,
                    optimal_length=opt,
                    split=split,
                )
        raise EnvError("could not sample a feasible task; loosen the config")

    return TaskSet(
        train=tuple(one("train", i) for i in range(config.n_train)),
        val=tuple(one("val", i) for i in range(config.n_val)),
        test=tuple(one("test", i) for i in range(config.n_test)),
    )


@dataclass
class UctCounts:
    n_state: dict[str, int] = field(default_factory=dict)
    n_sa: dict[tuple[str, str], int] = field(default_factory=dict)


def mcts_intervene(
    state: EnvState,
    q_fn: Callable[[EnvState, str], float],
    counts: UctCounts,
    rng: random.Random,
    c: float = 0.25,
    k: int = 5,
    proposal_eta: float = 1.0,
) -> str:
    """Depth-1 UCT pick over k base-actor proposals.

    UCT = Q(s,a) + c * sqrt(ln N(s) / N(s,a)); unvisited pairs count as 1,
    ties break on proposal order, and the chosen pair's counts increment.
    """
    import math

    candidates: list[str] = []
    for _ in range(k):
        a = base_actor(state, rng, proposal_eta)
        if a not in candidates:
            candidates.append(a)
    if not candidates:
        raise EnvError("no legal candidate actions")
    key = state.key()
    ns = max(1, counts.n_state.get(key, 0))
    best, best_score = candidates[0], -float("inf")
    for a in candidates:
        nsa = max(1, counts.n_sa.get((key, a), 0))
        score = q_fn(state, a) + c * math.sqrt(math.log(ns) / nsa)
        if score > best_score:
            best, best_score = a, score
    counts.n_state[key] = counts.n_state.get(key, 0) + 1
    counts.n_sa[(key, best)] = counts.n_sa.get((key, best), 0) + 1
    return best


def mcts_observe(counts: UctCounts, state_key: str, action: str, factor: int = 5) -> None:
    """Non-MCTS steps weight the executed action's counts by ``factor``."""
    counts.n_state[state_key] = counts.n_state.get(state_key, 0) + factor
    counts.n_sa[(state_key, action)] = counts.n_sa.get((state_key, action), 0) + factor


def exact_models(
    tasks: Iterable[Task],
    eta: float = 0.35,
    eta_strong: float = 0.05,
    help_prob: float = 0.0,
    cap: int = 200_000,
) -> tuple[TransitionModel, SuccessModel]:
    """Exact transition and success models for the base/strong actor pair.

    Marginalizes each actor's noise over the deterministic step function and
    runs backward induction for p(s, a); ``help_prob`` sets the chance of a
    help branch at future steps (0 = base-actor continuation).
    """
    probs: dict[tuple[str, str], dict[str, float]] = {}
    support: set[str] = set()
    states: dict[str, EnvState] = {}
    h1 = help_action(1)

    for task in tasks:
        stack = [initial_state(task)]
        while stack:
            state = stack.pop()
            key = state.key()
            if key in states:
                continue
            states[key] = state
            support.add(key)
            if len(states) > cap:
                raise EnumerationTooLarge(f"enumeration too large (> {cap} states)")
            if state.terminal:
                continue
            for action_tag, greedy, noise in (
                (NOHELP, _greedy_base, eta),
                (h1, _greedy_strong, eta_strong),
            ):
                row: dict[str, float] = {}
                for env_action, prob in action_distribution(greedy, state, noise).items():
                    nxt = env_step(state, env_action)
                    nk = nxt.key()
                    row[nk] = row.get(nk, 0.0) + prob
                    stack.append(nxt)
                    support.add(nk)
                probs[(key, action_tag)] = row

    memo: dict[str, float] = {}

    def p_star(key: str) -> float:
        if key in memo:
            return memo[key]
        state = states[key]
        if state.terminal:
            val = 1.0 if state.outcome == "success" else 0.0
        else:
            val = 0.0
            for tag, w in ((NOHELP, 1.0 - help_prob), (h1, help_prob)):
                if w == 0.0:
                    continue
                val += w * sum(p * p_star(nk) for nk, p in probs[(key, tag)].items())
        memo[key] = val
        return val

    p: dict[tuple[str, str], float] = {}
    for (key, tag), row in probs.items():
        p[(key, tag)] = sum(prob * p_star(nk) for nk, prob in row.items())

    model = TransitionModel(probs=probs, support=frozenset(support))
    return model, SuccessModel(p=p, provenance="exact")
