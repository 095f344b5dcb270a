"""Recorded episode logs shared by collection, estimation, and evaluation."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

from .mdp import CountTable, DataError, is_terminal


@dataclass(frozen=True)
class Step:
    state: str
    action: str  # "nohelp" or "help<i>" (the branch, not the env command)
    env_action: str = ""


@dataclass(frozen=True)
class Episode:
    task_id: str
    seed: int
    steps: tuple[Step, ...]
    final_state: str
    outcome: str  # "success" | "failure"
    length: int

    @property
    def episode_id(self) -> str:
        return f"{self.task_id}:{self.seed}"

    @property
    def states(self) -> list[str]:
        return [s.state for s in self.steps] + [self.final_state]

    def intervention_count(self, n_help: int) -> tuple[int, ...]:
        counts = [0] * n_help
        for step in self.steps:
            if step.action != "nohelp":
                from .mdp import help_index

                counts[help_index(step.action) - 1] += 1
        return tuple(counts)


class RolloutLog:
    """Ordered collection of episodes with jsonl persistence."""

    def __init__(self, episodes: Sequence[Episode] = ()) -> None:
        self.episodes: list[Episode] = list(episodes)

    def append(self, episode: Episode) -> None:
        self.episodes.append(episode)

    def extend(self, episodes: Sequence[Episode]) -> None:
        self.episodes.extend(episodes)

    def __iter__(self) -> Iterator[Episode]:
        return iter(self.episodes)

    def __len__(self) -> int:
        return len(self.episodes)

    def task_ids(self) -> list[str]:
        seen: dict[str, None] = {}
        for ep in self.episodes:
            seen.setdefault(ep.task_id)
        return list(seen)

    def start_states(self) -> dict[str, str]:
        """First recorded state per task; consistent across its episodes."""
        starts: dict[str, str] = {}
        for ep in self.episodes:
            if not ep.steps:
                continue
            s0 = ep.steps[0].state
            prev = starts.setdefault(ep.task_id, s0)
            if prev != s0:
                raise DataError(f"inconsistent start state for task {ep.task_id}")
        return starts

    def to_count_table(self) -> CountTable:
        table = CountTable()
        for ep in self.episodes:
            states = ep.states
            for i, step in enumerate(ep.steps):
                if is_terminal(step.state):
                    raise DataError(f"terminal source in episode {ep.episode_id}")
                table.record(step.state, step.action, states[i + 1])
        return table

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for ep in self.episodes:
                rec = {
                    "task_id": ep.task_id,
                    "seed": ep.seed,
                    "steps": [[s.state, s.action, s.env_action] for s in ep.steps],
                    "final_state": ep.final_state,
                    "outcome": ep.outcome,
                    "length": ep.length,
                }
                fh.write(json.dumps(rec, sort_keys=True, separators=(",", ":")) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "RolloutLog":
        log = cls()
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                rec = json.loads(line)
                if "task_id" not in rec:
                    continue
                log.append(
                    Episode(
                        task_id=rec["task_id"],
                        seed=rec["seed"],
                        steps=tuple(Step(*s) for s in rec["steps"]),
                        final_state=rec["final_state"],
                        outcome=rec["outcome"],
                        length=rec["length"],
                    )
                )
        return log
