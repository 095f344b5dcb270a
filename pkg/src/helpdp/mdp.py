"""Core tabular bookkeeping: state keys, actions, transition counts,
normalized transition models, and empirical success estimation.

States are canonical strings built from ``field=value`` segments joined by
``|``.  Terminal states carry an ``outcome=success`` or ``outcome=failure``
segment, so every component can classify a key without a side table.
"""
from __future__ import annotations

import json
import re
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

NOHELP = "nohelp"

_HELP_RE = re.compile(r"^help(\d*)$")

_OUTCOME_SUCCESS = "outcome=success"
_OUTCOME_FAILURE = "outcome=failure"


class DataError(ValueError):
    """Raised on malformed or inconsistent tabular data."""


def help_action(index: int) -> str:
    if index < 1:
        raise DataError(f"help index must be >= 1, got {index}")
    return f"help{index}"


def is_help(action: str) -> bool:
    return _HELP_RE.match(action) is not None


def help_index(action: str) -> int:
    """1-based intervention index of a help action ('help' aliases 'help1')."""
    m = _HELP_RE.match(action)
    if m is None:
        raise DataError(f"not a help action: {action!r}")
    return int(m.group(1) or "1")


def canonical_action(action: str) -> str:
    if action == NOHELP:
        return action
    if is_help(action):
        return help_action(help_index(action))
    raise DataError(f"unknown action {action!r}")


def action_order(n_help: int) -> list[str]:
    """nohelp first, then help1..helpK; the deterministic tie-break order."""
    return [NOHELP] + [help_action(i) for i in range(1, n_help + 1)]


def terminal_outcome(key: str) -> str | None:
    """'success' / 'failure' for terminal keys, None for non-terminal."""
    for seg in key.split("|"):
        if seg == _OUTCOME_SUCCESS:
            return "success"
        if seg == _OUTCOME_FAILURE:
            return "failure"
    return None


def is_terminal(key: str) -> bool:
    return terminal_outcome(key) is not None


def terminal_key(name: str, outcome: str) -> str:
    if outcome not in ("success", "failure"):
        raise DataError(f"outcome must be success/failure, got {outcome!r}")
    return f"{name}|outcome={outcome}"


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


class CountTable:
    """Raw transition counts keyed by (state, action, next_state).

    Recording is guarded by a lock so parallel rollout workers may share a
    table; independent tables can also be combined with :meth:`merge`.
    """

    def __init__(self) -> None:
        self._counts: dict[tuple[str, str, str], int] = {}
        self._lock = threading.Lock()

    def record(self, state: str, action: str, next_state: str, count: int = 1) -> None:
        if is_terminal(state):
            raise DataError(f"terminal source state: {state!r}")
        if count < 1:
            raise DataError(f"count must be positive, got {count}")
        action = canonical_action(action)
        key = (state, action, next_state)
        with self._lock:
            self._counts[key] = self._counts.get(key, 0) + count

    def merge(self, other: "CountTable") -> None:
        with self._lock:
            for key, c in other._counts.items():
                self._counts[key] = self._counts.get(key, 0) + c

    def total(self) -> int:
        return sum(self._counts.values())

    def get(self, state: str, action: str, next_state: str) -> int:
        return self._counts.get((state, canonical_action(action), next_state), 0)

    def items(self) -> Iterator[tuple[tuple[str, str, str], int]]:
        return iter(sorted(self._counts.items()))

    def __len__(self) -> int:
        return len(self._counts)

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for (s, a, s2), c in self.items():
                fh.write(_dump({"state": s, "action": a, "next": s2, "count": c}) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "CountTable":
        table = cls()
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                rec = json.loads(line)
                if "state" not in rec:
                    continue  # provenance header
                table.record(rec["state"], rec["action"], rec["next"], rec["count"])
        return table


@dataclass(frozen=True)
class TransitionModel:
    """Per (state, action) categorical next-state distribution.

    Rows exist only for observed (or analytically constructed) pairs;
    unobserved rows are absent rather than smoothed.  Immutable after
    construction.
    """

    probs: dict[tuple[str, str], dict[str, float]]
    support: frozenset[str]

    def __post_init__(self) -> None:
        for (s, a), row in self.probs.items():
            if is_terminal(s):
                raise DataError(f"terminal source state in model: {s!r}")
            total = sum(row.values())
            if abs(total - 1.0) > 1e-12:
                raise DataError(f"row ({s!r}, {a!r}) sums to {total}, not 1")
            for s2, p in row.items():
                if not 0.0 <= p <= 1.0:
                    raise DataError(f"probability out of range for ({s!r},{a!r},{s2!r})")
                if s2 not in self.support:
                    raise DataError(f"next state {s2!r} missing from support")

    @property
    def actions(self) -> list[str]:
        seen = {a for (_, a) in self.probs}
        return [a for a in action_order(self.n_help) if a in seen]

    @property
    def n_help(self) -> int:
        indices = {help_index(a) for (_, a) in self.probs if is_help(a)}
        if not indices:
            return 0
        k = max(indices)
        if indices != set(range(1, k + 1)):
            raise DataError(f"help indices not dense: {sorted(indices)}")
        return k

    def row(self, state: str, action: str) -> dict[str, float] | None:
        return self.probs.get((state, canonical_action(action)))

    def has_row(self, state: str, action: str) -> bool:
        return self.row(state, action) is not None

    def nonterminal_states(self) -> list[str]:
        return sorted(s for s in self.support if not is_terminal(s))

    def terminal_states(self) -> dict[str, str]:
        return {s: terminal_outcome(s) for s in sorted(self.support) if is_terminal(s)}

    def sources(self) -> list[str]:
        return sorted({s for (s, _) in self.probs})


def normalize(table: CountTable, alpha: float = 0.0) -> TransitionModel:
    """Estimate transition probabilities as counts over row sums.

    ``alpha`` applies optional Laplace smoothing within each row's observed
    successor set (default off); smoothing never invents unseen successors.
    """
    if len(table) == 0:
        raise DataError("no data")
    if alpha < 0:
        raise DataError(f"alpha must be >= 0, got {alpha}")
    rows: dict[tuple[str, str], dict[str, int]] = {}
    support: set[str] = set()
    for (s, a, s2), c in table.items():
        rows.setdefault((s, a), {})[s2] = c
        support.add(s)
        support.add(s2)
    probs: dict[tuple[str, str], dict[str, float]] = {}
    for key, counts in rows.items():
        denom = sum(counts.values()) + alpha * len(counts)
        probs[key] = {s2: (c + alpha) / denom for s2, c in counts.items()}
    return TransitionModel(probs=probs, support=frozenset(support))


@dataclass(frozen=True)
class SuccessModel:
    """Per (state, action-branch) probability of eventual task success.

    Terminal keys are forced to 1/0 regardless of stored samples.
    """

    p: dict[tuple[str, str], float]
    n: dict[tuple[str, str], int] = field(default_factory=dict)
    provenance: str = "empirical"

    def __post_init__(self) -> None:
        if self.provenance not in ("empirical", "exact"):
            raise DataError(f"bad provenance {self.provenance!r}")
        for key, v in self.p.items():
            if not 0.0 <= v <= 1.0:
                raise DataError(f"success probability out of range for {key}")
            if self.provenance == "empirical" and self.n.get(key, 0) < 1:
                raise DataError(f"empirical entry without samples: {key}")

    def has(self, state: str, action: str) -> bool:
        if is_terminal(state):
            return True
        return (state, canonical_action(action)) in self.p

    def get(self, state: str, action: str) -> float:
        outcome = terminal_outcome(state)
        if outcome is not None:
            return 1.0 if outcome == "success" else 0.0
        key = (state, canonical_action(action))
        if key not in self.p:
            raise DataError(f"no success estimate for {key}")
        return self.p[key]

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for (s, a), v in sorted(self.p.items()):
                rec = {
                    "state": s,
                    "action": a,
                    "p": v,
                    "n": self.n.get((s, a), 0),
                    "provenance": self.provenance,
                }
                fh.write(_dump(rec) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "SuccessModel":
        p: dict[tuple[str, str], float] = {}
        n: dict[tuple[str, str], int] = {}
        provenance = "empirical"
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                rec = json.loads(line)
                if "state" not in rec:
                    continue
                key = (rec["state"], canonical_action(rec["action"]))
                p[key] = rec["p"]
                n[key] = rec["n"]
                provenance = rec["provenance"]
        return cls(p=p, n=n, provenance=provenance)


def estimate_success(log: Iterable, alpha: float = 0.0) -> SuccessModel:
    """Empirical success probability per (state, action-branch).

    A visit to state s counts toward branch a if a was the branch taken at
    s; the label is the episode's terminal outcome.  States never visited
    under a branch are absent.
    """
    visits: dict[tuple[str, str], int] = {}
    successes: dict[tuple[str, str], int] = {}
    empty = True
    for episode in log:
        empty = False
        if episode.outcome not in ("success", "failure"):
            raise DataError(f"rollout without terminal outcome: {episode.episode_id}")
        won = episode.outcome == "success"
        for step in episode.steps:
            if is_terminal(step.state):
                continue
            key = (step.state, canonical_action(step.action))
            visits[key] = visits.get(key, 0) + 1
            if won:
                successes[key] = successes.get(key, 0) + 1
    if empty:
        raise DataError("no data")
    p = {
        key: (successes.get(key, 0) + alpha) / (v + 2 * alpha)
        for key, v in visits.items()
    }
    return SuccessModel(p=p, n=dict(visits), provenance="empirical")
