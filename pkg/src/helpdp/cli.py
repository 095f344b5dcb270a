"""Batch command-line front end.

Every command reads a JSON run config, derives all randomness from its
single seed, and writes artifacts under the output directory.  Outputs
embed the config hash and seed; reruns with unchanged inputs are
byte-identical.

Exit codes: 0 success, 2 invalid usage or config, 3 infeasible budget,
1 any other error.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import random
import sys
from pathlib import Path

import click

from . import env as envmod
from . import fixtures, oracle, pipeline, planner
from .mdp import NOHELP, CountTable, SuccessModel, normalize, estimate_success
from .rollouts import RolloutLog


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


class Run:
    """Loaded config plus the paths and provenance shared by commands."""

    def __init__(self, config_path: str, seed: int | None, out: str | None) -> None:
        try:
            self.config = json.loads(Path(config_path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise click.UsageError(f"cannot read config {config_path}: {exc}")
        if seed is not None:
            self.config["seed"] = seed
        if out is not None:
            self.config["out"] = out
        if "seed" not in self.config:
            raise click.UsageError("config must provide a seed")
        self.seed = int(self.config["seed"])
        self.out = Path(self.config.get("out", "out"))
        self.out.mkdir(parents=True, exist_ok=True)
        self.config_hash = hashlib.sha256(_dump(self.config).encode()).hexdigest()[:16]

    @property
    def provenance(self) -> dict:
        return {"config_hash": self.config_hash, "seed": self.seed}

    def path(self, name: str) -> Path:
        return self.out / name

    def write_json(self, name: str, doc: dict) -> Path:
        doc = dict(doc)
        doc["provenance"] = self.provenance
        p = self.path(name)
        p.write_text(_dump(doc) + "\n", encoding="utf-8")
        return p

    def write_jsonl_header(self, path: Path) -> None:
        """Prepend the provenance record; loaders skip it by schema."""
        body = path.read_text(encoding="utf-8")
        path.write_text(_dump({"provenance": self.provenance}) + "\n" + body, encoding="utf-8")

    def env_config(self) -> envmod.EnvConfig:
        try:
            return envmod.EnvConfig.from_dict(self.config.get("env", {}))
        except (envmod.EnvError, TypeError) as exc:
            raise click.UsageError(f"bad env config: {exc}")

    def planner_config(self, r_override: float | None, variant: str | None) -> planner.RewardConfig:
        p = dict(self.config.get("planner", {}))
        r = r_override if r_override is not None else p.get("r", 0.5)
        try:
            return planner.RewardConfig(
                r=tuple(r) if isinstance(r, (list, tuple)) else (float(r),),
                gamma=float(p.get("gamma", 1.0)),
                epsilon=float(p.get("epsilon", 1e-8)),
                max_iters=int(p.get("max_iters", 10_000)),
                variant=variant or p.get("variant", "value_consistent"),
            )
        except planner.PlannerError as exc:
            raise click.UsageError(f"bad planner config: {exc}")

    def interventions(self, success: SuccessModel | None = None) -> list:
        kind = self.config.get("intervention", "strong")
        ec = self.env_config()
        strong = pipeline.StrongActorIntervention(ec.eta_strong)
        if kind == "strong":
            return [strong]
        if kind in ("mcts", "both"):
            if success is None:
                tasks = self.load_tasks().all()
                _, success = envmod.exact_models(tasks, eta=ec.eta, eta_strong=ec.eta_strong)
            mcts = pipeline.MctsIntervention(_q_from_success(success, self.seed))
            return [strong, mcts] if kind == "both" else [mcts]
        raise click.UsageError(f"unknown intervention kind {kind!r}")

    def load_tasks(self) -> envmod.TaskSet:
        p = self.path("tasks.jsonl")
        if not p.exists():
            raise click.UsageError(f"{p} missing; run `gen` first")
        return envmod.TaskSet.load(p)

    def load_models(self):
        cp, sp = self.path("counts.jsonl"), self.path("success.jsonl")
        if not cp.exists() or not sp.exists():
            raise click.UsageError("counts/success missing; run `fit` first")
        model = pipeline.restrict_to_solvable(normalize(CountTable.load(cp)))
        return model, SuccessModel.load(sp)

    def load_solution(self) -> planner.Solution:
        p = self.path("solution.json")
        if not p.exists():
            raise click.UsageError(f"{p} missing; run `solve` or `search` first")
        return planner.load_solution(p)

    def start_keys(self, tasks) -> list[str]:
        return [envmod.initial_state(t).key() for t in tasks]


def _q_from_success(success: SuccessModel, seed: int):
    """Noisy post-action success score used by the MCTS intervention."""

    def q(state: envmod.EnvState, action: str) -> float:
        nxt = envmod.env_step(state, action)
        key = nxt.key()
        base = success.get(key, NOHELP) if success.has(key, NOHELP) else 0.5
        rng = random.Random(pipeline.derive_seed(seed, "q", key, action))
        return min(1.0, max(0.0, base + rng.uniform(-0.05, 0.05)))

    return q


pass_run = click.make_pass_decorator(Run)


@click.group()
@click.option("--config", "config_path", required=True, type=click.Path(), help="Run config JSON.")
@click.option("--seed", type=int, default=None, help="Override the config seed.")
@click.option("--out", type=click.Path(), default=None, help="Override the output directory.")
@click.pass_context
def main(ctx: click.Context, config_path: str, seed: int | None, out: str | None) -> None:
    """Budget-aware intervention planning toolkit."""
    ctx.obj = Run(config_path, seed, out)


@main.command()
@pass_run
def gen(run: Run) -> None:
    """Generate the train/val/test taskset."""
    taskset = envmod.generate_tasks(run.env_config(), run.seed)
    p = run.path("tasks.jsonl")
    taskset.save(p)
    run.write_jsonl_header(p)
    click.echo(
        f"tasks train={len(taskset.train)} val={len(taskset.val)} test={len(taskset.test)}"
    )


@main.command()
@pass_run
def collect(run: Run) -> None:
    """Randomized-intervention collection over the train split."""
    taskset = run.load_tasks()
    ec = run.env_config()
    interventions = run.interventions()
    schedule = run.config.get("schedule")
    if schedule is not None:
        schedule = [tuple(p) for p in schedule]
    log = pipeline.collect_phase1(
        list(taskset.train),
        interventions,
        run.seed,
        schedule=schedule,
        n_seeds=int(run.config.get("phase1_seeds", 3)),
        eta=ec.eta,
    )
    p = run.path("phase1.jsonl")
    log.save(p)
    run.write_jsonl_header(p)
    click.echo(f"collected {len(log)} episodes")


@main.command()
@pass_run
def fit(run: Run) -> None:
    """Estimate transition counts and success probabilities from the log."""
    log = RolloutLog.load(run.path("phase1.jsonl"))
    table = log.to_count_table()
    success = estimate_success(log)
    cp, sp = run.path("counts.jsonl"), run.path("success.jsonl")
    table.save(cp)
    success.save(sp)
    run.write_jsonl_header(cp)
    run.write_jsonl_header(sp)
    click.echo(f"fit {len(table)} transition rows, {len(success.p)} success entries")


def _summary(sol: planner.Solution) -> str:
    eu = sum(sol.expected_usage) if sol.expected_usage else 0.0
    r = sol.r[0] if len(sol.r) == 1 else list(sol.r)
    return f"r={r} E[U]={eu:.6f} converged={sol.converged} iters={sol.iterations_run}"


@main.command()
@click.option("--r", "r_value", type=float, default=None, help="Override the help cost.")
@click.option("--variant", type=click.Choice(["value_consistent", "paper_literal"]), default=None)
@pass_run
def solve(run: Run, r_value: float | None, variant: str | None) -> None:
    """Solve the fixed-cost planning problem on the fitted model."""
    model, success = run.load_models()
    cfg = run.planner_config(r_value, variant)
    sol = planner.solve(model, success, cfg)
    starts = run.start_keys(run.load_tasks().train)
    eu = pipeline.expected_usage_for_tasks(sol, starts)
    sol = dataclasses.replace(sol, expected_usage=eu)
    run.write_json("solution.json", planner.solution_to_dict(sol))
    click.echo(_summary(sol))


@main.command()
@click.option("--budget", type=float, default=None, help="Override the usage budget.")
@click.option("--variant", type=click.Choice(["value_consistent", "paper_literal"]), default=None)
@pass_run
def search(run: Run, budget: float | None, variant: str | None) -> None:
    """Bisect the help cost until expected usage fits the budget."""
    model, success = run.load_models()
    p = run.config.get("planner", {})
    if budget is None:
        budget = p.get("budget")
    if budget is None:
        raise click.UsageError("search needs a budget (config planner.budget or --budget)")
    bounds = tuple(p.get("bounds", (0.0, 10.0)))
    cfg = run.planner_config(0.0, variant)
    starts = run.start_keys(run.load_tasks().train)
    starts = [s for s in starts if s in model.support]
    result = planner.reward_search(model, success, float(budget), bounds, starts, cfg)
    run.write_json("solution.json", planner.solution_to_dict(result.solution))
    run.write_json(
        "search.json",
        {"budget": budget, "r": result.r, "expected_usage": result.expected,
         "trace": [[r, eu] for r, eu in result.trace]},
    )
    sol = result.solution
    click.echo(f"r={result.r} E[U]={result.expected:.6f} converged={sol.converged} iters={sol.iterations_run}")


@main.command()
@pass_run
def annotate(run: Run) -> None:
    """Distill the solved policy into a helper lookup table."""
    sol = run.load_solution()
    model, _ = run.load_models()
    log = RolloutLog.load(run.path("phase1.jsonl"))
    mode = run.config.get("helper_mode", "all_states")
    helper = pipeline.build_helper(sol, log, model, mode=mode)
    run.write_json(
        "helper.json",
        {"mode": helper.training_mode, "fallback": helper.fallback,
         "table": dict(sorted(helper.table.items()))},
    )
    click.echo(f"helper mode={mode} states={len(helper.table)}")


@main.command("eval")
@pass_run
def eval_cmd(run: Run) -> None:
    """Deploy the helper on the train tasks (fresh seeds) with a
    seen/unseen breakdown; the lookup table cannot generalize across task
    identities, so the deployment split is the one the policy was solved
    for."""
    taskset = run.load_tasks()
    ec = run.env_config()
    doc = json.loads(run.path("helper.json").read_text(encoding="utf-8"))
    helper = pipeline.HelperPolicy(
        table=doc["table"], training_mode=doc["mode"], fallback=doc["fallback"]
    )
    sol = run.load_solution()
    model, _ = run.load_models()
    interventions = run.interventions()
    n_seeds = int(run.config.get("eval_seeds", 3))
    tasks = {t.task_id: t for t in taskset.train}
    starts = {t.task_id: envmod.initial_state(t).key() for t in taskset.train}
    seen_ids, unseen_ids = pipeline.split_seen_unseen(starts, sol, model)
    report = {}
    headline = None
    for name, ids in (("all", list(starts)), ("seen", seen_ids), ("unseen", unseen_ids)):
        if not ids:
            report[name] = None
            continue
        subset = [tasks[i] for i in ids]
        eu = pipeline.expected_usage_for_tasks(sol, (starts[i] for i in ids))
        metrics, _ = pipeline.evaluate(
            helper.as_decider(), subset, interventions, run.seed,
            n_seeds=n_seeds, eta=ec.eta, expected=eu, seed_salt=f"eval-{name}",
        )
        report[name] = metrics.to_dict()
        if name == "all":
            headline = metrics
    run.write_json("metrics.json", report)
    assert headline is not None
    eu = headline.expected_usage or ()
    click.echo(
        f"SR={headline.sr:.4f} SPL={headline.spl:.4f} L={headline.length:.3f} "
        f"U={[round(u, 4) for u in headline.usage]} EU={[round(u, 4) for u in eu]} "
        f"seen={len(seen_ids)} unseen={len(unseen_ids)}"
    )


@main.command("oracle")
@click.option("--r", "r_value", type=float, default=0.3, show_default=True)
@pass_run
def oracle_cmd(run: Run, r_value: float) -> None:
    """Cross-check the planner against exhaustive enumeration on fixtures."""
    report: dict = {}
    for name, (model, success) in (("two_state_chain", fixtures.mdp_b()), ("one_state", fixtures.mdp_a())):
        cfg = planner.RewardConfig(r=(r_value,), gamma=1.0)
        sol = planner.solve(model, success, cfg)
        starts = model.nonterminal_states()
        enum = oracle.brute_force_optimal(model, cfg, starts)
        gap = max(abs(enum.best_value[s] - sol.value[s]) for s in starts)
        report[name] = {
            "r": r_value,
            "planner_value": {s: sol.value[s] for s in starts},
            "enumeration_best": enum.best_value,
            "policies_examined": enum.policy_count,
            "max_gap": gap,
        }
    run.write_json("oracle.json", report)
    worst = max(v["max_gap"] for v in report.values())
    click.echo(f"oracle max gap {worst:.3e}")
    if worst > 1e-8:
        raise planner.PlannerError(f"planner disagrees with enumeration by {worst:.3e}")


@main.command()
@click.option("--p", "probs", type=float, multiple=True, help="Per-step help probability.")
@pass_run
def baseline(run: Run, probs: tuple[float, ...]) -> None:
    """Random-trigger baselines on the test split."""
    taskset = run.load_tasks()
    ec = run.env_config()
    interventions = run.interventions()
    if not probs:
        probs = tuple(run.config.get("baseline_probs", [0.0, 0.3, 1.0]))
    report = {}
    for p in probs:
        metrics, _ = pipeline.evaluate(
            pipeline.baseline_random((p,) * len(interventions) if len(interventions) == 1 else (p, 0.0)),
            list(taskset.test),
            interventions,
            run.seed,
            n_seeds=int(run.config.get("eval_seeds", 3)),
            eta=ec.eta,
            seed_salt=f"baseline-{p}",
        )
        report[f"p={p}"] = metrics.to_dict()
        click.echo(f"p={p} SR={metrics.sr:.4f} U={[round(u, 4) for u in metrics.usage]}")
    run.write_json("baseline.json", report)


@main.command()
@pass_run
def selfreg(run: Run) -> None:
    """Calibrated halt-threshold evaluation on val/test rollouts.

    The difficulty scorer is the exact per-state success probability of the
    val/test tasks; empirical estimates never cover these states."""
    taskset = run.load_tasks()
    ec = run.env_config()
    _, success = envmod.exact_models(
        list(taskset.val) + list(taskset.test), eta=ec.eta, eta_strong=ec.eta_strong
    )

    def score(key: str) -> float:
        return pipeline.state_score(success, key) if success.has(key, NOHELP) else 0.5

    def roll(tasks, salt):
        log = RolloutLog()
        for task in tasks:
            seed = pipeline.derive_seed(run.seed, salt, task.task_id)
            log.append(pipeline.run_episode(task, pipeline.always(NOHELP), [], seed, eta=ec.eta))
        return log

    report = pipeline.self_regulation_eval(score, roll(taskset.val, "sr-val"), roll(taskset.test, "sr-test"))
    run.write_json(
        "selfreg.json",
        {"threshold": report.threshold, "accuracy": report.accuracy,
         "precision": report.precision, "recall": report.recall},
    )
    click.echo(
        f"threshold={report.threshold:.4f} acc={report.accuracy:.4f} "
        f"prec={report.precision:.4f} rec={report.recall:.4f}"
    )


def cli() -> None:
    try:
        main(standalone_mode=False)
    except click.UsageError as exc:
        click.echo(f"usage error: {exc.format_message()}", err=True)
        sys.exit(2)
    except click.exceptions.Abort:
        sys.exit(2)
    except click.exceptions.Exit as exc:
        sys.exit(exc.exit_code)
    except planner.BudgetInfeasibleError as exc:
        click.echo(f"infeasible budget: {exc}", err=True)
        sys.exit(3)
    except Exception as exc:  # categorized catch-all for batch usage
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)


if __name__ == "__main__":
    cli()
