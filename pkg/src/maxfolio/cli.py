"""Command-line entry point: ``maxfolio <command>``.

Commands share one campaign directory (``--workdir``)::

    maxfolio --workdir W tune scenario.txt --budget 3600
    maxfolio --workdir W select --k 50
    maxfolio --workdir W portfolio par --n 25
    maxfolio --workdir W portfolio seq --max-len 3
    maxfolio --workdir W simulate
    maxfolio score W/runs --bounds best.txt

Exit codes: 0 success; 1 runtime failure; 2 bad usage or unreadable input.
``validate`` additionally exits 10 (no solution), 11 (hard clause violated)
or 12 (malformed output).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import warnings
from collections import defaultdict
from collections.abc import Sequence
from pathlib import Path
from typing import Any

from maxfolio import __version__
from maxfolio.blackbox import (
    RunStore,
    Scenario,
    ScenarioError,
    load_runs,
    load_scenario,
)
from maxfolio.portfolio import (
    DEFAULT_BUDGET_TO,
    DEFAULT_MAX_LEN,
    DEFAULT_MTBS_GRID,
    PortfolioKind,
    build_parallel,
    evaluate_schedule,
    read_schedule,
    search_best_schedule,
    traces_from_pool,
    traces_from_runs,
    write_launch_scripts,
    write_schedule,
)
from maxfolio.scoring import (
    BoundsRegistry,
    InstanceResult,
    RegistryError,
    format_report,
    instance_id,
    merge_bounds,
    read_bounds,
    score_solver,
    seed_stats,
    vbs_bounds,
    write_bounds,
)
from maxfolio.selection import (
    ShortPoolWarning,
    complete_and_score,
    rank_archive,
    read_pool,
    write_pool,
)
from maxfolio.tuner import (
    AllInstances,
    Archive,
    Incremental,
    SolverEvaluator,
    TunerSettings,
    TuningError,
    load_checkpoint,
    tune,
)
from maxfolio.wcnf import VerdictStatus, WcnfParseError, read_wcnf, validate_output

log = logging.getLogger("maxfolio")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
VERDICT_EXIT = {
    VerdictStatus.VALID: 0,
    VerdictStatus.NO_SOLUTION: 10,
    VerdictStatus.HARD_VIOLATION: 11,
    VerdictStatus.MALFORMED_OUTPUT: 12,
}
STAGES = ("tuned", "selected", "portfolio_built")


class UsageError(Exception):
    """Bad arguments or unreadable inputs (exit 2)."""


class CommandError(Exception):
    """The command ran but could not do its job (exit 1)."""


# -- campaign bookkeeping ---------------------------------------------------------------


def file_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


class Campaign:
    """``campaign.json`` in the workdir: scenario, seed and stage markers."""

    def __init__(self, workdir: Path):
        self.workdir = workdir
        self.path = workdir / "campaign.json"
        self.data: dict[str, Any] = {"stages": {}}
        if self.path.exists():
            self.data = json.loads(self.path.read_text(encoding="utf-8"))

    @property
    def runs(self) -> RunStore:
        return RunStore(self.workdir / "runs")

    def stage_dir(self, name: str) -> Path:
        d = self.workdir / name
        d.mkdir(parents=True, exist_ok=True)
        return d

    def seed(self, args: argparse.Namespace) -> int:
        if args.seed is not None:
            return args.seed
        return int(self.data.get("seed", 0))

    def scenario(self) -> Scenario:
        path = self.data.get("scenario")
        if not path:
            raise CommandError(f"{self.workdir} holds no tuned campaign; run 'tune' first")
        return _load_scenario(path)

    def require(self, stage: str) -> dict[str, Any]:
        marker = self.data["stages"].get(stage)
        if marker is None:
            raise CommandError(f"stage '{stage}' has not completed in {self.workdir}")
        return marker

    def mark(self, stage: str, inputs: dict[str, str], outputs: dict[str, str]) -> None:
        # a re-run stage invalidates everything downstream of it
        for later in STAGES[STAGES.index(stage) :]:
            self.data["stages"].pop(later, None)
        self.data["stages"][stage] = {"inputs": inputs, "outputs": outputs}
        self.save()

    def check_fresh(self, stage: str, upstream: str, path: Path) -> None:
        marker = self.require(stage)
        recorded = marker["outputs"].get(upstream)
        if recorded is not None and path.exists() and file_digest(path) != recorded:
            raise CommandError(f"{path} changed since stage '{stage}' completed; re-run it")

    def save(self) -> None:
        self.workdir.mkdir(parents=True, exist_ok=True)
        _write_json(self.path, self.data)


def _write_json(path: Path, data: Any) -> None:
    path.write_text(json.dumps(data, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _load_scenario(path: str | Path) -> Scenario:
    try:
        return load_scenario(path)
    except ScenarioError as exc:
        raise UsageError(str(exc)) from None
    except OSError as exc:
        raise UsageError(f"cannot read scenario: {exc}") from None


def _read_registries(paths: Sequence[str]) -> BoundsRegistry | None:
    regs = []
    for p in paths:
        try:
            regs.append(read_bounds(p))
        except OSError as exc:
            raise UsageError(f"cannot read bounds file: {exc}") from None
        except ValueError as exc:
            raise UsageError(f"{p}: {exc}") from None
    return merge_bounds(regs) if regs else None


def _emit(args: argparse.Namespace, payload: dict[str, Any], text: str) -> None:
    if args.json:
        print(json.dumps(payload, sort_keys=True))
    else:
        print(text)


# -- validate ------------------------------------------------------------------------


def cmd_validate(args: argparse.Namespace) -> int:
    try:
        formula = read_wcnf(args.instance)
        output = sys.stdin.buffer.read() if args.output == "-" else Path(args.output).read_bytes()
    except (OSError, WcnfParseError) as exc:
        raise UsageError(str(exc)) from None
    verdict = validate_output(formula, output)
    payload = {
        "status": verdict.status.value,
        "true_cost": verdict.true_cost,
        "reported_cost": verdict.reported_cost,
        "detail": verdict.detail,
    }
    text = verdict.status.value
    if verdict.true_cost is not None:
        text += f" cost={verdict.true_cost}"
        if verdict.reported_cost is not None and verdict.reported_cost != verdict.true_cost:
            text += f" (reported {verdict.reported_cost})"
    elif verdict.detail:
        text += f": {verdict.detail}"
    _emit(args, payload, text)
    return VERDICT_EXIT[verdict.status]


# -- tune -----------------------------------------------------------------------------


def _training_registry(scenario: Scenario, extra: Sequence[str]) -> BoundsRegistry:
    """Scenario and command-line bounds; instances without one fall back to their soft weight."""
    reg = _read_registries([*scenario.bounds_files, *extra])
    missing = {}
    for path in scenario.instances:
        inst = instance_id(path)
        if reg is None or inst not in reg:
            try:
                missing[inst] = read_wcnf(path).total_soft_weight
            except (OSError, WcnfParseError) as exc:
                raise UsageError(f"cannot read instance: {exc}") from None
    if missing:
        log.warning("%d instance(s) lack a best-known bound; using total soft weight", len(missing))
        fallback = BoundsRegistry.from_bounds(missing, "softsum")
        reg = fallback if reg is None else merge_bounds([reg, fallback])
    assert reg is not None
    return reg


def cmd_tune(args: argparse.Namespace) -> int:
    campaign = Campaign(Path(args.workdir))
    out = campaign.stage_dir("tune")
    checkpoint = out / "checkpoint.json"
    store = campaign.runs

    if args.resume:
        if not checkpoint.exists():
            raise UsageError(f"no checkpoint at {checkpoint}")
        scenario = campaign.scenario()
        registry = read_bounds(out / "bounds.txt")
        state, saved = load_checkpoint(checkpoint, store)
        settings = TunerSettings.from_json(
            {**saved.to_json(), "budget": args.budget, "max_generations": args.max_generations}
        )
    else:
        scenario = _load_scenario(args.scenario)
        registry = _training_registry(scenario, args.bounds)
        seed = 0 if args.seed is None else args.seed
        if args.policy == "all":
            policy: Any = AllInstances()
        else:
            policy = Incremental(args.start_fraction, args.full_at)
        settings = TunerSettings(
            num_tournaments=args.tournaments,
            population_size=args.population,
            budget=args.budget,
            instance_policy=policy,
            max_age=args.max_age,
            mutation_rate=args.mutation_rate,
            rng_seed=seed,
            max_generations=args.max_generations,
        )
        state = None
        write_bounds(registry, out / "bounds.txt")
        campaign.data.update(
            scenario=str(Path(args.scenario).resolve()),
            scenario_digest=scenario.digest,
            seed=seed,
        )

    instances = [instance_id(p) for p in scenario.instances]
    evaluator = SolverEvaluator(scenario, max_workers=args.workers, store=store)
    try:
        result = tune(
            scenario.space, instances, settings, evaluator, registry, checkpoint=checkpoint, store=store, resume=state
        )
    except TuningError as exc:
        _write_json(out / "archive.json", exc.archive.to_json())
        raise CommandError(str(exc)) from None
    except ValueError as exc:
        raise UsageError(str(exc)) from None

    _write_json(out / "archive.json", result.archive.to_json())
    _write_json(out / "settings.json", settings.to_json())
    _write_json(
        out / "winner.json",
        {"config": result.winner.to_json(), "generations": result.generations, "mean_cost": result.best_cost, "seed": settings.rng_seed},
    )
    campaign.mark(
        "tuned",
        {"scenario": scenario.digest, "bounds": registry.digest(), "seed": str(settings.rng_seed)},
        {"archive": file_digest(out / "archive.json"), "winner": file_digest(out / "winner.json")},
    )
    _emit(
        args,
        {"winner": result.winner.to_json(), "generations": result.generations, "mean_cost": result.best_cost,
         "runs": evaluator.runs_issued},
        f"winner {result.winner.id} after {result.generations} generation(s), mean cost {result.best_cost:.6f}",
    )
    return EXIT_OK


# -- select ------------------------------------------------------------------------


def cmd_select(args: argparse.Namespace) -> int:
    campaign = Campaign(Path(args.workdir))
    tune_dir = campaign.workdir / "tune"
    campaign.check_fresh("tuned", "archive", tune_dir / "archive.json")
    scenario = campaign.scenario()
    store = campaign.runs
    archive = Archive.from_json(json.loads((tune_dir / "archive.json").read_text(encoding="utf-8")), store)
    if len(archive) == 0:
        raise CommandError("archive is empty")
    registry = read_bounds(tune_dir / "bounds.txt")
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", ShortPoolWarning)
        configs = rank_archive(archive, args.k)
    for w in caught:
        log.warning("%s", w.message)
    instances = [instance_id(p) for p in scenario.instances]
    evaluator = SolverEvaluator(scenario, max_workers=args.workers, store=store)
    seed = campaign.seed(args)
    pool = complete_and_score(configs, instances, registry, evaluator, archive.runs(), seed=seed)

    out = campaign.stage_dir("select")
    write_pool(pool, out / "pool.json")
    best = pool.candidates[0]
    _write_json(out / "winner.json", {"config": best.config.to_json(), "mse_score": best.mse_score})
    campaign.mark(
        "selected",
        {"archive": file_digest(tune_dir / "archive.json"), "k": str(args.k), "seed": str(seed)},
        {"pool": file_digest(out / "pool.json")},
    )
    _emit(
        args,
        {"pool_size": len(pool), "winner": best.config.to_json(), "mse_score": best.mse_score,
         "new_runs": evaluator.runs_issued},
        f"pool of {len(pool)}; winner {best.config.id} score {best.mse_score:.6f} ({evaluator.runs_issued} new runs)",
    )
    return EXIT_OK


# -- portfolio ------------------------------------------------------------------------


def _load_pool(campaign: Campaign):
    path = campaign.workdir / "select" / "pool.json"
    campaign.check_fresh("selected", "pool", path)
    return read_pool(path, campaign.runs), path


def _parse_grid(text: str) -> list[float]:
    try:
        grid = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a list of numbers: {text!r}") from None
    if not grid or any(m <= 0 for m in grid):
        raise argparse.ArgumentTypeError("grid needs positive values")
    return grid


def cmd_portfolio_par(args: argparse.Namespace) -> int:
    campaign = Campaign(Path(args.workdir))
    pool, pool_path = _load_pool(campaign)
    scenario = campaign.scenario()
    kind = PortfolioKind.CONFIGS if args.kind == "configs" else PortfolioKind.SEEDS
    try:
        portfolio = build_parallel(pool, args.n, kind, base_seed=campaign.seed(args))
    except ValueError as exc:
        raise CommandError(str(exc)) from None
    out = campaign.stage_dir("portfolio") / f"par-{args.kind}-{args.n}"
    write_launch_scripts(portfolio, scenario, out, {"pool_digest": file_digest(pool_path), "base_seed": campaign.seed(args)})
    campaign.mark(
        "portfolio_built",
        {"pool": file_digest(pool_path), "mode": "par", "n": str(args.n), "kind": args.kind},
        {"manifest": file_digest(out / "manifest.json")},
    )
    _emit(args, {"dir": str(out), "entries": len(portfolio)}, f"{len(portfolio)} launch scripts in {out}")
    return EXIT_OK


def cmd_portfolio_seq(args: argparse.Namespace) -> int:
    campaign = Campaign(Path(args.workdir))
    pool, pool_path = _load_pool(campaign)
    try:
        traces = traces_from_pool(pool)
        result = search_best_schedule(
            pool, traces, pool.registry, args.max_len, args.grid, args.to,
            allow_repeats=args.allow_repeats, first_solution_cap=args.first_solution_cap,
        )
    except ValueError as exc:
        raise CommandError(str(exc)) from None
    out = campaign.stage_dir("portfolio") / "schedule.json"
    provenance = {
        "pool_digest": file_digest(pool_path),
        "max_len": args.max_len,
        "grid": list(args.grid),
        "allow_repeats": args.allow_repeats,
    }
    write_schedule(result, out, provenance)
    campaign.mark(
        "portfolio_built",
        {"pool": file_digest(pool_path), "mode": "seq"},
        {"schedule": file_digest(out)},
    )
    s = result.schedule
    _emit(
        args,
        {"schedule": list(s.ids), "mtbs": s.mtbs, "budget_to": s.budget_to, "train_score": result.train_score,
         "n_evaluated": result.n_evaluated},
        f"schedule {' -> '.join(s.ids)} mtbs={s.mtbs:g} score={result.train_score:.6f} "
        f"({result.n_evaluated} schedules scored)",
    )
    return EXIT_OK


# -- simulate ---------------------------------------------------------------------------


def cmd_simulate(args: argparse.Namespace) -> int:
    campaign = Campaign(Path(args.workdir))
    sched_path = Path(args.schedule) if args.schedule else campaign.workdir / "portfolio" / "schedule.json"
    try:
        schedule = read_schedule(sched_path)
    except (OSError, ValueError, KeyError) as exc:
        raise UsageError(f"cannot read schedule: {exc}") from None
    if args.runs:
        runs = [r for d in args.runs for r in load_runs(d)]
        traces = traces_from_runs(runs, schedule.sequence)
        registry = _read_registries(args.bounds) or vbs_bounds(runs)
    else:
        pool, _ = _load_pool(campaign)
        traces = traces_from_pool(pool)
        registry = _read_registries(args.bounds) or pool.registry
    ids = set(schedule.ids)
    incomplete = sorted(inst for inst, per in traces.items() if not ids <= set(per))
    if incomplete:
        raise CommandError(f"no runs of every scheduled configuration on {incomplete[0]!r}")
    try:
        outcome = evaluate_schedule(schedule, traces, registry)
    except RegistryError as exc:
        raise CommandError(str(exc)) from None
    out = campaign.stage_dir("simulate") / "outcome.json"
    _write_json(
        out,
        {
            "schedule": str(sched_path),
            "score": outcome.score,
            "per_instance": {i: r.ub for i, r in outcome.per_instance.items()},
            "switch_log": {i: [list(s) for s in log_] for i, log_ in outcome.switch_log.items()},
        },
    )
    _emit(args, {"score": outcome.score, "instances": len(outcome.per_instance), "outcome": str(out)},
          f"simulated score {outcome.score:.6f} over {len(outcome.per_instance)} instance(s) -> {out}")
    return EXIT_OK


# -- score ---------------------------------------------------------------------------


def _replicates(runs) -> dict[str, list[list[InstanceResult]]]:
    """Per configuration, the r-th run (by seed) on every instance forms replicate r."""
    by_config: dict[str, dict[str, list]] = defaultdict(lambda: defaultdict(list))
    for r in runs:
        by_config[r.config_id][r.instance].append(r)
    instances = {i for per in by_config.values() for i in per}
    out = {}
    for cid, per_inst in by_config.items():
        if set(per_inst) != instances:
            log.warning("skipping %s: ran on %d of %d instances", cid, len(per_inst), len(instances))
            continue
        reps = min(len(v) for v in per_inst.values())
        ordered = {i: sorted(v, key=lambda r: r.seed) for i, v in per_inst.items()}
        out[cid] = [[ordered[i][k].result() for i in sorted(ordered)] for k in range(reps)]
    return out


def cmd_score(args: argparse.Namespace) -> int:
    sources: list[tuple[str, Any]] = []
    all_runs = []
    for src in args.sources:
        p = Path(src)
        if p.is_dir():
            runs = load_runs(p)
            if not runs:
                raise UsageError(f"no run logs under {p}")
            all_runs.extend(runs)
            sources.append((src, runs))
        elif p.is_file():
            try:
                data = json.loads(p.read_text(encoding="utf-8"))
                results = [InstanceResult(i, ub) for i, ub in data["per_instance"].items()]
            except (ValueError, KeyError, TypeError) as exc:
                raise UsageError(f"{p} is not a simulation outcome: {exc}") from None
            sources.append((src, results))
        else:
            raise UsageError(f"no such file or directory: {src}")
    regs = []
    given = _read_registries(args.bounds)
    if given is not None:
        regs.append(given)
    if args.vbs and all_runs:
        regs.append(vbs_bounds(all_runs))
    if not regs:
        raise UsageError("no bounds given (use --bounds and/or --vbs)")
    registry = merge_bounds(regs)

    rows = []
    try:
        for name, content in sources:
            if content and isinstance(content[0], InstanceResult):
                rows.append((name, seed_stats([score_solver(content, registry)])))
                continue
            reps = _replicates(content)
            for cid, samples in sorted(reps.items()):
                label = name if len(reps) == 1 else f"{name}:{cid}"
                rows.append((label, seed_stats([score_solver(s, registry) for s in samples])))
    except RegistryError as exc:
        raise CommandError(str(exc)) from None

    fmt = "json" if args.json else args.format
    if fmt == "json":
        print(json.dumps([{"solver": n, **dict(zip(("mean", "median", "min", "max", "std"), s.as_row()))}
                          for n, s in sorted(rows, key=lambda r: -r[1].mean)]))
    else:
        print(format_report(rows, fmt), end="")
    return EXIT_OK


# -- argument parsing ------------------------------------------------------------------


def _global_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    def d(value: Any) -> Any:
        return argparse.SUPPRESS if suppress else value

    parser.add_argument("--workdir", default=d("maxfolio-work"), help="campaign directory (default: maxfolio-work)")
    parser.add_argument("--seed", type=int, default=d(None), help="master random seed (default: the campaign's, else 0)")
    parser.add_argument("--json", action="store_true", default=d(False), help="machine-readable result on stdout")
    parser.add_argument("--workers", type=int, default=d(1), help="solver processes at once (default: 1)")
    parser.add_argument("-v", "--verbose", action="count", default=d(0))


def build_parser() -> argparse.ArgumentParser:
    # global flags are accepted before or after the command; the subcommand
    # copies suppress their defaults so they never clobber earlier values
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)

    parser = argparse.ArgumentParser(prog="maxfolio", description=__doc__.split("\n\n")[0])
    _global_flags(parser, suppress=False)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, **kw: Any) -> argparse.ArgumentParser:
        return sub.add_parser(name, parents=[common], **kw)

    p = add("validate", help="check a solver's output against an instance")
    p.add_argument("instance")
    p.add_argument("output", help="solver output file, or - for stdin")
    p.set_defaults(func=cmd_validate)

    p = add("tune", help="run the genetic configurator")
    p.add_argument("scenario", nargs="?")
    p.add_argument("--budget", type=float, default=3600.0, help="wall-clock seconds (default: %(default)s)")
    p.add_argument("--policy", choices=("all", "incremental"), default="incremental")
    p.add_argument("--start-fraction", type=float, default=0.2)
    p.add_argument("--full-at", type=int, default=25, help="generation from which all instances are used")
    p.add_argument("--population", type=int, default=100)
    p.add_argument("--tournaments", type=int, default=5)
    p.add_argument("--max-age", type=int, default=3)
    p.add_argument("--mutation-rate", type=float, default=0.1)
    p.add_argument("--max-generations", type=int, default=None)
    p.add_argument("--bounds", action="append", default=[], help="extra best-known bounds file (repeatable)")
    p.add_argument("--resume", action="store_true", help="continue from the workdir's checkpoint")
    p.set_defaults(func=cmd_tune)

    p = add("select", help="rescore the best archived configurations")
    p.add_argument("--k", type=int, default=50)
    p.set_defaults(func=cmd_select)

    p = add("portfolio", help="build a parallel portfolio or search a sequential schedule")
    modes = p.add_subparsers(dest="mode", required=True)
    par = modes.add_parser("par", parents=[common])
    par.add_argument("--n", type=int, required=True)
    par.add_argument("--kind", choices=("configs", "seeds"), default="configs")
    par.set_defaults(func=cmd_portfolio_par)
    seq = modes.add_parser("seq", parents=[common])
    seq.add_argument("--max-len", type=int, default=DEFAULT_MAX_LEN)
    seq.add_argument("--grid", type=_parse_grid, default=list(DEFAULT_MTBS_GRID), help="comma-separated mtbs values")
    seq.add_argument("--to", type=float, default=DEFAULT_BUDGET_TO, help="time budget per instance")
    seq.add_argument("--allow-repeats", action="store_true", default=False)
    seq.add_argument("--first-solution-cap", type=float, default=None)
    seq.set_defaults(func=cmd_portfolio_seq)

    p = add("simulate", help="replay a schedule on stored traces")
    p.add_argument("--schedule", default=None, help="schedule file (default: the workdir's)")
    p.add_argument("--runs", action="append", default=[], help="run directory to take traces from (repeatable)")
    p.add_argument("--bounds", action="append", default=[])
    p.set_defaults(func=cmd_simulate)

    p = add("score", help="rank run sets or simulation outcomes")
    p.add_argument("sources", nargs="+", help="run directories or simulation outcome files")
    p.add_argument("--bounds", action="append", default=[])
    p.add_argument("--vbs", action="store_true", default=False, help="also use the best bound among the sources")
    p.add_argument("--format", choices=("table", "csv", "json"), default="table")
    p.set_defaults(func=cmd_score)
    return parser


def _check_args(args: argparse.Namespace) -> None:
    if args.workers < 1:
        raise UsageError("--workers must be at least 1")
    if args.command == "tune" and not args.resume and not args.scenario:
        raise UsageError("tune needs a scenario file (or --resume)")
    for name in ("k", "n", "max_len", "population", "tournaments"):
        if getattr(args, name, 1) < 1:
            raise UsageError(f"--{name.replace('_', '-')} must be positive")


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        _check_args(args)
        return args.func(args)
    except UsageError as exc:
        print(f"maxfolio: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CommandError as exc:
        print(f"maxfolio: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except (OSError, ValueError) as exc:
        print(f"maxfolio: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
