"""Parallel portfolios and virtual sequential portfolios.

A parallel portfolio runs several (configuration, seed) entries side by side
and keeps the best bound per instance.  A sequential schedule runs
configurations one after another: once a solver has reported a solution it
must improve on it within ``mtbs`` seconds or it is stopped and the next one
starts from scratch.  The last solver keeps going until the global budget.
"""

from __future__ import annotations

import enum
import itertools
import json
import logging
import math
import os
import shlex
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from maxfolio.blackbox.records import RunRecord
from maxfolio.blackbox.runner import RunLimits, run_process
from maxfolio.blackbox.scenario import Scenario
from maxfolio.blackbox.space import Configuration
from maxfolio.scoring import BoundsRegistry, InstanceResult, instance_id, score_solver
from maxfolio.selection import CandidatePool
from maxfolio.wcnf import VerdictStatus, read_wcnf, validate_output

log = logging.getLogger(__name__)

DEFAULT_MTBS_GRID = (2.0, 3.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0, 35.0, 40.0, 45.0, 50.0)
DEFAULT_BUDGET_TO = 60.0
DEFAULT_MAX_LEN = 3

Trace = Sequence[tuple[float, int]]


# -- parallel portfolios ------------------------------------------------------------


class PortfolioKind(str, enum.Enum):
    SEEDS = "Seeds"
    CONFIGS = "Configs"


@dataclass(frozen=True)
class ParallelPortfolio:
    entries: tuple[tuple[Configuration, int], ...]
    kind: PortfolioKind

    def __post_init__(self) -> None:
        if not self.entries:
            raise ValueError("a portfolio needs at least one entry")
        ids = [c.id for c, _ in self.entries]
        seeds = [s for _, s in self.entries]
        if self.kind is PortfolioKind.SEEDS:
            if len(set(ids)) != 1:
                raise ValueError("a seed portfolio runs a single configuration")
            if len(set(seeds)) != len(seeds):
                raise ValueError("a seed portfolio needs distinct seeds")
        elif len(set(ids)) != len(ids):
            raise ValueError("a configuration portfolio needs distinct configurations")

    def __len__(self) -> int:
        return len(self.entries)

    def to_json(self) -> dict[str, Any]:
        return {"kind": self.kind.value, "entries": [{"config": c.to_json(), "seed": s} for c, s in self.entries]}

    @classmethod
    def from_json(cls, data: Mapping[str, Any]) -> ParallelPortfolio:
        entries = tuple((Configuration.from_json(e["config"]), int(e["seed"])) for e in data["entries"])
        return cls(entries, PortfolioKind(data["kind"]))


def derive_seeds(base_seed: int, n: int) -> list[int]:
    rng = np.random.default_rng(base_seed)
    out: list[int] = []
    while len(out) < n:
        s = int(rng.integers(2**31))
        if s not in out:
            out.append(s)
    return out


def build_parallel(
    source: CandidatePool | Configuration,
    n: int,
    kind: PortfolioKind | str,
    base_seed: int = 0,
) -> ParallelPortfolio:
    """Top-``n`` pool candidates (Configs) or ``n`` seeds of one configuration (Seeds)."""
    kind = PortfolioKind(kind)
    if n < 1:
        raise ValueError("n must be positive")
    seeds = derive_seeds(base_seed, n)
    if kind is PortfolioKind.CONFIGS:
        if not isinstance(source, CandidatePool):
            raise TypeError("a configuration portfolio is built from a candidate pool")
        if len(source) < n:
            raise ValueError(f"pool holds only {len(source)} candidate(s), {n} requested")
        return ParallelPortfolio(tuple(zip(source.configs[:n], seeds)), kind)
    config = source.candidates[0].config if isinstance(source, CandidatePool) else source
    return ParallelPortfolio(tuple((config, s) for s in seeds), kind)


def _index_runs(runs: Iterable[RunRecord]) -> tuple[dict, dict]:
    exact: dict[tuple[str, str, int], RunRecord] = {}
    loose: dict[tuple[str, str], RunRecord] = {}
    for r in sorted(runs, key=lambda r: r.seed):
        exact.setdefault(r.key, r)
        loose.setdefault((r.config_id, r.instance), r)
    return exact, loose


def portfolio_results(
    portfolio: ParallelPortfolio,
    runs: Iterable[RunRecord],
    instances: Sequence[str] | None = None,
) -> list[InstanceResult]:
    """Per-instance best validated cost over the entries.

    Seed portfolios need the exact (config, instance, seed) run.  In a
    configuration portfolio each configuration appears once, so any run of it
    on the instance will do (the lowest seed is taken).
    """
    runs = list(runs)
    exact, loose = _index_runs(runs)
    if instances is None:
        ids = {c.id for c, _ in portfolio.entries}
        instances = sorted({r.instance for r in runs if r.config_id in ids})
    out = []
    for inst in instances:
        best: int | None = None
        for config, seed in portfolio.entries:
            rec = exact.get((config.id, inst, seed))
            if rec is None and portfolio.kind is PortfolioKind.CONFIGS:
                rec = loose.get((config.id, inst))
            if rec is None:
                raise ValueError(f"no run for configuration {config.id} seed {seed} on {inst!r}")
            c = rec.true_cost
            if c is not None and (best is None or c < best):
                best = c
        out.append(InstanceResult(inst, best))
    return out


def score_parallel(
    portfolio: ParallelPortfolio,
    runs: Iterable[RunRecord],
    registry: BoundsRegistry,
    instances: Sequence[str] | None = None,
) -> float:
    return score_solver(portfolio_results(portfolio, runs, instances), registry)


def write_launch_scripts(
    portfolio: ParallelPortfolio,
    scenario: Scenario,
    out_dir: str | os.PathLike[str],
    provenance: Mapping[str, Any] | None = None,
) -> Path:
    """One ``entry_NNN.sh`` per entry (instance path as ``$1``) plus ``manifest.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    marker = "@@INSTANCE@@"
    manifest = {"kind": portfolio.kind.value, "scenario": str(scenario.path), "entries": [], **(provenance or {})}
    for k, (config, seed) in enumerate(portfolio.entries):
        argv = scenario.cmdline(config, marker, seed)
        line = shlex.join(argv).replace(shlex.quote(marker), '"$1"')
        name = f"entry_{k:03d}.sh"
        path = out / name
        path.write_text(f'#!/bin/sh\n# config {config.id} seed {seed}\nexec {line}\n', encoding="utf-8")
        path.chmod(0o755)
        manifest["entries"].append({"script": name, "config": config.to_json(), "seed": seed})
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return out


# -- sequential schedules --------------------------------------------------------------


@dataclass(frozen=True)
class Schedule:
    sequence: tuple[Configuration, ...]
    mtbs: float
    budget_to: float = DEFAULT_BUDGET_TO
    first_solution_cap: float | None = None

    def __post_init__(self) -> None:
        if not self.sequence:
            raise ValueError("a schedule needs at least one configuration")
        if self.mtbs <= 0 or self.budget_to <= 0:
            raise ValueError("mtbs and budget_to must be positive")
        if self.first_solution_cap is not None and self.first_solution_cap <= 0:
            raise ValueError("first_solution_cap must be positive")

    @property
    def ids(self) -> tuple[str, ...]:
        return tuple(c.id for c in self.sequence)

    def to_json(self) -> dict[str, Any]:
        return {
            "sequence": [c.to_json() for c in self.sequence],
            "mtbs": self.mtbs,
            "budget_to": self.budget_to,
            "first_solution_cap": self.first_solution_cap,
        }

    @classmethod
    def from_json(cls, data: Mapping[str, Any]) -> Schedule:
        return cls(
            tuple(Configuration.from_json(c) for c in data["sequence"]),
            float(data["mtbs"]),
            float(data["budget_to"]),
            data.get("first_solution_cap"),
        )


Segment = tuple[str, float, float, int | None]


@dataclass(frozen=True)
class SimOutcome:
    per_instance: Mapping[str, InstanceResult]
    switch_log: Mapping[str, tuple[Segment, ...]]
    score: float | None = None


def simulate_schedule(
    schedule: Schedule,
    traces: Mapping[str, Trace],
    instance: str = "",
) -> tuple[InstanceResult, tuple[Segment, ...]]:
    """Replay per-configuration traces (keyed by config id) through the schedule.

    Each segment of the switch log is ``(config id, start, stop, best bound the
    solver reached in that segment or None)``, on the global clock.
    """
    to = schedule.budget_to
    clock = 0.0
    best: int | None = None
    segments: list[Segment] = []
    last_k = len(schedule.sequence) - 1
    for k, config in enumerate(schedule.sequence):
        if k > 0 and clock >= to:
            break
        last = k == last_k
        start = clock
        prev: float | None = None
        own: int | None = None
        for t, b in traces.get(config.id, ()):
            if start + t > to:
                break
            if not last:
                if prev is None and schedule.first_solution_cap is not None and t > schedule.first_solution_cap:
                    break
                # inclusive: an improvement exactly at prev + mtbs keeps the solver alive
                if prev is not None and t > prev + schedule.mtbs:
                    break
            prev = t
            own = b if own is None else min(own, b)
        if own is not None:
            best = own if best is None else min(best, own)
        if last:
            stop = to
        elif prev is not None:
            stop = min(start + prev + schedule.mtbs, to)
        elif schedule.first_solution_cap is not None:
            stop = min(start + schedule.first_solution_cap, to)
        else:
            stop = to
        segments.append((config.id, start, stop, own))
        clock = stop
    return InstanceResult(instance, best), tuple(segments)


def evaluate_schedule(
    schedule: Schedule,
    traces: Mapping[str, Mapping[str, Trace]],
    registry: BoundsRegistry,
) -> SimOutcome:
    """Simulate on every instance of ``traces`` ({instance: {config id: trace}}) and score."""
    per_instance: dict[str, InstanceResult] = {}
    logs: dict[str, tuple[Segment, ...]] = {}
    for inst in sorted(traces):
        per_instance[inst], logs[inst] = simulate_schedule(schedule, traces[inst], inst)
    score = score_solver(per_instance.values(), registry) if per_instance else 0.0
    return SimOutcome(per_instance, logs, score)


@dataclass(frozen=True)
class SearchResult:
    schedule: Schedule
    train_score: float
    n_evaluated: int


def search_best_schedule(
    pool: CandidatePool | Sequence[Configuration],
    traces: Mapping[str, Mapping[str, Trace]],
    registry: BoundsRegistry,
    max_len: int = DEFAULT_MAX_LEN,
    mtbs_grid: Sequence[float] = DEFAULT_MTBS_GRID,
    budget_to: float = DEFAULT_BUDGET_TO,
    allow_repeats: bool = False,
    first_solution_cap: float | None = None,
) -> SearchResult:
    """Exhaustive search over ordered sequences (lengths 1..max_len) × the mtbs grid.

    Ties go to the shorter sequence, then the smaller mtbs, then the
    lexicographically smaller tuple of config ids.
    """
    configs = list(pool.configs if isinstance(pool, CandidatePool) else pool)
    if not configs:
        raise ValueError("cannot search over an empty pool")
    if not mtbs_grid:
        raise ValueError("the mtbs grid is empty")
    if max_len < 1:
        raise ValueError("max_len must be positive")
    if not traces:
        raise ValueError("no training traces")
    for inst, per_config in traces.items():
        missing = [c.id for c in configs if c.id not in per_config]
        if missing:
            raise ValueError(f"no trace for configuration {missing[0]} on {inst!r}")
    grid = sorted(set(float(m) for m in mtbs_grid))

    best_key: tuple | None = None
    best: tuple[Schedule, float] | None = None
    n = 0
    for length in range(1, max_len + 1):
        seqs = itertools.product(configs, repeat=length) if allow_repeats else itertools.permutations(configs, length)
        for seq in seqs:
            ids = tuple(c.id for c in seq)
            for m in grid:
                sched = Schedule(tuple(seq), m, budget_to, first_solution_cap)
                score = evaluate_schedule(sched, traces, registry).score
                n += 1
                key = (-score, length, m, ids)
                if best_key is None or key < best_key:
                    best_key, best = key, (sched, score)
    assert best is not None
    return SearchResult(best[0], best[1], n)


def traces_from_runs(
    runs: Iterable[RunRecord],
    configs: Sequence[Configuration] | None = None,
    instances: Sequence[str] | None = None,
) -> dict[str, dict[str, Trace]]:
    """{instance: {config id: trace}} from run records, lowest seed first.

    Only a validated run's trace is believed; anything else counts as silent.
    """
    ids = None if configs is None else {c.id for c in configs}
    out: dict[str, dict[str, Trace]] = {}
    for r in sorted(runs, key=lambda r: r.seed):
        if ids is not None and r.config_id not in ids:
            continue
        if instances is not None and r.instance not in instances:
            continue
        per = out.setdefault(r.instance, {})
        if r.config_id not in per:
            per[r.config_id] = tuple(r.trace) if r.verdict.status is VerdictStatus.VALID else ()
    return out


def traces_from_pool(pool: CandidatePool) -> dict[str, dict[str, Trace]]:
    runs = [r for c in pool.candidates for r in c.runs.values() if r is not None]
    if len(runs) < len(pool) * len(pool.instances):
        raise ValueError("pool run records are missing; load the pool with its run store")
    return traces_from_runs(runs)


# -- live execution ------------------------------------------------------------------


@dataclass
class LiveOutcome:
    result: InstanceResult
    segments: list[Segment] = field(default_factory=list)


def run_sequential(
    scenario: Scenario,
    schedule: Schedule,
    instance_path: str,
    seed: int = 0,
    limits: RunLimits | None = None,
) -> LiveOutcome:
    """Run the schedule on real processes, one solver at a time.

    Best effort: the switch decision comes from the monitor's polling, so each
    segment overshoots ``mtbs`` by up to one poll interval plus start-up time.
    The global clock is the sum of the segments' CPU time.
    """
    limits = limits or scenario.limits
    formula = read_wcnf(instance_path)
    clock = 0.0
    best: int | None = None
    segments: list[Segment] = []
    last_k = len(schedule.sequence) - 1
    for k, config in enumerate(schedule.sequence):
        remaining = schedule.budget_to - clock
        if remaining <= 0:
            break
        seg_limits = RunLimits(remaining, limits.memory_bytes, limits.timeout_grace_seconds, None)

        def stop_check(trace: Sequence[tuple[float, int]], cpu: float, last: bool = k == last_k) -> bool:
            if last:
                return False
            if not trace:
                cap = schedule.first_solution_cap
                return cap is not None and cpu > cap
            return cpu > trace[-1][0] + schedule.mtbs

        outcome = run_process(scenario.cmdline(config, instance_path, seed), seg_limits, stop_check)
        verdict = validate_output(formula, outcome.stdout)
        own = verdict.true_cost
        if own is not None:
            best = own if best is None else min(best, own)
        used = min(outcome.cpu_seconds, remaining)
        segments.append((config.id, clock, clock + used, own))
        log.info("live segment %s: %.2fs, %s", config.id, used, verdict.status.value)
        clock += used
    return LiveOutcome(InstanceResult(instance_id(instance_path), best), segments)


def write_schedule(
    result: SearchResult,
    path: str | os.PathLike[str],
    provenance: Mapping[str, Any] | None = None,
) -> None:
    data = {
        **result.schedule.to_json(),
        "ids": list(result.schedule.ids),
        "train_score": result.train_score,
        "n_evaluated": result.n_evaluated,
        "provenance": dict(provenance or {}),
    }
    Path(path).write_text(json.dumps(data, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def read_schedule(path: str | os.PathLike[str]) -> Schedule:
    return Schedule.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def schedule_count(pool_size: int, max_len: int, grid_size: int, allow_repeats: bool = False) -> int:
    """How many schedules an exhaustive search scores."""
    if allow_repeats:
        seqs = sum(pool_size**k for k in range(1, max_len + 1))
    else:
        seqs = sum(math.perm(pool_size, k) for k in range(1, min(max_len, pool_size) + 1))
    return seqs * grid_size
