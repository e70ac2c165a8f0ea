"""Gender-based genetic algorithm configurator.

Each generation races the competitive genomes (plus the elites) in ``N``
mini-tournaments on a subset of the training instances; the tournament winners
mate with non-competitive genomes, old genomes die and the population is
refilled.  Every configuration raced in a generation lands in the archive
together with its rank inside its tournament.
"""

from __future__ import annotations

import enum
import json
import logging
import math
import os
import time
from collections.abc import Callable, Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Protocol, Union

import numpy as np

from maxfolio.blackbox.records import RunRecord, RunStore
from maxfolio.blackbox.runner import RunLimits, run_batch
from maxfolio.blackbox.scenario import Scenario
from maxfolio.blackbox.space import (
    Configuration,
    ParameterSpace,
    default_config,
    sample_config,
)
from maxfolio.scoring import BoundsRegistry, cost_ac, instance_id

log = logging.getLogger(__name__)

MAX_REPAIR_ATTEMPTS = 1000

Task = tuple[Configuration, str, int]


class Gender(str, enum.Enum):
    COMPETITIVE = "competitive"
    NONCOMPETITIVE = "noncompetitive"


@dataclass
class Genome:
    config: Configuration
    gender: Gender
    age: int = 0
    birth_generation: int = 0

    def to_json(self) -> dict[str, Any]:
        return {
            "config": self.config.to_json(),
            "gender": self.gender.value,
            "age": self.age,
            "birth_generation": self.birth_generation,
        }

    @classmethod
    def from_json(cls, data: Mapping[str, Any]) -> Genome:
        return cls(Configuration.from_json(data["config"]), Gender(data["gender"]), data["age"], data["birth_generation"])


@dataclass
class Population:
    competitive: list[Genome] = field(default_factory=list)
    noncompetitive: list[Genome] = field(default_factory=list)
    elites: list[Configuration] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.competitive) + len(self.noncompetitive)

    def genomes(self) -> list[Genome]:
        return self.competitive + self.noncompetitive

    def to_json(self) -> dict[str, Any]:
        return {
            "competitive": [g.to_json() for g in self.competitive],
            "noncompetitive": [g.to_json() for g in self.noncompetitive],
            "elites": [c.to_json() for c in self.elites],
        }

    @classmethod
    def from_json(cls, data: Mapping[str, Any]) -> Population:
        return cls(
            [Genome.from_json(g) for g in data["competitive"]],
            [Genome.from_json(g) for g in data["noncompetitive"]],
            [Configuration.from_json(c) for c in data["elites"]],
        )


@dataclass(frozen=True)
class AllInstances:
    pass


@dataclass(frozen=True)
class Incremental:
    start_fraction: float = 0.2
    full_at_generation: int = 25

    def __post_init__(self) -> None:
        if not 0 < self.start_fraction <= 1:
            raise ValueError("start_fraction must lie in (0, 1]")
        if self.full_at_generation < 1:
            raise ValueError("full_at_generation must be positive")


InstancePolicy = Union[AllInstances, Incremental]


@dataclass(frozen=True)
class TunerSettings:
    num_tournaments: int = 5
    population_size: int = 100
    budget: float = 3600.0
    instance_policy: InstancePolicy = AllInstances()
    max_age: int = 3
    mutation_rate: float = 0.10
    rng_seed: int = 0
    max_generations: int | None = None

    def __post_init__(self) -> None:
        if self.num_tournaments < 1 or self.population_size < 1 or self.max_age < 1:
            raise ValueError("num_tournaments, population_size and max_age must be positive")
        if self.population_size < 2 * self.num_tournaments:
            raise ValueError("population_size must be at least 2 * num_tournaments")
        if not 0 <= self.mutation_rate <= 1:
            raise ValueError("mutation_rate must lie in [0, 1]")
        if self.budget <= 0:
            raise ValueError("budget must be positive")

    def to_json(self) -> dict[str, Any]:
        policy = self.instance_policy
        return {
            "num_tournaments": self.num_tournaments,
            "population_size": self.population_size,
            "budget": self.budget,
            "instance_policy": (
                {"kind": "incremental", "start_fraction": policy.start_fraction, "full_at_generation": policy.full_at_generation}
                if isinstance(policy, Incremental)
                else {"kind": "all"}
            ),
            "max_age": self.max_age,
            "mutation_rate": self.mutation_rate,
            "rng_seed": self.rng_seed,
            "max_generations": self.max_generations,
        }

    @classmethod
    def from_json(cls, data: Mapping[str, Any]) -> TunerSettings:
        data = dict(data)
        p = data.pop("instance_policy")
        policy: InstancePolicy = (
            Incremental(p["start_fraction"], p["full_at_generation"]) if p["kind"] == "incremental" else AllInstances()
        )
        return cls(instance_policy=policy, **data)


# -- archive -------------------------------------------------------------------


@dataclass(frozen=True)
class ArchiveEntry:
    config: Configuration
    generation: int
    rank_in_generation: int
    mean_cost: float
    evaluations: tuple[RunRecord, ...] = ()


class Archive:
    """Append-only log of every configuration raced, one entry per generation."""

    def __init__(self, entries: Iterable[ArchiveEntry] = ()):
        self.entries: list[ArchiveEntry] = []
        self._seen: set[tuple[str, int]] = set()
        for e in entries:
            self.add(e)

    def add(self, entry: ArchiveEntry) -> None:
        key = (entry.config.id, entry.generation)
        if key in self._seen:
            raise ValueError(f"configuration {entry.config.id} already archived for generation {entry.generation}")
        self._seen.add(key)
        self.entries.append(entry)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def generation(self, j: int) -> list[ArchiveEntry]:
        return [e for e in self.entries if e.generation == j]

    @property
    def last_generation(self) -> int:
        return max((e.generation for e in self.entries), default=0)

    def runs(self) -> list[RunRecord]:
        seen: dict[tuple[str, str, int], RunRecord] = {}
        for e in self.entries:
            for r in e.evaluations:
                seen.setdefault(r.key, r)
        return list(seen.values())

    def to_json(self) -> dict[str, Any]:
        return {
            "entries": [
                {
                    "config": e.config.to_json(),
                    "generation": e.generation,
                    "rank": e.rank_in_generation,
                    "mean_cost": e.mean_cost,
                    "runs": [list(r.key) for r in e.evaluations],
                }
                for e in self.entries
            ]
        }

    @classmethod
    def from_json(cls, data: Mapping[str, Any], store: RunStore | None = None) -> Archive:
        entries = []
        for item in data["entries"]:
            runs: list[RunRecord] = []
            if store is not None:
                for cid, inst, seed in item["runs"]:
                    rec = store.get(cid, inst, int(seed))
                    if rec is not None:
                        runs.append(rec)
            entries.append(
                ArchiveEntry(Configuration.from_json(item["config"]), item["generation"], item["rank"], item["mean_cost"], tuple(runs))
            )
        return cls(entries)


# -- evaluation ------------------------------------------------------------------


class Evaluator(Protocol):
    def __call__(self, tasks: Sequence[Task], deadline: float | None = None) -> list[RunRecord | None]: ...


class SolverEvaluator:
    """Runs (configuration, instance id, seed) tasks through the process harness."""

    def __init__(
        self,
        scenario: Scenario,
        limits: RunLimits | None = None,
        max_workers: int = 1,
        store: RunStore | None = None,
        instance_paths: Iterable[str] | None = None,
    ):
        self.scenario = scenario
        self.limits = limits or scenario.limits
        self.max_workers = max_workers
        self.store = store
        paths = list(instance_paths) if instance_paths is not None else list(scenario.instances)
        self.paths = {instance_id(p): p for p in paths}
        self.runs_issued = 0

    def __call__(self, tasks: Sequence[Task], deadline: float | None = None) -> list[RunRecord | None]:
        self.runs_issued += len(tasks)
        batch = [(c, self.paths[inst], seed) for c, inst, seed in tasks]
        return run_batch(self.scenario, batch, self.limits, self.max_workers, self.store, deadline)


class BudgetExhausted(Exception):
    pass


class TuningError(RuntimeError):
    def __init__(self, message: str, archive: Archive, runs: Sequence[RunRecord] = ()):
        super().__init__(message)
        self.archive = archive
        self.runs = list(runs)


# -- GGA operators -----------------------------------------------------------------


def instances_at(n: int, j: int, policy: InstancePolicy) -> int:
    """Number of instances used at generation ``j`` (1-based)."""
    if isinstance(policy, AllInstances) or j >= policy.full_at_generation:
        return n
    first = max(1, math.ceil(policy.start_fraction * n - 1e-9))
    if policy.full_at_generation == 1:
        return n
    k = first + (n - first) * (j - 1) / (policy.full_at_generation - 1)
    return min(n, max(1, math.floor(k + 0.5)))


def select_instances(instances: Sequence[str], j: int, policy: InstancePolicy, order_seed: int = 0) -> list[str]:
    """The first ``k(j)`` instances of a fixed shuffled order; subsets grow with ``j``."""
    if j < 1:
        raise ValueError("generations are numbered from 1")
    if isinstance(policy, AllInstances):
        return list(instances)
    order = np.random.default_rng(order_seed).permutation(len(instances))
    k = instances_at(len(instances), j, policy)
    return [instances[i] for i in order[:k]]


@dataclass
class TournamentResult:
    winners: list[Genome]
    groups: list[list[Genome]]
    mean_cost: dict[str, float]

    def rank_of(self) -> dict[str, int]:
        return {g.config.id: pos for group in self.groups for pos, g in enumerate(group, start=1)}


def _by_cost(costs: Mapping[str, float]) -> Callable[[Genome], tuple[float, str]]:
    return lambda g: (costs[g.config.id], g.config.id)


def run_mini_tournaments(
    participants: Sequence[Genome],
    num_tournaments: int,
    mean_cost: Callable[[Sequence[Configuration]], Mapping[str, float]],
    rng: np.random.Generator,
    num_elites: int = 0,
) -> TournamentResult:
    """Race ``participants`` in ``num_tournaments`` groups.

    The first ``num_elites`` participants are elites and are dealt one per
    tournament before the shuffled rest.  ``mean_cost`` evaluates every
    participant on the generation's instances.  Groups come back sorted by
    (mean cost, config id); winners are the group heads in the same order.
    """
    if len(participants) < num_tournaments:
        raise ValueError(f"need at least {num_tournaments} participants, got {len(participants)}")
    elites = list(participants[:num_elites])
    rest = list(participants[num_elites:])
    order = elites + [rest[i] for i in rng.permutation(len(rest))]
    groups: list[list[Genome]] = [[] for _ in range(num_tournaments)]
    for i, g in enumerate(order):
        groups[i % num_tournaments].append(g)

    costs = dict(mean_cost([g.config for g in participants]))
    key = _by_cost(costs)
    groups = [sorted(group, key=key) for group in groups]
    winners = sorted((group[0] for group in groups), key=key)
    return TournamentResult(winners, groups, costs)


def _mutate(values: dict[str, Any], space: ParameterSpace, rate: float, rng: np.random.Generator) -> None:
    for p in space.params:
        if rng.random() < rate:
            values[p.name] = p.domain.sample(rng)


def crossover_and_mutate(
    noncompetitive: Sequence[Genome],
    winners: Sequence[Genome],
    space: ParameterSpace,
    rng: np.random.Generator,
    mutation_rate: float = 0.10,
    generation: int = 0,
    num_tournaments: int | None = None,
) -> list[Genome]:
    if not winners:
        raise ValueError("crossover needs at least one winner")
    n = num_tournaments or len(winners)
    partners_pool = list(noncompetitive) or list(winners)
    per_winner = max(1, math.ceil(len(noncompetitive) / n)) if noncompetitive else 1
    offspring = []
    for w in winners:
        picks = rng.choice(len(partners_pool), size=min(per_winner, len(partners_pool)), replace=False)
        for idx in picks:
            partner = partners_pool[int(idx)]
            values = {
                p.name: (w.config.values[p.name] if rng.random() < 0.5 else partner.config.values[p.name]) for p in space.params
            }
            _mutate(values, space, mutation_rate, rng)
            for _ in range(MAX_REPAIR_ATTEMPTS):
                bad = space.violated(values)
                if not bad:
                    break
                for combo in bad:
                    for name in combo:
                        values[name] = space.by_name[name].domain.sample(rng)
            else:
                log.warning("dropping child of %s: constraint repair failed", w.config.id)
                continue
            gender = Gender.COMPETITIVE if rng.random() < 0.5 else Gender.NONCOMPETITIVE
            offspring.append(Genome(Configuration(values), gender, 0, generation))
    return offspring


def aging_and_death(w1: Genome | None, population: Population, max_age: int) -> Population:
    """Age every genome and drop those older than ``max_age``; ``w1`` survives regardless."""
    def survive(g: Genome) -> bool:
        g.age += 1
        return g.age <= max_age or g is w1

    return Population(
        [g for g in population.competitive if survive(g)],
        [g for g in population.noncompetitive if survive(g)],
        list(population.elites),
    )


def replenish(
    population: Population,
    offspring: Sequence[Genome],
    space: ParameterSpace,
    size: int,
    rng: np.random.Generator,
    generation: int,
    min_competitive: int = 1,
) -> Population:
    """Add offspring, then fresh random genomes, until the population has ``size`` members."""
    comp, noncomp = list(population.competitive), list(population.noncompetitive)
    for child in offspring:
        if len(comp) + len(noncomp) >= size:
            break
        (comp if child.gender is Gender.COMPETITIVE else noncomp).append(child)
    while len(comp) + len(noncomp) < size:
        gender = Gender.COMPETITIVE if rng.random() < 0.5 else Gender.NONCOMPETITIVE
        child = Genome(sample_config(space, rng), gender, 0, generation)
        (comp if gender is Gender.COMPETITIVE else noncomp).append(child)
    while len(comp) < min_competitive and noncomp:
        g = noncomp.pop()
        g.gender = Gender.COMPETITIVE
        comp.append(g)
    return Population(comp, noncomp, list(population.elites))


def init_population(
    space: ParameterSpace, size: int, rng: np.random.Generator, elites: Sequence[Configuration] = ()
) -> Population:
    genders = [Gender.COMPETITIVE] * math.ceil(size / 2) + [Gender.NONCOMPETITIVE] * (size // 2)
    genders = [genders[i] for i in rng.permutation(size)]
    pop = Population(elites=list(elites))
    for gender in genders:
        g = Genome(sample_config(space, rng), gender, 0, 0)
        (pop.competitive if gender is Gender.COMPETITIVE else pop.noncompetitive).append(g)
    return pop


# -- the generation loop -----------------------------------------------------------


@dataclass
class TunerState:
    generation: int
    population: Population
    archive: Archive
    rng: np.random.Generator
    instance_seeds: dict[str, int]
    order_seed: int
    w1: Genome | None = None
    runs: dict[tuple[str, str, int], RunRecord] = field(default_factory=dict)


@dataclass
class TuneResult:
    winner: Configuration
    archive: Archive
    population: Population
    generations: int
    best_cost: float


def _new_state(space: ParameterSpace, instances: Sequence[str], settings: TunerSettings, elites: Sequence[Configuration]) -> TunerState:
    rng = np.random.default_rng(settings.rng_seed)
    order_seed = int(rng.integers(2**31))
    instance_seeds = {inst: int(rng.integers(2**31)) for inst in instances}
    population = init_population(space, settings.population_size, rng, elites)
    return TunerState(0, population, Archive(), rng, instance_seeds, order_seed)


def tune(
    space: ParameterSpace,
    instances: Sequence[str],
    settings: TunerSettings,
    evaluator: Evaluator,
    registry: BoundsRegistry,
    elites: Sequence[Configuration] | None = None,
    checkpoint: str | os.PathLike[str] | None = None,
    store: RunStore | None = None,
    resume: TunerState | None = None,
) -> TuneResult:
    """Run generations until the wall-clock budget (or ``max_generations``) runs out.

    ``instances`` are instance ids understood by ``evaluator``; every one needs
    a bound in ``registry``, which stays frozen for the whole run.
    """
    if not instances:
        raise ValueError("tuning needs at least one instance")
    missing = [i for i in instances if i not in registry]
    if missing:
        raise ValueError(f"no best-known bound for {len(missing)} instance(s), e.g. {missing[0]!r}")
    if isinstance(settings.instance_policy, Incremental) and settings.instance_policy.start_fraction * len(instances) < 1 - 1e-9:
        raise ValueError("start_fraction * |instances| must be at least 1")
    if elites is None:
        elites = [default_config(space)]

    state = resume or _new_state(space, instances, settings, elites)
    start = time.monotonic()
    deadline = start + settings.budget
    completed = 0
    pending: list[RunRecord] = []
    N = settings.num_tournaments

    while time.monotonic() < deadline:
        if settings.max_generations is not None and state.generation >= settings.max_generations:
            break
        j = state.generation + 1
        subset = select_instances(list(instances), j, settings.instance_policy, state.order_seed)
        # rng draws for this generation happen on a copy so an aborted generation leaves no trace
        rng = np.random.default_rng()
        rng.bit_generator.state = state.rng.bit_generator.state

        comp_ids = {g.config.id for g in state.population.competitive}
        elite_genomes = [Genome(c, Gender.COMPETITIVE, 0, j) for c in state.population.elites if c.id not in comp_ids]
        participants: list[Genome] = list(elite_genomes)
        seen = {g.config.id for g in participants}
        for g in state.population.competitive:
            if g.config.id not in seen:
                seen.add(g.config.id)
                participants.append(g)

        def mean_cost(configs: Sequence[Configuration]) -> dict[str, float]:
            tasks = [
                (c, inst, state.instance_seeds[inst])
                for c in configs
                for inst in subset
                if (c.id, inst, state.instance_seeds[inst]) not in state.runs
            ]
            if tasks:
                results = evaluator(tasks, deadline)
                for (c, inst, seed), rec in zip(tasks, results):
                    if rec is not None:
                        state.runs[(c.id, inst, seed)] = rec
                        pending.append(rec)
                if any(r is None for r in results):
                    raise BudgetExhausted
            return {
                c.id: math.fsum(
                    cost_ac(registry[inst], state.runs[(c.id, inst, state.instance_seeds[inst])].result()) for inst in subset
                )
                / len(subset)
                for c in configs
            }

        try:
            result = run_mini_tournaments(participants, N, mean_cost, rng, num_elites=len(elite_genomes))
        except BudgetExhausted:
            log.info("generation %d interrupted by the budget", j)
            break

        ranks = result.rank_of()
        for g in participants:
            evals = tuple(state.runs[(g.config.id, inst, state.instance_seeds[inst])] for inst in subset)
            state.archive.add(ArchiveEntry(g.config, j, ranks[g.config.id], result.mean_cost[g.config.id], evals))

        w1 = result.winners[0]
        offspring = crossover_and_mutate(
            state.population.noncompetitive, result.winners, space, rng, settings.mutation_rate, j, N
        )
        survivors = aging_and_death(w1, state.population, settings.max_age)
        state.population = replenish(survivors, offspring, space, settings.population_size, rng, j, min_competitive=N)
        state.rng = rng
        state.generation = j
        state.w1 = w1
        completed += 1
        log.info(
            "gen %d |instances|=%d best=%.6f elapsed=%.1fs",
            j,
            len(subset),
            result.mean_cost[w1.config.id],
            time.monotonic() - start,
        )
        if store is not None:
            for rec in pending:
                store.put(rec)
        pending.clear()
        if checkpoint is not None:
            save_checkpoint(checkpoint, state, settings, store)

    if store is not None:
        for rec in pending:
            store.put(rec)
    if state.w1 is None or (completed == 0 and resume is None):
        raise TuningError("no generation completed within the budget", state.archive, list(state.runs.values()))
    best = state.archive.generation(state.generation)
    best_cost = min(e.mean_cost for e in best if e.config.id == state.w1.config.id)
    return TuneResult(state.w1.config, state.archive, state.population, state.generation, best_cost)


# -- checkpoints ---------------------------------------------------------------------


def save_checkpoint(path: str | os.PathLike[str], state: TunerState, settings: TunerSettings, store: RunStore | None) -> None:
    inline = store is None or store.root is None
    data = {
        "generation": state.generation,
        "settings": settings.to_json(),
        "population": state.population.to_json(),
        "archive": state.archive.to_json(),
        "rng": state.rng.bit_generator.state,
        "instance_seeds": state.instance_seeds,
        "order_seed": state.order_seed,
        "w1": state.w1.to_json() if state.w1 else None,
        "runs": [r.to_lines() for r in state.runs.values()] if inline else [list(k) for k in state.runs],
        "runs_inline": inline,
    }
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(data), encoding="utf-8")
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike[str], store: RunStore | None = None) -> tuple[TunerState, TunerSettings]:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    runs: dict[tuple[str, str, int], RunRecord] = {}
    if data["runs_inline"]:
        for lines in data["runs"]:
            rec = RunRecord.from_lines(lines)
            runs[rec.key] = rec
        lookup = RunStore()
        for rec in runs.values():
            lookup.put(rec)
    else:
        if store is None:
            raise ValueError("checkpoint refers to a run store; pass it to load_checkpoint")
        for cid, inst, seed in data["runs"]:
            rec = store.get(cid, inst, int(seed))
            if rec is not None:
                runs[rec.key] = rec
        lookup = store
    rng = np.random.default_rng()
    rng.bit_generator.state = data["rng"]
    state = TunerState(
        generation=data["generation"],
        population=Population.from_json(data["population"]),
        archive=Archive.from_json(data["archive"], lookup),
        rng=rng,
        instance_seeds={k: int(v) for k, v in data["instance_seeds"].items()},
        order_seed=data["order_seed"],
        w1=Genome.from_json(data["w1"]) if data["w1"] else None,
        runs=runs,
    )
    return state, TunerSettings.from_json(data["settings"])
