"""Post-tuning selection: rank what the tuner raced, rescore the best under the MSE score."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import warnings
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from maxfolio.blackbox.records import ExitStatus, RunRecord, RunStore
from maxfolio.blackbox.space import Configuration
from maxfolio.scoring import BoundsRegistry, InstanceResult, score_solver
from maxfolio.tuner import Archive, Evaluator
from maxfolio.wcnf import ValidationVerdict, VerdictStatus

log = logging.getLogger(__name__)

DEFAULT_POOL_SIZE = 50
SELECTION_SEED = 0


class ShortPoolWarning(UserWarning):
    """Fewer distinct configurations were archived than requested."""


@dataclass(frozen=True)
class Candidate:
    config: Configuration
    mse_score: float
    per_instance: Mapping[str, InstanceResult]
    runs: Mapping[str, RunRecord | None]


@dataclass(frozen=True)
class CandidatePool:
    candidates: tuple[Candidate, ...]
    registry: BoundsRegistry

    def __post_init__(self) -> None:
        ids = [c.config.id for c in self.candidates]
        if len(set(ids)) != len(ids):
            raise ValueError("candidate configurations must be distinct")
        if len({frozenset(c.per_instance) for c in self.candidates}) > 1:
            raise ValueError("every candidate must cover the same instances")

    def __len__(self) -> int:
        return len(self.candidates)

    def __iter__(self):
        return iter(self.candidates)

    @property
    def instances(self) -> list[str]:
        return sorted(self.candidates[0].per_instance) if self.candidates else []

    @property
    def configs(self) -> list[Configuration]:
        return [c.config for c in self.candidates]

    def rescore(self) -> list[float]:
        """Scores recomputed from the stored outcomes and registry alone."""
        return [score_solver(c.per_instance.values(), self.registry) for c in self.candidates]

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_json(), sort_keys=True).encode()).hexdigest()[:16]

    def to_json(self) -> dict[str, Any]:
        return {
            "registry_digest": self.registry.digest(),
            "registry": self.registry.dumps(),
            "candidates": [
                {
                    "config": c.config.to_json(),
                    "mse_score": c.mse_score,
                    "per_instance": {
                        inst: {"ub": r.ub, "run": list(c.runs[inst].key) if c.runs.get(inst) else None}
                        for inst, r in sorted(c.per_instance.items())
                    },
                }
                for c in self.candidates
            ],
        }

    @classmethod
    def from_json(cls, data: Mapping[str, Any], store: RunStore | None = None) -> CandidatePool:
        registry = BoundsRegistry.loads(data["registry"])
        if registry.digest() != data["registry_digest"]:
            raise ValueError("pool registry does not match its recorded digest")
        candidates = []
        for item in data["candidates"]:
            per_instance = {inst: InstanceResult(inst, v["ub"]) for inst, v in item["per_instance"].items()}
            runs: dict[str, RunRecord | None] = {}
            for inst, v in item["per_instance"].items():
                key = v["run"]
                runs[inst] = store.get(key[0], key[1], int(key[2])) if store is not None and key else None
            candidates.append(Candidate(Configuration.from_json(item["config"]), item["mse_score"], per_instance, runs))
        return cls(tuple(candidates), registry)


def rank_archive(archive: Archive, k: int = DEFAULT_POOL_SIZE) -> list[Configuration]:
    """First ``k`` distinct configurations by (rank ascending, generation descending)."""
    if k < 1:
        raise ValueError("k must be positive")
    if len(archive) == 0:
        raise ValueError("archive is empty")
    ordered = sorted(archive, key=lambda e: (e.rank_in_generation, -e.generation))
    out: list[Configuration] = []
    seen: set[str] = set()
    for e in ordered:
        if e.config.id in seen:
            continue
        seen.add(e.config.id)
        out.append(e.config)
        if len(out) == k:
            break
    if len(out) < k:
        warnings.warn(f"only {len(out)} distinct configurations archived, fewer than k={k}", ShortPoolWarning, stacklevel=2)
    return out


def _no_solution(config: Configuration, instance: str, seed: int, note: str) -> RunRecord:
    return RunRecord(config.id, instance, seed, (), ValidationVerdict(VerdictStatus.NO_SOLUTION), 0.0, ExitStatus.CRASH, note=note)


def complete_and_score(
    configs: Sequence[Configuration],
    instances: Sequence[str],
    registry: BoundsRegistry,
    evaluator: Evaluator,
    known_runs: Iterable[RunRecord] = (),
    seed: int = SELECTION_SEED,
) -> CandidatePool:
    """Score every config on every instance, running only the missing pairs.

    Known runs are reused whatever their seed (the lowest seed wins when there
    are several); missing pairs are all run with the one ``seed``.
    """
    if len({c.id for c in configs}) != len(configs):
        raise ValueError("configurations must be distinct")
    known: dict[tuple[str, str], RunRecord] = {}
    for rec in sorted(known_runs, key=lambda r: r.seed):
        known.setdefault((rec.config_id, rec.instance), rec)

    tasks = [(c, inst, seed) for c in configs for inst in instances if (c.id, inst) not in known]
    if tasks:
        log.info("selection: %d missing evaluations", len(tasks))
        try:
            results = evaluator(tasks, None)
        except Exception as exc:  # a broken solver must not abort the phase
            log.warning("selection runs failed: %s", exc)
            results = [None] * len(tasks)
        if len(results) != len(tasks):
            log.warning("selection got %d results for %d runs", len(results), len(tasks))
            results = list(results)[: len(tasks)] + [None] * (len(tasks) - len(results))
        for (c, inst, s), rec in zip(tasks, results):
            known[(c.id, inst)] = rec if rec is not None else _no_solution(c, inst, s, "not run")

    candidates = []
    for c in configs:
        runs = {inst: known[(c.id, inst)] for inst in instances}
        per_instance = {inst: InstanceResult(inst, r.true_cost) for inst, r in runs.items()}
        candidates.append(Candidate(c, score_solver(per_instance.values(), registry), per_instance, runs))
    candidates.sort(key=lambda c: (-c.mse_score, c.config.id))
    return CandidatePool(tuple(candidates), registry)


def winner(pool: CandidatePool) -> Configuration:
    if not pool.candidates:
        raise ValueError("candidate pool is empty")
    return pool.candidates[0].config


def write_pool(pool: CandidatePool, path: str | os.PathLike[str]) -> None:
    Path(path).write_text(json.dumps(pool.to_json(), indent=1, sort_keys=True) + "\n", encoding="utf-8")


def read_pool(path: str | os.PathLike[str], store: RunStore | None = None) -> CandidatePool:
    pool = CandidatePool.from_json(json.loads(Path(path).read_text(encoding="utf-8")), store)
    for c, s in zip(pool.candidates, pool.rescore()):
        if not math.isclose(c.mse_score, s, abs_tol=1e-12, rel_tol=0):
            raise ValueError(f"stored score of {c.config.id} does not match its outcomes")
    return pool
