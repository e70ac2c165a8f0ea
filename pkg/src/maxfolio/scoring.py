"""MaxSAT Evaluation scoring, the tuner cost function and best-known bound registries."""

from __future__ import annotations

import csv
import hashlib
import io
import math
import os
import statistics
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from typing import Protocol


class RegistryError(KeyError):
    pass


@dataclass(frozen=True)
class InstanceResult:
    """Outcome of one solver on one instance; ``ub`` is ``None`` when no solution was found."""

    instance: str
    ub: int | None = None

    @property
    def solved(self) -> bool:
        return self.ub is not None


def instance_id(path: str | os.PathLike[str]) -> str:
    return os.path.basename(os.fspath(path))


@dataclass(frozen=True)
class BoundsRegistry:
    bounds: Mapping[str, int] = field(default_factory=dict)
    provenance: Mapping[str, frozenset[str]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for inst, b in self.bounds.items():
            if b < 0:
                raise ValueError(f"negative bound for {inst}")

    @classmethod
    def from_bounds(cls, bounds: Mapping[str, int], source: str) -> BoundsRegistry:
        return cls(dict(bounds), {i: frozenset([source]) for i in bounds})

    def __contains__(self, instance: str) -> bool:
        return instance in self.bounds

    def __getitem__(self, instance: str) -> int:
        try:
            return self.bounds[instance]
        except KeyError:
            raise RegistryError(f"instance {instance!r} has no best-known bound") from None

    def __len__(self) -> int:
        return len(self.bounds)

    def digest(self) -> str:
        h = hashlib.sha256()
        for inst in sorted(self.bounds):
            h.update(f"{inst}\t{self.bounds[inst]}\n".encode())
        return h.hexdigest()[:16]

    def dumps(self) -> str:
        out = io.StringIO()
        out.write("# instance bound sources\n")
        for inst in sorted(self.bounds):
            sources = ",".join(sorted(self.provenance.get(inst, ()))) or "-"
            out.write(f"{inst} {self.bounds[inst]} {sources}\n")
        return out.getvalue()

    @classmethod
    def loads(cls, text: str, default_source: str = "file") -> BoundsRegistry:
        bounds: dict[str, int] = {}
        prov: dict[str, frozenset[str]] = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) not in (2, 3):
                raise ValueError(f"line {lineno}: expected '<instance> <bound> [sources]'")
            try:
                bound = int(parts[1])
            except ValueError:
                raise ValueError(f"line {lineno}: bound {parts[1]!r} is not an integer") from None
            if bound < 0:
                raise ValueError(f"line {lineno}: negative bound")
            sources = frozenset(s for s in parts[2].split(",") if s and s != "-") if len(parts) == 3 else frozenset()
            inst = parts[0]
            if inst in bounds:
                bound = min(bound, bounds[inst])
                sources = sources | prov[inst]
            bounds[inst] = bound
            prov[inst] = sources or frozenset([default_source])
        return cls(bounds, prov)


def read_bounds(path: str | os.PathLike[str]) -> BoundsRegistry:
    with open(path, encoding="utf-8") as fh:
        return BoundsRegistry.loads(fh.read(), default_source=os.path.basename(os.fspath(path)))


def write_bounds(registry: BoundsRegistry, path: str | os.PathLike[str]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(registry.dumps())


def merge_bounds(registries: Sequence[BoundsRegistry]) -> BoundsRegistry:
    if not registries:
        raise ValueError("merge_bounds needs at least one registry")
    bounds: dict[str, int] = {}
    prov: dict[str, frozenset[str]] = {}
    for reg in registries:
        for inst, b in reg.bounds.items():
            bounds[inst] = min(b, bounds.get(inst, b))
            prov[inst] = prov.get(inst, frozenset()) | reg.provenance.get(inst, frozenset())
    return BoundsRegistry(bounds, prov)


# -- scores ------------------------------------------------------------------------


def score_instance(best_known: int, result: InstanceResult) -> float:
    if result.ub is None:
        return 0.0
    return (1 + best_known) / (1 + result.ub)


def score_solver(results: Iterable[InstanceResult], registry: BoundsRegistry) -> float:
    scores = [score_instance(registry[r.instance], r) for r in results]
    if not scores:
        return 0.0
    return math.fsum(scores) / len(scores)


def cost_ac(best_known: int, result: InstanceResult) -> float:
    """Tuner cost in (-1, 1]; lower is better and 1 means no solution."""
    if result.ub is None:
        return 1.0
    if result.ub >= best_known:
        return 1.0 - score_instance(best_known, result)
    # 1/score - 1 == (ub - best) / (1 + best); the closed form avoids a rounding step
    return (result.ub - best_known) / (1 + best_known)


@dataclass(frozen=True)
class ScoreStats:
    mean: float
    median: float
    min: float
    max: float
    std: float

    def as_row(self) -> tuple[float, float, float, float, float]:
        return (self.mean, self.median, self.min, self.max, self.std)


def seed_stats(per_seed_scores: Sequence[float]) -> ScoreStats:
    if not per_seed_scores:
        raise ValueError("seed_stats needs at least one score")
    values = list(per_seed_scores)
    mean = math.fsum(values) / len(values)
    return ScoreStats(
        mean=mean,
        median=statistics.median(values),
        min=min(values),
        max=max(values),
        std=statistics.pstdev(values),
    )


class _ValidatedRun(Protocol):
    instance: str

    @property
    def true_cost(self) -> int | None: ...


def vbs_bounds(runs: Iterable[_ValidatedRun], source: str = "vbs") -> BoundsRegistry:
    best: dict[str, int] = {}
    for run in runs:
        cost = run.true_cost
        if cost is None:
            continue
        best[run.instance] = min(cost, best.get(run.instance, cost))
    return BoundsRegistry.from_bounds(best, source)


# -- reports ---------------------------------------------------------------------

REPORT_COLUMNS = ("solver", "mean", "median", "min", "max", "std")


def format_report(rows: Sequence[tuple[str, ScoreStats]], fmt: str = "table") -> str:
    """Render ranking rows; ``fmt`` is ``table`` (human) or ``csv``."""
    ordered = sorted(rows, key=lambda r: (-r[1].mean, r[0]))
    if fmt == "csv":
        out = io.StringIO()
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(REPORT_COLUMNS)
        for name, st in ordered:
            writer.writerow([name, *(repr(v) for v in st.as_row())])
        return out.getvalue()
    width = max([len("solver"), *(len(name) for name, _ in ordered)])
    lines = [f"{'#':>3} {'solver':<{width}} " + " ".join(f"{c:>8}" for c in REPORT_COLUMNS[1:])]
    for rank, (name, st) in enumerate(ordered, start=1):
        lines.append(f"{rank:>3} {name:<{width}} " + " ".join(f"{v:8.4f}" for v in st.as_row()))
    return "\n".join(lines) + "\n"
