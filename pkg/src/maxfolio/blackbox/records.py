"""Run records and their on-disk JSON-lines logs."""

from __future__ import annotations

import enum
import json
import os
from collections.abc import Iterator
from dataclasses import dataclass, field
from pathlib import Path

from maxfolio.scoring import InstanceResult
from maxfolio.wcnf import ValidationVerdict, VerdictStatus

SCRATCH_ENV = "MAXFOLIO_SCRATCH"

Trace = tuple[tuple[float, int], ...]


class ExitStatus(str, enum.Enum):
    FINISHED = "Finished"
    TIMEOUT = "Timeout"
    MEMOUT = "MemOut"
    CRASH = "Crash"


@dataclass(frozen=True)
class RunRecord:
    config_id: str
    instance: str
    seed: int
    trace: Trace
    verdict: ValidationVerdict
    cpu_seconds_used: float
    exit: ExitStatus
    time_source: str = "cpu"
    note: str = field(default="", compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "trace", tuple((float(t), int(b)) for t, b in self.trace))
        for (t0, b0), (t1, b1) in zip(self.trace, self.trace[1:]):
            if not (t1 > t0 and b1 < b0):
                raise ValueError(f"trace is not strictly improving: ({t0}, {b0}) -> ({t1}, {b1})")

    @property
    def key(self) -> tuple[str, str, int]:
        return (self.config_id, self.instance, self.seed)

    @property
    def true_cost(self) -> int | None:
        return self.verdict.true_cost

    def result(self) -> InstanceResult:
        return InstanceResult(self.instance, self.verdict.true_cost)

    def to_lines(self) -> list[str]:
        lines = [json.dumps({"t": t, "bound": b}) for t, b in self.trace]
        lines.append(
            json.dumps(
                {
                    "verdict": self.verdict.status.value,
                    "true_cost": self.verdict.true_cost,
                    "reported_cost": self.verdict.reported_cost,
                    "exit": self.exit.value,
                    "cpu": self.cpu_seconds_used,
                    "config_id": self.config_id,
                    "instance": self.instance,
                    "seed": self.seed,
                    "time_source": self.time_source,
                    "note": self.note,
                }
            )
        )
        return lines

    @classmethod
    def from_lines(cls, lines: list[str]) -> RunRecord:
        events = []
        terminal = None
        for raw in lines:
            if not raw.strip():
                continue
            rec = json.loads(raw)
            if "verdict" in rec:
                terminal = rec
            else:
                events.append((rec["t"], rec["bound"]))
        if terminal is None:
            raise ValueError("run log has no terminal record")
        verdict = ValidationVerdict(
            VerdictStatus(terminal["verdict"]), terminal.get("true_cost"), terminal.get("reported_cost")
        )
        return cls(
            config_id=terminal["config_id"],
            instance=terminal["instance"],
            seed=int(terminal["seed"]),
            trace=tuple(events),
            verdict=verdict,
            cpu_seconds_used=float(terminal["cpu"]),
            exit=ExitStatus(terminal["exit"]),
            time_source=terminal.get("time_source", "cpu"),
            note=terminal.get("note", ""),
        )


def read_run_log(path: str | os.PathLike[str]) -> RunRecord:
    with open(path, encoding="utf-8") as fh:
        return RunRecord.from_lines(fh.readlines())


def scratch_dir() -> Path:
    """Directory for throwaway files; honours ``MAXFOLIO_SCRATCH``."""
    root = os.environ.get(SCRATCH_ENV)
    if root:
        return Path(root)
    import tempfile

    return Path(tempfile.gettempdir()) / "maxfolio"


class RunStore:
    """Run logs addressed by (config id, instance, seed).

    With ``root=None`` the store lives in memory only.
    """

    def __init__(self, root: str | os.PathLike[str] | None = None):
        self.root = Path(root) if root is not None else None
        self._cache: dict[tuple[str, str, int], RunRecord] = {}
        if self.root is not None:
            self.root.mkdir(parents=True, exist_ok=True)

    def path_for(self, config_id: str, instance: str, seed: int) -> Path:
        if self.root is None:
            raise ValueError("in-memory store has no paths")
        return self.root / config_id[:2] / config_id / f"{instance}__{seed}.jsonl"

    def put(self, record: RunRecord) -> None:
        self._cache[record.key] = record
        if self.root is not None:
            path = self.path_for(*record.key)
            path.parent.mkdir(parents=True, exist_ok=True)
            tmp = path.with_suffix(".tmp")
            tmp.write_text("\n".join(record.to_lines()) + "\n", encoding="utf-8")
            os.replace(tmp, path)

    def get(self, config_id: str, instance: str, seed: int) -> RunRecord | None:
        key = (config_id, instance, seed)
        if key in self._cache:
            return self._cache[key]
        if self.root is None:
            return None
        path = self.path_for(*key)
        if not path.exists():
            return None
        record = read_run_log(path)
        self._cache[key] = record
        return record

    def find(self, config_id: str, instance: str) -> list[RunRecord]:
        """All stored runs of a configuration on an instance, ordered by seed."""
        found = {k: r for k, r in self._cache.items() if k[0] == config_id and k[1] == instance}
        if self.root is not None:
            d = self.root / config_id[:2] / config_id
            if d.is_dir():
                prefix = f"{instance}__"
                for p in d.glob("*.jsonl"):
                    if p.name.startswith(prefix):
                        seed_text = p.name[len(prefix) : -len(".jsonl")]
                        if seed_text.isdigit() and (config_id, instance, int(seed_text)) not in found:
                            rec = read_run_log(p)
                            self._cache[rec.key] = rec
                            found[rec.key] = rec
        return [found[k] for k in sorted(found, key=lambda k: k[2])]

    def __iter__(self) -> Iterator[RunRecord]:
        if self.root is not None:
            for p in sorted(self.root.glob("*/*/*.jsonl")):
                rec = read_run_log(p)
                self._cache.setdefault(rec.key, rec)
        return iter([self._cache[k] for k in sorted(self._cache)])

    def __len__(self) -> int:
        return sum(1 for _ in self)


def load_runs(root: str | os.PathLike[str]) -> list[RunRecord]:
    """Read every run log under ``root`` (any directory layout)."""
    return [read_run_log(p) for p in sorted(Path(root).rglob("*.jsonl"))]
