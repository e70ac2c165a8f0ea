"""Scenario files: the declarative description of a tuning campaign.

Example::

    # Loandra-like solver
    solver = ./solver.sh
    instances = train.txt
    seed_flag = --rnd-seed={value}
    cpu_seconds = 60
    memory_mb = 32768
    bounds = mse_bounds.txt

    param weight-strategy categorical {0, 1, 2} [1] --weight-strategy={value}
    param preprocess      categorical {0, 1} [0]    --preprocess={value}
    param eps             real [0.0, 1.0] [0.5]      --eps={value}
    param lim             integer [1, 100] [10]
    forbid {weight-strategy=0, preprocess=1}

Relative paths resolve against the scenario file's directory.  A parameter's
flag template defaults to ``--<name>={value}``.
"""

from __future__ import annotations

import hashlib
import os
import re
from dataclasses import dataclass, field
from pathlib import Path

from maxfolio.blackbox.runner import RunLimits
from maxfolio.blackbox.space import (
    Categorical,
    Configuration,
    Integer,
    ParamDef,
    ParameterSpace,
    Real,
    SpaceError,
    render_cmdline,
)

WCNF_SUFFIXES = (".wcnf", ".wcnf.xz", ".wcnf.gz", ".wcnf.bz2", ".wcnf.lzma")


class ScenarioError(ValueError):
    def __init__(self, message: str, path: str = "", line: int | None = None):
        self.line = line
        where = path
        if line is not None:
            where = f"{path}:{line}" if path else f"line {line}"
        super().__init__(f"{where}: {message}" if where else message)


@dataclass(frozen=True)
class Scenario:
    path: str
    solver: str
    space: ParameterSpace
    instances: tuple[str, ...]
    limits: RunLimits = field(default_factory=RunLimits)
    seed_flag: str | None = None
    bounds_files: tuple[str, ...] = ()
    digest: str = ""

    def cmdline(self, config: Configuration, instance_path: str, seed: int | None) -> list[str]:
        return render_cmdline(self.solver, self.space, config, instance_path, seed, self.seed_flag)


_PARAM_RE = re.compile(
    r"^param\s+(?P<name>\S+)\s+(?P<kind>categorical|integer|real)\s+"
    r"(?P<domain>\{[^}]*\}|\[[^\]]*\])\s+\[(?P<default>[^\]]*)\]\s*(?P<flag>\S*)\s*$"
)
_FORBID_RE = re.compile(r"^forbid\s+\{(?P<body>[^}]*)\}\s*$")
_KV_RE = re.compile(r"^(?P<key>[a-z_]+)\s*=\s*(?P<value>.*?)\s*$")

_KEYS = {"solver", "instances", "seed_flag", "cpu_seconds", "memory_mb", "grace_seconds", "wall_seconds", "bounds"}


def _strip_comment(line: str) -> str:
    return line.split("#", 1)[0].strip()


def _parse_param(m: re.Match[str]) -> ParamDef:
    kind, domain_text, default_text = m["kind"], m["domain"], m["default"].strip()
    inner = domain_text[1:-1]
    if kind == "categorical":
        if not domain_text.startswith("{"):
            raise SpaceError("categorical domain must be written {a, b, ...}")
        domain = Categorical(tuple(v.strip() for v in inner.split(",") if v.strip()))
    else:
        if not domain_text.startswith("["):
            raise SpaceError("numeric domain must be written [lo, hi]")
        parts = [v.strip() for v in inner.split(",")]
        if len(parts) != 2:
            raise SpaceError("numeric domain needs exactly two bounds")
        try:
            domain = Integer(int(parts[0]), int(parts[1])) if kind == "integer" else Real(float(parts[0]), float(parts[1]))
        except ValueError:
            raise SpaceError(f"bad {kind} bounds {domain_text}") from None
    default = domain.coerce(default_text)
    return ParamDef(m["name"], domain, default, m["flag"] or "")


def _read_instance_list(path: Path) -> list[str]:
    if path.is_dir():
        return sorted(str(p) for p in path.iterdir() if p.name.endswith(WCNF_SUFFIXES))
    out = []
    with open(path, encoding="utf-8") as fh:
        for raw in fh:
            line = _strip_comment(raw)
            if line:
                p = Path(line)
                out.append(str(p if p.is_absolute() else (path.parent / p).resolve()))
    return out


def parse_scenario(text: str, base_dir: str | os.PathLike[str] = ".", path: str = "") -> Scenario:
    base = Path(base_dir)
    settings: dict[str, str] = {}
    bounds: list[str] = []
    params: list[ParamDef] = []
    raw_forbids: list[tuple[int, str]] = []

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = _strip_comment(raw)
        if not line:
            continue
        if line.startswith("param"):
            m = _PARAM_RE.match(line)
            if not m:
                raise ScenarioError("expected 'param <name> <type> <domain> [<default>] [flag]'", path, lineno)
            try:
                params.append(_parse_param(m))
            except SpaceError as exc:
                raise ScenarioError(str(exc), path, lineno) from None
        elif line.startswith("forbid"):
            m = _FORBID_RE.match(line)
            if not m:
                raise ScenarioError("expected 'forbid {name=value, ...}'", path, lineno)
            raw_forbids.append((lineno, m["body"]))
        else:
            m = _KV_RE.match(line)
            if not m or m["key"] not in _KEYS:
                raise ScenarioError(f"unrecognised line {line!r}", path, lineno)
            if m["key"] == "bounds":
                bounds.append(str(base / m["value"]))
            elif m["key"] in settings:
                raise ScenarioError(f"duplicate key {m['key']!r}", path, lineno)
            else:
                settings[m["key"]] = m["value"]

    by_name = {p.name: p for p in params}
    constraints = []
    for lineno, body in raw_forbids:
        combo = {}
        for item in body.split(","):
            if "=" not in item:
                raise ScenarioError(f"bad forbidden pair {item.strip()!r}", path, lineno)
            name, value = (s.strip() for s in item.split("=", 1))
            if name not in by_name:
                raise ScenarioError(f"unknown parameter {name!r}", path, lineno)
            try:
                combo[name] = by_name[name].domain.coerce(value)
            except SpaceError as exc:
                raise ScenarioError(f"{name}: {exc}", path, lineno) from None
        constraints.append(combo)
    try:
        space = ParameterSpace(tuple(params), tuple(constraints))
    except SpaceError as exc:
        raise ScenarioError(str(exc), path) from None

    if "solver" not in settings:
        raise ScenarioError("missing 'solver = <path>'", path)
    if "instances" not in settings:
        raise ScenarioError("missing 'instances = <list file or directory>'", path)
    solver = Path(settings["solver"])
    solver = solver if solver.is_absolute() else (base / solver).resolve()

    try:
        limits = RunLimits(
            cpu_seconds=float(settings.get("cpu_seconds", 60)),
            memory_bytes=int(float(settings.get("memory_mb", 32 * 1024)) * 1024 * 1024),
            timeout_grace_seconds=float(settings.get("grace_seconds", 5)),
            wall_seconds=float(settings["wall_seconds"]) if "wall_seconds" in settings else None,
        )
    except ValueError as exc:
        raise ScenarioError(f"bad limit: {exc}", path) from None

    inst_path = Path(settings["instances"])
    inst_path = inst_path if inst_path.is_absolute() else base / inst_path
    try:
        instances = _read_instance_list(inst_path)
    except OSError as exc:
        raise ScenarioError(f"cannot read instance list: {exc}", path) from None
    if not instances:
        raise ScenarioError("instance list is empty", path)
    if len({os.path.basename(i) for i in instances}) != len(instances):
        raise ScenarioError("instance base names must be unique", path)

    digest = hashlib.sha256(text.encode()).hexdigest()[:16]
    return Scenario(
        path=path,
        solver=str(solver),
        space=space,
        instances=tuple(instances),
        limits=limits,
        seed_flag=settings.get("seed_flag") or None,
        bounds_files=tuple(bounds),
        digest=digest,
    )


def load_scenario(path: str | os.PathLike[str]) -> Scenario:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ScenarioError(f"cannot read scenario: {exc}", str(path)) from None
    return parse_scenario(text, base_dir=path.parent.resolve(), path=str(path))
