"""Parameter spaces, configurations and command-line rendering."""

from __future__ import annotations

import hashlib
import json
from collections.abc import Mapping
from dataclasses import dataclass, field
from typing import Any, Union

import numpy as np

Value = Union[str, int, float]

MAX_REJECTION_ATTEMPTS = 1000


class SpaceError(ValueError):
    pass


@dataclass(frozen=True)
class Categorical:
    values: tuple[str, ...]

    def __post_init__(self) -> None:
        if not self.values:
            raise SpaceError("categorical domain must be non-empty")
        if len(set(self.values)) != len(self.values):
            raise SpaceError(f"categorical domain has duplicate values: {self.values}")

    def contains(self, value: Any) -> bool:
        return isinstance(value, str) and value in self.values

    def sample(self, rng: np.random.Generator) -> str:
        return self.values[int(rng.integers(len(self.values)))]

    def coerce(self, text: Any) -> str:
        value = str(text)
        if value not in self.values:
            raise SpaceError(f"{value!r} not in {{{', '.join(self.values)}}}")
        return value


@dataclass(frozen=True)
class Integer:
    lo: int
    hi: int

    def __post_init__(self) -> None:
        if self.lo > self.hi:
            raise SpaceError(f"empty integer range [{self.lo}, {self.hi}]")

    def contains(self, value: Any) -> bool:
        return isinstance(value, (int, np.integer)) and not isinstance(value, bool) and self.lo <= value <= self.hi

    def sample(self, rng: np.random.Generator) -> int:
        return int(rng.integers(self.lo, self.hi, endpoint=True))

    def coerce(self, text: Any) -> int:
        if isinstance(text, float) and not text.is_integer():
            raise SpaceError(f"{text!r} is not an integer")
        try:
            value = int(text)
        except (TypeError, ValueError):
            raise SpaceError(f"{text!r} is not an integer") from None
        if not self.lo <= value <= self.hi:
            raise SpaceError(f"{value} outside [{self.lo}, {self.hi}]")
        return value


@dataclass(frozen=True)
class Real:
    lo: float
    hi: float

    def __post_init__(self) -> None:
        if not self.lo <= self.hi:
            raise SpaceError(f"empty real range [{self.lo}, {self.hi}]")

    def contains(self, value: Any) -> bool:
        return isinstance(value, float) and self.lo <= value <= self.hi

    def sample(self, rng: np.random.Generator) -> float:
        return float(rng.uniform(self.lo, self.hi)) if self.hi > self.lo else float(self.lo)

    def coerce(self, text: Any) -> float:
        try:
            value = float(text)
        except (TypeError, ValueError):
            raise SpaceError(f"{text!r} is not a real number") from None
        if not self.lo <= value <= self.hi:
            raise SpaceError(f"{value} outside [{self.lo}, {self.hi}]")
        return value


Domain = Union[Categorical, Integer, Real]


@dataclass(frozen=True)
class ParamDef:
    name: str
    domain: Domain
    default: Value
    flag_template: str = ""

    def __post_init__(self) -> None:
        if not self.name or any(ch.isspace() for ch in self.name):
            raise SpaceError(f"invalid parameter name {self.name!r}")
        if not self.domain.contains(self.default):
            raise SpaceError(f"default {self.default!r} of {self.name} is outside its domain")
        if not self.flag_template:
            object.__setattr__(self, "flag_template", f"--{self.name}={{value}}")

    def render(self, value: Value) -> str:
        return self.flag_template.replace("{value}", format_value(value))


def format_value(value: Value) -> str:
    # repr of a float is the shortest string that round-trips
    if isinstance(value, float):
        return repr(value)
    return str(value)


Constraint = Mapping[str, Value]


@dataclass(frozen=True)
class Configuration:
    values: Mapping[str, Value]
    id: str = field(default="", compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "values", dict(self.values))
        object.__setattr__(self, "id", config_hash(self.values))

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Configuration) and other.id == self.id

    def __hash__(self) -> int:
        return hash(self.id)

    def __getitem__(self, name: str) -> Value:
        return self.values[name]

    def to_json(self) -> dict[str, Any]:
        return {"id": self.id, "values": dict(self.values)}

    @classmethod
    def from_json(cls, data: Mapping[str, Any]) -> Configuration:
        config = cls(data["values"])
        if "id" in data and data["id"] != config.id:
            raise ValueError(f"configuration id mismatch: stored {data['id']}, computed {config.id}")
        return config


def config_hash(values: Mapping[str, Value]) -> str:
    canon = json.dumps(
        {k: [type(v).__name__, format_value(v)] for k, v in values.items()},
        sort_keys=True,
        separators=(",", ":"),
    )
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class ParameterSpace:
    params: tuple[ParamDef, ...]
    constraints: tuple[Constraint, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "params", tuple(self.params))
        object.__setattr__(self, "constraints", tuple(dict(c) for c in self.constraints))
        names = [p.name for p in self.params]
        if len(set(names)) != len(names):
            raise SpaceError("parameter names must be unique")
        by_name = self.by_name
        for c in self.constraints:
            if not c:
                raise SpaceError("empty forbidden combination")
            for name, value in c.items():
                if name not in by_name:
                    raise SpaceError(f"constraint refers to unknown parameter {name!r}")
                if not by_name[name].domain.contains(value):
                    raise SpaceError(f"constraint value {value!r} outside the domain of {name}")
        defaults = {p.name: p.default for p in self.params}
        if self.violated(defaults):
            raise SpaceError("the default configuration violates a forbidden combination")

    @property
    def by_name(self) -> dict[str, ParamDef]:
        return {p.name: p for p in self.params}

    @property
    def names(self) -> list[str]:
        return [p.name for p in self.params]

    def violated(self, values: Mapping[str, Value]) -> list[Constraint]:
        return [c for c in self.constraints if all(values.get(k) == v for k, v in c.items())]

    def is_valid(self, values: Mapping[str, Value]) -> bool:
        if set(values) != set(self.names):
            return False
        return all(p.domain.contains(values[p.name]) for p in self.params) and not self.violated(values)

    def make(self, values: Mapping[str, Any]) -> Configuration:
        """Coerce raw values (e.g. strings from a file) into a validated configuration."""
        unknown = set(values) - set(self.names)
        if unknown:
            raise SpaceError(f"unknown parameters: {sorted(unknown)}")
        coerced = {}
        for p in self.params:
            raw = values.get(p.name, p.default)
            try:
                coerced[p.name] = p.domain.coerce(raw)
            except SpaceError as exc:
                raise SpaceError(f"{p.name}: {exc}") from None
        if self.violated(coerced):
            raise SpaceError(f"configuration violates forbidden combination {self.violated(coerced)[0]}")
        return Configuration(coerced)


def default_config(space: ParameterSpace) -> Configuration:
    return Configuration({p.name: p.default for p in space.params})


def sample_config(space: ParameterSpace, rng_seed: int | np.random.Generator) -> Configuration:
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    for _ in range(MAX_REJECTION_ATTEMPTS):
        values = {p.name: p.domain.sample(rng) for p in space.params}
        if not space.violated(values):
            return Configuration(values)
    raise SpaceError(
        f"no configuration satisfying the constraints after {MAX_REJECTION_ATTEMPTS} draws; "
        "the space is too constrained for rejection sampling"
    )


def render_cmdline(
    solver: str,
    space: ParameterSpace,
    config: Configuration,
    instance_path: str,
    seed: int | None = None,
    seed_flag: str | None = None,
) -> list[str]:
    argv = [solver, instance_path]
    argv.extend(p.render(config.values[p.name]) for p in space.params)
    if seed_flag and seed is not None:
        argv.append(seed_flag.replace("{value}", str(seed)))
    return argv


