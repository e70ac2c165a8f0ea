"""Weighted partial MaxSAT formulas: parsing, cost evaluation and output validation.

Both DIMACS WCNF dialects are accepted:

* legacy: ``p wcnf <nvars> <nclauses> <top>`` header, every clause line starts
  with its weight and clauses whose weight equals ``top`` are hard;
* 2022: no header, hard clauses start with ``h``, soft clauses with their weight.
"""

from __future__ import annotations

import bz2
import enum
import gzip
import io
import lzma
import os
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from typing import IO, Union

Clause = tuple[int, ...]
TextSource = Union[bytes, str, IO[bytes], IO[str]]


class WcnfParseError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


@dataclass(frozen=True)
class WcnfFormula:
    num_vars: int
    hard_clauses: tuple[Clause, ...]
    soft_clauses: tuple[tuple[int, Clause], ...]
    source_path: str = field(default="", compare=False)

    def __post_init__(self) -> None:
        if self.num_vars < 0:
            raise ValueError("num_vars must be non-negative")
        for clause in self.hard_clauses:
            self._check_clause(clause)
        for weight, clause in self.soft_clauses:
            if weight < 1:
                raise ValueError(f"soft weight must be >= 1, got {weight}")
            self._check_clause(clause)

    def _check_clause(self, clause: Clause) -> None:
        if not clause:
            raise ValueError("empty clause")
        for lit in clause:
            if lit == 0 or abs(lit) > self.num_vars:
                raise ValueError(f"literal {lit} out of range 1..{self.num_vars}")

    @property
    def total_soft_weight(self) -> int:
        return sum(w for w, _ in self.soft_clauses)


@dataclass(frozen=True)
class Assignment:
    """Total truth assignment; ``values[v - 1]`` is the value of variable ``v``."""

    values: tuple[bool, ...]

    @classmethod
    def from_literals(cls, literals: Iterable[int], num_vars: int) -> Assignment:
        values = [False] * num_vars
        for lit in literals:
            if lit > 0:
                values[lit - 1] = True
        return cls(tuple(values))

    @classmethod
    def from_mapping(cls, mapping: dict[int, bool], num_vars: int) -> Assignment:
        return cls(tuple(bool(mapping.get(v, False)) for v in range(1, num_vars + 1)))

    def __getitem__(self, var: int) -> bool:
        return self.values[var - 1]

    def satisfies(self, lit: int) -> bool:
        value = self.values[abs(lit) - 1]
        return value if lit > 0 else not value


# -- parsing -----------------------------------------------------------------


def _as_text(data: TextSource) -> str:
    if isinstance(data, bytes):
        return data.decode("utf-8", errors="replace")
    if isinstance(data, str):
        return data
    content = data.read()
    if isinstance(content, bytes):
        return content.decode("utf-8", errors="replace")
    return content


def _parse_int(token: str, lineno: int, what: str) -> int:
    try:
        return int(token)
    except ValueError:
        raise WcnfParseError(f"invalid {what} {token!r}", lineno) from None


def _parse_clause(tokens: Sequence[str], lineno: int) -> Clause:
    if not tokens or tokens[-1] != "0":
        raise WcnfParseError("clause is not terminated by 0", lineno)
    lits = tuple(_parse_int(t, lineno, "literal") for t in tokens[:-1])
    if not lits:
        raise WcnfParseError("empty clause", lineno)
    if 0 in lits:
        raise WcnfParseError("literal 0 inside clause", lineno)
    return lits


def parse_wcnf(data: TextSource, source_path: str = "") -> WcnfFormula:
    text = _as_text(data)
    header: tuple[int, int, int | None] | None = None
    hard: list[Clause] = []
    soft: list[tuple[int, Clause]] = []
    max_var = 0
    saw_clause = False

    for lineno, raw in enumerate(text.splitlines(), start=1):
        tokens = raw.split()
        if not tokens or tokens[0].startswith("c"):
            continue
        if tokens[0] == "p":
            if header is not None:
                raise WcnfParseError("duplicate header", lineno)
            if saw_clause:
                raise WcnfParseError("header after clauses", lineno)
            if len(tokens) not in (4, 5) or tokens[1] != "wcnf":
                raise WcnfParseError("malformed header, expected 'p wcnf <nvars> <nclauses> <top>'", lineno)
            nvars = _parse_int(tokens[2], lineno, "variable count")
            nclauses = _parse_int(tokens[3], lineno, "clause count")
            top = _parse_int(tokens[4], lineno, "top weight") if len(tokens) == 5 else None
            if nvars < 0 or nclauses < 0 or (top is not None and top < 1):
                raise WcnfParseError("malformed header, negative field", lineno)
            header = (nvars, nclauses, top)
            continue

        saw_clause = True
        if tokens[0] == "h":
            if header is not None:
                raise WcnfParseError("'h' clause in a file with a legacy header", lineno)
            clause = _parse_clause(tokens[1:], lineno)
            hard.append(clause)
        else:
            weight = _parse_int(tokens[0], lineno, "weight")
            if weight <= 0:
                raise WcnfParseError(f"weight must be positive, got {weight}", lineno)
            clause = _parse_clause(tokens[1:], lineno)
            if header is not None and header[2] is not None:
                top = header[2]
                if weight > top:
                    raise WcnfParseError(f"weight {weight} exceeds top {top}", lineno)
                if weight == top:
                    hard.append(clause)
                else:
                    soft.append((weight, clause))
            else:
                soft.append((weight, clause))

        clause_max = max(abs(lit) for lit in clause)
        if header is not None and clause_max > header[0]:
            raise WcnfParseError(f"literal out of range 1..{header[0]}", lineno)
        max_var = max(max_var, clause_max)

    num_vars = header[0] if header is not None else max_var
    return WcnfFormula(num_vars, tuple(hard), tuple(soft), source_path=source_path)


def _open_maybe_compressed(path: str | os.PathLike[str]) -> IO[bytes]:
    path = os.fspath(path)
    if path.endswith(".xz") or path.endswith(".lzma"):
        return lzma.open(path, "rb")
    if path.endswith(".gz"):
        return gzip.open(path, "rb")
    if path.endswith(".bz2"):
        return bz2.open(path, "rb")
    return open(path, "rb")


def read_wcnf(path: str | os.PathLike[str]) -> WcnfFormula:
    with _open_maybe_compressed(path) as fh:
        return parse_wcnf(fh, source_path=os.fspath(path))


def emit_wcnf(formula: WcnfFormula, fmt: str = "2022") -> str:
    """Serialise ``formula`` in the ``"2022"`` or ``"legacy"`` dialect."""
    out = io.StringIO()
    if fmt == "legacy":
        top = formula.total_soft_weight + 1
        n = len(formula.hard_clauses) + len(formula.soft_clauses)
        out.write(f"p wcnf {formula.num_vars} {n} {top}\n")
        for clause in formula.hard_clauses:
            out.write(f"{top} {' '.join(map(str, clause))} 0\n")
    elif fmt == "2022":
        for clause in formula.hard_clauses:
            out.write(f"h {' '.join(map(str, clause))} 0\n")
    else:
        raise ValueError(f"unknown format {fmt!r}")
    for weight, clause in formula.soft_clauses:
        out.write(f"{weight} {' '.join(map(str, clause))} 0\n")
    return out.getvalue()


# -- evaluation ----------------------------------------------------------------


def _clause_satisfied(clause: Clause, a: Assignment) -> bool:
    return any(a.satisfies(lit) for lit in clause)


def cost_of(formula: WcnfFormula, a: Assignment) -> tuple[bool, int]:
    """Return ``(hard_ok, cost)``; cost is computed even when a hard clause fails."""
    if len(a.values) < formula.num_vars:
        raise ValueError("assignment does not cover every variable")
    hard_ok = all(_clause_satisfied(c, a) for c in formula.hard_clauses)
    cost = sum(w for w, c in formula.soft_clauses if not _clause_satisfied(c, a))
    return hard_ok, cost


# -- solver output validation ----------------------------------------------------


class VerdictStatus(str, enum.Enum):
    VALID = "Valid"
    HARD_VIOLATION = "HardViolation"
    NO_SOLUTION = "NoSolution"
    MALFORMED_OUTPUT = "MalformedOutput"


@dataclass(frozen=True)
class ValidationVerdict:
    status: VerdictStatus
    true_cost: int | None = None
    reported_cost: int | None = None
    detail: str = ""

    def __post_init__(self) -> None:
        if (self.true_cost is not None) != (self.status is VerdictStatus.VALID):
            raise ValueError("true_cost must be present iff status is Valid")

    @property
    def solved(self) -> bool:
        return self.status is VerdictStatus.VALID


class MalformedModel(ValueError):
    pass


def parse_model_line(tokens: Sequence[str], num_vars: int) -> Assignment:
    """Decode the tokens after ``v`` into an assignment.

    A single token made only of ``0``/``1`` characters is the binary-string form;
    anything else is a literal list, optionally terminated by ``0``.
    """
    if len(tokens) == 1 and tokens[0] and set(tokens[0]) <= {"0", "1"} and len(tokens[0]) > 1:
        bits = tokens[0]
        if len(bits) > num_vars:
            raise MalformedModel(f"binary model has {len(bits)} values for {num_vars} variables")
        return Assignment(tuple(ch == "1" for ch in bits) + (False,) * (num_vars - len(bits)))

    lits: list[int] = []
    for i, tok in enumerate(tokens):
        try:
            lit = int(tok)
        except ValueError:
            raise MalformedModel(f"non-integer token {tok!r} in model") from None
        if lit == 0:
            if i != len(tokens) - 1:
                raise MalformedModel("literal 0 before end of model line")
            continue
        if abs(lit) > num_vars:
            raise MalformedModel(f"literal {lit} out of range 1..{num_vars}")
        lits.append(lit)
    seen: dict[int, bool] = {}
    for lit in lits:
        var, val = abs(lit), lit > 0
        if seen.get(var, val) != val:
            raise MalformedModel(f"contradictory literals for variable {var}")
        seen[var] = val
    return Assignment.from_mapping(seen, num_vars)


def scan_output(solver_stdout: TextSource) -> tuple[list[str] | None, int | None]:
    """Return the tokens of the last ``v`` line and the last parseable ``o`` value."""
    model: list[str] | None = None
    reported: int | None = None
    for line in _as_text(solver_stdout).splitlines():
        tokens = line.split()
        if not tokens:
            continue
        if tokens[0] == "v":
            model = tokens[1:]
        elif tokens[0] == "o" and len(tokens) >= 2:
            try:
                value = int(tokens[1])
            except ValueError:
                continue
            if value >= 0:
                reported = value
    return model, reported


def validate_output(formula: WcnfFormula, solver_stdout: TextSource) -> ValidationVerdict:
    model, reported = scan_output(solver_stdout)
    if model is None:
        return ValidationVerdict(VerdictStatus.NO_SOLUTION, reported_cost=reported)
    try:
        assignment = parse_model_line(model, formula.num_vars)
    except MalformedModel as exc:
        return ValidationVerdict(VerdictStatus.MALFORMED_OUTPUT, reported_cost=reported, detail=str(exc))
    hard_ok, cost = cost_of(formula, assignment)
    if not hard_ok:
        return ValidationVerdict(VerdictStatus.HARD_VIOLATION, reported_cost=reported)
    detail = ""
    if reported is not None and reported != cost:
        detail = f"reported cost {reported} differs from recomputed cost {cost}"
    return ValidationVerdict(VerdictStatus.VALID, true_cost=cost, reported_cost=reported, detail=detail)
