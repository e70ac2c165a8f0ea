"""Resource-limited solver execution with bound-over-time capture."""

from __future__ import annotations

import logging
import math
import os
import signal
import subprocess
import threading
import time
from collections.abc import Callable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import TYPE_CHECKING

from maxfolio.blackbox.records import ExitStatus, RunRecord, RunStore
from maxfolio.blackbox.space import Configuration
from maxfolio.scoring import instance_id
from maxfolio.wcnf import (
    ValidationVerdict,
    VerdictStatus,
    WcnfFormula,
    read_wcnf,
    validate_output,
)

if TYPE_CHECKING:
    from maxfolio.blackbox.scenario import Scenario

log = logging.getLogger(__name__)

GiB = 1024**3
POLL_SECONDS = 0.02
# conventional MaxSAT exit codes (SAT, UNSAT, OPTIMUM) count as normal termination
NORMAL_EXIT_CODES = frozenset({0, 10, 20, 30})


class LimitEnforcementError(RuntimeError):
    pass


@dataclass(frozen=True)
class RunLimits:
    cpu_seconds: float = 60.0
    memory_bytes: int = 32 * GiB
    timeout_grace_seconds: float = 5.0
    wall_seconds: float | None = None

    def __post_init__(self) -> None:
        if self.cpu_seconds <= 0 or self.memory_bytes <= 0 or self.timeout_grace_seconds <= 0:
            raise ValueError("run limits must be positive")
        if self.wall_seconds is not None and self.wall_seconds <= 0:
            raise ValueError("wall_seconds must be positive")

    @property
    def wall_limit(self) -> float:
        """Wall-clock ceiling; catches solvers that sleep instead of burning CPU."""
        if self.wall_seconds is not None:
            return self.wall_seconds
        return 2 * self.cpu_seconds + self.timeout_grace_seconds


def check_platform() -> None:
    try:
        import resource  # noqa: F401

        import psutil  # noqa: F401
    except ImportError as exc:
        raise LimitEnforcementError(f"resource limits cannot be enforced here: {exc}") from None
    if os.name != "posix" or not hasattr(os, "wait4") or not hasattr(os, "killpg"):
        raise LimitEnforcementError("resource limits need a POSIX platform with wait4 and process groups")


@dataclass
class ProcessOutcome:
    stdout: bytes
    trace: list[tuple[float, int]]
    cpu_seconds: float
    exit: ExitStatus
    returncode: int | None
    time_source: str
    note: str = ""


class _TreeSampler:
    """CPU time and resident memory of a process and all of its descendants."""

    def __init__(self, pid: int):
        import psutil

        self._psutil = psutil
        self._known: dict[int, psutil.Process] = {}
        try:
            self._root = psutil.Process(pid)
            self._known[pid] = self._root
        except psutil.Error:
            self._root = None
        self.cpu = 0.0
        self.rss = 0
        self.ok = self._root is not None
        self._lock = threading.Lock()

    def sample(self) -> tuple[float, int]:
        with self._lock:
            if self._root is None:
                return self.cpu, self.rss
            ps = self._psutil
            try:
                for child in self._root.children(recursive=True):
                    self._known.setdefault(child.pid, child)
            except ps.Error:
                pass
            cpu = 0.0
            rss = 0
            alive = False
            for pid, proc in list(self._known.items()):
                try:
                    with proc.oneshot():
                        t = proc.cpu_times()
                        cpu += t.user + t.system + t.children_user + t.children_system
                        rss += proc.memory_info().rss
                    alive = True
                except ps.Error:
                    del self._known[pid]
            if alive:
                # descendants that exited take their CPU with them; keep the running maximum
                self.cpu = max(self.cpu, cpu)
                self.rss = rss
            return self.cpu, self.rss


def _limit_child(cpu_seconds: float, grace: float) -> Callable[[], None]:
    def preexec() -> None:
        import resource

        # per-process backstop; the monitor enforces the group-wide limit first
        soft = int(math.ceil(cpu_seconds + 2 * grace)) + 1
        resource.setrlimit(resource.RLIMIT_CPU, (soft, soft + 1))

    return preexec


def run_process(
    argv: Sequence[str],
    limits: RunLimits,
    stop_check: Callable[[Sequence[tuple[float, int]], float], bool] | None = None,
) -> ProcessOutcome:
    """Spawn ``argv`` in its own process group and supervise it until exit.

    ``stop_check(trace, cpu)`` lets a caller end the run early; such a stop is
    reported as Finished with a note.
    """
    check_platform()
    start = time.monotonic()
    proc = subprocess.Popen(
        list(argv),
        stdin=subprocess.DEVNULL,
        stdout=subprocess.PIPE,
        stderr=subprocess.DEVNULL,
        start_new_session=True,
        preexec_fn=_limit_child(limits.cpu_seconds, limits.timeout_grace_seconds),
    )
    sampler = _TreeSampler(proc.pid)
    chunks: list[bytes] = []
    trace: list[tuple[float, int]] = []
    use_cpu = sampler.ok

    def record_bound(line: bytes) -> None:
        parts = line.split()
        if len(parts) < 2:
            return
        try:
            bound = int(parts[1])
        except ValueError:
            return
        if bound < 0:
            return
        cpu, _ = sampler.sample()
        t = cpu if use_cpu else time.monotonic() - start
        if trace and bound >= trace[-1][1]:
            return
        if trace and t <= trace[-1][0]:
            trace[-1] = (trace[-1][0], bound)
        else:
            trace.append((t, bound))

    def reader() -> None:
        assert proc.stdout is not None
        for line in iter(proc.stdout.readline, b""):
            chunks.append(line)
            if line.startswith(b"o ") or line.startswith(b"o\t"):
                record_bound(line)
        proc.stdout.close()

    reader_thread = threading.Thread(target=reader, daemon=True)
    reader_thread.start()

    cause: ExitStatus | None = None
    term_at: float | None = None
    killed = False
    stopped_early = False
    status = 0
    rusage = None
    while True:
        pid, status, rusage = os.wait4(proc.pid, os.WNOHANG)
        if pid == proc.pid:
            break
        now = time.monotonic()
        cpu, rss = sampler.sample()
        if cause is None:
            if rss > limits.memory_bytes:
                cause = ExitStatus.MEMOUT
                _signal_group(proc.pid, signal.SIGKILL)
                killed = True
            elif cpu >= limits.cpu_seconds or now - start >= limits.wall_limit:
                cause = ExitStatus.TIMEOUT
                term_at = now
                _signal_group(proc.pid, signal.SIGTERM)
            elif stop_check is not None and stop_check(list(trace), cpu):
                cause = ExitStatus.FINISHED
                term_at = now
                stopped_early = True
                _signal_group(proc.pid, signal.SIGTERM)
        elif term_at is not None and not killed and now - term_at >= limits.timeout_grace_seconds:
            _signal_group(proc.pid, signal.SIGKILL)
            killed = True
        time.sleep(POLL_SECONDS)

    proc.returncode = os.waitstatus_to_exitcode(status)
    # orphaned descendants may still hold the pipe open
    _signal_group(proc.pid, signal.SIGKILL)
    reader_thread.join(timeout=5.0)

    cpu_used = sampler.cpu
    if rusage is not None:
        cpu_used = max(cpu_used, rusage.ru_utime + rusage.ru_stime)

    note = "stopped by caller" if stopped_early else ""
    if cause is None:
        rc = proc.returncode
        if rc < 0 and -rc in (signal.SIGXCPU, signal.SIGKILL) and cpu_used >= limits.cpu_seconds:
            cause = ExitStatus.TIMEOUT
        elif rc in NORMAL_EXIT_CODES:
            cause = ExitStatus.FINISHED
        else:
            cause = ExitStatus.CRASH
            note = f"exit code {rc}"
    return ProcessOutcome(
        stdout=b"".join(chunks),
        trace=trace,
        cpu_seconds=cpu_used,
        exit=cause,
        returncode=proc.returncode,
        time_source="cpu" if use_cpu else "wall",
        note=note,
    )


def _signal_group(pgid: int, sig: int) -> None:
    try:
        os.killpg(pgid, sig)
    except (ProcessLookupError, PermissionError):
        pass


def execute(
    scenario: Scenario,
    config: Configuration,
    instance_path: str,
    seed: int,
    limits: RunLimits | None = None,
    formula: WcnfFormula | None = None,
) -> RunRecord:
    """Run one (configuration, instance, seed) and validate what the solver printed."""
    limits = limits or scenario.limits
    if formula is None:
        formula = read_wcnf(instance_path)
    argv = scenario.cmdline(config, instance_path, seed)
    outcome = run_process(argv, limits)
    verdict = validate_output(formula, outcome.stdout)
    if verdict.status is not VerdictStatus.VALID and verdict.status is not VerdictStatus.NO_SOLUTION:
        log.info("%s on %s: %s %s", config.id, instance_id(instance_path), verdict.status.value, verdict.detail)
    return RunRecord(
        config_id=config.id,
        instance=instance_id(instance_path),
        seed=seed,
        trace=tuple(outcome.trace),
        verdict=verdict,
        cpu_seconds_used=outcome.cpu_seconds,
        exit=outcome.exit,
        time_source=outcome.time_source,
        note=outcome.note,
    )


Task = tuple[Configuration, str, int]


def _crash_record(config: Configuration, instance_path: str, seed: int, note: str) -> RunRecord:
    return RunRecord(
        config_id=config.id,
        instance=instance_id(instance_path),
        seed=seed,
        trace=(),
        verdict=ValidationVerdict(VerdictStatus.NO_SOLUTION),
        cpu_seconds_used=0.0,
        exit=ExitStatus.CRASH,
        note=note,
    )


def run_batch(
    scenario: Scenario,
    tasks: Sequence[Task],
    limits: RunLimits | None = None,
    max_workers: int = 1,
    store: RunStore | None = None,
    deadline: float | None = None,
) -> list[RunRecord | None]:
    """Run ``tasks`` with at most ``max_workers`` solver processes alive at once.

    Results follow task order.  A task that fails becomes a ``Crash`` record.
    Tasks not yet started when ``time.monotonic()`` passes ``deadline`` are
    skipped and reported as ``None``.
    """
    if max_workers < 1:
        raise ValueError("max_workers must be positive")
    if not tasks:
        return []
    check_platform()
    formulas: dict[str, WcnfFormula] = {}
    formula_lock = threading.Lock()

    def formula_for(path: str) -> WcnfFormula:
        with formula_lock:
            if path not in formulas:
                formulas[path] = read_wcnf(path)
            return formulas[path]

    def one(task: Task) -> RunRecord | None:
        config, path, seed = task
        if deadline is not None and time.monotonic() >= deadline:
            return None
        try:
            record = execute(scenario, config, path, seed, limits, formula_for(path))
        except Exception as exc:  # a broken task must not abort the batch
            log.warning("task %s on %s seed %d failed: %s", config.id, path, seed, exc)
            record = _crash_record(config, path, seed, f"{type(exc).__name__}: {exc}")
        if store is not None:
            store.put(record)
        return record

    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        return list(pool.map(one, tasks))
