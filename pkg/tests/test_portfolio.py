import json
import random
import sys
from pathlib import Path

import pytest
from oracles import brute_best_schedule, brute_simulate

from maxfolio.blackbox import (
    ExitStatus,
    Integer,
    ParamDef,
    ParameterSpace,
    RunLimits,
    RunRecord,
    load_scenario,
)
from maxfolio.portfolio import (
    DEFAULT_MTBS_GRID,
    ParallelPortfolio,
    PortfolioKind,
    Schedule,
    build_parallel,
    evaluate_schedule,
    read_schedule,
    run_sequential,
    schedule_count,
    score_parallel,
    search_best_schedule,
    simulate_schedule,
    traces_from_runs,
    write_launch_scripts,
    write_schedule,
)
from maxfolio.scoring import BoundsRegistry, InstanceResult, score_solver
from maxfolio.selection import complete_and_score
from maxfolio.wcnf import ValidationVerdict, VerdictStatus

SPACE = ParameterSpace((ParamDef("x", Integer(0, 999), 0),))
FIXTURES = Path(__file__).parent / "fixtures"


def config(x):
    return SPACE.make({"x": x})


def run(cfg, inst, cost, seed=0, trace=None):
    if cost is None:
        return RunRecord(cfg.id, inst, seed, (), ValidationVerdict(VerdictStatus.NO_SOLUTION), 1.0, ExitStatus.TIMEOUT)
    return RunRecord(cfg.id, inst, seed, trace or ((1.0, cost),), ValidationVerdict(VerdictStatus.VALID, cost), 1.0, ExitStatus.TIMEOUT)


# -- parallel ----------------------------------------------------------------------


def _pool(n, insts=("i",), reg=None):
    configs = [config(k) for k in range(n)]
    runs = [run(c, i, 10 + k) for k, c in enumerate(configs) for i in insts]
    reg = reg or BoundsRegistry.from_bounds({i: 10 for i in insts}, "t")
    return complete_and_score(configs, list(insts), reg, lambda t, d=None: [], runs), runs, reg


def test_build_parallel_configs_prefix():
    pool, _, _ = _pool(50)
    p = build_parallel(pool, 25, "Configs")
    assert [c for c, _ in p.entries] == pool.configs[:25]
    assert len(build_parallel(pool, 1, PortfolioKind.CONFIGS)) == 1
    with pytest.raises(ValueError, match="50 candidate"):
        build_parallel(pool, 51, "Configs")


def test_build_parallel_seeds():
    p = build_parallel(config(1), 3, "Seeds", base_seed=5)
    assert len({c.id for c, _ in p.entries}) == 1
    assert len({s for _, s in p.entries}) == 3
    assert p == build_parallel(config(1), 3, "Seeds", base_seed=5)
    assert ParallelPortfolio.from_json(json.loads(json.dumps(p.to_json()))) == p


def test_portfolio_invariants():
    with pytest.raises(ValueError):
        ParallelPortfolio(((config(1), 1), (config(1), 1)), PortfolioKind.SEEDS)
    with pytest.raises(ValueError):
        ParallelPortfolio(((config(1), 1), (config(2), 2)), PortfolioKind.SEEDS)
    with pytest.raises(ValueError):
        ParallelPortfolio(((config(1), 1), (config(1), 2)), PortfolioKind.CONFIGS)


def test_score_parallel_examples():
    a, b = config(1), config(2)
    reg = BoundsRegistry.from_bounds({"i": 9}, "t")
    p = ParallelPortfolio(((a, 0), (b, 0)), PortfolioKind.CONFIGS)
    assert score_parallel(p, [run(a, "i", 9), run(b, "i", 12)], reg) == 1.0
    assert score_parallel(p, [run(a, "i", None), run(b, "i", None)], reg) == 0.0
    single = ParallelPortfolio(((b, 0),), PortfolioKind.CONFIGS)
    assert score_parallel(single, [run(b, "i", 12)], reg) == score_solver([InstanceResult("i", 12)], reg)
    with pytest.raises(ValueError, match="no run"):
        score_parallel(p, [run(a, "i", 9)], reg)


def test_seed_portfolio_needs_exact_seeds():
    a = config(1)
    reg = BoundsRegistry.from_bounds({"i": 9}, "t")
    p = ParallelPortfolio(((a, 1), (a, 2)), PortfolioKind.SEEDS)
    assert score_parallel(p, [run(a, "i", 12, 1), run(a, "i", 9, 2)], reg) == 1.0
    with pytest.raises(ValueError):
        score_parallel(p, [run(a, "i", 12, 1), run(a, "i", 9, 3)], reg)


@pytest.mark.parametrize("seed", range(20))
def test_parallel_dominance_and_monotonicity(seed):
    rnd = random.Random(seed)
    insts = [f"i{k}" for k in range(6)]
    configs = [config(k) for k in range(11)]
    runs = [run(c, i, rnd.choice([None, *range(5, 40)])) for c in configs for i in insts]
    reg = BoundsRegistry.from_bounds({i: 5 for i in insts}, "t")
    pool = complete_and_score(configs, insts, reg, lambda t, d=None: [], runs)
    prev = -1.0
    for n in range(1, 11):
        p = build_parallel(pool, n, "Configs")
        s = score_parallel(p, runs, reg)
        members = max(score_solver([r.result() for r in runs if r.config_id == c.id], reg) for c, _ in p.entries)
        assert s >= prev
        assert s >= members
        prev = s


def test_launch_scripts(tmp_path):
    scn = load_scenario(FIXTURES / "scripted.scenario")
    cfg = scn.space.make({"model": "-1;2"})
    p = build_parallel(cfg, 2, "Seeds")
    out = write_launch_scripts(p, scn, tmp_path / "par", {"seed": 0})
    manifest = json.loads((out / "manifest.json").read_text())
    assert [e["script"] for e in manifest["entries"]] == ["entry_000.sh", "entry_001.sh"]
    import subprocess

    res = subprocess.run([str(out / "entry_000.sh"), str(FIXTURES / "tiny.wcnf")], capture_output=True, text=True, timeout=30)
    assert "v -1 2" in res.stdout


# -- simulation ------------------------------------------------------------------


A, B, C = config(1), config(2), config(3)


def test_worked_example():
    traces = {A.id: [(5, 100), (20, 90)], B.id: [(3, 85), (8, 70)]}
    res, log = simulate_schedule(Schedule((A, B), 10, 60), traces, "x")
    assert res == InstanceResult("x", 70)
    assert log == ((A.id, 0, 15, 100), (B.id, 15, 60, 70))
    bound, segs = brute_simulate(["A", "B"], {"A": traces[A.id], "B": traces[B.id]}, 10, 60)
    assert bound == 70 and segs == [("A", 0, 15), ("B", 15, 60)]


def test_singleton_ignores_gaps():
    res, log = simulate_schedule(Schedule((A,), 2, 60), {A.id: [(1, 50), (30, 40), (59, 30), (61, 1)]})
    assert res.ub == 30 and log == ((A.id, 0, 60, 30),)


def test_empty_traces():
    res, log = simulate_schedule(Schedule((A, B), 5, 60), {A.id: [], B.id: []})
    assert res.ub is None
    assert log == ((A.id, 0, 60, None),)


def test_mtbs_boundary_inclusive():
    traces = {A.id: [(5, 100), (15, 90), (26, 80)], B.id: [(1, 50)]}
    res, log = simulate_schedule(Schedule((A, B), 10, 60), traces)
    assert log[0] == (A.id, 0, 25, 90)
    assert res.ub == 50


def test_first_solution_cap():
    traces = {A.id: [(30, 10)], B.id: [(1, 50)]}
    res, log = simulate_schedule(Schedule((A, B), 10, 60), traces)
    assert res.ub == 10 and log == ((A.id, 0, 40, 10), (B.id, 40, 60, 50))
    res, log = simulate_schedule(Schedule((A, B), 10, 60, first_solution_cap=20), traces)
    assert res.ub == 50 and log[0] == (A.id, 0, 20, None)


def test_budget_cuts_events():
    traces = {A.id: [(5, 100)], B.id: [(40, 85), (46, 80)]}
    res, log = simulate_schedule(Schedule((A, B), 10, 60), traces)
    assert log[-1] == (B.id, 15, 60, 85)
    assert res.ub == 85


def _random_traces(rnd, names, horizon):
    out = {}
    for name in names:
        times = sorted(rnd.sample(range(horizon + 10), rnd.randint(0, 6)))
        bound = rnd.randint(130, 250)
        events = []
        for t in times:
            bound -= rnd.randint(1, 20)
            events.append((t, bound))
        out[name] = events
    return out


def test_simulator_matches_brute_force():
    rnd = random.Random(2024)
    configs = {n: config(k) for k, n in enumerate("ABCD")}
    for _ in range(1000):
        to = rnd.randint(5, 70)
        mtbs = rnd.randint(1, 25)
        traces = _random_traces(rnd, "ABCD", to)
        seq = rnd.sample("ABCD", rnd.randint(1, 4))
        res, log = simulate_schedule(Schedule(tuple(configs[n] for n in seq), mtbs, to), {configs[n].id: traces[n] for n in "ABCD"})
        bound, segs = brute_simulate(seq, traces, mtbs, to)
        assert res.ub == bound
        assert [(s[1], s[2]) for s in log] == [(s[1], s[2]) for s in segs]
        assert log[0][1] == 0 and all(x[2] == y[1] for x, y in zip(log, log[1:])) and log[-1][2] <= to


# -- search -----------------------------------------------------------------------


def _trace_sets(rnd, pool, insts, to):
    names = [c.id for c in pool]
    by_inst = {i: _random_traces(rnd, names, to) for i in insts}
    best = {i: min((b for tr in by_inst[i].values() for _, b in tr), default=0) for i in insts}
    return by_inst, best


def test_two_config_search_matches_brute_force():
    rnd = random.Random(7)
    pool = [A, B]
    traces, best = _trace_sets(rnd, pool, ["i1", "i2", "i3"], 60)
    reg = BoundsRegistry.from_bounds(best, "t")
    res = search_best_schedule(pool, traces, reg, max_len=2, mtbs_grid=[10], budget_to=60)
    assert res.n_evaluated == 4
    brute = brute_best_schedule([A.id, B.id], traces, best, 2, [10.0], 60)
    neg, n, m, ids = brute[0]
    assert (res.schedule.ids, res.schedule.mtbs, res.train_score) == (ids, m, -neg)


def test_degenerate_search_picks_best_single():
    pool = [A, B]
    traces = {"i": {A.id: [(1, 30)], B.id: [(2, 20)]}}
    reg = BoundsRegistry.from_bounds({"i": 20}, "t")
    res = search_best_schedule(pool, traces, reg, max_len=1, mtbs_grid=[5])
    assert res.schedule.ids == (B.id,) and res.train_score == 1.0 and res.n_evaluated == 2


def test_search_count_pool_of_six():
    rnd = random.Random(1)
    pool = [config(k) for k in range(6)]
    traces, best = _trace_sets(rnd, pool, ["i1", "i2"], 60)
    res = search_best_schedule(pool, traces, BoundsRegistry.from_bounds(best, "t"))
    assert res.n_evaluated == 1872 == schedule_count(6, 3, len(DEFAULT_MTBS_GRID))
    brute = brute_best_schedule([c.id for c in pool], traces, best, 3, list(DEFAULT_MTBS_GRID), 60)
    assert len(brute) == 1872
    neg, n, m, ids = brute[0]
    assert (res.schedule.ids, res.schedule.mtbs, res.train_score) == (ids, m, -neg)


@pytest.mark.parametrize("seed", range(10))
def test_search_dominates_singletons_and_is_deterministic(seed):
    rnd = random.Random(seed)
    pool = [config(k) for k in range(4)]
    traces, best = _trace_sets(rnd, pool, ["i1", "i2", "i3"], 30)
    reg = BoundsRegistry.from_bounds(best, "t")
    res = search_best_schedule(pool, traces, reg, max_len=3, mtbs_grid=[2, 5, 10], budget_to=30)
    singles = max(evaluate_schedule(Schedule((c,), 2, 30), traces, reg).score for c in pool)
    assert res.train_score >= singles
    assert search_best_schedule(list(reversed(pool)), traces, reg, max_len=3, mtbs_grid=[10, 5, 2], budget_to=30) == res


def test_search_errors():
    reg = BoundsRegistry.from_bounds({"i": 1}, "t")
    with pytest.raises(ValueError):
        search_best_schedule([], {"i": {}}, reg)
    with pytest.raises(ValueError):
        search_best_schedule([A], {"i": {A.id: []}}, reg, mtbs_grid=[])
    with pytest.raises(ValueError, match="no trace"):
        search_best_schedule([A, B], {"i": {A.id: []}}, reg)


def test_evaluate_schedule_examples(tmp_path):
    traces = {"x": {A.id: [(5, 100), (20, 90)], B.id: [(3, 85), (8, 70)]}}
    reg = BoundsRegistry.from_bounds({"x": 70}, "t")
    out = evaluate_schedule(Schedule((A, B), 10, 60), traces, reg)
    assert out.score == 1.0 and out.per_instance["x"].ub == 70
    assert evaluate_schedule(Schedule((A,), 10, 60), {}, reg).score == 0.0
    single = evaluate_schedule(Schedule((A,), 10, 60), traces, reg)
    assert single.score == score_solver([InstanceResult("x", 90)], reg)

    res = search_best_schedule([A, B], traces, reg, max_len=2, mtbs_grid=[10])
    write_schedule(res, tmp_path / "s.json", {"pool": "abc"})
    assert read_schedule(tmp_path / "s.json") == res.schedule


def test_traces_from_runs_ignores_unvalidated():
    bad = RunRecord(A.id, "i", 0, ((1.0, 3),), ValidationVerdict(VerdictStatus.HARD_VIOLATION, detail="x"), 1.0, ExitStatus.FINISHED)
    good = run(B, "i", 5, trace=((0.5, 9), (1.5, 5)))
    assert traces_from_runs([bad, good]) == {"i": {A.id: (), B.id: ((0.5, 9), (1.5, 5))}}


# -- live --------------------------------------------------------------------------


@pytest.mark.skipif(sys.platform != "linux", reason="process limits need linux")
def test_run_sequential_switches_on_stall():
    scn = load_scenario(FIXTURES / "scripted.scenario")
    stalls = scn.space.make({"schedule": "0.2:10", "model": "-1;2", "after": "busy"})
    finisher = scn.space.make({"schedule": "none", "model": "1;-2", "after": "exit"})
    sched = Schedule((stalls, finisher), 0.5, 3.0)
    out = run_sequential(scn, sched, str(FIXTURES / "tiny.wcnf"), limits=RunLimits(3, 200 * 2**20, 1))
    assert [s[0] for s in out.segments] == [stalls.id, finisher.id]
    assert out.segments[0][3] == 2 and out.segments[1][3] == 1
    assert out.segments[0][2] < 2.0
    assert out.result.ub == 1
