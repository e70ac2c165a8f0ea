import numpy as np
import pytest

from maxfolio.blackbox import (
    Categorical,
    ExitStatus,
    Integer,
    ParamDef,
    ParameterSpace,
    RunRecord,
    RunStore,
    default_config,
)
from maxfolio.scoring import BoundsRegistry
from maxfolio.tuner import (
    AllInstances,
    Archive,
    ArchiveEntry,
    Gender,
    Genome,
    Incremental,
    Population,
    TunerSettings,
    TuningError,
    aging_and_death,
    crossover_and_mutate,
    load_checkpoint,
    replenish,
    run_mini_tournaments,
    select_instances,
    tune,
)
from maxfolio.wcnf import ValidationVerdict, VerdictStatus

CAT_PENALTY = {"x": 6, "y": 0, "z": 3}


def convex_space():
    return ParameterSpace(
        (
            ParamDef("a", Integer(0, 30), 25),
            ParamDef("b", Integer(0, 30), 2),
            ParamDef("c", Categorical(("x", "y", "z")), "x"),
        )
    )


class ConvexBox:
    """Deterministic in-process 'solver': bound = base + (a-9)^2 + (b-17)^2 + penalty(c)."""

    def __init__(self, base=100):
        self.base = base
        self.calls = 0
        self.tasks = 0

    def bound(self, values, inst):
        offset = int(inst.split("-")[1])
        return self.base + offset + (values["a"] - 9) ** 2 + (values["b"] - 17) ** 2 + CAT_PENALTY[values["c"]]

    def __call__(self, tasks, deadline=None):
        self.calls += 1
        self.tasks += len(tasks)
        out = []
        for cfg, inst, seed in tasks:
            ub = self.bound(cfg.values, inst)
            out.append(RunRecord(cfg.id, inst, seed, ((0.5, ub + 5), (1.0, ub)), ValidationVerdict(VerdictStatus.VALID, ub), 1.0, ExitStatus.TIMEOUT))
        return out


INSTANCES = [f"inst-{k}" for k in range(4)]
REGISTRY = BoundsRegistry.from_bounds({i: 100 + int(i.split("-")[1]) for i in INSTANCES}, "known")


def settings(**kw):
    base = dict(num_tournaments=3, population_size=30, budget=120.0, rng_seed=1, max_generations=20)
    base.update(kw)
    return TunerSettings(**base)


# -- instance schedule ---------------------------------------------------------------


@pytest.mark.parametrize("j, k", [(1, 20), (13, 60), (25, 100), (40, 100)])
def test_incremental_ramp(j, k):
    insts = [f"i{n}" for n in range(100)]
    assert len(select_instances(insts, j, Incremental(0.2, 25), 3)) == k


def test_all_instances_policy():
    insts = [f"i{n}" for n in range(100)]
    assert select_instances(insts, 7, AllInstances()) == insts


def test_incremental_subsets_form_chain():
    insts = [f"i{n}" for n in range(37)]
    prev = []
    for j in range(1, 30):
        cur = select_instances(insts, j, Incremental(0.1, 20), 5)
        assert cur[: len(prev)] == prev
        assert len(cur) >= max(1, len(prev))
        prev = cur
    assert sorted(prev) == sorted(insts)


# -- mini-tournaments ------------------------------------------------------------------


def _genomes(names):
    return [Genome(default_config(ParameterSpace((ParamDef("n", Categorical(tuple(names)), n),))), Gender.COMPETITIVE) for n in names]


def test_mini_tournament_hand_oracle():
    names = ["a", "b", "c", "d"]
    genomes = _genomes(names)
    cost = {"a": 0.1, "b": 0.3, "c": 0.2, "d": 0.4}
    by_id = {g.config.id: n for g, n in zip(genomes, names)}

    def mean_cost(configs):
        return {c.id: cost[by_id[c.id]] for c in configs}

    for seed in range(6):
        perm = np.random.default_rng(seed).permutation(4)
        groups = [[names[i] for i in perm[g::2]] for g in range(2)]
        expected = sorted((min(grp, key=cost.get) for grp in groups), key=cost.get)
        res = run_mini_tournaments(genomes, 2, mean_cost, np.random.default_rng(seed))
        assert [by_id[w.config.id] for w in res.winners] == expected
        if sorted(map(sorted, groups)) == [["a", "b"], ["c", "d"]]:
            assert expected == ["a", "c"]


def test_mini_tournament_single_group_and_ties():
    genomes = _genomes(["a", "b", "c"])
    costs = {g.config.id: 0.5 for g in genomes}
    res = run_mini_tournaments(genomes, 1, lambda cs: {c.id: costs[c.id] for c in cs}, np.random.default_rng(0))
    assert res.winners[0].config.id == min(costs)
    assert [g.config.id for g in res.groups[0]] == sorted(costs)


def test_mini_tournament_elites_spread_first():
    genomes = _genomes(list("abcdef"))
    res = run_mini_tournaments(genomes, 3, lambda cs: {c.id: 0.0 for c in cs}, np.random.default_rng(0), num_elites=2)
    homes = [next(k for k, grp in enumerate(res.groups) if genomes[e] in grp) for e in range(2)]
    assert homes == [0, 1]
    assert sorted(len(g) for g in res.groups) == [2, 2, 2]


def test_mini_tournament_needs_enough_participants():
    with pytest.raises(ValueError):
        run_mini_tournaments(_genomes(["a"]), 2, lambda cs: {}, np.random.default_rng(0))


# -- variation ---------------------------------------------------------------------


def test_crossover_identity_without_mutation():
    space = convex_space()
    parent = Genome(space.make({"a": 4, "b": 5, "c": "z"}), Gender.COMPETITIVE)
    mate = Genome(space.make({"a": 4, "b": 5, "c": "z"}), Gender.NONCOMPETITIVE)
    kids = crossover_and_mutate([mate], [parent], space, np.random.default_rng(0), 0.0, 3)
    assert kids and all(k.config == parent.config and k.birth_generation == 3 for k in kids)


def test_crossover_single_value_domain_forced():
    space = ParameterSpace((ParamDef("only", Categorical(("a",)), "a"),))
    g = Genome(default_config(space), Gender.COMPETITIVE)
    kids = crossover_and_mutate([g], [g], space, np.random.default_rng(0), 1.0)
    assert all(k.config["only"] == "a" for k in kids)


def test_crossover_takes_parent_values():
    space = convex_space()
    w = Genome(space.make({"a": 1}), Gender.COMPETITIVE)
    m = Genome(space.make({"a": 2}), Gender.NONCOMPETITIVE)
    rng = np.random.default_rng(4)
    values = {k.config["a"] for _ in range(40) for k in crossover_and_mutate([m], [w], space, rng, 0.0)}
    assert values == {1, 2}


def test_crossover_partner_count_and_repair():
    space = ParameterSpace(
        (ParamDef("p", Categorical(("0", "1")), "0"), ParamDef("q", Categorical(("0", "1")), "0")),
        ({"p": "1", "q": "1"},),
    )
    nc = [Genome(space.make({"p": "0", "q": "1"}), Gender.NONCOMPETITIVE) for _ in range(5)]
    winners = [Genome(space.make({"p": "1", "q": "0"}), Gender.COMPETITIVE) for _ in range(2)]
    kids = crossover_and_mutate(nc, winners, space, np.random.default_rng(0), 0.0, 1, 2)
    assert len(kids) == 2 * 3  # ceil(5 / 2) partners per winner
    assert all(space.is_valid(k.config.values) for k in kids)


def test_aging_and_death():
    space = convex_space()
    old = Genome(space.make({"a": 1}), Gender.COMPETITIVE, age=3)
    young = Genome(space.make({"a": 2}), Gender.NONCOMPETITIVE, age=0)
    best = Genome(space.make({"a": 3}), Gender.COMPETITIVE, age=7)
    pop = aging_and_death(best, Population([old, best], [young]), max_age=3)
    assert pop.competitive == [best] and best.age == 8
    assert pop.noncompetitive == [young] and young.age == 1
    refilled = replenish(pop, [], space, 10, np.random.default_rng(0), 4, min_competitive=3)
    assert len(refilled) == 10 and len(refilled.competitive) >= 3


# -- full runs ---------------------------------------------------------------------


def test_one_generation_bookkeeping():
    box = ConvexBox()
    res = tune(convex_space(), INSTANCES, settings(max_generations=1), box, REGISTRY)
    gen1 = res.archive.generation(1)
    assert res.generations == 1
    assert len(gen1) == len(res.archive)
    # competitive genomes plus the default elite
    assert len(gen1) == len({e.config.id for e in gen1})
    assert 15 <= len(gen1) <= 16
    assert len(res.population) == 30


def test_elite_raced_every_generation_and_population_size_kept():
    box = ConvexBox()
    space = convex_space()
    res = tune(space, INSTANCES, settings(max_generations=6), box, REGISTRY)
    d = default_config(space).id
    for j in range(1, 7):
        assert d in {e.config.id for e in res.archive.generation(j)}
    assert len(res.population) == 30


def test_deterministic_archives():
    runs = [tune(convex_space(), INSTANCES, settings(max_generations=8), ConvexBox(), REGISTRY) for _ in range(2)]
    a, b = (r.archive.to_json() for r in runs)
    assert a == b
    assert runs[0].winner == runs[1].winner


def test_converges_on_convex_box():
    res = tune(convex_space(), INSTANCES, settings(max_generations=40, rng_seed=3), ConvexBox(), REGISTRY)
    assert dict(res.winner.values) == {"a": 9, "b": 17, "c": "y"} or res.best_cost < 0.03
    # w1's cost never gets worse from one generation to the next
    best = [min(e.mean_cost for e in res.archive.generation(j)) for j in range(1, res.generations + 1)]
    assert all(x >= y for x, y in zip(best, best[1:]))


def test_cache_avoids_repeat_runs():
    box = ConvexBox()
    res = tune(convex_space(), INSTANCES, settings(max_generations=5), box, REGISTRY)
    distinct = {e.config.id for e in res.archive}
    assert box.tasks == len(distinct) * len(INSTANCES)


def test_archive_one_entry_per_generation():
    arch = Archive()
    cfg = default_config(convex_space())
    arch.add(ArchiveEntry(cfg, 1, 1, 0.0))
    arch.add(ArchiveEntry(cfg, 2, 1, 0.0))
    with pytest.raises(ValueError):
        arch.add(ArchiveEntry(cfg, 2, 3, 0.0))


def test_zero_generations_is_an_error():
    def stalled(tasks, deadline=None):
        return [None] * len(tasks)

    with pytest.raises(TuningError) as err:
        tune(convex_space(), INSTANCES, settings(), stalled, REGISTRY)
    assert len(err.value.archive) == 0


def test_missing_bound_rejected():
    with pytest.raises(ValueError, match="best-known"):
        tune(convex_space(), INSTANCES + ["inst-9"], settings(), ConvexBox(), REGISTRY)


@pytest.mark.parametrize("with_store", [False, True])
def test_checkpoint_resume_matches_straight_run(tmp_path, with_store):
    store = RunStore(tmp_path / "runs") if with_store else None
    ck = tmp_path / "ck.json"
    straight = tune(convex_space(), INSTANCES, settings(max_generations=6), ConvexBox(), REGISTRY)
    tune(convex_space(), INSTANCES, settings(max_generations=3), ConvexBox(), REGISTRY, checkpoint=ck, store=store)
    state, saved = load_checkpoint(ck, store)
    assert state.generation == 3 and saved.max_generations == 3
    resumed = tune(convex_space(), INSTANCES, settings(max_generations=6), ConvexBox(), REGISTRY, resume=state, store=store)
    assert resumed.generations == 6
    assert resumed.archive.to_json() == straight.archive.to_json()
    assert resumed.winner == straight.winner


def test_incremental_policy_grows_subsets():
    insts = [f"inst-{k}" for k in range(10)]
    reg = BoundsRegistry.from_bounds({i: 100 + int(i.split("-")[1]) for i in insts}, "known")
    res = tune(convex_space(), insts, settings(max_generations=6, instance_policy=Incremental(0.2, 5)), ConvexBox(), reg)
    sizes = [len(res.archive.generation(j)[0].evaluations) for j in range(1, 7)]
    assert sizes[0] == 2 and sizes[4] == 10 and sizes[5] == 10
    assert sizes == sorted(sizes)
