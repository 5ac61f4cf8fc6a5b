import warnings
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shardplan.baselines import expert_cost, greedy_from_costs, greedy_placement, random_placement
from shardplan.errors import BadInput, Infeasible
from shardplan.oracle import PlacementTask

from conftest import make_table, random_task


def test_greedy_hand_trace():
    p, loads = greedy_from_costs([4, 3, 2, 1], 2)
    assert p.tolist() == [0, 1, 1, 0]
    assert loads.tolist() == [5.0, 5.0]


def test_greedy_equal_costs_spread_one_per_device():
    p, _ = greedy_from_costs([1.0] * 5, 5)
    assert sorted(p.tolist()) == [0, 1, 2, 3, 4]
    # ties in cost keep id order, ties in load go to the lowest device
    assert p.tolist() == [0, 1, 2, 3, 4]


def test_greedy_single_device():
    p, loads = greedy_from_costs([3, 1, 2], 1)
    assert p.tolist() == [0, 0, 0] and loads.tolist() == [6.0]


def test_greedy_respects_memory():
    # the big-cost table fills device 0, so the rest must go elsewhere
    p, _ = greedy_from_costs([10, 1, 1], 2, sizes=[1.0, 0.5, 0.5], mem_cap=1.0)
    assert p.tolist() == [0, 1, 1]
    with pytest.raises(Infeasible):
        greedy_from_costs([1, 1, 1], 2, sizes=[1.0, 1.0, 1.0], mem_cap=1.0)


def test_expert_costs():
    t = SimpleNamespace(dim=16, pooling_factor=15.0, table_size_gb=0.03)
    assert expert_cost("dim", t) == 16
    assert expert_cost("size", t) == 0.03
    assert expert_cost("lookup", t) == 240.0
    assert expert_cost("size-lookup", t) == pytest.approx(7.2)
    assert expert_cost("lookup", SimpleNamespace(dim=16, pooling_factor=0.0, table_size_gb=0.03)) == 0.0
    with pytest.raises(BadInput):
        expert_cost("nope", t)


def test_size_order_matches_hash_times_dim():
    rng = np.random.default_rng(0)
    task = random_task(rng, 30, 4)
    by_size = sorted(range(30), key=lambda i: expert_cost("size", task.tables[i]))
    by_hd = sorted(range(30), key=lambda i: task.tables[i].hash_size * task.tables[i].dim)
    assert by_size == by_hd


def test_greedy_placement_by_name_matches_callable():
    task = random_task(np.random.default_rng(1), 20, 3)
    a = greedy_placement(task, "lookup")
    b = greedy_placement(task, lambda t: t.dim * t.pooling_factor)
    assert a.tolist() == b.tolist()


def test_random_placement_seeded_legal_and_uniform():
    task = PlacementTask([make_table(i) for i in range(4)], 4, 16.0)
    a = random_placement(task, np.random.default_rng(3))
    b = random_placement(task, np.random.default_rng(3))
    assert a.tolist() == b.tolist()
    rng = np.random.default_rng(0)
    counts = np.zeros(4)
    for _ in range(1000):
        counts += np.bincount(random_placement(task, rng), minlength=4)
    # 4000 draws, each device expected 1000 with sd ~27
    assert np.all(np.abs(counts - 1000) < 5 * np.sqrt(4000 * 0.25 * 0.75))


def test_random_placement_memory_and_infeasible():
    t = [make_table(i, dim=64, hash_size=2**23) for i in range(3)]  # 1 GB each in fp16
    task = PlacementTask(t, 3, 1.0)
    for s in range(20):
        assert sorted(random_placement(task, np.random.default_rng(s)).tolist()) == [0, 1, 2]
    with pytest.warns(UserWarning):
        bad = PlacementTask(t, 2, 1.0)
    with pytest.raises(Infeasible):
        random_placement(bad, np.random.default_rng(0))


def _check_legal(task, p):
    used = np.zeros(task.num_devices)
    for i, d in enumerate(p):
        used[d] += task.tables[i].table_size_gb
    assert np.all(used <= task.mem_cap_gb * (1 + 1e-9))


@settings(max_examples=200, deadline=None)
@given(
    seed=st.integers(0, 2**32 - 1),
    M=st.integers(1, 25),
    D=st.integers(1, 6),
    frac=st.floats(0.05, 1.0),
    name=st.sampled_from(["size", "dim", "lookup", "size-lookup"]),
)
def test_greedy_memory_legal_property(seed, M, D, frac, name):
    rng = np.random.default_rng(seed)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        task = random_task(rng, M, D, cap=1.0)
        sizes = [t.table_size_gb for t in task.tables]
        task = PlacementTask(task.tables, D, max(max(sizes), frac * sum(sizes)))
    try:
        p = greedy_placement(task, name)
    except Infeasible:
        return
    assert p.shape == (M,) and p.min() >= 0 and p.max() < D
    _check_legal(task, p)


@settings(max_examples=200, deadline=None)
@given(
    vals=st.lists(st.integers(1, 1000), min_size=1, max_size=8),
    D=st.integers(1, 6),
)
def test_greedy_balances_replicated_costs(vals, D):
    # D copies of each value always split perfectly
    costs = [v for v in vals for _ in range(D)]
    p, loads = greedy_from_costs(costs, D)
    assert np.all(loads == loads[0])
    assert loads.sum() == sum(costs)
    assert np.all(np.bincount(p, minlength=D) == len(vals))
