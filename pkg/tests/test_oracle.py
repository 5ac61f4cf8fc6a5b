import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shardplan.errors import BadInput, Infeasible, MemoryViolation, TooLarge
from shardplan.oracle import (
    CostBreakdown,
    CostOracle,
    OracleConfig,
    PlacementTask,
    cache_multiplier,
    device_comm,
    fused_kernel,
    fusion_speedup,
    single_table_kernel,
)
from shardplan.tablegen import TableDesc

from conftest import make_table, onehot, random_task

B = 65536


def test_comm_anchor_points():
    # 4 devices, batch 65536: a balanced 256-dim shard and the 832-dim straggler
    assert device_comm(256, 4, B) == pytest.approx(11.24, abs=0.02)
    assert device_comm(832, 4, B) == pytest.approx(17.65, abs=0.02)
    assert device_comm(256, 4, B) == pytest.approx(8.39 + 0.011128 * 256, rel=1e-12)
    assert device_comm(0, 4, B) == 8.39
    assert device_comm(0, 4, B // 2) == 8.39 / 2


def test_comm_spread_factor():
    # (D-1)/D normalized to the 4-device measurement
    assert device_comm(300, 2, B) == pytest.approx(8.39 + 0.011128 * 300 * (0.5 / 0.75))
    with pytest.raises(BadInput):
        device_comm(-1, 4, B)


def test_fusion_speedup_values():
    assert fusion_speedup(0) == 1.0 and fusion_speedup(1) == 1.0
    assert fusion_speedup(10) == pytest.approx(2.350696, abs=1e-6)
    assert fusion_speedup(10) == pytest.approx(1 + 2 * (1 - math.exp(-9 / 8)), rel=1e-15)
    assert fusion_speedup(10**6) == pytest.approx(3.0)


def test_fusion_speedup_bounded_and_monotone():
    s = [fusion_speedup(k) for k in range(0, 201)]
    assert all(1.0 <= x <= 3.0 for x in s)
    assert all(a <= b for a, b in zip(s, s[1:]))


def test_single_table_kernel_formula():
    t = make_table(dim=16, hash_size=2**22, pf=10.0, dist=onehot(0))
    fwd, bwd = single_table_kernel(t, B)
    cache = 1 + 0.05 * 2  # log2(2^22 / 2^20) = 2, no hot mass
    assert fwd == pytest.approx(3.0e-8 * B * 10 * 16 * cache, rel=1e-12)
    assert bwd == 2 * fwd


def test_single_table_kernel_zero_pooling():
    assert single_table_kernel(make_table(pf=0.0), B) == (0.0, 0.0)


def test_double_dim_doubles_fwd():
    a = single_table_kernel(make_table(dim=8), B)[0]
    b = single_table_kernel(make_table(dim=16), B)[0]
    assert b == pytest.approx(2 * a, rel=1e-15)


def test_hot_tables_are_cheaper():
    cold = make_table(dist=onehot(0))
    hot = make_table(dist=onehot(10))
    assert cache_multiplier(hot) == pytest.approx(0.7)
    ratio = single_table_kernel(hot, B)[0] / single_table_kernel(cold, B)[0]
    assert ratio == pytest.approx(0.7) and ratio <= 1
    # hot mass counts bins whose lower edge is >= 8
    assert make_table(dist=onehot(3)).hot_mass == 0.0 and make_table(dist=onehot(4)).hot_mass == 1.0


def test_cache_multiplier_floor():
    cfg = OracleConfig(c_s=0.9)
    assert cache_multiplier(make_table(dist=onehot(8)), cfg) == 0.25


def test_fused_kernel_cases():
    t = make_table()
    assert fused_kernel([], B) == (0.0, 0.0)
    assert fused_kernel([t], B) == single_table_kernel(t, B)
    f10 = fused_kernel([t] * 10, B)[0]
    assert f10 == pytest.approx(10 * single_table_kernel(t, B)[0] / 2.350696, rel=1e-6)


@settings(max_examples=60)
@given(st.integers(0, 2**32 - 1), st.integers(0, 40))
def test_fusion_bound_property(seed, k):
    rng = np.random.default_rng(seed)
    tables = random_task(rng, k, 1).tables
    fused = fused_kernel(tables, B)[0]
    single = math.fsum(single_table_kernel(t, B)[0] for t in tables)
    assert fused <= single * (1 + 1e-12)
    assert fused >= single / 3 * (1 - 1e-12)


def _task(tables, D=2, cap=16.0):
    return PlacementTask(list(tables), D, cap)


def test_all_on_one_device(oracle):
    tables = [make_table(i, dim=16 * (i + 1), pf=5.0 + i) for i in range(4)]
    task = _task(tables)
    b = oracle.evaluate_placement(task, [0, 0, 0, 0])
    fwd_all, bwd_all = fused_kernel(tables, B)
    comm_all = device_comm(sum(t.dim for t in tables), 2, B)
    assert b.overall_ms == pytest.approx(fwd_all + 2 * comm_all + bwd_all, rel=1e-12)
    assert b.fwd_ms[1] == 0.0 and b.bwd_ms[1] == 0.0
    assert b.comm_ms[1] == device_comm(0, 2, B)


def test_zero_tables(oracle):
    b = oracle.evaluate_placement(_task([], D=3), [])
    assert b.overall_ms == 2 * 8.39


def test_breakdown_structure(oracle):
    rng = np.random.default_rng(0)
    task = random_task(rng, 10, 4)
    p = rng.integers(0, 4, 10)
    b = oracle.evaluate_placement(task, p)
    fmax, stage = b.fwd_ms.max(), b.comm_ms.max()
    assert b.fwd_comm_stage_ms == b.bwd_comm_stage_ms == stage
    assert b.overall_ms == pytest.approx(fmax + 2 * stage + b.bwd_ms.max())
    assert max(e.end_ms for e in b.events) == pytest.approx(b.overall_ms, rel=1e-12)
    for e in b.events:
        if e.phase == "fwd_comp":
            assert e.start_ms == 0.0
        elif e.phase == "fwd_comm":
            assert e.start_ms == fmax
    again = CostBreakdown.from_dict(json.loads(json.dumps(b.to_dict())))
    assert again.overall_ms == b.overall_ms and again.events == b.events


def test_partial_features(oracle):
    tables = [make_table(i) for i in range(3)]
    task = _task(tables)
    assert np.all(oracle.partial_cost_features(task, [[], []]) == 0)
    q = oracle.partial_cost_features(task, [[0], []])
    f, b = single_table_kernel(tables[0], B)
    assert tuple(q[0]) == (f, b, device_comm(16, 2, B))
    assert tuple(q[1]) == (0.0, 0.0, 0.0)
    # the empty device still pays the all-to-all base latency in the stage time
    bd = oracle.evaluate_assignment(task, [[], []])
    assert bd.comm_ms[0] == device_comm(0, 2, B) and bd.overall_ms == 2 * 8.39


def test_memory_violation(oracle):
    big = TableDesc.make(0, 64, 10**8, 1.0)  # ~11.9 GB
    task = _task([big, big.with_id(1)], cap=16.0)
    with pytest.raises(MemoryViolation) as ei:
        oracle.evaluate_placement(task, [1, 1])
    assert ei.value.devices == [1]
    oracle.evaluate_placement(task, [0, 1])


def test_bad_placement_shape(oracle):
    task = _task([make_table(0)])
    with pytest.raises(BadInput):
        oracle.evaluate_placement(task, [0, 1])
    with pytest.raises(BadInput):
        oracle.evaluate_placement(task, [2])


def test_call_counter(oracle):
    task = _task([make_table(0)])
    oracle.evaluate_placement(task, [0])
    oracle.evaluate_assignment(task, [[0], []])
    oracle.partial_cost_features(task, [[0], []])
    assert oracle.total_calls == 3
    oracle.brute_force_optimum(task)
    assert oracle.calls["brute_force"] == 2


def test_monotone_in_pf_and_dim():
    rng = np.random.default_rng(7)
    oracle = CostOracle()
    for _ in range(300):
        M, D = int(rng.integers(1, 9)), int(rng.integers(1, 5))
        task = random_task(rng, M, D, cap=1e6)
        p = rng.integers(0, D, M)
        base = oracle.evaluate_placement(task, p).overall_ms
        i = int(rng.integers(M))
        t = task.tables[i]
        for bumped in (
            TableDesc.make(t.id, t.dim, t.hash_size, t.pooling_factor * rng.uniform(1, 3) + 0.1, t.dist),
            TableDesc.make(t.id, t.dim + int(rng.integers(1, 64)), t.hash_size, t.pooling_factor, t.dist),
        ):
            tables = list(task.tables)
            tables[i] = bumped
            assert oracle.evaluate_placement(PlacementTask(tables, D, 1e6), p).overall_ms >= base


# --- brute force ----------------------------------------------------------


def _reference_optimum(oracle, task):
    best, best_c = None, math.inf
    for p in itertools.product(range(task.num_devices), repeat=task.num_tables):
        try:
            c = oracle.evaluate_placement(task, p).overall_ms
        except MemoryViolation:
            continue
        if c < best_c:
            best, best_c = list(p), c
    return best, best_c


@pytest.mark.parametrize("seed", range(5))
def test_brute_force_matches_enumeration(seed):
    rng = np.random.default_rng(seed)
    task = random_task(rng, 8, 2)
    oracle = CostOracle()
    p, c = oracle.brute_force_optimum(task)
    rp, rc = _reference_optimum(CostOracle(), task)
    assert list(p) == rp and c == rc


def test_brute_force_three_devices_with_memory():
    rng = np.random.default_rng(42)
    task = random_task(rng, 6, 3)
    caps = sorted(t.table_size_gb for t in task.tables)
    task = PlacementTask(task.tables, 3, caps[-1] + caps[-2] * 0.5)
    p, c = CostOracle().brute_force_optimum(task)
    rp, rc = _reference_optimum(CostOracle(), task)
    assert list(p) == rp and c == rc


def test_brute_force_single_table():
    p, _ = CostOracle().brute_force_optimum(_task([make_table(0)], D=3))
    assert list(p) == [0]


def test_brute_force_splits_identical_heavy_tables():
    t = make_table(0, dim=64, pf=50.0)
    p, c = CostOracle().brute_force_optimum(_task([t, t.with_id(1)]))
    assert list(p) == [0, 1]
    together = CostOracle().evaluate_placement(_task([t, t.with_id(1)]), [0, 0]).overall_ms
    assert c < together


def test_brute_force_limits():
    task = _task([make_table(i) for i in range(21)])
    with pytest.raises(TooLarge):
        CostOracle().brute_force_optimum(task)
    big = TableDesc.make(0, 64, 10**8, 1.0)
    with pytest.warns(UserWarning):
        task = PlacementTask([big, big.with_id(1), big.with_id(2)], 2, 16.0)
    with pytest.raises(Infeasible):
        CostOracle().brute_force_optimum(task)


def test_brute_force_with_jitter_uses_exact_path():
    rng = np.random.default_rng(3)
    task = random_task(rng, 5, 2)
    oracle = CostOracle(OracleConfig(jitter_eps=0.05, jitter_seed=9))
    p, c = oracle.brute_force_optimum(task)
    rp, rc = _reference_optimum(oracle, task)
    assert list(p) == rp and c == rc


def test_comm_stage_minimized_by_dim_balance():
    rng = np.random.default_rng(5)
    oracle = CostOracle()
    for _ in range(5):
        task = random_task(rng, 8, 2)
        dims = np.array([t.dim for t in task.tables])
        rows = []
        for p in itertools.product(range(2), repeat=8):
            p = np.array(p)
            worst = max(dims[p == 0].sum(), dims[p == 1].sum())
            rows.append((worst, oracle.evaluate_placement(task, p).bwd_comm_stage_ms))
        best_dim = min(r[0] for r in rows)
        best_stage = min(r[1] for r in rows)
        assert {r[1] for r in rows if r[0] == best_dim} == {best_stage}


def test_jitter_is_deterministic_and_bounded():
    rng = np.random.default_rng(1)
    task = random_task(rng, 6, 2)
    base = CostOracle().evaluate_placement(task, [0, 1, 0, 1, 0, 1]).overall_ms
    o1 = CostOracle(OracleConfig(jitter_eps=0.1))
    a = o1.evaluate_placement(task, [0, 1, 0, 1, 0, 1]).overall_ms
    assert a == o1.evaluate_placement(task, [0, 1, 0, 1, 0, 1]).overall_ms
    assert 0.9 * base <= a <= 1.1 * base


def test_oracle_config_round_trip():
    cfg = OracleConfig(kappa_f=1e-8, jitter_eps=0.01)
    assert OracleConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
    with pytest.raises(BadInput):
        OracleConfig.from_dict({"kappa": 1})


def test_task_round_trip_and_warning():
    t = make_table(0)
    task = PlacementTask([t], 2, 4.0)
    assert PlacementTask.from_dict(json.loads(json.dumps(task.to_dict()))).to_dict() == task.to_dict()
    with pytest.warns(UserWarning):
        PlacementTask([TableDesc.make(0, 64, 10**8, 1.0)], 1, 1.0)
    with pytest.raises(BadInput):
        PlacementTask([t], 0, 1.0)
