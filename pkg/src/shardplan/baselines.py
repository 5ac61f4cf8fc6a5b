"""Random placement and greedy expert heuristics."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import BadInput, Infeasible
from .oracle import PlacementTask
from .tablegen import TableDesc

EXPERT_NAMES = ("size", "dim", "lookup", "size-lookup")
STRATEGY_NAMES = ("random",) + EXPERT_NAMES + ("dreamshard", "bruteforce")

_MEM_SLACK = 1e-12


def expert_cost(name: str, table: TableDesc) -> float:
    if name == "size":
        return table.table_size_gb
    if name == "dim":
        return float(table.dim)
    if name == "lookup":
        return table.dim * table.pooling_factor
    if name == "size-lookup":
        return table.dim * table.pooling_factor * table.table_size_gb
    raise BadInput(f"unknown expert cost {name!r}; choose from {EXPERT_NAMES}")


def random_placement(task: PlacementTask, rng: np.random.Generator) -> np.ndarray:
    """Each table, in id order, goes to a uniformly chosen device that still fits it."""
    used = np.zeros(task.num_devices)
    out = np.empty(task.num_tables, dtype=np.int64)
    cap = task.mem_cap_gb * (1 + _MEM_SLACK)
    for i, t in enumerate(task.tables):
        legal = np.flatnonzero(used + t.table_size_gb <= cap)
        if legal.size == 0:
            raise Infeasible(f"table {i} fits on no device")
        d = int(legal[rng.integers(legal.size)])
        out[i] = d
        used[d] += t.table_size_gb
    return out


def greedy_placement(task: PlacementTask, cost_fn: Callable[[TableDesc], float] | str) -> np.ndarray:
    """Largest cost first onto the legal device with the smallest running cost sum."""
    if isinstance(cost_fn, str):
        name = cost_fn
        cost_fn = lambda t: expert_cost(name, t)  # noqa: E731
    costs = [float(cost_fn(t)) for t in task.tables]
    sizes = [t.table_size_gb for t in task.tables]
    return greedy_from_costs(costs, task.num_devices, sizes, task.mem_cap_gb)[0]


def greedy_from_costs(costs, num_devices: int, sizes=None, mem_cap: float = np.inf) -> tuple[np.ndarray, np.ndarray]:
    """Same rule on raw numbers; returns (placement, final cost sums)."""
    costs = [float(c) for c in costs]
    sizes = [0.0] * len(costs) if sizes is None else [float(s) for s in sizes]
    order = sorted(range(len(costs)), key=lambda i: (-costs[i], i))
    loads = np.zeros(num_devices)
    used = np.zeros(num_devices)
    out = np.empty(len(costs), dtype=np.int64)
    for i in order:
        legal = used + sizes[i] <= mem_cap * (1 + _MEM_SLACK)
        if not legal.any():
            raise Infeasible(f"item {i} fits on no device")
        d = int(np.argmin(np.where(legal, loads, np.inf)))
        out[i] = d
        loads[d] += costs[i]
        used[d] += sizes[i]
    return out, loads
