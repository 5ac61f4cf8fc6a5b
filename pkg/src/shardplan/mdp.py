"""Table-by-table placement environment.

The same environment runs against the oracle (real costs) or against a
cost network (estimated costs); only the provider differs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from .costnet import CostNet
from .errors import BadInput, IllegalAction, Infeasible
from .oracle import CostOracle, PlacementTask
from .tablegen import NUM_FEATURES

_MEM_SLACK = 1e-12


class CostProvider(Protocol):
    def cost_features(self, sets: Sequence[Sequence[int]]) -> np.ndarray: ...

    def overall(self, placement: np.ndarray) -> float: ...


class OracleProvider:
    """Measured costs; every call is counted by the oracle."""

    def __init__(self, oracle: CostOracle, task: PlacementTask):
        self.oracle = oracle
        self.task = task

    def cost_features(self, sets):
        return self.oracle.partial_cost_features(self.task, sets)

    def overall(self, placement):
        return self.oracle.evaluate_placement(self.task, placement).overall_ms


class EstimatedProvider:
    """Cost-network predictions; table representations are cached per task.

    State features are clamped at 0, the final cost is left unclamped so the
    reward keeps its ranking even while the network is still poor.
    """

    def __init__(self, net: CostNet, feats: np.ndarray, num_devices: int):
        self.net = net
        self.num_devices = num_devices
        self.z = net.encode_tables(feats) if len(feats) else np.zeros((0, 32))

    def cost_features(self, sets):
        return np.maximum(self.net.heads(self.net.device_repr(self.z, sets)), 0.0)

    def overall(self, placement):
        return self.overall_sets(_sets_from_placement(placement, self.num_devices))

    def overall_sets(self, sets):
        return self.net.overall_from_devices(self.net.device_repr(self.z, sets))


def _sets_from_placement(placement, num_devices):
    sets = [[] for _ in range(num_devices)]
    for i, d in enumerate(placement):
        sets[int(d)].append(i)
    return sets


@dataclass
class EnvState:
    order: tuple[int, ...]
    t: int
    sets: list[list[int]]
    mem_used: np.ndarray


@dataclass
class AugmentedState:
    device_tables: tuple[tuple[int, ...], ...]
    q: np.ndarray  # (D, 3)
    next_table: int | None
    next_features: np.ndarray | None
    t: int


class PlacementEnv:
    def __init__(self, task: PlacementTask, provider: CostProvider, feats: np.ndarray | None = None):
        self.task = task
        self.provider = provider
        self.feats = feats if feats is not None else np.zeros((task.num_tables, NUM_FEATURES))
        self._mem = np.array([t.table_size_gb for t in task.tables])
        self.state: EnvState | None = None
        self._q = np.zeros((task.num_devices, 3))
        self.actions: list[int] = []
        self.rewards: list[float] = []

    @property
    def num_devices(self) -> int:
        return self.task.num_devices

    def reset(self, order: Sequence[int]) -> AugmentedState:
        M = self.task.num_tables
        order = tuple(int(i) for i in order)
        if sorted(order) != list(range(M)):
            raise BadInput("order must be a permutation of the table indices")
        self.state = EnvState(order, 0, [[] for _ in range(self.num_devices)], np.zeros(self.num_devices))
        self._q = np.zeros((self.num_devices, 3))
        self.actions, self.rewards = [], []
        return self.observe()

    def observe(self) -> AugmentedState:
        s = self._require_state()
        nxt = s.order[s.t] if s.t < len(s.order) else None
        return AugmentedState(
            device_tables=tuple(tuple(x) for x in s.sets),
            q=self._q.copy(),
            next_table=nxt,
            next_features=None if nxt is None else self.feats[nxt],
            t=s.t,
        )

    def _require_state(self) -> EnvState:
        if self.state is None:
            raise RuntimeError("call reset() first")
        return self.state

    @property
    def done(self) -> bool:
        s = self._require_state()
        return s.t >= len(s.order)

    def legal_mask(self) -> np.ndarray:
        s = self._require_state()
        if self.done:
            raise BadInput("episode already finished")
        need = self._mem[s.order[s.t]]
        mask = s.mem_used + need <= self.task.mem_cap_gb * (1 + _MEM_SLACK)
        if not mask.any():
            raise Infeasible(f"table {s.order[s.t]} ({need:.4f} GB) fits on no device")
        return mask

    def legal_actions(self) -> np.ndarray:
        return np.flatnonzero(self.legal_mask())

    def step(self, action: int) -> tuple[AugmentedState, float, bool]:
        s = self._require_state()
        mask = self.legal_mask()
        action = int(action)
        if not (0 <= action < self.num_devices) or not mask[action]:
            raise IllegalAction(f"device {action} is not legal at step {s.t}")
        i = s.order[s.t]
        s.sets[action].append(i)
        s.mem_used[action] += self._mem[i]
        s.t += 1
        self.actions.append(action)
        self._q = np.asarray(self.provider.cost_features(s.sets), dtype=np.float64)
        done = self.done
        reward = -float(self.provider.overall(self.placement())) if done else 0.0
        self.rewards.append(reward)
        return self.observe(), reward, done

    def placement(self) -> np.ndarray:
        """Device per table, in table-index order (-1 for unplaced)."""
        s = self._require_state()
        a = np.full(self.task.num_tables, -1, dtype=np.int64)
        for d, tabs in enumerate(s.sets):
            a[tabs] = d
        return a

    def episode_record(self, task_ref=None) -> dict:
        s = self._require_state()
        return {
            "task_ref": task_ref,
            "order": list(s.order),
            "actions": list(self.actions),
            "rewards": list(self.rewards),
            "overall_ms": -self.rewards[-1] if self.done and self.rewards else None,
        }


def episode_json(env: PlacementEnv, task_ref=None) -> str:
    return json.dumps(env.episode_record(task_ref), sort_keys=True)


def replay(task: PlacementTask, provider: CostProvider, order: Sequence[int], actions: Sequence[int], feats=None) -> PlacementEnv:
    env = PlacementEnv(task, provider, feats)
    env.reset(order)
    for a in actions:
        env.step(a)
    return env
