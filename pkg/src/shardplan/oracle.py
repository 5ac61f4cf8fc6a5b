"""Deterministic synthetic stand-in for measuring placements on GPUs.

Compute is linear in batch * pooling * dim with a cache multiplier, fused
kernels get a saturating 1x-3x speedup, and the all-to-all stage time is an
affine function of the per-device dimension sum fitted to two measured rows
(4 GPUs, batch 65536: W=256 -> 11.24 ms, W=832 -> 17.65 ms).
"""

from __future__ import annotations

import collections
import hashlib
import json
import math
import struct
import threading
import warnings
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .errors import BadInput, Infeasible, MemoryViolation, TooLarge
from .tablegen import DEFAULT_BATCH_SIZE, TableDesc

PHASES = ("fwd_comp", "fwd_comm", "bwd_comm", "bwd_comp")
BRUTE_FORCE_CAP = 2**20
_MEM_SLACK = 1e-12


@dataclass(frozen=True)
class OracleConfig:
    kappa_f: float = 3.0e-8  # ms per (index * dim)
    c_h: float = 0.05
    c_s: float = 0.3
    bwd_ratio: float = 2.0
    fusion_k0: float = 8.0
    fusion_cap: float = 3.0
    comm_a0: float = 8.39
    comm_a1: float = 0.011128
    jitter_eps: float = 0.0
    jitter_seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict | None) -> "OracleConfig":
        if not d:
            return cls()
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise BadInput(f"unknown oracle config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class PlacementTask:
    tables: list[TableDesc]
    num_devices: int
    mem_cap_gb: float
    batch_size: int = DEFAULT_BATCH_SIZE

    def __post_init__(self):
        if self.num_devices < 1:
            raise BadInput("num_devices must be >= 1")
        if self.mem_cap_gb <= 0:
            raise BadInput("mem_cap_gb must be positive")
        if self.batch_size < 1:
            raise BadInput("batch_size must be positive")
        total = sum(t.table_size_gb for t in self.tables)
        if total > self.num_devices * self.mem_cap_gb:
            warnings.warn(
                f"task needs {total:.3f} GB but only {self.num_devices * self.mem_cap_gb:.3f} GB available",
                stacklevel=2,
            )

    @property
    def num_tables(self) -> int:
        return len(self.tables)

    def to_dict(self) -> dict:
        return {
            "num_devices": self.num_devices,
            "mem_cap_gb": self.mem_cap_gb,
            "batch_size": self.batch_size,
            "tables": [t.to_dict() for t in self.tables],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PlacementTask":
        try:
            return cls(
                tables=[TableDesc.from_dict(t) for t in d["tables"]],
                num_devices=int(d["num_devices"]),
                mem_cap_gb=float(d["mem_cap_gb"]),
                batch_size=int(d.get("batch_size", DEFAULT_BATCH_SIZE)),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise BadInput(f"bad task record: {e}") from e


@dataclass(frozen=True)
class TraceEvent:
    device: int
    phase: str
    start_ms: float
    dur_ms: float

    @property
    def end_ms(self) -> float:
        return self.start_ms + self.dur_ms


@dataclass
class CostBreakdown:
    fwd_ms: np.ndarray
    bwd_ms: np.ndarray
    comm_ms: np.ndarray
    fwd_comm_stage_ms: float
    bwd_comm_stage_ms: float
    overall_ms: float
    events: list[TraceEvent] = field(default_factory=list)
    tables_per_device: np.ndarray | None = None

    @property
    def num_devices(self) -> int:
        return len(self.fwd_ms)

    def cost_features(self) -> np.ndarray:
        """(D, 3) array of (fwd, bwd, bwd-comm) per device.

        A device holding no tables reports (0, 0, 0) even though it still
        takes part in the all-to-all with the base latency.
        """
        q = np.stack([self.fwd_ms, self.bwd_ms, self.comm_ms], axis=1)
        if self.tables_per_device is not None:
            q[np.asarray(self.tables_per_device) == 0] = 0.0
        return q

    def to_dict(self) -> dict:
        return {
            "devices": self.num_devices,
            "overall_ms": self.overall_ms,
            "fwd_ms": [float(x) for x in self.fwd_ms],
            "bwd_ms": [float(x) for x in self.bwd_ms],
            "comm_ms": [float(x) for x in self.comm_ms],
            "fwd_comm_stage_ms": self.fwd_comm_stage_ms,
            "bwd_comm_stage_ms": self.bwd_comm_stage_ms,
            "events": [asdict(e) for e in self.events],
            "tables_per_device": None if self.tables_per_device is None else [int(x) for x in self.tables_per_device],
        }

    def trace_dict(self) -> dict:
        return {
            "devices": self.num_devices,
            "overall_ms": self.overall_ms,
            "events": [asdict(e) for e in self.events],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CostBreakdown":
        try:
            return cls(
                fwd_ms=np.asarray(d["fwd_ms"], dtype=np.float64),
                bwd_ms=np.asarray(d["bwd_ms"], dtype=np.float64),
                comm_ms=np.asarray(d["comm_ms"], dtype=np.float64),
                fwd_comm_stage_ms=float(d["fwd_comm_stage_ms"]),
                bwd_comm_stage_ms=float(d["bwd_comm_stage_ms"]),
                overall_ms=float(d["overall_ms"]),
                events=[TraceEvent(**e) for e in d.get("events", [])],
                tables_per_device=None if d.get("tables_per_device") is None else np.asarray(d["tables_per_device"], dtype=np.int64),
            )
        except (KeyError, TypeError) as e:
            raise BadInput(f"bad breakdown record: {e}") from e


# ---------------------------------------------------------------------------
# Cost primitives (uncounted, pure)


def cache_multiplier(t: TableDesc, cfg: OracleConfig = OracleConfig()) -> float:
    big = 1.0 + cfg.c_h * max(0.0, math.log2(t.hash_size / 2**20))
    return max(big * (1.0 - cfg.c_s * t.hot_mass), 0.25)


def single_table_kernel(t: TableDesc, batch_size: int, cfg: OracleConfig = OracleConfig()) -> tuple[float, float]:
    if batch_size < 1:
        raise BadInput("batch size must be >= 1")
    fwd = cfg.kappa_f * batch_size * t.pooling_factor * t.dim * cache_multiplier(t, cfg)
    return fwd, cfg.bwd_ratio * fwd


def fusion_speedup(k: int, cfg: OracleConfig = OracleConfig()) -> float:
    if k <= 1:
        return 1.0
    return min(cfg.fusion_cap, 1.0 + (cfg.fusion_cap - 1.0) * (1.0 - math.exp(-(k - 1) / cfg.fusion_k0)))


def fused_kernel(tables: Sequence[TableDesc], batch_size: int, cfg: OracleConfig = OracleConfig()) -> tuple[float, float]:
    if not tables:
        return 0.0, 0.0
    fwd = math.fsum(single_table_kernel(t, batch_size, cfg)[0] for t in tables)
    fwd /= fusion_speedup(len(tables), cfg)
    return fwd, cfg.bwd_ratio * fwd


def device_comm(dim_sum: int, num_devices: int, batch_size: int, cfg: OracleConfig = OracleConfig()) -> float:
    if dim_sum < 0:
        raise BadInput("dimension sum must be >= 0")
    spread = ((num_devices - 1) / num_devices) / 0.75
    return (batch_size / 65536.0) * (cfg.comm_a0 + cfg.comm_a1 * dim_sum * spread)


def _assignment_from_placement(placement: Sequence[int], num_devices: int) -> list[list[int]]:
    sets: list[list[int]] = [[] for _ in range(num_devices)]
    for i, d in enumerate(placement):
        sets[int(d)].append(i)
    return sets


def _jitter(task: PlacementTask, sets: Sequence[Sequence[int]], cfg: OracleConfig) -> float:
    if cfg.jitter_eps == 0.0:
        return 1.0
    h = hashlib.blake2b(digest_size=8)
    h.update(struct.pack("<qqq", cfg.jitter_seed, task.num_devices, task.batch_size))
    for t in task.tables:
        h.update(struct.pack("<qqdd", t.dim, t.hash_size, t.pooling_factor, t.hot_mass))
    for d, s in enumerate(sets):
        h.update(struct.pack("<q", -1 - d))
        h.update(np.asarray(sorted(s), dtype="<i8").tobytes())
    u = int.from_bytes(h.digest(), "little") / 2.0**64
    return 1.0 - cfg.jitter_eps + 2.0 * cfg.jitter_eps * u


class CostOracle:
    """Counted evaluation front-end; every measurement bumps ``calls``."""

    def __init__(self, config: OracleConfig | None = None):
        self.config = config or OracleConfig()
        self.calls: collections.Counter = collections.Counter()
        self._lock = threading.Lock()

    @property
    def total_calls(self) -> int:
        return sum(self.calls.values())

    def _count(self, kind: str, n: int = 1) -> None:
        with self._lock:
            self.calls[kind] += n

    # thin aliases so callers need only the oracle object
    def single_table_kernel(self, t: TableDesc, batch_size: int) -> tuple[float, float]:
        return single_table_kernel(t, batch_size, self.config)

    def fused_kernel(self, tables: Sequence[TableDesc], batch_size: int) -> tuple[float, float]:
        return fused_kernel(tables, batch_size, self.config)

    def device_comm(self, dim_sum: int, num_devices: int, batch_size: int) -> float:
        return device_comm(dim_sum, num_devices, batch_size, self.config)

    def _check_memory(self, task: PlacementTask, sets: Sequence[Sequence[int]]) -> None:
        used = [math.fsum(task.tables[i].table_size_gb for i in s) for s in sets]
        bad = [d for d, u in enumerate(used) if u > task.mem_cap_gb * (1 + _MEM_SLACK)]
        if bad:
            raise MemoryViolation(bad, [used[d] for d in bad], task.mem_cap_gb)

    def _evaluate(self, task: PlacementTask, sets: Sequence[Sequence[int]]) -> CostBreakdown:
        cfg = self.config
        D, B = task.num_devices, task.batch_size
        if len(sets) != D:
            raise BadInput(f"assignment has {len(sets)} devices, task has {D}")
        self._check_memory(task, sets)
        fwd = np.zeros(D)
        bwd = np.zeros(D)
        comm = np.zeros(D)
        for d, s in enumerate(sets):
            tabs = [task.tables[i] for i in sorted(s)]
            fwd[d], bwd[d] = fused_kernel(tabs, B, cfg)
            comm[d] = device_comm(sum(t.dim for t in tabs), D, B, cfg)
        j = _jitter(task, sets, cfg)
        if j != 1.0:
            fwd, bwd, comm = fwd * j, bwd * j, comm * j
        stage = float(comm.max())
        fmax, bmax = float(fwd.max()), float(bwd.max())
        overall = fmax + stage + stage + bmax
        events = []
        for d in range(D):
            events.append(TraceEvent(d, "fwd_comp", 0.0, float(fwd[d])))
            events.append(TraceEvent(d, "fwd_comm", fmax, float(comm[d])))
            events.append(TraceEvent(d, "bwd_comm", fmax + stage, float(comm[d])))
            events.append(TraceEvent(d, "bwd_comp", fmax + stage + stage, float(bwd[d])))
        counts = np.array([len(s) for s in sets], dtype=np.int64)
        return CostBreakdown(fwd, bwd, comm, stage, stage, overall, events, counts)

    def evaluate_placement(self, task: PlacementTask, placement: Sequence[int]) -> CostBreakdown:
        placement = np.asarray(placement, dtype=np.int64)
        if placement.shape != (task.num_tables,):
            raise BadInput(f"placement length {placement.size} != table count {task.num_tables}")
        if task.num_tables and (placement.min() < 0 or placement.max() >= task.num_devices):
            raise BadInput("placement entries must be device ids in [0, D)")
        self._count("evaluate_placement")
        return self._evaluate(task, _assignment_from_placement(placement, task.num_devices))

    def evaluate_assignment(self, task: PlacementTask, sets: Sequence[Sequence[int]]) -> CostBreakdown:
        """Evaluate a partial assignment (only the listed tables are run)."""
        self._count("evaluate_assignment")
        return self._evaluate(task, sets)

    def partial_cost_features(self, task: PlacementTask, sets: Sequence[Sequence[int]]) -> np.ndarray:
        self._count("partial_cost_features")
        return self._evaluate(task, sets).cost_features()

    def brute_force_optimum(self, task: PlacementTask, cap: int = BRUTE_FORCE_CAP) -> tuple[np.ndarray, float]:
        """Exact minimum over all memory-legal placements.

        Ties go to the lexicographically smallest placement.
        """
        M, D = task.num_tables, task.num_devices
        total = D**M
        if total > cap:
            raise TooLarge(f"{D}^{M} = {total} placements exceeds cap {cap}")
        self._count("brute_force", total)
        if M == 0:
            return np.zeros(0, dtype=np.int64), self._evaluate(task, [[] for _ in range(D)]).overall_ms
        if self.config.jitter_eps != 0.0:
            return self._brute_force_exact(task, total)
        return self._brute_force_vectorized(task, total)

    def _brute_force_exact(self, task, total):
        best, best_cost = None, math.inf
        for code in range(total):
            a = _digits(np.array([code]), task.num_tables, task.num_devices)[0]
            try:
                c = self._evaluate(task, _assignment_from_placement(a, task.num_devices)).overall_ms
            except MemoryViolation:
                continue
            if c < best_cost:
                best, best_cost = a, c
        if best is None:
            raise Infeasible("no memory-legal placement exists")
        return best, best_cost

    def _brute_force_vectorized(self, task, total, chunk: int = 1 << 15):
        cfg = self.config
        M, D, B = task.num_tables, task.num_devices, task.batch_size
        f = np.array([single_table_kernel(t, B, cfg)[0] for t in task.tables])
        dims = np.array([t.dim for t in task.tables], dtype=np.float64)
        mem = np.array([t.table_size_gb for t in task.tables])
        speed = np.array([fusion_speedup(k, cfg) for k in range(M + 1)])
        spread = ((D - 1) / D) / 0.75
        scale = B / 65536.0
        best_val, cand_codes, cand_vals = math.inf, [], []
        for start in range(0, total, chunk):
            codes = np.arange(start, min(total, start + chunk))
            A = _digits(codes, M, D)
            fmax = np.zeros(len(codes))
            cmax = np.zeros(len(codes))
            legal = np.ones(len(codes), dtype=bool)
            for d in range(D):
                m = (A == d).astype(np.float64)
                cnt = m.sum(axis=1).astype(np.int64)
                fmax = np.maximum(fmax, (m @ f) / speed[cnt])
                cmax = np.maximum(cmax, scale * (cfg.comm_a0 + cfg.comm_a1 * (m @ dims) * spread))
                legal &= (m @ mem) <= task.mem_cap_gb * (1 + _MEM_SLACK)
            val = np.where(legal, fmax * (1 + cfg.bwd_ratio) + 2 * cmax, np.inf)
            best_val = min(best_val, float(val.min()))
            keep = val <= best_val * (1 + 1e-9)
            cand_codes.append(codes[keep])
            cand_vals.append(val[keep])
        if not math.isfinite(best_val):
            raise Infeasible("no memory-legal placement exists")
        codes = np.concatenate(cand_codes)
        vals = np.concatenate(cand_vals)
        best, best_cost = None, math.inf
        for code in codes[vals <= best_val * (1 + 1e-9)]:
            a = _digits(np.array([code]), M, D)[0]
            c = self._evaluate(task, _assignment_from_placement(a, D)).overall_ms
            if c < best_cost:
                best, best_cost = a, c
        return best, best_cost


def _digits(codes: np.ndarray, M: int, D: int) -> np.ndarray:
    """Base-D digits, first table most significant (so code order is lexicographic)."""
    powers = D ** np.arange(M - 1, -1, -1, dtype=np.int64)
    return (codes[:, None] // powers[None, :]) % D


def breakdown_json(b: CostBreakdown) -> str:
    return json.dumps(b.to_dict(), sort_keys=True)
