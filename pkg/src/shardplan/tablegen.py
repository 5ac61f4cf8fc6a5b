"""Embedding table descriptors, their 21-dim feature vectors, synthetic pools
and lookup-batch ingestion."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import BadInput, BadSpec, MalformedBatch

NUM_BINS = 17
NUM_FEATURES = 4 + NUM_BINS
FEATURE_NAMES = ("dim", "hash_size", "pooling_factor", "table_size_gb") + tuple(
    f"dist_{k}" for k in range(NUM_BINS)
)
# bins 4..16 have lower edge >= 8 accesses
HOT_BIN_START = 4
DEFAULT_BATCH_SIZE = 65536
BYTES_PER_PARAM = 2
_GB = float(2**30)


def table_memory_gb(t_or_hash, dim: int | None = None, bytes_per_param: int = BYTES_PER_PARAM) -> float:
    """Memory of a table in GB (2**30 bytes); fp16 params by default."""
    if dim is None:
        return t_or_hash.hash_size * t_or_hash.dim * bytes_per_param / _GB
    return t_or_hash * dim * bytes_per_param / _GB


def bin_edges() -> list[tuple[float, float]]:
    edges = [(0.0, 1.0)]
    for k in range(1, NUM_BINS - 1):
        edges.append((float(2 ** (k - 1)), float(2**k)))
    edges.append((float(2 ** (NUM_BINS - 2)), math.inf))
    return edges


def count_bins(counts: np.ndarray) -> np.ndarray:
    """Bin index of each positive access count: (0,1]->0, (1,2]->1, (2,4]->2, ..."""
    counts = np.asarray(counts, dtype=np.int64)
    if np.any(counts < 1):
        raise ValueError("access counts must be >= 1")
    # frexp(c - 1) exponent == bit_length(c - 1) == ceil(log2(c)) for c >= 1
    _, exp = np.frexp((counts - 1).astype(np.float64))
    return np.minimum(exp, NUM_BINS - 1).astype(np.int64)


@dataclass(frozen=True)
class TableDesc:
    id: int
    dim: int
    hash_size: int
    pooling_factor: float
    table_size_gb: float
    dist: tuple[float, ...]

    def __post_init__(self):
        if self.dim < 1 or self.hash_size < 1:
            raise BadInput(f"table {self.id}: dim and hash_size must be >= 1")
        if self.pooling_factor < 0 or self.table_size_gb < 0:
            raise BadInput(f"table {self.id}: negative pooling factor or size")
        if len(self.dist) != NUM_BINS:
            raise BadInput(f"table {self.id}: dist needs {NUM_BINS} bins, got {len(self.dist)}")
        total = math.fsum(self.dist)
        if min(self.dist) < 0 or not (abs(total - 1.0) <= 1e-9 or total == 0.0):
            raise BadInput(f"table {self.id}: dist must be a distribution (sum={total!r})")

    @classmethod
    def make(
        cls,
        id: int,
        dim: int,
        hash_size: int,
        pooling_factor: float,
        dist: Sequence[float] | None = None,
        bytes_per_param: int = BYTES_PER_PARAM,
    ) -> "TableDesc":
        if dist is None:
            dist = [1.0] + [0.0] * (NUM_BINS - 1)
        return cls(
            id=int(id),
            dim=int(dim),
            hash_size=int(hash_size),
            pooling_factor=float(pooling_factor),
            table_size_gb=table_memory_gb(int(hash_size), int(dim), bytes_per_param),
            dist=tuple(float(x) for x in dist),
        )

    @property
    def memory_gb(self) -> float:
        return self.table_size_gb

    @property
    def hot_mass(self) -> float:
        return math.fsum(self.dist[HOT_BIN_START:])

    def with_id(self, new_id: int) -> "TableDesc":
        return TableDesc(new_id, self.dim, self.hash_size, self.pooling_factor, self.table_size_gb, self.dist)

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "dim": self.dim,
            "hash_size": self.hash_size,
            "pooling_factor": self.pooling_factor,
            "table_size_gb": self.table_size_gb,
            "dist": list(self.dist),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TableDesc":
        try:
            return cls(
                id=int(d["id"]),
                dim=int(d["dim"]),
                hash_size=int(d["hash_size"]),
                pooling_factor=float(d["pooling_factor"]),
                table_size_gb=float(d["table_size_gb"]),
                dist=tuple(float(x) for x in d["dist"]),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise BadInput(f"bad table record: {e}") from e


@dataclass(frozen=True)
class FeatureStats:
    """Per-feature (mean, std) of ln(1+x); only the four scalar features use them."""

    mean: tuple[float, ...]
    std: tuple[float, ...]

    @classmethod
    def identity(cls) -> "FeatureStats":
        return cls((0.0,) * NUM_FEATURES, (1.0,) * NUM_FEATURES)

    @classmethod
    def fit(cls, tables: Iterable[TableDesc]) -> "FeatureStats":
        raw = np.array([_raw_scalars(t) for t in tables], dtype=np.float64)
        if raw.size == 0:
            return cls.identity()
        logs = np.log1p(raw)
        mu = logs.mean(axis=0)
        sd = logs.std(axis=0)
        sd = np.where(sd < 1e-12, 1.0, sd)
        mean = tuple(float(x) for x in mu) + (0.0,) * NUM_BINS
        std = tuple(float(x) for x in sd) + (1.0,) * NUM_BINS
        return cls(mean, std)

    def to_list(self) -> list[dict]:
        return [{"mean": m, "std": s} for m, s in zip(self.mean, self.std)]

    @classmethod
    def from_list(cls, items: list[dict]) -> "FeatureStats":
        if len(items) != NUM_FEATURES:
            raise BadInput(f"feature_stats needs {NUM_FEATURES} entries, got {len(items)}")
        return cls(tuple(float(i["mean"]) for i in items), tuple(float(i["std"]) for i in items))

    def as_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        return np.asarray(self.mean), np.asarray(self.std)


def _raw_scalars(t: TableDesc) -> tuple[float, float, float, float]:
    return (float(t.dim), float(t.hash_size), float(t.pooling_factor), float(t.table_size_gb))


def feature_vector(t: TableDesc, stats: FeatureStats | None = None) -> np.ndarray:
    """[dim, hash_size, pooling_factor, table_size_gb, dist_0..dist_16].

    With ``stats`` the four scalars become (ln(1+x) - mean) / std; the
    distribution entries are always passed through unchanged.
    """
    v = np.empty(NUM_FEATURES, dtype=np.float64)
    v[:4] = _raw_scalars(t)
    v[4:] = t.dist
    if stats is not None:
        mu, sd = stats.as_arrays()
        v[:4] = (np.log1p(v[:4]) - mu[:4]) / sd[:4]
    return v


def feature_matrix(
    tables: Sequence[TableDesc], stats: FeatureStats | None = None, mask: Sequence[bool] | None = None
) -> np.ndarray:
    if len(tables) == 0:
        return np.zeros((0, NUM_FEATURES))
    x = np.stack([feature_vector(t, stats) for t in tables])
    if mask is not None:
        x = x * np.asarray(mask, dtype=np.float64)
    return x


@dataclass
class TablePool:
    tables: list[TableDesc]
    batch_size: int = DEFAULT_BATCH_SIZE
    feature_stats: FeatureStats = field(default_factory=FeatureStats.identity)

    def __post_init__(self):
        ids = [t.id for t in self.tables]
        if ids != list(range(len(ids))):
            raise BadInput("pool table ids must be dense 0..M-1 in order")
        if self.batch_size < 1:
            raise BadInput("batch_size must be positive")

    def __len__(self) -> int:
        return len(self.tables)

    @classmethod
    def from_tables(cls, tables: Sequence[TableDesc], batch_size: int = DEFAULT_BATCH_SIZE) -> "TablePool":
        tabs = [t.with_id(i) for i, t in enumerate(tables)]
        return cls(tabs, batch_size, FeatureStats.fit(tabs))

    def to_dict(self) -> dict:
        return {
            "batch_size": self.batch_size,
            "tables": [t.to_dict() for t in self.tables],
            "feature_stats": self.feature_stats.to_list(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "TablePool":
        try:
            tables = [TableDesc.from_dict(x) for x in d["tables"]]
            stats = FeatureStats.from_list(d["feature_stats"]) if "feature_stats" in d else FeatureStats.fit(tables)
            return cls(tables, int(d.get("batch_size", DEFAULT_BATCH_SIZE)), stats)
        except (KeyError, TypeError) as e:
            raise BadInput(f"bad pool file: {e}") from e

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "TablePool":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as e:
            raise BadInput(f"{path}: not JSON ({e})") from e


# ---------------------------------------------------------------------------
# Lookup batches

_LB_MAGIC = b"DSLB"
_LB_VERSION = 1


@dataclass
class LookupBatch:
    """Indices/offsets ordered by (table_id, batch_offset)."""

    indices: np.ndarray
    offsets: np.ndarray
    num_tables: int
    batch_size: int

    def validate(self) -> None:
        off = np.asarray(self.offsets)
        if self.num_tables < 1 or self.batch_size < 1:
            raise MalformedBatch("num_tables and batch_size must be positive")
        if off.ndim != 1 or len(off) != self.num_tables * self.batch_size + 1:
            raise MalformedBatch(
                f"offsets length {len(off)} != num_tables*batch_size+1 = {self.num_tables * self.batch_size + 1}"
            )
        if off[0] != 0:
            raise MalformedBatch("first offset must be 0")
        if np.any(np.diff(off) < 0):
            raise MalformedBatch("offsets must be nondecreasing")
        if off[-1] != len(self.indices):
            raise MalformedBatch(f"last offset {off[-1]} != len(indices) {len(self.indices)}")

    def to_bytes(self) -> bytes:
        off = np.ascontiguousarray(self.offsets, dtype="<i8")
        idx = np.ascontiguousarray(self.indices, dtype="<i8")
        return b"".join(
            [
                _LB_MAGIC,
                struct.pack("<III", _LB_VERSION, self.num_tables, self.batch_size),
                struct.pack("<Q", len(off)),
                off.tobytes(),
                struct.pack("<Q", len(idx)),
                idx.tobytes(),
            ]
        )

    @classmethod
    def from_bytes(cls, buf: bytes) -> "LookupBatch":
        try:
            if buf[:4] != _LB_MAGIC:
                raise MalformedBatch("bad magic, expected DSLB")
            version, num_tables, batch_size = struct.unpack_from("<III", buf, 4)
            if version != _LB_VERSION:
                raise MalformedBatch(f"unsupported lookup batch version {version}")
            pos = 16
            (n_off,) = struct.unpack_from("<Q", buf, pos)
            pos += 8
            off = np.frombuffer(buf, dtype="<i8", count=n_off, offset=pos).astype(np.int64)
            pos += 8 * n_off
            (n_idx,) = struct.unpack_from("<Q", buf, pos)
            pos += 8
            idx = np.frombuffer(buf, dtype="<i8", count=n_idx, offset=pos).astype(np.int64)
            pos += 8 * n_idx
        except (struct.error, ValueError) as e:
            raise MalformedBatch(f"truncated lookup batch: {e}") from e
        if pos != len(buf):
            raise MalformedBatch(f"{len(buf) - pos} trailing bytes")
        return cls(idx, off, num_tables, batch_size)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "LookupBatch":
        return cls.from_bytes(Path(path).read_bytes())


def ingest_lookup_batch(
    b: LookupBatch,
    dims: Sequence[int],
    hash_sizes: Sequence[int],
    bytes_per_param: int = BYTES_PER_PARAM,
) -> TablePool:
    b.validate()
    if len(dims) != b.num_tables or len(hash_sizes) != b.num_tables:
        raise MalformedBatch("dims/hash_sizes must have one entry per table")
    off = np.asarray(b.offsets, dtype=np.int64)
    idx = np.asarray(b.indices, dtype=np.int64)
    B = b.batch_size
    tables = []
    for k in range(b.num_tables):
        lo, hi = off[k * B], off[(k + 1) * B]
        pf = float(np.diff(off[k * B : (k + 1) * B + 1]).mean())
        dist = np.zeros(NUM_BINS)
        if hi > lo:
            _, counts = np.unique(idx[lo:hi], return_counts=True)
            dist = np.bincount(count_bins(counts), minlength=NUM_BINS).astype(np.float64)
            dist /= dist.sum()
        tables.append(TableDesc.make(k, dims[k], hash_sizes[k], pf, dist, bytes_per_param))
    return TablePool(tables, B, FeatureStats.fit(tables))


# ---------------------------------------------------------------------------
# Synthetic pools


@dataclass(frozen=True)
class PoolSpec:
    """Sampler settings shaped after the public DLRM table pool."""

    num_tables: int = 856
    dim_choices: tuple[int, ...] = (16,)
    dim_weights: tuple[float, ...] = (1.0,)
    log10_hash_range: tuple[float, float] = (4.5, 7.2)
    pooling_exponent: float = 1.55
    pooling_min: float = 1.0
    pooling_max: float = 200.0
    hot_fraction_range: tuple[float, float] = (0.0, 0.6)
    batch_size: int = DEFAULT_BATCH_SIZE
    bytes_per_param: int = BYTES_PER_PARAM

    def validate(self) -> None:
        if self.num_tables < 1:
            raise BadSpec("num_tables must be >= 1")
        if not self.dim_choices or len(self.dim_choices) != len(self.dim_weights):
            raise BadSpec("dim_choices and dim_weights must be nonempty and aligned")
        if min(self.dim_choices) < 1 or min(self.dim_weights) < 0 or sum(self.dim_weights) <= 0:
            raise BadSpec("bad dim choices/weights")
        lo, hi = self.log10_hash_range
        if not (0 <= lo <= hi):
            raise BadSpec("log10_hash_range must satisfy 0 <= lo <= hi")
        if not (0 < self.pooling_min <= self.pooling_max):
            raise BadSpec("pooling range must satisfy 0 < min <= max")
        if self.pooling_exponent <= 0:
            raise BadSpec("pooling_exponent must be positive")
        hlo, hhi = self.hot_fraction_range
        if not (0 <= hlo <= hhi <= 1):
            raise BadSpec("hot_fraction_range must lie in [0, 1]")
        if self.batch_size < 1 or self.bytes_per_param < 1:
            raise BadSpec("batch_size and bytes_per_param must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "PoolSpec":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise BadSpec(f"unknown pool spec keys: {sorted(unknown)}")
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**kw)


def _truncated_power_law(rng: np.random.Generator, n: int, alpha: float, lo: float, hi: float) -> np.ndarray:
    u = rng.random(n)
    if abs(alpha - 1.0) < 1e-12:
        return lo * (hi / lo) ** u
    a = 1.0 - alpha
    return (lo**a + u * (hi**a - lo**a)) ** (1.0 / a)


def _synth_dist(rng: np.random.Generator, hot: float) -> np.ndarray:
    dist = np.zeros(NUM_BINS)
    top = int(rng.integers(HOT_BIN_START, NUM_BINS))
    w = 0.5 ** np.arange(top - HOT_BIN_START + 1)
    dist[HOT_BIN_START : top + 1] = hot * w / w.sum()
    dist[:3] = (1.0 - hot) * rng.dirichlet(np.ones(3))
    return dist / dist.sum()


def synth_pool(spec: PoolSpec | None = None, seed: int = 0) -> TablePool:
    spec = spec or PoolSpec()
    spec.validate()
    rng = np.random.default_rng(seed)
    n = spec.num_tables
    p = np.asarray(spec.dim_weights, dtype=np.float64)
    dims = rng.choice(np.asarray(spec.dim_choices), size=n, p=p / p.sum())
    lo, hi = spec.log10_hash_range
    hashes = np.maximum(1, np.round(10.0 ** rng.uniform(lo, hi, size=n))).astype(np.int64)
    pfs = _truncated_power_law(rng, n, spec.pooling_exponent, spec.pooling_min, spec.pooling_max)
    hots = rng.uniform(*spec.hot_fraction_range, size=n)
    tables = [
        TableDesc.make(i, int(dims[i]), int(hashes[i]), float(pfs[i]), _synth_dist(rng, float(hots[i])), spec.bytes_per_param)
        for i in range(n)
    ]
    return TablePool(tables, spec.batch_size, FeatureStats.fit(tables))
