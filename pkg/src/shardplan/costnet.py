"""Cost network: shared table MLP, per-device table reduction, three
per-device cost heads, cross-device reduction and an overall-cost head."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .errors import BadInput, UnknownTable
from .nn import Adam, Mlp
from .tablegen import NUM_FEATURES

REDUCTIONS = ("sum", "mean", "max")
HIDDEN = 32


# ---------------------------------------------------------------------------
# segment reductions with exact backward


@dataclass
class _SegCtx:
    mode: str
    n_rows: int
    mat: sp.csr_matrix | None = None
    arg: np.ndarray | None = None  # (n_seg, F) row index of the max, -1 for empty
    shape: tuple = ()


def segment_reduce(x: np.ndarray, seg: np.ndarray, n_seg: int, mode: str) -> tuple[np.ndarray, _SegCtx]:
    """Reduce rows of ``x`` (R, F) into ``n_seg`` groups; ``seg`` must be sorted.

    Empty groups reduce to the zero vector. Max routes gradient to the first
    (lowest-index) row attaining the maximum.
    """
    R, F = x.shape
    if mode in ("sum", "mean"):
        w = np.ones(R)
        if mode == "mean":
            counts = np.bincount(seg, minlength=n_seg).astype(np.float64)
            w = 1.0 / counts[seg]
        mat = sp.csr_matrix((w, (seg, np.arange(R))), shape=(n_seg, R))
        return np.asarray(mat @ x), _SegCtx(mode, R, mat=mat)
    if mode != "max":
        raise BadInput(f"unknown reduction {mode!r}")
    out = np.zeros((n_seg, F))
    arg = np.full((n_seg, F), -1, dtype=np.int64)
    if R:
        nonempty, starts = np.unique(seg, return_index=True)
        out[nonempty] = np.maximum.reduceat(x, starts, axis=0)
        pos = np.where(x == out[seg], np.arange(R)[:, None], R)
        arg[nonempty] = np.minimum.reduceat(pos, starts, axis=0)
    return out, _SegCtx(mode, R, arg=arg, shape=(R, F))


def segment_reduce_backward(dout: np.ndarray, ctx: _SegCtx) -> np.ndarray:
    if ctx.mode in ("sum", "mean"):
        return np.asarray(ctx.mat.T @ dout)
    dx = np.zeros(ctx.shape)
    segs, cols = np.nonzero(ctx.arg >= 0)
    dx[ctx.arg[segs, cols], cols] = dout[segs, cols]
    return dx


# ---------------------------------------------------------------------------


@dataclass
class CostSample:
    """Oracle-measured costs for one (possibly partial) assignment.

    ``feats`` is the normalized feature matrix of the task's tables (shared
    between samples of the same task); ``device_tables`` index into it.
    """

    feats: np.ndarray
    device_tables: tuple[tuple[int, ...], ...]
    q: np.ndarray  # (D, 3) ms
    overall: float
    task_ref: int = -1

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=np.float64)
        if self.q.shape != (len(self.device_tables), 3):
            raise BadInput("q must be (D, 3)")
        if not (np.all(np.isfinite(self.q)) and np.all(self.q >= 0) and np.isfinite(self.overall) and self.overall >= 0):
            raise BadInput("cost targets must be finite and >= 0")

    def to_dict(self) -> dict:
        return {
            "task_ref": self.task_ref,
            "device_tables": [[int(i) for i in s] for s in self.device_tables],
            "q": self.q.tolist(),
            "overall": float(self.overall),
        }


class ReplayBuffer:
    def __init__(self, capacity: int | None = None):
        self.capacity = capacity
        self.samples: list[CostSample] = []

    def __len__(self) -> int:
        return len(self.samples)

    def add(self, s: CostSample) -> None:
        self.samples.append(s)
        if self.capacity is not None and len(self.samples) > self.capacity:
            del self.samples[0]

    def extend(self, items) -> None:
        for s in items:
            self.add(s)

    def sample(self, n: int, rng: np.random.Generator) -> list[CostSample]:
        idx = rng.integers(0, len(self.samples), size=n)
        return [self.samples[i] for i in idx]

    def dump_json(self) -> str:
        return json.dumps([s.to_dict() for s in self.samples], sort_keys=True)


@dataclass
class _Batch:
    rows: np.ndarray  # (R, 21)
    row_dev: np.ndarray  # (R,)
    dev_sample: np.ndarray  # (G,)
    n_dev: int
    n_sample: int


def _make_batch(items: Sequence[tuple[np.ndarray, Sequence[Sequence[int]]]]) -> _Batch:
    rows, row_dev, dev_sample = [], [], []
    g = 0
    for s, (feats, sets) in enumerate(items):
        for tabs in sets:
            tabs = list(tabs)
            if tabs:
                if min(tabs) < 0 or max(tabs) >= len(feats):
                    raise UnknownTable(f"table index out of range in {tabs}")
                rows.append(feats[tabs])
                row_dev.append(np.full(len(tabs), g))
            dev_sample.append(s)
            g += 1
    R = np.concatenate(rows) if rows else np.zeros((0, NUM_FEATURES))
    rd = np.concatenate(row_dev) if row_dev else np.zeros(0, dtype=np.int64)
    return _Batch(R, rd.astype(np.int64), np.asarray(dev_sample, dtype=np.int64), g, len(items))


class CostNet:
    def __init__(
        self,
        rng: np.random.Generator | None = None,
        reduction_tables: str = "sum",
        reduction_devices: str = "max",
        feature_mask: Sequence[bool] | None = None,
        table_out_relu: bool = False,
    ):
        if reduction_tables not in REDUCTIONS or reduction_devices not in REDUCTIONS:
            raise BadInput(f"reductions must be among {REDUCTIONS}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.reduction_tables = reduction_tables
        self.reduction_devices = reduction_devices
        self.feature_mask = np.ones(NUM_FEATURES) if feature_mask is None else np.asarray(feature_mask, dtype=np.float64)
        if self.feature_mask.shape != (NUM_FEATURES,):
            raise BadInput(f"feature mask needs {NUM_FEATURES} entries")
        self.table_out_relu = table_out_relu
        self.table_mlp = Mlp([NUM_FEATURES, 128, HIDDEN], rng, out_relu=table_out_relu)
        self.head_fwd = Mlp([HIDDEN, 64, 1], rng)
        self.head_bwd = Mlp([HIDDEN, 64, 1], rng)
        self.head_comm = Mlp([HIDDEN, 64, 1], rng)
        self.head_overall = Mlp([HIDDEN, 64, 1], rng)

    def _modules(self):
        return (
            ("table.", self.table_mlp),
            ("fwd.", self.head_fwd),
            ("bwd.", self.head_bwd),
            ("comm.", self.head_comm),
            ("overall.", self.head_overall),
        )

    def params(self) -> dict[str, np.ndarray]:
        out = {}
        for prefix, m in self._modules():
            out.update(m.params(prefix))
        return out

    def arch(self) -> dict:
        return {
            "reduction_tables": self.reduction_tables,
            "reduction_devices": self.reduction_devices,
            "feature_mask": [bool(x) for x in self.feature_mask],
            "table_out_relu": self.table_out_relu,
        }

    # -- building blocks ---------------------------------------------------

    def encode_tables(self, feats: np.ndarray) -> np.ndarray:
        return self.table_mlp(feats * self.feature_mask)

    def heads(self, h_dev: np.ndarray) -> np.ndarray:
        """(G, 32) device representations -> (G, 3) unclamped (fwd, bwd, comm)."""
        return np.concatenate([self.head_fwd(h_dev), self.head_bwd(h_dev), self.head_comm(h_dev)], axis=1)

    def overall_from_devices(self, h_dev: np.ndarray) -> float:
        red = {"sum": np.sum, "mean": np.mean, "max": np.max}[self.reduction_devices]
        return float(self.head_overall(red(h_dev, axis=0, keepdims=True))[0, 0])

    def device_repr(self, z: np.ndarray, sets: Sequence[Sequence[int]]) -> np.ndarray:
        """Reduce cached table representations ``z`` into one row per device."""
        out = np.zeros((len(sets), HIDDEN))
        for d, s in enumerate(sets):
            if len(s):
                zs = z[list(s)]
                if self.reduction_tables == "sum":
                    out[d] = zs.sum(axis=0)
                elif self.reduction_tables == "mean":
                    out[d] = zs.mean(axis=0)
                else:
                    out[d] = zs.max(axis=0)
        return out

    # -- batched forward/backward -----------------------------------------

    def _forward(self, b: _Batch):
        x = b.rows * self.feature_mask
        h_rows, c_table = self.table_mlp.forward(x)
        h_dev, c_red_t = segment_reduce(h_rows, b.row_dev, b.n_dev, self.reduction_tables)
        outs, c_heads = [], []
        for head in (self.head_fwd, self.head_bwd, self.head_comm):
            y, c = head.forward(h_dev)
            outs.append(y)
            c_heads.append(c)
        q_hat = np.concatenate(outs, axis=1)
        h_all, c_red_d = segment_reduce(h_dev, b.dev_sample, b.n_sample, self.reduction_devices)
        c_hat, c_over = self.head_overall.forward(h_all)
        cache = (c_table, c_red_t, c_heads, c_red_d, c_over)
        return q_hat, c_hat[:, 0], cache

    def _backward(self, cache, dq: np.ndarray, dc: np.ndarray) -> dict[str, np.ndarray]:
        c_table, c_red_t, c_heads, c_red_d, c_over = cache
        grads: dict[str, np.ndarray] = {}
        dws, dbs, dh_all = self.head_overall.backward(c_over, dc[:, None])
        grads.update(self.head_overall.grads_dict(dws, dbs, "overall."))
        dh_dev = segment_reduce_backward(dh_all, c_red_d)
        for k, (prefix, head) in enumerate((("fwd.", self.head_fwd), ("bwd.", self.head_bwd), ("comm.", self.head_comm))):
            dws, dbs, dx = head.backward(c_heads[k], dq[:, k : k + 1])
            grads.update(head.grads_dict(dws, dbs, prefix))
            dh_dev = dh_dev + dx
        dh_rows = segment_reduce_backward(dh_dev, c_red_t)
        dws, dbs, _ = self.table_mlp.backward(c_table, dh_rows)
        grads.update(self.table_mlp.grads_dict(dws, dbs, "table."))
        return grads

    def predict(self, feats: np.ndarray, sets: Sequence[Sequence[int]], clamp: bool = True) -> tuple[np.ndarray, float]:
        """(q_hat (D, 3), overall_hat) for one device layout of the tables in ``feats``."""
        q, c, _ = self._forward(_make_batch([(feats, sets)]))
        c = float(c[0])
        if clamp:
            return np.maximum(q, 0.0), max(c, 0.0)
        return q, c

    def loss_and_grad(self, batch: Sequence[CostSample]) -> tuple[float, dict[str, np.ndarray]]:
        """Per sample: sum over devices of 3-component MSE plus overall MSE; batch mean."""
        if not batch:
            raise BadInput("empty batch")
        b = _make_batch([(s.feats, s.device_tables) for s in batch])
        q_hat, c_hat, cache = self._forward(b)
        q_tgt = np.concatenate([s.q for s in batch])
        c_tgt = np.array([s.overall for s in batch])
        S = len(batch)
        eq = q_hat - q_tgt
        ec = c_hat - c_tgt
        loss = (np.sum(eq * eq) / 3.0 + np.sum(ec * ec)) / S
        grads = self._backward(cache, 2.0 * eq / (3.0 * S), 2.0 * ec / S)
        return float(loss), grads

    def loss(self, batch: Sequence[CostSample]) -> float:
        b = _make_batch([(s.feats, s.device_tables) for s in batch])
        q_hat, c_hat, _ = self._forward(b)
        eq = q_hat - np.concatenate([s.q for s in batch])
        ec = c_hat - np.array([s.overall for s in batch])
        return float((np.sum(eq * eq) / 3.0 + np.sum(ec * ec)) / len(batch))

    def predict_overall_batch(self, batch: Sequence[CostSample]) -> np.ndarray:
        b = _make_batch([(s.feats, s.device_tables) for s in batch])
        return self._forward(b)[1]

    def single_table_cost(self, feats: np.ndarray) -> np.ndarray:
        """Sum of predicted (fwd, bwd, comm) with each table alone on a device."""
        # sum, mean and max of a single row are all the row itself
        return self.heads(self.encode_tables(feats)).sum(axis=1)


def train_steps(
    net: CostNet,
    buffer: ReplayBuffer,
    n_steps: int,
    n_batch: int,
    opt: Adam,
    rng: np.random.Generator,
) -> list[float]:
    losses = []
    params = net.params()
    for _ in range(n_steps):
        loss, grads = net.loss_and_grad(buffer.sample(n_batch, rng))
        opt.step(params, grads)
        losses.append(loss)
    return losses
