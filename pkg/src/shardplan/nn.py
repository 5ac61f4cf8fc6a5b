"""Small float64 MLPs with hand-written backprop, Adam with linear decay,
masked softmax and a finite-difference gradient checker."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ShapeMismatch


class Mlp:
    """Fully connected net: ReLU between layers, identity (or ReLU) at the end."""

    def __init__(self, sizes: Sequence[int], rng: np.random.Generator | None = None, out_relu: bool = False):
        if len(sizes) < 2:
            raise ValueError("need at least input and output sizes")
        self.sizes = tuple(int(s) for s in sizes)
        self.out_relu = out_relu
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        rng = rng if rng is not None else np.random.default_rng(0)
        for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            self.weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            self.biases.append(np.zeros(fan_out))

    @property
    def in_dim(self) -> int:
        return self.sizes[0]

    @property
    def out_dim(self) -> int:
        return self.sizes[-1]

    def params(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}W{i}"] = w
            out[f"{prefix}b{i}"] = b
        return out

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, list]:
        if x.shape[-1] != self.in_dim:
            raise ShapeMismatch(f"expected last dim {self.in_dim}, got {x.shape}")
        cache = []
        h = x
        n = len(self.weights)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w + b
            relu = i < n - 1 or self.out_relu
            cache.append((h, z if relu else None))
            h = np.maximum(z, 0.0) if relu else z
        return h, cache

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def backward(self, cache: list, dy: np.ndarray) -> tuple[list[np.ndarray], list[np.ndarray], np.ndarray]:
        """Returns (dW per layer, db per layer, dx)."""
        if dy.shape[-1] != self.out_dim:
            raise ShapeMismatch(f"expected grad last dim {self.out_dim}, got {dy.shape}")
        dws: list[np.ndarray] = [None] * len(self.weights)  # type: ignore[list-item]
        dbs: list[np.ndarray] = [None] * len(self.weights)  # type: ignore[list-item]
        g = dy
        for i in range(len(self.weights) - 1, -1, -1):
            h_in, z = cache[i]
            if z is not None:
                g = g * (z > 0.0)
            h2 = h_in.reshape(-1, h_in.shape[-1])
            g2 = g.reshape(-1, g.shape[-1])
            dws[i] = h2.T @ g2
            dbs[i] = g2.sum(axis=0)
            g = g @ self.weights[i].T
        return dws, dbs, g

    def grads_dict(self, dws, dbs, prefix: str = "") -> dict[str, np.ndarray]:
        out = {}
        for i, (dw, db) in enumerate(zip(dws, dbs)):
            out[f"{prefix}W{i}"] = dw
            out[f"{prefix}b{i}"] = db
        return out


@dataclass
class Adam:
    """Adam with lr(step) = base_lr * max(0, 1 - step / total_steps)."""

    base_lr: float = 5e-4
    total_steps: int = 1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def lr(self) -> float:
        if self.total_steps <= 0:
            return 0.0
        return self.base_lr * max(0.0, 1.0 - self.step_count / self.total_steps)

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        """In-place update of ``params``."""
        lr = self.lr()
        t = self.step_count + 1
        for name, p in params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ShapeMismatch(f"{name}: grad {g.shape} vs param {p.shape}")
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            v = self.v[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            m_hat = m / (1 - self.beta1**t)
            v_hat = v / (1 - self.beta2**t)
            if lr > 0.0:
                p -= lr * m_hat / (np.sqrt(v_hat) + self.eps)
        self.step_count = t


def masked_softmax(logits: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Softmax over the last axis; masked-out entries get probability exactly 0."""
    logits = np.asarray(logits, dtype=np.float64)
    if mask is None:
        mask = np.ones(logits.shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if not np.all(mask.any(axis=-1)):
        raise ValueError("every row needs at least one unmasked entry")
    z = np.where(mask, logits, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.where(mask, np.exp(z), 0.0)
    return e / e.sum(axis=-1, keepdims=True)


def masked_log_softmax(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Log-probabilities; masked entries are -inf."""
    z = np.where(mask, logits, -np.inf)
    zmax = z.max(axis=-1, keepdims=True)
    lse = zmax + np.log(np.where(mask, np.exp(z - zmax), 0.0).sum(axis=-1, keepdims=True))
    return np.where(mask, logits - lse, -np.inf)


@dataclass
class GradCheckReport:
    names: list[str]
    analytic: np.ndarray
    numeric: np.ndarray
    rel_err: np.ndarray
    tol: float

    @property
    def max_rel_err(self) -> float:
        return float(self.rel_err.max()) if self.rel_err.size else 0.0

    @property
    def ok(self) -> bool:
        return bool(np.all(self.rel_err < self.tol))


def rel_error(a: np.ndarray, n: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def grad_check(
    params: dict[str, np.ndarray],
    loss_fn: Callable[[], float],
    grads: dict[str, np.ndarray],
    probes: int = 10,
    h: float = 1e-5,
    tol: float = 1e-4,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare ``grads`` against central differences of ``loss_fn`` at random entries.

    ``loss_fn`` must read the arrays in ``params`` (they are perturbed in place).
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    names = sorted(params)
    sizes = np.array([params[n].size for n in names], dtype=np.float64)
    labels, ana, num = [], [], []
    for _ in range(probes):
        name = names[rng.choice(len(names), p=sizes / sizes.sum())]
        p = params[name]
        k = int(rng.integers(p.size))
        idx = np.unravel_index(k, p.shape)
        old = p[idx]
        p[idx] = old + h
        lp = loss_fn()
        p[idx] = old - h
        lm = loss_fn()
        p[idx] = old
        labels.append(f"{name}{list(idx)}")
        ana.append(grads[name][idx])
        num.append((lp - lm) / (2 * h))
    ana_a, num_a = np.array(ana), np.array(num)
    return GradCheckReport(labels, ana_a, num_a, rel_error(ana_a, num_a), tol)
