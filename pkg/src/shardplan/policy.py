"""Policy network over devices and its REINFORCE update.

Each device is scored independently from the sum of its tables'
representations and an embedding of its current cost features, so one set
of weights works for any number of tables and devices.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import BadInput, NoLegalAction
from .mdp import AugmentedState, PlacementEnv
from .nn import Adam, Mlp, masked_log_softmax, masked_softmax
from .tablegen import NUM_FEATURES

HIDDEN = 32


class PolicyNet:
    def __init__(
        self,
        rng: np.random.Generator | None = None,
        feature_mask: Sequence[bool] | None = None,
        use_cost_features: bool = True,
    ):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.feature_mask = np.ones(NUM_FEATURES) if feature_mask is None else np.asarray(feature_mask, dtype=np.float64)
        if self.feature_mask.shape != (NUM_FEATURES,):
            raise BadInput(f"feature mask needs {NUM_FEATURES} entries")
        self.use_cost_features = use_cost_features
        self.table_mlp = Mlp([NUM_FEATURES, 128, HIDDEN], rng)
        self.cost_mlp = Mlp([3, 64, HIDDEN], rng)
        self.head = Mlp([2 * HIDDEN, 1], rng)

    def params(self) -> dict[str, np.ndarray]:
        out = {}
        out.update(self.table_mlp.params("table."))
        out.update(self.cost_mlp.params("cost."))
        out.update(self.head.params("head."))
        return out

    def arch(self) -> dict:
        return {
            "feature_mask": [bool(x) for x in self.feature_mask],
            "use_cost_features": self.use_cost_features,
        }

    def encode_tables(self, feats: np.ndarray) -> np.ndarray:
        if len(feats) == 0:
            return np.zeros((0, HIDDEN))
        return self.table_mlp(feats * self.feature_mask)

    def scores(self, z: np.ndarray, device_tables: Sequence[Sequence[int]], q: np.ndarray) -> np.ndarray:
        D = len(device_tables)
        h = np.zeros((D, HIDDEN))
        for d, tabs in enumerate(device_tables):
            if len(tabs):
                h[d] = z[list(tabs)].sum(axis=0)
        q = np.asarray(q, dtype=np.float64) if self.use_cost_features else np.zeros((D, 3))
        x = np.concatenate([h, self.cost_mlp(q)], axis=1)
        return self.head(x)[:, 0]

    def action_probs(self, z: np.ndarray, state: AugmentedState, legal: np.ndarray) -> np.ndarray:
        legal = _as_mask(legal, len(state.device_tables))
        if not legal.any():
            raise NoLegalAction("no legal device")
        return masked_softmax(self.scores(z, state.device_tables, state.q), legal)


def _as_mask(legal, D: int) -> np.ndarray:
    legal = np.asarray(legal)
    if legal.dtype == bool:
        if legal.shape != (D,):
            raise BadInput("legal mask has wrong length")
        return legal
    mask = np.zeros(D, dtype=bool)
    mask[legal.astype(np.int64)] = True
    return mask


def sample_action(probs: np.ndarray, rng: np.random.Generator) -> tuple[int, float]:
    c = np.cumsum(probs)
    a = int(np.searchsorted(c, rng.random() * c[-1], side="right"))
    a = min(a, len(probs) - 1)
    return a, float(np.log(probs[a]))


def greedy_action(probs: np.ndarray) -> int:
    """Highest probability; ties go to the lowest device index."""
    return int(np.argmax(probs))


@dataclass
class Episode:
    feats: np.ndarray  # (M, 21), shared by episodes of one task
    members: np.ndarray  # (T, D, M) float 0/1 membership before each action
    q: np.ndarray  # (T, D, 3)
    legal: np.ndarray  # (T, D) bool
    actions: np.ndarray  # (T,)
    log_probs: np.ndarray  # (T,)
    reward: float
    placement: np.ndarray
    order: tuple[int, ...] = ()
    task_ref: int = -1


def rollout(
    pol: PolicyNet,
    env: PlacementEnv,
    order: Sequence[int],
    rng: np.random.Generator | None = None,
    greedy: bool = False,
    z: np.ndarray | None = None,
    record: bool = True,
) -> Episode:
    """Run one episode; samples actions unless ``greedy``."""
    if not greedy and rng is None:
        raise BadInput("sampling needs an rng")
    feats = env.feats
    z = pol.encode_tables(feats) if z is None else z
    M, D = env.task.num_tables, env.num_devices
    state = env.reset(order)
    members, qs, legals, actions, logps = [], [], [], [], []
    reward = 0.0
    for _ in range(M):
        legal = env.legal_mask()
        probs = pol.action_probs(z, state, legal)
        if greedy:
            a = greedy_action(probs)
            lp = float(np.log(probs[a]))
        else:
            a, lp = sample_action(probs, rng)
        if record:
            m = np.zeros((D, M))
            for d, tabs in enumerate(state.device_tables):
                m[d, list(tabs)] = 1.0
            members.append(m)
            qs.append(state.q)
            legals.append(legal)
        actions.append(a)
        logps.append(lp)
        state, reward, _ = env.step(a)
    if record and M:
        members_a, q_a, legal_a = np.stack(members), np.stack(qs), np.stack(legals)
    else:
        members_a, q_a, legal_a = np.zeros((0, D, M)), np.zeros((0, D, 3)), np.zeros((0, D), dtype=bool)
    return Episode(
        feats, members_a, q_a, legal_a, np.asarray(actions, dtype=np.int64), np.asarray(logps),
        float(reward), env.placement(), tuple(int(i) for i in order),
    )


def reinforce_loss_and_grad(
    pol: PolicyNet, episodes: Sequence[Episode], w_entropy: float = 0.001
) -> tuple[float, dict[str, np.ndarray]]:
    """Minimized objective: mean over episodes of
    sum_t [ -log pi(a_t|s_t) * (R - mean R) - w_entropy * H(pi(.|s_t)) ].
    """
    if not episodes:
        raise BadInput("no episodes")
    feats = episodes[0].feats
    E = len(episodes)
    rewards = np.array([e.reward for e in episodes])
    adv_ep = rewards - rewards.mean()
    members = np.concatenate([e.members for e in episodes])
    q = np.concatenate([e.q for e in episodes])
    legal = np.concatenate([e.legal for e in episodes])
    actions = np.concatenate([e.actions for e in episodes])
    adv = np.concatenate([np.full(len(e.actions), a) for e, a in zip(episodes, adv_ep)])
    S, D, M = members.shape
    if S == 0:
        return 0.0, {k: np.zeros_like(v) for k, v in pol.params().items()}

    z, c_tab = pol.table_mlp.forward(feats * pol.feature_mask)
    hdev = np.einsum("sdm,mk->sdk", members, z)
    qin = q if pol.use_cost_features else np.zeros_like(q)
    c, c_cost = pol.cost_mlp.forward(qin.reshape(S * D, 3))
    x = np.concatenate([hdev.reshape(S * D, HIDDEN), c], axis=1)
    y, c_head = pol.head.forward(x)
    scores = y.reshape(S, D)

    logp = masked_log_softmax(scores, legal)
    p = np.where(legal, np.exp(np.where(legal, logp, 0.0)), 0.0)
    plogp = np.where(legal, p * np.where(legal, logp, 0.0), 0.0)
    H = -plogp.sum(axis=1)
    rows = np.arange(S)
    lp_a = logp[rows, actions]
    loss = float((-(adv * lp_a).sum() - w_entropy * H.sum()) / E)

    onehot = np.zeros((S, D))
    onehot[rows, actions] = 1.0
    safe_logp = np.where(legal, logp, 0.0)
    dscores = -adv[:, None] * (onehot - p) + w_entropy * p * (safe_logp + H[:, None])
    dscores = np.where(legal, dscores, 0.0) / E

    grads: dict[str, np.ndarray] = {}
    dws, dbs, dx = pol.head.backward(c_head, dscores.reshape(S * D, 1))
    grads.update(pol.head.grads_dict(dws, dbs, "head."))
    dh = dx[:, :HIDDEN].reshape(S, D, HIDDEN)
    dws, dbs, _ = pol.cost_mlp.backward(c_cost, dx[:, HIDDEN:])
    grads.update(pol.cost_mlp.grads_dict(dws, dbs, "cost."))
    dz = np.einsum("sdm,sdk->mk", members, dh)
    dws, dbs, _ = pol.table_mlp.backward(c_tab, dz)
    grads.update(pol.table_mlp.grads_dict(dws, dbs, "table."))
    return loss, grads


def reinforce_update(pol: PolicyNet, episodes: Sequence[Episode], opt: Adam, w_entropy: float = 0.001) -> float:
    loss, grads = reinforce_loss_and_grad(pol, episodes, w_entropy)
    opt.step(pol.params(), grads)
    return loss


def policy_entropy(pol: PolicyNet, episodes: Sequence[Episode]) -> float:
    """Mean per-step entropy of the current policy on recorded states."""
    total, n = 0.0, 0
    for e in episodes:
        z = pol.encode_tables(e.feats)
        for t in range(len(e.actions)):
            sets = [np.flatnonzero(e.members[t, d]) for d in range(e.members.shape[1])]
            p = masked_softmax(pol.scores(z, sets, e.q[t]), e.legal[t])
            nz = p[p > 0]
            total += float(-(nz * np.log(nz)).sum())
            n += 1
    return total / max(n, 1)
