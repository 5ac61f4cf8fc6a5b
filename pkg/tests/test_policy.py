import numpy as np
import pytest

from shardplan.costnet import CostNet
from shardplan.errors import BadInput, NoLegalAction
from shardplan.mdp import AugmentedState, EstimatedProvider, PlacementEnv
from shardplan.nn import Adam, grad_check
from shardplan.policy import (
    PolicyNet,
    greedy_action,
    policy_entropy,
    reinforce_loss_and_grad,
    reinforce_update,
    rollout,
    sample_action,
)
from shardplan.tablegen import FeatureStats, feature_matrix

from conftest import random_task


def _state(sets, q=None):
    D = len(sets)
    return AugmentedState(tuple(tuple(s) for s in sets), np.zeros((D, 3)) if q is None else q, 0, None, 0)


def test_initial_state_is_uniform():
    pol = PolicyNet(np.random.default_rng(0))
    z = pol.encode_tables(np.random.default_rng(1).normal(size=(5, 21)))
    p = pol.action_probs(z, _state([[], [], [], []]), np.ones(4, dtype=bool))
    assert np.allclose(p, 0.25, rtol=0, atol=1e-15)
    assert greedy_action(p) == 0


def test_single_legal_device():
    pol = PolicyNet(np.random.default_rng(0))
    z = pol.encode_tables(np.ones((2, 21)))
    p = pol.action_probs(z, _state([[0], [1], []]), np.array([False, True, False]))
    assert list(p) == [0.0, 1.0, 0.0]
    with pytest.raises(NoLegalAction):
        pol.action_probs(z, _state([[0], [1], []]), np.zeros(3, dtype=bool))


def test_device_permutation_equivariance():
    rng = np.random.default_rng(2)
    pol = PolicyNet(rng)
    z = pol.encode_tables(rng.normal(size=(6, 21)))
    sets = [[0, 1], [2], [3, 4, 5]]
    q = rng.uniform(0, 10, size=(3, 3))
    p = pol.action_probs(z, _state(sets, q), np.ones(3, dtype=bool))
    perm = [2, 0, 1]
    p2 = pol.action_probs(z, _state([sets[i] for i in perm], q[perm]), np.ones(3, dtype=bool))
    assert np.allclose(p2, p[perm], rtol=1e-12, atol=1e-15)


def test_sampling_reproducible_and_legal():
    probs = np.array([0.2, 0.0, 0.5, 0.3])
    a = [sample_action(probs, np.random.default_rng(5))[0] for _ in range(3)]
    assert len(set(a)) == 1
    rng = np.random.default_rng(0)
    draws = np.array([sample_action(probs, rng)[0] for _ in range(10_000)])
    counts = np.bincount(draws, minlength=4)
    assert counts[1] == 0
    sigma = np.sqrt(10_000 * probs * (1 - probs))
    assert np.all(np.abs(counts - 10_000 * probs) <= 3 * sigma + 1e-9)
    act, lp = sample_action(probs, np.random.default_rng(1))
    assert lp == pytest.approx(np.log(probs[act]))


def _episodes(seed=0, n=4, M=6, D=3, rewards=None, w_cost=True):
    rng = np.random.default_rng(seed)
    task = random_task(rng, M, D)
    f = feature_matrix(task.tables, FeatureStats.fit(task.tables))
    net = CostNet(rng)
    pol = PolicyNet(rng, use_cost_features=w_cost)
    env = PlacementEnv(task, EstimatedProvider(net, f, D), f)
    eps = [rollout(pol, env, range(M), rng=rng) for _ in range(n)]
    if rewards is not None:
        for e, r in zip(eps, rewards):
            e.reward = r
    return pol, eps


def test_episode_shapes():
    pol, eps = _episodes()
    e = eps[0]
    assert e.members.shape == (6, 3, 6) and e.q.shape == (6, 3, 3) and e.legal.shape == (6, 3)
    assert len(e.actions) == 6 and np.all(e.log_probs <= 0)
    # membership before step t covers exactly the first t tables visited
    for t in range(6):
        assert e.members[t].sum() == t


@pytest.mark.parametrize("w", [0.0, 0.001, 0.3])
@pytest.mark.parametrize("w_cost", [True, False])
def test_reinforce_gradients(w, w_cost):
    pol, eps = _episodes(seed=1, w_cost=w_cost)
    # keep every ReLU off its kink: zero biases meet all-zero cost features at t=0
    rng = np.random.default_rng(9)
    for name, p in pol.params().items():
        if ".b" in name:
            p += rng.normal(0.0, 0.1, p.shape)
    loss, grads = reinforce_loss_and_grad(pol, eps, w)
    rep = grad_check(pol.params(), lambda: reinforce_loss_and_grad(pol, eps, w)[0], grads, probes=20,
                     rng=np.random.default_rng(0))
    assert rep.ok, (rep.max_rel_err, rep.names)


def test_equal_rewards_leave_only_entropy():
    pol, eps = _episodes(seed=2, rewards=[-5.0] * 4)
    _, g0 = reinforce_loss_and_grad(pol, eps, 0.0)
    assert all(np.all(v == 0) for v in g0.values())
    _, g1 = reinforce_loss_and_grad(pol, eps, 0.01)
    assert any(np.any(v != 0) for v in g1.values())


def _logp_of(pol, e):
    from shardplan.nn import masked_log_softmax

    z = pol.encode_tables(e.feats)
    out = 0.0
    for t, a in enumerate(e.actions):
        sets = [np.flatnonzero(e.members[t, d]) for d in range(e.members.shape[1])]
        out += masked_log_softmax(pol.scores(z, sets, e.q[t]), e.legal[t])[a]
    return out


def test_better_episode_becomes_more_likely():
    pol, eps = _episodes(seed=3, n=2, rewards=[-10.0, -20.0])
    assert eps[0].actions.tolist() != eps[1].actions.tolist()
    before = _logp_of(pol, eps[0])
    reinforce_update(pol, eps, Adam(1e-3, 10), w_entropy=0.0)
    assert _logp_of(pol, eps[0]) > before


def test_entropy_bonus_raises_entropy():
    pol, eps = _episodes(seed=4, rewards=[-7.0] * 4)
    h0 = policy_entropy(pol, eps)
    _, g0 = reinforce_loss_and_grad(pol, eps, 0.0)
    assert all(np.all(v == 0) for v in g0.values())
    # one small plain gradient step on the entropy term alone
    _, g = reinforce_loss_and_grad(pol, eps, 0.5)
    for k, p in pol.params().items():
        p -= 1e-3 * g[k]
    assert policy_entropy(pol, eps) > h0


def test_greedy_rollout_is_deterministic_and_general():
    rng = np.random.default_rng(5)
    pol = PolicyNet(rng)
    net = CostNet(rng)
    for M, D in [(1, 1), (9, 5), (30, 2)]:
        task = random_task(rng, M, D)
        f = feature_matrix(task.tables, FeatureStats.fit(task.tables))
        env = PlacementEnv(task, EstimatedProvider(net, f, D), f)
        a = rollout(pol, env, range(M), greedy=True)
        b = rollout(pol, env, range(M), greedy=True)
        assert a.actions.tolist() == b.actions.tolist() and len(a.actions) == M


def test_sampling_needs_rng():
    rng = np.random.default_rng(6)
    task = random_task(rng, 2, 2)
    env = PlacementEnv(task, EstimatedProvider(CostNet(rng), np.zeros((2, 21)), 2))
    with pytest.raises(BadInput):
        rollout(PolicyNet(rng), env, [0, 1])
