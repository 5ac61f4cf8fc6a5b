"""Training loop, inference, task sampling and benchmark reports."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .baselines import EXPERT_NAMES, STRATEGY_NAMES, greedy_placement, random_placement
from .checkpoint import Checkpoint
from .costnet import CostNet, CostSample, ReplayBuffer, train_steps
from .errors import BadInput, Infeasible, TooLarge
from .mdp import EstimatedProvider, PlacementEnv
from .nn import Adam
from .oracle import CostOracle, OracleConfig, PlacementTask
from .policy import PolicyNet, reinforce_update, rollout
from .tablegen import FeatureStats, PoolSpec, TablePool, feature_matrix, synth_pool

# independent random streams derived from the run seed
_SPLIT, _TRAIN_TASKS, _TEST_TASKS, _INIT, _LOOP, _BENCH = range(6)


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, stream])


@dataclass
class RunConfig:
    pool: str | None = None  # pool JSON path; None means synthesize from pool_spec
    pool_spec: dict = field(default_factory=dict)
    pool_seed: int = 0
    num_tables: int = 50
    num_devices: int = 4
    mem_cap_gb: float = 16.0
    n_train_tasks: int = 50
    n_test_tasks: int = 50
    iterations: int = 10
    n_collect: int = 10
    n_cost: int = 300
    n_batch: int = 64
    n_rl: int = 10
    n_episode: int = 10
    w_entropy: float = 0.001
    lr: float = 5e-4
    seed: int = 0
    oracle: dict = field(default_factory=dict)
    feature_mask: list[bool] | None = None
    reduction_tables: str = "sum"
    reduction_devices: str = "max"
    use_cost_features: bool = True
    eval_num_tables: int | None = None  # test-task size in benchmarks; defaults to num_tables

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        positive = ("num_tables", "num_devices", "n_collect", "n_cost", "n_batch", "n_rl", "n_episode")
        for name in positive:
            if int(getattr(self, name)) < 1:
                raise BadInput(f"{name} must be positive")
        for name in ("iterations", "n_train_tasks", "n_test_tasks"):
            if int(getattr(self, name)) < 0:
                raise BadInput(f"{name} must be non-negative")
        if self.mem_cap_gb <= 0 or self.lr < 0 or self.w_entropy < 0:
            raise BadInput("mem_cap_gb must be positive, lr and w_entropy non-negative")
        if self.eval_num_tables is not None and self.eval_num_tables < 1:
            raise BadInput("eval_num_tables must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise BadInput(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as e:
            raise BadInput(str(e)) from e

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            d = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise BadInput(f"cannot read config: {e}") from e
        if not isinstance(d, dict):
            raise BadInput("config must be a JSON object")
        return cls.from_dict(d)

    def oracle_config(self) -> OracleConfig:
        return OracleConfig.from_dict(self.oracle)

    def load_pool(self) -> TablePool:
        if self.pool is not None:
            return TablePool.load(self.pool)
        return synth_pool(PoolSpec.from_dict(self.pool_spec), self.pool_seed)


# ---------------------------------------------------------------------------
# pools and tasks


def split_pool(pool: TablePool, seed: int = 0) -> tuple[TablePool, TablePool]:
    """Random halves; the first gets the extra table when the count is odd."""
    perm = np.random.default_rng(seed).permutation(len(pool))
    k = math.ceil(len(pool) / 2)
    train = [pool.tables[i] for i in sorted(perm[:k])]
    test = [pool.tables[i] for i in sorted(perm[k:])]
    return TablePool.from_tables(train, pool.batch_size), TablePool.from_tables(test, pool.batch_size)


def sample_tasks(
    pool: TablePool, num_tables: int, count: int, num_devices: int, mem_cap_gb: float, seed: int = 0
) -> list[PlacementTask]:
    if num_tables > len(pool):
        raise BadInput(f"cannot draw {num_tables} distinct tables from a pool of {len(pool)}")
    if num_tables < 1:
        raise BadInput("num_tables must be positive")
    rng = np.random.default_rng(seed)
    tasks = []
    for _ in range(count):
        idx = rng.choice(len(pool), size=num_tables, replace=False)
        tables = [pool.tables[int(i)].with_id(j) for j, i in enumerate(idx)]
        tasks.append(PlacementTask(tables, num_devices, mem_cap_gb, pool.batch_size))
    return tasks


@dataclass
class Workload:
    train_pool: TablePool
    test_pool: TablePool
    stats: FeatureStats
    train_tasks: list[PlacementTask]
    test_tasks: list[PlacementTask]


def build_workload(cfg: RunConfig, pool: TablePool | None = None) -> Workload:
    pool = pool if pool is not None else cfg.load_pool()
    train_pool, test_pool = split_pool(pool, _rng(cfg.seed, _SPLIT).integers(2**31))
    stats = FeatureStats.fit(train_pool.tables)
    train_tasks = sample_tasks(
        train_pool, cfg.num_tables, cfg.n_train_tasks, cfg.num_devices, cfg.mem_cap_gb,
        int(_rng(cfg.seed, _TRAIN_TASKS).integers(2**31)),
    )
    test_tasks = sample_tasks(
        test_pool, cfg.eval_num_tables or cfg.num_tables, cfg.n_test_tasks, cfg.num_devices, cfg.mem_cap_gb,
        int(_rng(cfg.seed, _TEST_TASKS).integers(2**31)),
    )
    return Workload(train_pool, test_pool, stats, train_tasks, test_tasks)


# ---------------------------------------------------------------------------
# training and inference


def table_order(net: CostNet, feats: np.ndarray) -> list[int]:
    """Tables by predicted single-table cost, largest first; ties by id."""
    if len(feats) == 0:
        return []
    c = net.single_table_cost(feats)
    return sorted(range(len(c)), key=lambda i: (-c[i], i))


def heuristic_order(tables) -> list[int]:
    """Tables by dim * pooling factor, largest first; used before the cost net has seen data."""
    c = [t.dim * t.pooling_factor for t in tables]
    return sorted(range(len(c)), key=lambda i: (-c[i], i))


_MAX_RESAMPLE = 100


def _collect_episode(wl, feats, net, pol, rng, first: bool):
    """One sampled episode on the estimated MDP; tasks that hit a dead end are redrawn."""
    for _ in range(_MAX_RESAMPLE):
        k = int(rng.integers(len(wl.train_tasks)))
        task, f = wl.train_tasks[k], feats[k]
        order = heuristic_order(task.tables) if first else table_order(net, f)
        env = PlacementEnv(task, EstimatedProvider(net, f, task.num_devices), f)
        try:
            return k, rollout(pol, env, order, rng=rng, record=False)
        except Infeasible:
            continue
    raise Infeasible(f"no feasible episode after {_MAX_RESAMPLE} task draws")


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    metrics: list[dict]
    buffer: ReplayBuffer

    def metrics_jsonl(self) -> str:
        return "".join(json.dumps(m, sort_keys=True) + "\n" for m in self.metrics)


def init_checkpoint(cfg: RunConfig, stats: FeatureStats) -> Checkpoint:
    rng = _rng(cfg.seed, _INIT)
    net = CostNet(rng, cfg.reduction_tables, cfg.reduction_devices, cfg.feature_mask)
    pol = PolicyNet(rng, cfg.feature_mask, cfg.use_cost_features)
    return Checkpoint(net, pol, stats, cfg.to_dict())


def train(
    cfg: RunConfig,
    oracle: CostOracle | None = None,
    workload: Workload | None = None,
    log: Callable[[dict], None] | None = None,
) -> TrainResult:
    oracle = oracle if oracle is not None else CostOracle(cfg.oracle_config())
    wl = workload if workload is not None else build_workload(cfg)
    if not wl.train_tasks:
        raise BadInput("training needs at least one task")
    ck = init_checkpoint(cfg, wl.stats)
    net, pol = ck.cost_net, ck.policy
    rng = _rng(cfg.seed, _LOOP)
    feats = [feature_matrix(t.tables, wl.stats) for t in wl.train_tasks]
    buffer = ReplayBuffer()
    opt_cost = Adam(cfg.lr, cfg.iterations * cfg.n_cost)
    opt_pol = Adam(cfg.lr, cfg.iterations * cfg.n_rl)
    metrics = []

    for it in range(cfg.iterations):
        # 1) collect: sample placements on the estimated MDP, measure them with the oracle
        calls_before = oracle.total_calls
        costs = []
        for _ in range(cfg.n_collect):
            k, ep = _collect_episode(wl, feats, net, pol, rng, first=it == 0)
            task, f = wl.train_tasks[k], feats[k]
            sets: list[list[int]] = [[] for _ in range(task.num_devices)]
            for i, a in zip(ep.order, ep.actions):
                sets[int(a)].append(i)
                b = oracle.evaluate_assignment(task, sets)
                buffer.add(CostSample(f, [list(s) for s in sets], b.cost_features(), b.overall_ms, k))
            costs.append(b.overall_ms)

        # 2) fit the cost network on everything collected so far
        losses = train_steps(net, buffer, cfg.n_cost, cfg.n_batch, opt_cost, rng)

        # 3) policy updates against the estimated MDP only
        pol_losses, est_rewards = [], []
        for _ in range(cfg.n_rl):
            k = int(rng.integers(len(wl.train_tasks)))
            task, f = wl.train_tasks[k], feats[k]
            env = PlacementEnv(task, EstimatedProvider(net, f, task.num_devices), f)
            order = table_order(net, f)
            z = pol.encode_tables(f)
            try:
                eps = [rollout(pol, env, order, rng=rng, z=z) for _ in range(cfg.n_episode)]
            except Infeasible:
                continue  # sampled placements painted themselves into a corner; skip this task
            est_rewards.extend(e.reward for e in eps)
            pol_losses.append(reinforce_update(pol, eps, opt_pol, cfg.w_entropy))

        rec = {
            "iteration": it + 1,
            "mean_train_cost_ms": float(np.mean(costs)),
            "cost_loss_first": losses[0],
            "cost_loss_last": losses[-1],
            "cost_loss_mean": float(np.mean(losses)),
            "policy_loss_mean": float(np.mean(pol_losses)) if pol_losses else None,
            "mean_estimated_cost_ms": -float(np.mean(est_rewards)) if est_rewards else None,
            "buffer_size": len(buffer),
            "oracle_calls": oracle.total_calls - calls_before,
        }
        metrics.append(rec)
        if log is not None:
            log(rec)
    return TrainResult(ck, metrics, buffer)


@dataclass
class Inference:
    placement: np.ndarray
    predicted_ms: float
    order: list[int]
    actions: list[int]
    evaluated: object = None  # CostBreakdown when requested

    def to_dict(self) -> dict:
        d = {
            "placement": [int(x) for x in self.placement],
            "predicted_ms": self.predicted_ms,
            "order": self.order,
            "actions": self.actions,
        }
        if self.evaluated is not None:
            d["evaluated_ms"] = self.evaluated.overall_ms
            d["breakdown"] = self.evaluated.to_dict()
        return d


def infer(ck: Checkpoint, task: PlacementTask, oracle: CostOracle | None = None, evaluate: bool = False) -> Inference:
    """Greedy policy on the estimated MDP; the oracle is touched only when ``evaluate``."""
    if evaluate and oracle is None:
        raise BadInput("evaluate=True needs an oracle")
    f = feature_matrix(task.tables, ck.stats)
    provider = EstimatedProvider(ck.cost_net, f, task.num_devices)
    env = PlacementEnv(task, provider, f)
    order = table_order(ck.cost_net, f)
    ep = rollout(ck.policy, env, order, greedy=True, record=False)
    res = Inference(ep.placement, -ep.reward if task.num_tables else 0.0, list(order), [int(a) for a in ep.actions])
    if evaluate:
        res.evaluated = oracle.evaluate_placement(task, ep.placement)
    return res


# ---------------------------------------------------------------------------
# benchmark


def place_with(
    strategy: str,
    task: PlacementTask,
    *,
    ck: Checkpoint | None = None,
    oracle: CostOracle | None = None,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    if strategy == "random":
        return random_placement(task, rng if rng is not None else np.random.default_rng(0))
    if strategy in EXPERT_NAMES:
        return greedy_placement(task, strategy)
    if strategy == "dreamshard":
        if ck is None:
            raise BadInput("dreamshard needs a checkpoint")
        return infer(ck, task).placement
    if strategy == "bruteforce":
        if oracle is None:
            raise BadInput("bruteforce needs an oracle")
        return oracle.brute_force_optimum(task)[0]
    raise BadInput(f"unknown strategy {strategy!r}; choose from {STRATEGY_NAMES}")


def parse_strategies(spec: str | Iterable[str]) -> list[str]:
    names = spec.split(",") if isinstance(spec, str) else list(spec)
    if names == ["all"]:
        names = list(STRATEGY_NAMES)
    for n in names:
        if n not in STRATEGY_NAMES:
            raise BadInput(f"unknown strategy {n!r}; choose from {STRATEGY_NAMES}")
    if "random" not in names:
        names = ["random"] + names  # always the denominator
    return list(dict.fromkeys(names))


def _summary(costs: Sequence[float]) -> dict:
    a = np.asarray(costs, dtype=np.float64)
    if a.size == 0:
        return {"mean_ms": None, "std_ms": None, "costs_ms": []}
    return {"mean_ms": float(a.mean()), "std_ms": float(a.std()), "costs_ms": [float(x) for x in a]}


def speedup(random_mean: float, x_mean: float) -> float:
    return (random_mean - x_mean) / x_mean


def benchmark(
    cfg: RunConfig,
    strategies: str | Iterable[str] = "all",
    ck: Checkpoint | None = None,
    oracle: CostOracle | None = None,
    workload: Workload | None = None,
) -> dict:
    names = parse_strategies(strategies)
    oracle = oracle if oracle is not None else CostOracle(cfg.oracle_config())
    wl = workload if workload is not None else build_workload(cfg)
    if "dreamshard" in names and ck is None:
        ck = train(cfg, CostOracle(cfg.oracle_config()), wl).checkpoint
    report: dict = {"config": cfg.to_dict(), "strategies": {}, "skipped": {}}
    for name in names:
        entry = {}
        try:
            for split, tasks in (("train", wl.train_tasks), ("test", wl.test_tasks)):
                rng = _rng(cfg.seed, _BENCH)
                costs = []
                for task in tasks:
                    p = place_with(name, task, ck=ck, oracle=oracle, rng=rng)
                    costs.append(oracle.evaluate_placement(task, p).overall_ms)
                entry[split] = _summary(costs)
        except TooLarge as e:
            report["skipped"][name] = str(e)
            continue
        report["strategies"][name] = entry
    base = report["strategies"]["random"]
    for entry in report["strategies"].values():
        for split in ("train", "test"):
            r, x = base[split]["mean_ms"], entry[split]["mean_ms"]
            entry[split]["speedup_vs_random"] = None if r is None else speedup(r, x)
    return report


def report_json(report: dict) -> str:
    return json.dumps(report, sort_keys=True, indent=2) + "\n"


def report_text(report: dict) -> str:
    header = ("strategy", "train mean", "train std", "train vs rnd", "test mean", "test std", "test vs rnd")
    rows = [header]

    def fmt(v, pct=False):
        if v is None:
            return "-"
        return f"{100 * v:+.1f}%" if pct else f"{v:.3f}"

    for name, e in report["strategies"].items():
        tr, te = e["train"], e["test"]
        rows.append((
            name,
            fmt(tr["mean_ms"]), fmt(tr["std_ms"]), fmt(tr["speedup_vs_random"], True),
            fmt(te["mean_ms"]), fmt(te["std_ms"]), fmt(te["speedup_vs_random"], True),
        ))
    widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
    lines = []
    for r in rows:
        lines.append("  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths))))
    for name, why in report.get("skipped", {}).items():
        lines.append(f"skipped {name}: {why}")
    return "\n".join(lines) + "\n"
