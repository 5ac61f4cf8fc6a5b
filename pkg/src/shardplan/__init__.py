"""Learned embedding-table placement: cost network, policy network, oracle and baselines."""

from .baselines import expert_cost, greedy_placement, random_placement
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .costnet import CostNet, CostSample, ReplayBuffer
from .errors import BadInput, Infeasible, MemoryViolation, ShardplanError
from .harness import RunConfig, benchmark, infer, sample_tasks, split_pool, train
from .mdp import PlacementEnv
from .oracle import CostBreakdown, CostOracle, OracleConfig, PlacementTask
from .policy import PolicyNet
from .tablegen import FeatureStats, LookupBatch, PoolSpec, TableDesc, TablePool, synth_pool

__all__ = [
    "BadInput", "Checkpoint", "CostBreakdown", "CostNet", "CostOracle", "CostSample", "FeatureStats",
    "Infeasible", "LookupBatch", "MemoryViolation", "OracleConfig", "PlacementEnv", "PlacementTask",
    "PolicyNet", "PoolSpec", "ReplayBuffer", "RunConfig", "ShardplanError", "TableDesc", "TablePool",
    "benchmark", "expert_cost", "greedy_placement", "infer", "load_checkpoint", "random_placement",
    "sample_tasks", "save_checkpoint", "split_pool", "synth_pool", "train",
]

__version__ = "0.1.0"
