import numpy as np
import pytest

from shardplan.oracle import CostOracle, PlacementTask
from shardplan.tablegen import NUM_BINS, PoolSpec, TableDesc, synth_pool


def onehot(k: int) -> list[float]:
    d = [0.0] * NUM_BINS
    d[k] = 1.0
    return d


def make_table(i=0, dim=16, hash_size=10**6, pf=10.0, dist=None) -> TableDesc:
    return TableDesc.make(i, dim, hash_size, pf, dist if dist is not None else onehot(0))


def random_task(rng: np.random.Generator, M: int, D: int, cap: float = 16.0) -> PlacementTask:
    tables = [
        TableDesc.make(
            i,
            int(rng.choice([4, 8, 16, 32, 64])),
            int(10 ** rng.uniform(4, 7)),
            float(rng.uniform(0, 60)),
            list(rng.dirichlet(np.ones(NUM_BINS))),
        )
        for i in range(M)
    ]
    return PlacementTask(tables, D, cap)


@pytest.fixture(scope="session")
def small_pool():
    return synth_pool(PoolSpec(num_tables=120), seed=3)


@pytest.fixture
def oracle():
    return CostOracle()


# one line per acceptance criterion, echoed at the end of the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
