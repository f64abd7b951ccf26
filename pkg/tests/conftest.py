import numpy as np
import pytest

from fedsim.data import DeviceShard, FederatedDataset, SyntheticSpec, generate_synthetic


@pytest.fixture(scope="session")
def small_synthetic():
    return generate_synthetic(SyntheticSpec(alpha=1.0, beta=1.0, num_devices=8, seed=3))


def make_shard(x, y, device_id=0):
    n = len(y)
    return DeviceShard(device_id, np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.int64),
                       np.arange(n), np.empty(0, dtype=np.int64))


def identical_dataset(shard, copies):
    shards = [make_shard(shard.features, shard.labels, k) for k in range(copies)]
    return FederatedDataset(shards, shard.features.shape[1], int(shard.labels.max()) + 1, {})


ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
