import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from cetplan.harness import split_dataset, teacher_regression, train_toy, two_moons  # noqa: E402
from cetplan.model import init_params, mlp  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def teacher_splits():
    return split_dataset(teacher_regression(1792, seed=0), {"train": 1024, "calibration": 256, "eval": 512}, 0)


@pytest.fixture(scope="session")
def trained_mlp(teacher_splits):
    """3-layer tanh regression MLP trained to a convergence point (386 params)."""
    return train_toy(mlp([4, 16, 16, 2], "tanh", "mse"), teacher_splits["train"], seed=0)


@pytest.fixture(scope="session")
def tiny_classifier():
    """Trained 2-layer classifier with under 200 parameters and its data."""
    ds = split_dataset(two_moons(768, noise=0.35, seed=0), {"train": 512, "calibration": 256}, 0)
    ckpt = train_toy(mlp([2, 12, 2], "tanh", "cross_entropy"), ds["train"], seed=0)
    return ckpt, ds


@pytest.fixture(scope="session")
def random_net():
    spec = mlp([3, 6, 5, 2], "tanh", "cross_entropy")
    params = init_params(spec, seed=3)
    ds = two_moons(16, seed=4)
    from cetplan.model import Dataset

    x = np.concatenate([ds.inputs, np.random.default_rng(5).standard_normal((16, 1))], axis=1)
    return spec, params, Dataset(x, ds.labels, "calibration", 2)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
