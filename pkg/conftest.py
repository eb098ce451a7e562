import numpy as np
import pytest

from mrmp.models.schemas import RunConfig
from mrmp.services.data_service import make_synthetic_dataset, split_dataset
from mrmp.services.training_service import training_service


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run long acceptance experiments")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running acceptance experiment")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_config(out, **overrides) -> RunConfig:
    values = dict(d_model=16, n_heads=2, dropout=0.0, epochs=2, batch_size=16, lr=0.001, out=out)
    values.update(overrides)
    return RunConfig(**values)


@pytest.fixture(scope="session")
def tiny_run(tmp_path_factory):
    """One short training run on the synthetic corpus, shared by checkpoint/API tests"""
    out = tmp_path_factory.mktemp("tiny_run")
    dataset = make_synthetic_dataset("function", n_instances=60, seed=0)
    train, valid, test = split_dataset(dataset, (0.6, 0.2, 0.2), seed=0)
    result = training_service.train(tiny_config(out), train=train, valid=valid)
    return result, train, valid, test
