import sys

import numpy as np
import pytest

from uavnoma.config import ScenarioConfig
from uavnoma.harness import ExperimentSpec, train_offline


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def desk():
    return ScenarioConfig.desk()


@pytest.fixture(scope="session")
def small_spec():
    return ExperimentSpec(config=ScenarioConfig.desk(), episodes=3, seeds=(0,),
                          training_episodes=8, num_particles=100)


@pytest.fixture(scope="session")
def trained_model(small_spec):
    return train_offline(small_spec)


@pytest.fixture(scope="session")
def model_file(tmp_path_factory, small_spec):
    path = tmp_path_factory.mktemp("model") / "model.json"
    train_offline(small_spec, path=path)
    return path


def pytest_terminal_summary(terminalreporter):
    module = next((m for name, m in list(sys.modules.items())
                   if name.rsplit(".", 1)[-1] == "test_acceptance"), None)
    if module is None:
        return
    terminalreporter.section("acceptance criteria")
    for number in range(1, 11):
        line = module.VERDICTS.get(number, f"criterion {number:>2}: FAIL  no verdict recorded")
        terminalreporter.write_line(line)
