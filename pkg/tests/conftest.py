import sys

import numpy as np
import pytest

from regate.config import ExperimentConfig, load_config
from regate.data import generate_dataset
from regate.harness import pretrain_teacher, run_experiment
from regate.model import init_params
from regate.selfcheck import random_batch, small_config


@pytest.fixture
def cfg64():
    return small_config()


@pytest.fixture
def params64(cfg64):
    return init_params(cfg64, seed=0, dtype=np.float64, init_std=0.3)


@pytest.fixture
def batch64(cfg64):
    return random_batch(cfg64, np.random.default_rng(0))


@pytest.fixture(scope="session")
def default_cfg() -> ExperimentConfig:
    return ExperimentConfig()


@pytest.fixture(scope="session")
def splits(default_cfg):
    return generate_dataset(default_cfg.task)


@pytest.fixture(scope="session")
def pretrained(default_cfg, splits):
    """(teacher, report) pretrained on the default synthetic task."""
    return pretrain_teacher(default_cfg, splits)


@pytest.fixture(scope="session")
def short_runs(pretrained):
    """Baseline and regate arms over warm-up plus two full cycles, sharing one teacher."""
    cfg = load_config(None, ["mode=\"both\"", "train.n_steps=356", "train.eval_every=100",
                             "train.record_wall_clock=false"])
    return run_experiment(cfg, teacher=pretrained[0])


def pytest_terminal_summary(terminalreporter):
    # repeat the acceptance lines so they show without -s
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    lines = getattr(mod, "LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
