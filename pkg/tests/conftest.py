import os
from pathlib import Path

import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def run_dir(tmp_path_factory) -> Path:
    """Shared run store for the training-backed tests; UNICOM_RUN_DIR keeps it across sessions."""
    env = os.environ.get("UNICOM_RUN_DIR")
    if env:
        path = Path(env)
        path.mkdir(parents=True, exist_ok=True)
        return path
    return tmp_path_factory.mktemp("runs")


TINY_STAGE1 = dict(width=16, depth=1, heads=2, steps=4, batch_size=2, eval_every=4, train_size=100,
                   eval_size=4, eval_euler_steps=2, warmup=2)


@pytest.fixture(scope="session")
def tiny_stage1(tmp_path_factory) -> Path:
    """A barely trained stage-1 checkpoint for wiring tests."""
    from unicom.decoder import Stage1Config, train_decoder

    return train_decoder(Stage1Config(**TINY_STAGE1), tmp_path_factory.mktemp("stage1")).checkpoint


TINY_UNIFIED = dict(width=16, depth=1, heads=2, steps=4, batch_size=2, warmup=1, train_size=100, edit_size=16,
                    eval_size=4, eval_every=2)


@pytest.fixture(scope="session")
def tiny_unified(tiny_stage1, tmp_path_factory) -> Path:
    from unicom.transfusion import UnifiedTrainConfig, train_unified

    return train_unified(UnifiedTrainConfig(**TINY_UNIFIED), tiny_stage1, tmp_path_factory.mktemp("unified")).checkpoint


@pytest.fixture(scope="session")
def tiny_trunk(tmp_path_factory) -> Path:
    from unicom.transfusion import UnifiedTrainConfig, pretrain_trunk

    return pretrain_trunk(UnifiedTrainConfig(**TINY_UNIFIED), tmp_path_factory.mktemp("trunk") / "lm.ckpt", "lm", steps=2)


# criterion number -> PASS/FAIL line, filled by the acceptance suite
ACCEPTANCE: dict[int, str] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: training-backed acceptance criteria")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[number])
