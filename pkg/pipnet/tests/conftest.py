import sys
import os

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

import numpy as np
import pytest

from app.data import generate_domain
from app.schemas import BackboneConfig, DomainStyle, RunConfig, SynthConfig, TrainSchedule

DATA_DIR = os.path.join(os.path.dirname(__file__), "data")


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run the long trend checks")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running trend check, enabled with --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(autouse=True)
def _isolated_env(monkeypatch, tmp_path):
    """Reports go to a temp dir and carry no wall-clock noise."""
    monkeypatch.setenv("PIPNET_OUTPUT_ROOT", str(tmp_path / "runs"))
    monkeypatch.setenv("PIPNET_RECORD_TIMING", "false")
    monkeypatch.delenv("PIPNET_FIXTURES_DIR", raising=False)


@pytest.fixture
def tiny_backbone() -> BackboneConfig:
    return BackboneConfig(widths=[4, 8, 8], modifier_width=8)


@pytest.fixture
def tiny_run_config(tiny_backbone) -> RunConfig:
    """A RunConfig small enough for a few epochs in a unit test."""
    return RunConfig.model_validate({
        "seed": 3,
        "backbone": tiny_backbone.model_dump(),
        "head": {"kind": "PIP_NRM", "num_neighbors": 2},
        "data": {"train_count": 12, "test_count": 6, "unlabeled_count": 6},
        "schedule": TrainSchedule(epochs=2, decay_epochs=[1], batch_size=4, seed=3).model_dump(),
        "augment": {"translate_prob": 0, "occlusion_prob": 0, "flip_prob": 0, "rotate_prob": 0, "blur_prob": 0},
        "curriculum": {"tasks": ["T1", "T2", "T3"], "epochs_per_round": 1},
        "bench": {"n_warmup": 0, "n_runs": 2},
        "sweep": {"strides": [8, 16], "neighbor_counts": [0, 2]},
        "prior": {"head_kinds": ["COORD"], "num_test_images": 2},
    })


@pytest.fixture(scope="session")
def face_samples():
    """Twelve cropped style-A faces (64x64), shared read-only across tests."""
    return generate_domain(SynthConfig(), DomainStyle.A, 12, seed=11)


@pytest.fixture
def rng_array():
    return np.random.default_rng(1234)
