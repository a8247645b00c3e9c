import os
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

from hamlet.bench.config import ExperimentConfig  # noqa: E402
from hamlet.model import build_net  # noqa: E402

settings.register_profile("default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_net(rng):
    return build_net([5, 7, 6, 4, 3], rng)


def tiny_config(**overrides) -> ExperimentConfig:
    """A fast episode: short phases, small holdouts, quick pretraining."""
    base = {
        "stream.frames_per_domain": 60,
        "stream.source_size": 600,
        "model.pretrain_epochs": 15,
        "model.head_epochs": 150,
        "eval.cadence": 30,
        "eval.holdout_size": 60,
        "detector.m": 10,
        "modulation.k_l_min": 5,
        "modulation.k_l_max": 20,
        "trainer.buffer_size": 200,
    }
    base.update(overrides)
    return ExperimentConfig().replace(**base)


@pytest.fixture
def tiny_cfg():
    return tiny_config()
