import os

import hypothesis
import numpy as np
import pytest

from blockquant.container import CalibrationSet
from blockquant.fixtures import image_task, make_fixtures, mlp_task, tiny_mlp, tiny_resnet

np.seterr(all="warn")

hypothesis.settings.register_profile("fast", max_examples=5)
hypothesis.settings.register_profile("ci", max_examples=200, deadline=None)
hypothesis.settings.register_profile("default", max_examples=50, deadline=None)
hypothesis.settings.load_profile(os.getenv("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def mlp(rng):
    return tiny_mlp(rng)


@pytest.fixture
def resnet(rng):
    return tiny_resnet(rng)


@pytest.fixture
def mlp_calib():
    x, y = mlp_task(np.random.default_rng(7), 64)
    return CalibrationSet(x, y, source='memory', seed=7)


@pytest.fixture
def resnet_calib():
    x, y = image_task(np.random.default_rng(7), 32)
    return CalibrationSet(x, y, source='memory', seed=7)


@pytest.fixture(scope="session")
def fixture_dir(tmp_path_factory):
    """Trained toy models, datasets and a latency table, built once per session."""
    out = tmp_path_factory.mktemp("fixtures")
    make_fixtures(str(out), seed=0)
    return out
