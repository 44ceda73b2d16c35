import sys

import numpy as np
import pytest
from hypothesis import settings

from poiaug.data import CheckIn
from poiaug.model import ModelConfig, Seq2SeqModel

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")

T0 = 1_600_000_000


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_model(vocab_size=20, seed=0, scale=None, **cfg):
    """Model with the package initializer, optionally re-drawn uniformly in [-scale, scale]."""
    model = Seq2SeqModel.initialize(ModelConfig(vocab_size=vocab_size, **cfg), seed)
    if scale is not None:
        gen = np.random.default_rng(seed + 1)
        for name, value in model.store.values.items():
            value[...] = gen.uniform(-scale, scale, value.shape)
    return model


def checkins(user, hours, pois=None, lat=40.0, lng=-74.0, step_km=0.0):
    """Check-ins at ``T0 + h * 3600`` for each h, walking east by ``step_km`` per record."""
    pois = pois or [f"p{i}" for i in range(len(hours))]
    out = []
    for i, (h, p) in enumerate(zip(hours, pois)):
        out.append(CheckIn(user, T0 + int(round(h * 3600)), lat, lng + i * step_km / 85.0, p))
    return out


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    results = getattr(acceptance, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
