import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", max_examples=30, deadline=None)
settings.load_profile("default")

from dcdir.kg import load_toy  # noqa: E402
from dcdir.synth import GenConfig, generate, split  # noqa: E402
from dcdir.train import TrainConfig, train  # noqa: E402
from dcdir.transd import TransDConfig, pretrain  # noqa: E402


@pytest.fixture(scope="session")
def toy_kg():
    return load_toy()


@pytest.fixture(scope="session")
def toy_table(toy_kg):
    return pretrain(toy_kg, TransDConfig(dim=16, epochs=100, seed=0))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


SMALL_GEN = dict(n_users=200, seed=3)
SMALL_TRAIN = dict(epochs=2, kg_epochs=30, word_epochs=3, dim=16, seed=0)


@pytest.fixture(scope="session")
def small_ds():
    return generate(GenConfig(**SMALL_GEN))


@pytest.fixture(scope="session")
def small_run(small_ds):
    cfg = TrainConfig(**SMALL_TRAIN)
    sp = split(small_ds, cfg.cold_start_fraction, cfg.eta, cfg.seed)
    return cfg, sp, train(small_ds, cfg, splits=sp)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, detail = results[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
