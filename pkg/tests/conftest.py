import numpy as np
import pytest

from cae.data import make_batch
from cae.model import init_model
from cae.trainer import TrainConfig


def toy_config(**kw):
    base = dict(hidden=4, batch_size=2, epochs=1, seed=0)
    base.update(kw)
    return TrainConfig(**base)


def toy_batches():
    b1 = make_batch([[4, 5, 6], [7, 4]], 1)
    b2 = make_batch([[5, 5], [6, 7, 4, 4]], 2)
    return b1, b2


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def toy_model():
    return init_model(toy_config(), 8, seed=1)


@pytest.fixture
def batches():
    return toy_batches()


# criterion number -> (verdict, title, detail); filled by tests/test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        verdict, title, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n} {verdict}: {title} | {detail}")
