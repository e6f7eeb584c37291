import numpy as np
import pytest

from ssimadv.model import Conv2D, Dense, Flatten, ReLU, ScoreModel


def tiny_model(seed=0, input_shape=(6, 6, 1), n_classes=3):
    """Conv + dense net small enough for finite-difference checks."""
    rng = np.random.default_rng(seed)
    conv = Conv2D(input_shape[2], 3, 3, stride=1, rng=rng)
    conv.bias = rng.normal(0, 0.1, 3)
    flat = int(np.prod(conv.output_shape(input_shape)))
    d1 = Dense(flat, 8, rng=rng)
    d1.bias = rng.normal(0, 0.1, 8)
    d2 = Dense(8, n_classes, rng=rng)
    return ScoreModel([conv, ReLU(), Flatten(), d1, ReLU(), d2], input_shape, n_classes)


@pytest.fixture
def small_model():
    return tiny_model()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_CRITERIA = {}


def record_criterion(number, passed, detail):
    """Remember one acceptance result; all of them are printed at the end of the run."""
    _CRITERIA[number] = (passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        passed, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if passed else 'FAIL'} - {detail}")
