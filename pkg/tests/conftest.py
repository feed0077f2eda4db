import numpy as np
import pytest

from xmask import tensor as T
from xmask.benchmark import desk_classifier


@pytest.fixture
def f64():
    with T.float_mode("f64"):
        yield


@pytest.fixture(scope="session")
def desk_mnist():
    """Desk MLP on the MNIST-layout digits, seed 1 (shared, treat as read-only)."""
    return desk_classifier("mnist", seed=1)


@pytest.fixture(scope="session")
def rng_np():
    return np.random.default_rng(0)


ACCEPTANCE: dict = {}


@pytest.fixture(scope="session")
def desk_cifar():
    """Desk convnet on CIFAR-layout synthetic colour images, seed 1."""
    return desk_classifier("cifar", seed=1, n_eval=200)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
