import numpy as np
import pytest

from weakseg import _accel


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(params=[True, False], ids=["numba", "numpy"])
def use_numba(request):
    if request.param and _accel.numba is None:
        pytest.skip("numba not installed")
    return request.param


@pytest.fixture
def report(capsys):
    """Print an acceptance line that survives pytest's output capture."""

    def emit(line):
        with capsys.disabled():
            print(f"\n{line}")

    return emit
