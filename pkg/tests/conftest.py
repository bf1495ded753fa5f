import pytest
import torch

from vidistill.numerics import precision


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture
def f64():
    with precision(torch.float64):
        yield
