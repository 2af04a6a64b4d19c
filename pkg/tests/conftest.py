import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture(autouse=True)
def _fixed_torch_seed():
    # tests draw their own generators; this guards stray global draws
    torch.manual_seed(1234)
    yield
