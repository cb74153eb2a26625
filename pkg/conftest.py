import os

import pytest
import torch

slow = pytest.mark.skipif(os.environ.get("GSAV_RUN_SLOW") != "1", reason="set GSAV_RUN_SLOW=1 to run")


@pytest.fixture(autouse=True)
def float64_default():
    """Oracle and finite-difference checks run in double precision"""
    previous = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(previous)
