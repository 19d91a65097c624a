import numpy as np
import pytest

import userrep.autodiff as ad


@pytest.fixture(autouse=True)
def float64_mode():
    """Tests run at 64-bit precision unless they opt out explicitly."""
    ad.set_default_dtype(np.float64)
    yield
    ad.set_default_dtype(np.float64)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
