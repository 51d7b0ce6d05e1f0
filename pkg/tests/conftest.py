import os
from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def ml100k_path():
    env = os.environ.get("NCIMPUTE_ML100K")
    path = Path(env) if env else Path.home() / ".cache" / "ncimpute" / "ml-100k" / "u.data"
    return path if path.is_file() else None


@pytest.fixture
def rng():
    import numpy as np

    return np.random.default_rng(12345)
