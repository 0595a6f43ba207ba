from __future__ import annotations

import pytest
from hypothesis import settings

from calibloss.datagen import ConfigRange, generate_dataset

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


@pytest.fixture(scope="session")
def rng_range() -> ConfigRange:
    return ConfigRange()


@pytest.fixture(scope="session")
def small_dataset(rng_range):
    return generate_dataset(rng_range, 40, 11)
