from __future__ import annotations

import numpy as np
import pytest
from hypothesis import settings

from relproxy import dataops
from relproxy.train import TrainConfig

settings.register_profile("relproxy", max_examples=40, deadline=None)
settings.load_profile("relproxy")


def tiny_meta(**overrides) -> dataops.DatasetMeta:
    base = dict(c=4, k=4, n_train=6, n_test=3, seed=11)
    base.update(overrides)
    return dataops.DatasetMeta(**base)


def tiny_cfg(**overrides) -> TrainConfig:
    base = dict(epochs=2, batch_size=8, d=16, warmup_epochs=1, k_max=6, lr=0.01)
    base.update(overrides)
    return TrainConfig(**base)


@pytest.fixture(scope="session")
def tiny_dataset() -> dataops.Dataset:
    return dataops.generate(tiny_meta())


@pytest.fixture(scope="session")
def coarse_dataset() -> dataops.Dataset:
    return dataops.generate(tiny_meta(mode="coarse"))


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
