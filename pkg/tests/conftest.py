import numpy as np
import pytest

from ticketlab.config import PruneConfig, TrainConfig
from ticketlab.datasets import gen_blobs
from ticketlab.model import ParamEntry, ParamSet, init_params, mlp


@pytest.fixture
def tiny_model():
    return mlp(2, [8, 8], 3)


@pytest.fixture
def blobs():
    return gen_blobs(60, 3, 2, 1.0, seed=0)


@pytest.fixture
def theta_0(tiny_model):
    return init_params(tiny_model, 0)


@pytest.fixture
def fast_train():
    return TrainConfig(epochs=3, lr0=0.05, milestones=[2], batch_size=16)


@pytest.fixture
def half_prune():
    return PruneConfig(algorithm="one_shot", target_sparsity=0.5)


def random_params(rng, shapes, dtype=np.float64) -> ParamSet:
    """A ParamSet of prunable weights with the given shapes (no biases)."""
    return ParamSet(
        [ParamEntry(f"layer{i}.weight", rng.standard_normal(shape).astype(dtype), True) for i, shape in enumerate(shapes)]
    )
