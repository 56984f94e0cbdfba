import os
import sys

import pytest
import torch

sys.path.insert(0, os.path.dirname(__file__))

from crowdattack.data import generate_dataset  # noqa: E402
from crowdattack.surrogate import DENSITY, POINT, train_surrogate  # noqa: E402


@pytest.fixture(scope="session")
def tiny_train():
    return generate_dataset(8, "train", 64, 64, min_count=5, max_count=30, seed=11)


@pytest.fixture(scope="session")
def tiny_test():
    return generate_dataset(4, "test", 64, 64, min_count=5, max_count=30, seed=11)


@pytest.fixture(scope="session")
def tiny_density(tiny_train):
    return train_surrogate(tiny_train, DENSITY, epochs=2, seed=0, batch_size=4)


@pytest.fixture(scope="session")
def tiny_point(tiny_train):
    return train_surrogate(tiny_train, POINT, epochs=2, seed=0, batch_size=4)


@pytest.fixture(autouse=True)
def _torch_threads():
    torch.set_num_threads(1)
    yield


DESK = {"num_train": 200, "num_test": 50, "size": 128, "surrogate_epochs": 30,
        "generator_epochs": 10, "generator_lr": 1e-3}


@pytest.fixture(scope="session")
def desk():
    """Desk-scale pipeline: data, both surrogates, one generator per surrogate."""
    import time

    from crowdattack.config import TrainConfig
    from crowdattack.generator import PerturbationGenerator
    from crowdattack.training import train_generator

    t0 = time.perf_counter()
    train = generate_dataset(DESK["num_train"], "train", DESK["size"], DESK["size"], seed=0)
    test = generate_dataset(DESK["num_test"], "test", DESK["size"], DESK["size"], seed=0)
    models = {p: train_surrogate(train, p, epochs=DESK["surrogate_epochs"], seed=0) for p in (DENSITY, POINT)}
    cfg = TrainConfig(epochs=DESK["generator_epochs"], lr=DESK["generator_lr"], seed=0)
    gens = {}
    for p, m in models.items():
        torch.manual_seed(0)
        gens[p] = train_generator(PerturbationGenerator(), m, train, cfg).generator
    return {"train": train, "test": test, "models": models, "generators": gens,
            "seconds": time.perf_counter() - t0, **DESK}
