import numpy as np
import pytest
import torch

from tbpslab.model import DualEncoder, ModelConfig, Tokenizer
from tbpslab.synthetic import DatasetConfig, PersonAttributes, build_dataset, generate_scene

torch.set_num_threads(2)


@pytest.fixture(scope="session")
def tiny_splits():
    cfg = DatasetConfig(
        seed=7,
        train_identities=6,
        gallery_identities=5,
        train_scenes=14,
        gallery_scenes=12,
        num_queries=8,
        persons_per_scene=(1, 2),
    )
    return build_dataset(cfg)


@pytest.fixture(scope="session")
def model():
    return DualEncoder(ModelConfig(), init_seed=3)


@pytest.fixture(scope="session")
def tokenizer(model):
    return Tokenizer(model.cfg.vocab)


@pytest.fixture(scope="session")
def sample_scene():
    people = [
        PersonAttributes(0, "red", "blue", "bag", 1.0),
        PersonAttributes(1, "green", "white", "hat", 1.2),
    ]
    return generate_scene(people, background_id=5, rng_seed=11)


def make_unit(vec) -> torch.Tensor:
    v = torch.as_tensor(vec, dtype=torch.float64)
    return v / v.norm()


def random_unit_rows(rng: np.random.Generator, n: int, dim: int) -> torch.Tensor:
    m = torch.from_numpy(rng.normal(size=(n, dim)))
    return m / m.norm(dim=1, keepdim=True)
