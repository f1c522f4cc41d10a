import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from gradfix.config import load_config
from gradfix.datasets import LabeledDataset
from gradfix.harness import prepare_fixture
from gradfix.model import ModelSpec, init_params

settings.register_profile("default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def canonical_cfg():
    return load_config()


@pytest.fixture(scope="session")
def canonical(canonical_cfg):
    """Pre-trained and fine-tuned models for world seed 0."""
    return prepare_fixture(canonical_cfg)


@pytest.fixture
def tiny_spec():
    return ModelSpec(input_dim=3, hidden_dims=(4,), num_classes=3)


def random_problem(seed, spec, n=7):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, spec.input_dim))
    y = rng.integers(0, spec.num_classes, size=n)
    theta = init_params(spec, seed)
    theta = theta.like(theta.values + 0.1 * rng.standard_normal(theta.size))
    return theta, LabeledDataset(X, y, num_classes=spec.num_classes)
