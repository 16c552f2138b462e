import pytest

from fedmax.datagen import SyntheticSpec, generate_synthetic


@pytest.fixture(scope="session")
def tiny_federation():
    """Small synthetic federation: 10 devices, 16-dim inputs."""
    spec = SyntheticSpec(gamma1=0.5, gamma2=0.5, num_devices=10, samples_per_device=23,
                         test_samples_per_device=6, in_dim=16, hidden_dim=8, seed=11)
    return generate_synthetic(spec)
