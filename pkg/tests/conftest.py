import numpy as np
import pytest

from costar.pkpd import DomainSpec, PKPDParams, PolicyParams, generate_domain_dataset


@pytest.fixture(scope="session")
def small_source():
    spec = DomainSpec(gamma=10.0, horizon=20, n_train=12, n_val=6, n_test=6, seed=123)
    return generate_domain_dataset(spec, domain="source")


@pytest.fixture(scope="session")
def small_target():
    spec = DomainSpec(gamma=0.0, horizon=20, n_train=5, n_val=6, n_test=6, seed=321)
    return generate_domain_dataset(spec, domain="target")


@pytest.fixture()
def fixed_params():
    return PKPDParams(
        carrying_capacity=30.0,
        growth_rate=0.06,
        chemo_sensitivity=0.02,
        radio_linear=0.03,
        radio_quadratic=0.003,
        noise_std=0.01,
    )


@pytest.fixture()
def unbiased_policy():
    return PolicyParams.from_gamma(0.0)


@pytest.fixture()
def rng():
    return np.random.default_rng(7)
