import numpy as np
import pytest

from unified_mfq.core import Grid, KernelFamily, ProblemSpec
from unified_mfq.environments import BenchmarkParams, MixtureFixture, TabularCost, build_benchmark_spec


def tabular_spec(kernel, cost, gamma=1.0, h=0.1, name="tabular"):
    """ProblemSpec from explicit (n, k, n) kernel and (n, k) cost arrays."""
    kernel = np.asarray(kernel, dtype=float)
    n, k, _ = kernel.shape
    return ProblemSpec(Grid(tuple(range(n))), Grid(tuple(range(k))), TabularCost(np.asarray(cost, float)),
                       KernelFamily(kernel), gamma, h, name=name)


def random_kernel(rng, n, k):
    p = rng.random((n, k, n)) + 0.05
    return p / p.sum(axis=2, keepdims=True)


@pytest.fixture
def rng():
    return np.random.default_rng(20240917)


@pytest.fixture(scope="session")
def fixture():
    return MixtureFixture()


@pytest.fixture(scope="session")
def fixture_spec(fixture):
    return fixture.build()


@pytest.fixture(scope="session")
def desk_spec():
    return build_benchmark_spec(BenchmarkParams.desk())
