import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from unified_mfq.core import (
    Grid,
    KernelFamily,
    LearningRates,
    MomentFunctional,
    greedy_policy,
    induced_transition,
    op_P,
    op_T,
    point_mass,
    probability_vector,
    sup_norm,
    tv_distance,
    uniform,
)

from conftest import random_kernel, tabular_spec

def simplex(n):
    return arrays(float, n, elements=st.floats(0.0, 1.0)).filter(lambda w: w.sum() > 1e-3).map(lambda w: w / w.sum())


class TestGrid:
    def test_uniform_grid_sizes(self):
        assert Grid.uniform(-2, 2, 0.1).size == 41
        assert Grid.uniform(-2, 2, 0.2).size == 21

    @pytest.mark.parametrize("labels", [(), (1.0, 1.0), (2.0, 1.0)])
    def test_rejects_bad_labels(self, labels):
        with pytest.raises(ValueError):
            Grid(labels)


class TestProbabilityVector:
    def test_normalizes(self):
        np.testing.assert_allclose(probability_vector([1, 3]), [0.25, 0.75])

    def test_rejects_negative(self):
        with pytest.raises(ValueError):
            probability_vector([0.5, -0.1, 0.6])

    def test_strict_mass(self):
        with pytest.raises(ValueError):
            probability_vector([0.5, 0.6], normalize=False)

    @given(simplex(5))
    def test_sums_to_one(self, w):
        assert abs(probability_vector(w).sum() - 1.0) <= 1e-12


def test_learning_rates_ratio():
    assert LearningRates(0.0001, 0.02).ratio == pytest.approx(200)
    with pytest.raises(ValueError):
        LearningRates(-1, 1)


class TestGreedyPolicy:
    def test_zero_table_ties_to_lowest_index(self):
        assert greedy_policy(np.zeros((3, 3))).tolist() == [0, 0, 0]

    def test_index_valued_table(self):
        q = np.tile(np.arange(3.0), (3, 1))
        assert greedy_policy(q).tolist() == [0, 0, 0]

    @given(arrays(np.int64, (4, 3), elements=st.integers(-1000, 1000)),
           arrays(np.int64, 4, elements=st.integers(-1000, 1000)))
    def test_invariant_under_state_offsets(self, q, c):
        # integer-valued tables keep the offsets exact, so ties survive
        q = q.astype(float)
        c = c.astype(float)
        assert np.array_equal(greedy_policy(q), greedy_policy(q + c[:, None]))


class TestInducedTransition:
    def test_action_and_mu_independent_kernel(self, rng):
        base = random_kernel(rng, 3, 1)
        kernel = np.repeat(base, 2, axis=1)
        spec = tabular_spec(kernel, np.zeros((3, 2)))
        M = induced_transition(rng.normal(size=(3, 2)), uniform(3), spec)
        np.testing.assert_array_equal(M, base[:, 0])

    def test_flip_kernel_stay_action_is_identity(self):
        kernel = np.zeros((2, 2, 2))
        kernel[:, 0] = np.eye(2)
        kernel[:, 1] = np.eye(2)[::-1]
        spec = tabular_spec(kernel, np.zeros((2, 2)))
        q = np.array([[0.0, 1.0], [0.0, 1.0]])
        np.testing.assert_array_equal(induced_transition(q, uniform(2), spec), np.eye(2))

    def test_benchmark_rows_match_quadrature(self, desk_spec):
        from scipy.integrate import quad
        from scipy.stats import norm

        M = induced_transition(np.zeros(desk_spec.shape), uniform(21), desk_spec)
        xs = desk_spec.states.values
        sd = 0.3 * np.sqrt(desk_spec.h)
        for i in (0, 10, 17):
            mean = xs[i] + desk_spec.actions.values[0]  # zero Q -> action index 0
            masses = np.array([quad(norm(mean, sd).pdf, x - 0.1, x + 0.1, epsabs=1e-300)[0] for x in xs])
            if masses.sum() > 1e-12:
                np.testing.assert_allclose(M[i], masses / masses.sum(), atol=1e-8)

    @settings(max_examples=30)
    @given(seed=st.integers(0, 2**32 - 1))
    def test_rows_stochastic(self, seed, fixture_spec):
        r = np.random.default_rng(seed)
        M = induced_transition(r.normal(size=(3, 2)), r.dirichlet(np.ones(3)), fixture_spec)
        np.testing.assert_allclose(M.sum(axis=1), 1.0, atol=1e-12)


class TestOpP:
    def test_stationary_gives_zero(self, rng):
        from unified_mfq.oracles import stationary_distribution

        spec = tabular_spec(random_kernel(rng, 4, 2), np.zeros((4, 2)))
        q = rng.normal(size=(4, 2))
        mu = stationary_distribution(induced_transition(q, None, spec))
        assert np.abs(op_P(q, mu, spec)).max() < 1e-10

    def test_doubly_stochastic_uniform(self):
        kernel = np.full((3, 1, 3), 1 / 3)
        kernel[:, 0] = [[0.5, 0.25, 0.25], [0.25, 0.5, 0.25], [0.25, 0.25, 0.5]]
        spec = tabular_spec(kernel, np.zeros((3, 1)))
        np.testing.assert_allclose(op_P(np.zeros((3, 1)), uniform(3), spec), 0.0, atol=1e-15)

    def test_matches_naive_loop(self, rng):
        kernel = random_kernel(rng, 4, 3)
        spec = tabular_spec(kernel, np.zeros((4, 3)))
        q = rng.normal(size=(4, 3))
        mu = rng.dirichlet(np.ones(4))
        pol = [min(range(3), key=lambda a: (q[x, a], a)) for x in range(4)]
        ref = np.zeros(4)
        for x0, x1 in itertools.product(range(4), range(4)):
            ref[x1] += mu[x0] * kernel[x0, pol[x0], x1]
        np.testing.assert_allclose(op_P(q, mu, spec), ref - mu, atol=1e-15)

    @settings(max_examples=30)
    @given(seed=st.integers(0, 2**32 - 1))
    def test_mass_conservation(self, seed, fixture_spec):
        r = np.random.default_rng(seed)
        assert abs(op_P(r.normal(size=(3, 2)), r.dirichlet(np.ones(3)), fixture_spec).sum()) < 1e-12


class TestOpT:
    def test_zero_cost_zero_q(self, rng):
        spec = tabular_spec(random_kernel(rng, 3, 2), np.zeros((3, 2)))
        np.testing.assert_array_equal(op_T(np.zeros((3, 2)), uniform(3), spec), 0.0)

    def test_unit_cost_zero_q(self, rng):
        spec = tabular_spec(random_kernel(rng, 3, 2), np.ones((3, 2)), h=0.05)
        np.testing.assert_allclose(op_T(np.zeros((3, 2)), uniform(3), spec), 0.05)

    def test_zero_at_oracle_fixed_point(self, fixture_spec):
        from unified_mfq.oracles import mfg_solve

        q, mu = mfg_solve(fixture_spec)
        assert sup_norm(op_T(q, mu, fixture_spec)) < 1e-9

    @settings(max_examples=30)
    @given(seed=st.integers(0, 2**32 - 1))
    def test_residual_bound(self, seed, fixture_spec):
        r = np.random.default_rng(seed)
        q = r.normal(scale=3, size=(3, 2))
        mu = r.dirichlet(np.ones(3))
        f_sup = np.abs(fixture_spec.cost_table(mu)).max()
        bound = fixture_spec.h * f_sup + (fixture_spec.discount + 1) * sup_norm(q)
        assert sup_norm(op_T(q, mu, fixture_spec)) <= bound + 1e-12


class TestNorms:
    def test_tv_examples(self):
        assert tv_distance([0.2, 0.8], [0.2, 0.8]) == 0
        assert tv_distance(point_mass(3, 0), point_mass(3, 2)) == 1
        assert tv_distance([0.7, 0.3], [0.4, 0.6]) == pytest.approx(0.3)

    def test_tv_matches_subset_sup(self, rng):
        a, b = rng.dirichlet(np.ones(5)), rng.dirichlet(np.ones(5))
        d = a - b
        sup = max(abs(d[list(s)].sum()) for r in range(6) for s in itertools.combinations(range(5), r))
        assert tv_distance(a, b) == pytest.approx(sup)

    def test_tv_dimension_mismatch(self):
        with pytest.raises(ValueError):
            tv_distance([1.0], [0.5, 0.5])

    @given(simplex(4), simplex(4), simplex(4))
    def test_tv_triangle(self, a, b, c):
        assert tv_distance(a, c) <= tv_distance(a, b) + tv_distance(b, c) + 1e-12
        assert tv_distance(a, b) == pytest.approx(tv_distance(b, a))

    def test_sup_norm(self, rng):
        assert sup_norm(np.zeros((2, 2))) == 0
        t = np.zeros((2, 3))
        t[1, 2] = -2.5
        assert sup_norm(t) == 2.5
        r = rng.normal(size=(4, 4))
        assert sup_norm(r) == max(abs(v) for v in r.ravel())


class TestKernelFamily:
    def test_mean_perturbation_and_clamp(self):
        base = np.full((2, 1, 2), 0.5)
        pert = np.zeros((2, 1, 2))
        pert[:, 0] = [-1.0, 1.0]
        k = KernelFamily(base, [(MomentFunctional("mean"), pert)], labels=[0.0, 1.0])
        np.testing.assert_allclose(k.eval(0, 0, np.array([0.8, 0.2])), [0.3, 0.7])
        assert not k.last_clamped
        p = k.tensor(np.array([0.0, 1.0]))  # mean 1: raw row (-0.5, 1.5) is clamped
        assert k.last_clamped
        np.testing.assert_allclose(p[0, 0], [0.0, 1.0])

    @pytest.mark.parametrize("name,expected", [("mean", 2.0), ("second_moment", 1.0)])
    def test_functional_lipschitz(self, name, expected):
        assert MomentFunctional(name).lipschitz_tv(np.array([-1.0, 0.0, 1.0])) == expected

    def test_mass_at_needs_index(self):
        with pytest.raises(ValueError):
            MomentFunctional("mass_at")
