import json
import math
from pathlib import Path

import numpy as np
import pytest

from unified_mfq.core import LearningRates, greedy_policy, uniform
from unified_mfq.diagnostics import (
    EXACT,
    LIPSCHITZ_CAP,
    AssumptionConstants,
    LyapunovMonitor,
    check_envelope,
    check_prop_mu_preconditions,
    estimate_beta,
    estimate_constants,
    estimate_Lf,
    estimate_lipschitz,
    greedy_flip_pairs,
    lyapunov,
    monitor_prop_mu,
    monitor_prop_q,
    probe_distributions,
    report,
    suggest_weight,
    theorem_constants,
    uniqueness_check,
    weight_bounds,
)
from unified_mfq.engine import IterationConfig, run
from unified_mfq.environments import load_problem
from unified_mfq.errors import AssumptionViolation
from unified_mfq.oracles import mfg_solve, mu_fixed_point

DATA = Path(__file__).parent / "data"
ALL_EXACT = {k: EXACT for k in ("beta", "L_p", "L_Q", "L_f", "f_sup")}


def constants(beta=0.9, L_p=0.1, L_Q=0.01, L_f=1.0, f_sup=1.0):
    return AssumptionConstants(beta, L_p, L_Q, L_f, f_sup, dict(ALL_EXACT))


@pytest.fixture(scope="module")
def fixture_constants():
    from unified_mfq.environments import MixtureFixture

    fx = MixtureFixture()
    return AssumptionConstants(fx.doeblin_beta(), fx.lipschitz_p(), fx.lipschitz_q(), fx.lipschitz_f(),
                               fx.f_sup(), dict(ALL_EXACT))


class TestEstimators:
    def test_beta_two_state(self):
        beta, nu = estimate_beta([[0.6, 0.4], [0.3, 0.7]])
        assert beta == pytest.approx(0.7)
        np.testing.assert_allclose(nu, [3 / 7, 4 / 7])

    def test_beta_of_constant_rows_is_one(self):
        assert estimate_beta(np.tile([0.2, 0.8], (2, 1)))[0] == pytest.approx(1.0)

    def test_beta_identity_raises(self):
        with pytest.raises(AssumptionViolation):
            estimate_beta(np.eye(3))

    def test_beta_rejects_non_stochastic(self):
        with pytest.raises(ValueError):
            estimate_beta([[0.5, 0.6], [0.5, 0.5]])

    def test_lf_on_mass_at_perturbation(self):
        # the cost moves by 0.5 * (mass at state 1); point masses attain the ratio
        spec = load_problem(DATA / "two_state.json")
        assert estimate_Lf(spec, probe_distributions(2, 5)) == pytest.approx(0.5)

    def test_lipschitz_on_fixture_is_bounded_by_exact(self, fixture, fixture_spec):
        rng = np.random.default_rng(0)
        base = np.array([[0.0, 1.0], [1.0, 0.0], [0.0, 1.0]])
        qs = [base + rng.uniform(-0.3, 0.3, size=(3, 2)) for _ in range(5)]
        assert all(np.array_equal(greedy_policy(q), greedy_policy(base)) for q in qs)
        est = estimate_lipschitz(fixture_spec, qs, probe_distributions(3, 5))
        assert est.L_p == pytest.approx(fixture.lipschitz_p())
        assert est.L_Q <= fixture.lipschitz_q() + 1e-12
        assert not est.greedy_discontinuity

    def test_flip_pairs_flag_discontinuity(self, desk_spec):
        q = np.tile(np.arange(21.0), (21, 1))
        pairs = greedy_flip_pairs(q, eps=1e-9)
        assert len(pairs) == 21
        qa, qb, d = pairs[10]  # interior state: both actions keep mass on the grid
        assert d == pytest.approx(1e-9)
        assert not np.array_equal(greedy_policy(qa), greedy_policy(qb))
        est = estimate_lipschitz(desk_spec, [qa, qb], [uniform(21)])
        assert est.greedy_discontinuity and est.L_Q == LIPSCHITZ_CAP
        assert "Assumption 4 likely violated by greedy discontinuity" in est.message
        L_p, L_Q = est
        assert L_Q == LIPSCHITZ_CAP

    def test_benchmark_has_no_minorization(self, desk_spec):
        with pytest.raises(AssumptionViolation):
            estimate_constants(desk_spec, [np.zeros(desk_spec.shape)], probe_distributions(21, 2))

    def test_sampled_constants_are_lower_bounds(self, fixture_spec):
        ac, lip = estimate_constants(fixture_spec, [np.zeros((3, 2))], probe_distributions(3, 5))
        assert not ac.exact and ac.provenance["beta"] == "lower-bound estimate"
        assert lip.pairs_q == 0 and lip.pairs_p > 0


class TestTheoremConstants:
    def test_lambda_mu(self):
        tc = theorem_constants(constants(), LearningRates(0.5, 0.1), 1.0, 0.1, 1.0)
        assert tc.lambda_mu == pytest.approx(0.65)

    def test_closed_form(self):
        beta, L_p, L_Q, L_f, f_sup = 0.95, 0.2, 0.005, 2.0, 3.0
        ac = constants(beta, L_p, L_Q, L_f, f_sup)
        rho_mu, rho_q, gamma, h = 0.3, 0.05, 0.5, 0.2
        W = suggest_weight(ac, LearningRates(rho_mu, rho_q), gamma, h)
        g = 2 * beta - 1 - L_p
        lam = 1 - rho_mu * g
        K = L_f + L_p * f_sup / (math.exp(gamma * h) - 1)
        om = 1 - math.exp(-gamma * h)
        c1 = rho_q * (om - K * h * L_Q / g) - 2 * lam * L_Q / (W * g)
        c2 = 1 - lam - W * rho_q * h * K
        tc = theorem_constants(ac, LearningRates(rho_mu, rho_q), gamma, h, W)
        assert (tc.c1, tc.c2) == pytest.approx((c1, c2), rel=1e-12)
        assert tc.c == pytest.approx(min(c1, c2), rel=1e-12) and tc.valid
        assert tc.asymptotic_floor == pytest.approx(2 * h * lam * L_Q * rho_q * f_sup / (tc.c * om * g))
        assert tc.rate_box == pytest.approx((1 / g, 1 / om))

    def test_gap_violation_raises(self):
        with pytest.raises(AssumptionViolation, match="2\\*beta - 1 - L_p"):
            theorem_constants(constants(beta=0.5), LearningRates(0.1, 0.1), 1.0, 0.1, 1.0)

    def test_invalid_c_has_infinite_floor(self):
        tc = theorem_constants(constants(L_Q=5.0), LearningRates(0.1, 0.1), 1.0, 0.1, 1.0)
        assert not tc.valid and math.isinf(tc.asymptotic_floor)

    def test_inadmissible_rates(self):
        tc = theorem_constants(constants(), LearningRates(2.0, 0.1), 1.0, 0.1, 1.0)
        assert not tc.rates_admissible

    def test_zero_lq_floor_vanishes(self):
        ac = constants(L_Q=0.0)
        rates = LearningRates(0.2, 0.2)
        low, high = weight_bounds(ac, rates, 1.0, 0.1)
        assert low == 0.0 and high > 0
        W = suggest_weight(ac, rates, 1.0, 0.1)
        assert W == pytest.approx(min(1.0, high / 2))
        assert theorem_constants(ac, rates, 1.0, 0.1, W).asymptotic_floor == 0.0

    def test_suggested_weight_inside_bounds(self):
        ac = constants()
        rates = LearningRates(0.2, 0.2)
        low, high = weight_bounds(ac, rates, 1.0, 0.1)
        W = suggest_weight(ac, rates, 1.0, 0.1)
        assert low < W < high and W == pytest.approx(math.sqrt(low * high))
        tc = theorem_constants(ac, rates, 1.0, 0.1, W)
        assert tc.c1 > 0 and tc.c2 > 0

    def test_empty_weight_interval(self):
        with pytest.raises(AssumptionViolation, match="empty weight interval"):
            suggest_weight(constants(L_Q=5.0), LearningRates(0.1, 0.1), 1.0, 0.1)

    def test_optimistic_for_sampled_constants(self):
        ac = AssumptionConstants(0.9, 0.1, 0.01, 1.0, 1.0, {"beta": "lower-bound estimate"})
        assert theorem_constants(ac, LearningRates(0.1, 0.1), 1.0, 0.1, 1.0).optimistic

    def test_envelope(self):
        tc = theorem_constants(constants(), LearningRates(0.2, 0.2), 1.0, 0.1,
                               suggest_weight(constants(), LearningRates(0.2, 0.2), 1.0, 0.1))
        np.testing.assert_allclose(tc.envelope([0, 2], 1.0), [1.0 + tc.asymptotic_floor,
                                                              (1 - tc.c) ** 2 + tc.asymptotic_floor])


class TestUniqueness:
    def test_boundary(self):
        gamma, h = 1.0, 0.1
        om = 1 - math.exp(-gamma * h)
        g = 0.7
        # with L_p = 0 the factor reduces to L_Q / g * h L_f / (1 - e^{-gamma h})
        edge = g * om / h
        factor, unique = uniqueness_check(constants(L_p=0.0, beta=0.85, L_Q=edge), gamma, h)
        assert factor == pytest.approx(1.0)
        assert uniqueness_check(constants(L_p=0.0, beta=0.85, L_Q=edge * (1 - 1e-9)), gamma, h)[1]
        assert not uniqueness_check(constants(L_p=0.0, beta=0.85, L_Q=edge * (1 + 1e-9)), gamma, h)[1]

    def test_fixture_is_unique(self, fixture_constants):
        factor, unique = uniqueness_check(fixture_constants, 1.0, 0.1)
        assert unique and factor < 1e-3


class TestMonitors:
    def test_prop_mu_on_fixture(self, fixture_spec, fixture_constants):
        rates = LearningRates(0.7, 0.0)
        check_prop_mu_preconditions(fixture_constants, rates)
        q = np.array([[0.3, -0.2], [0.0, 1.0], [2.0, 1.0]])
        rec = run(fixture_spec, IterationConfig(rates, max_iters=300), q0=q, mu0=[1.0, 0.0, 0.0])
        lam = 1 - 0.7 * fixture_constants.gap
        rep = monitor_prop_mu(rec.mu, mu_fixed_point(q, fixture_spec), lam)
        assert rep.ok and len(rep.values) == 300
        # too-small contraction factor: the monitor must flag
        assert not monitor_prop_mu(rec.mu, mu_fixed_point(q, fixture_spec), 0.1 * lam).ok

    def test_prop_mu_preconditions(self, fixture_constants):
        with pytest.raises(ValueError):
            check_prop_mu_preconditions(fixture_constants, LearningRates(0.5, 0.1))
        with pytest.raises(AssumptionViolation):
            check_prop_mu_preconditions(constants(beta=0.5), LearningRates(0.5, 0.0))

    def test_prop_q_with_true_and_wrong_reference(self, fixture_spec, fixture_constants):
        rates = LearningRates(0.2, 0.2)
        qs, ms = mfg_solve(fixture_spec)
        rec = run(fixture_spec, IterationConfig(rates, max_iters=500, keep_q=True))
        good = monitor_prop_q(rec.q, rec.mu, qs, ms, fixture_constants, rates, 1.0, 0.1)
        bad = monitor_prop_q(rec.q, rec.mu, qs + 1.0, ms, fixture_constants, rates, 1.0, 0.1)
        assert good.ok and not bad.ok

    def test_lyapunov_nearest_reference(self, fixture_spec):
        q = np.zeros((3, 2))
        mu_t = mu_fixed_point(q, fixture_spec)
        L, qg, mg = lyapunov(q, mu_t, [np.ones((3, 2)), np.full((3, 2), 0.5)], fixture_spec, 2.0)
        assert (qg, mg) == pytest.approx((0.5, 0.0)) and L == pytest.approx(1.0)
        with pytest.raises(ValueError):
            lyapunov(q, mu_t, [], fixture_spec, 1.0)

    def test_envelope_check_on_fixture_run(self, fixture_spec, fixture_constants):
        rates = LearningRates(0.2, 0.2)
        W = suggest_weight(fixture_constants, rates, 1.0, 0.1)
        tc = theorem_constants(fixture_constants, rates, 1.0, 0.1, W)
        qs, _ = mfg_solve(fixture_spec)
        rec = run(fixture_spec, IterationConfig(rates, max_iters=2000, record_every=10),
                  monitor=LyapunovMonitor(fixture_spec, [qs], W))
        env = check_envelope(rec, tc)
        assert env.ok
        row = next(env.rows())
        assert row["k"] == 0 and row["slack"] == pytest.approx(tc.asymptotic_floor)

    def test_envelope_requires_monitor(self, fixture_spec, fixture_constants):
        rec = run(fixture_spec, IterationConfig(LearningRates(0.2, 0.2), max_iters=10))
        tc = theorem_constants(fixture_constants, LearningRates(0.2, 0.2), 1.0, 0.1, 0.02)
        with pytest.raises(ValueError):
            check_envelope(rec, tc)


def test_report_json_is_valid(fixture_constants):
    tc = theorem_constants(fixture_constants, LearningRates(2.0, 0.2), 1.0, 0.1, 0.02)
    text, doc = report(fixture_constants, tc, uniqueness_check(fixture_constants, 1.0, 0.1), notes=["x"])
    parsed = json.loads(doc)
    assert parsed["theorem"]["rates_admissible"] is False
    assert "inadmissible rates" in text and "note: x" in text
