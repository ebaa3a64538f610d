"""Assumption constants, contraction certificates and per-step monitors.

The Lyapunov function of a pair ``(Q, mu)`` is::

    L = W * min_{Q* in F} |Q - Q*|_inf + tv(mu, mu~(Q))

where ``mu~(Q)`` is the equilibrium distribution of the greedy population
for the *current* Q-table and ``F`` is a finite set of reference fixed
points (oracle outputs plus user-supplied tables). Under the Doeblin and
Lipschitz assumptions and rates inside the admissible box it obeys::

    L_k <= (1 - c)^k L_0 + floor,   floor = O(rho_q)

Sampled Lipschitz estimates are lower bounds; certificates built from
them are labelled ``optimistic``. Only analytically exact constants give
sound certificates. ``L_f`` here is the Lipschitz constant of the cost in
``mu`` (TV scale).
"""

from __future__ import annotations

import itertools
import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from unified_mfq.core import (
    LearningRates,
    ProblemSpec,
    greedy_policy,
    induced_transition,
    sup_norm,
    tv_distance,
)
from unified_mfq.errors import AssumptionViolation
from unified_mfq.oracles import mu_fixed_point

logger = logging.getLogger(__name__)

PROP_MU_SLACK = 1e-12
PROP_Q_SLACK = 1e-10
LIPSCHITZ_CAP = 1e6
EXACT = "exact"
LOWER_BOUND = "lower-bound estimate"


@dataclass(frozen=True)
class AssumptionConstants:
    beta: float
    L_p: float
    L_Q: float
    L_f: float
    f_sup: float
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 < self.beta <= 1.0:
            raise ValueError(f"Doeblin constant must lie in (0, 1], got {self.beta}")
        for name in ("L_p", "L_Q", "L_f", "f_sup"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    @property
    def gap(self) -> float:
        """``2 beta - 1 - L_p``; the regime requires it to be positive."""
        return 2.0 * self.beta - 1.0 - self.L_p

    @property
    def exact(self) -> bool:
        return all(self.provenance.get(k) == EXACT for k in ("beta", "L_p", "L_Q", "L_f", "f_sup"))


@dataclass(frozen=True)
class TheoremConstants:
    lambda_mu: float
    c1: float
    c2: float
    c: float
    rate_box: tuple[float, float]
    asymptotic_floor: float
    W: float
    rates_admissible: bool
    valid: bool
    optimistic: bool

    def envelope(self, k, L0: float):
        """``(1 - c)^k L0 + floor`` for iteration index (or array of indices) ``k``."""
        return (1.0 - self.c) ** np.asarray(k, dtype=float) * L0 + self.asymptotic_floor


def _coupling(ac: AssumptionConstants, gamma: float, h: float) -> float:
    """``L_f + L_p |f|_inf / (e^{gamma h} - 1)``: how a TV gap in mu moves the Bellman target."""
    return ac.L_f + ac.L_p * ac.f_sup / math.expm1(gamma * h)


# ---------------------------------------------------------------------------
# estimators


def estimate_beta(M) -> tuple[float, np.ndarray]:
    """Maximal Doeblin constant of ``M`` and its minorizing measure.

    ``beta = sum_x' min_x M[x, x']``; ``nu`` is the column minima over beta.
    """
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError("expected a square matrix")
    if M.min() < 0 or not np.allclose(M.sum(axis=1), 1.0, atol=1e-9):
        raise ValueError("matrix is not row-stochastic")
    mins = M.min(axis=0)
    beta = float(mins.sum())
    if beta <= 0.0:
        raise AssumptionViolation("no uniform minorization: beta = 0")
    return min(beta, 1.0), mins / beta


def _greedy_rows(spec, q, mu):
    return induced_transition(q, mu, spec)


@dataclass(frozen=True)
class LipschitzEstimate:
    L_p: float
    L_Q: float
    pairs_p: int
    pairs_q: int
    greedy_discontinuity: bool
    message: str = ""

    def __iter__(self):
        return iter((self.L_p, self.L_Q))


def estimate_lipschitz(spec: ProblemSpec, q_samples, mu_samples, cap: float = LIPSCHITZ_CAP) -> LipschitzEstimate:
    """Sampled lower bounds on the kernel's Lipschitz constants.

    ``L_p`` maximizes ``max_x |P(x,.) - P'(x,.)|_1 / tv(mu1, mu2)`` over
    distribution pairs at each fixed Q; ``L_Q`` maximizes the same row
    distance over ``|Q1 - Q2|_inf`` for Q pairs at each fixed mu. Ratios
    above ``cap`` are clipped and flagged as an argmin discontinuity.
    """
    q_samples = [np.asarray(q, dtype=float) for q in q_samples]
    mu_samples = [np.asarray(m, dtype=float) for m in mu_samples]
    if not q_samples or not mu_samples:
        raise ValueError("sample sets must be non-empty")
    L_p = L_Q = 0.0
    n_p = n_q = 0
    flagged = False
    for q in q_samples:
        rows = [_greedy_rows(spec, q, m) for m in mu_samples]
        for (m1, r1), (m2, r2) in itertools.combinations(zip(mu_samples, rows), 2):
            d = tv_distance(m1, m2)
            if d <= 0:
                continue
            n_p += 1
            L_p = max(L_p, float(np.abs(r1 - r2).sum(axis=1).max()) / d)
    for mu in mu_samples:
        rows = [_greedy_rows(spec, q, mu) for q in q_samples]
        for (q1, r1), (q2, r2) in itertools.combinations(zip(q_samples, rows), 2):
            d = sup_norm(q1 - q2)
            if d <= 0:
                continue
            n_q += 1
            ratio = float(np.abs(r1 - r2).sum(axis=1).max()) / d
            if ratio > cap:
                ratio, flagged = cap, True
            L_Q = max(L_Q, ratio)
    msg = "Assumption 4 likely violated by greedy discontinuity" if flagged else ""
    if flagged:
        logger.warning(msg)
    return LipschitzEstimate(L_p, L_Q, n_p, n_q, flagged, msg)


def greedy_flip_pairs(q, eps: float = 1e-9):
    """Pairs ``(q_a, q_b, eps)`` around ``q`` that differ by ``eps`` yet flip one argmin.

    At each state the runner-up action is moved to ``eps / 2`` above the
    minimum in ``q_a`` and ``eps / 2`` below it in ``q_b``. Used to probe
    the argmin discontinuity of the greedy kernel.
    """
    q = np.asarray(q, dtype=float)
    out = []
    if q.shape[1] < 2:
        return out
    pol = greedy_policy(q)
    for x in range(q.shape[0]):
        order = np.argsort(q[x], kind="stable")
        second = order[1] if order[0] == pol[x] else order[0]
        qa, qb = q.copy(), q.copy()
        qa[x, second] = q[x, pol[x]] + 0.5 * eps
        qb[x, second] = q[x, pol[x]] - 0.5 * eps
        out.append((qa, qb, sup_norm(qa - qb)))
    return out


def estimate_Lf(spec: ProblemSpec, mu_samples) -> float:
    """Largest ``|f(x,a,mu1) - f(x,a,mu2)| / tv(mu1, mu2)`` over sampled pairs."""
    mu_samples = [np.asarray(m, dtype=float) for m in mu_samples]
    tables = [spec.cost_table(m) for m in mu_samples]
    best = 0.0
    for (m1, f1), (m2, f2) in itertools.combinations(zip(mu_samples, tables), 2):
        d = tv_distance(m1, m2)
        if d > 0:
            best = max(best, float(np.abs(f1 - f2).max()) / d)
    return best


def probe_distributions(n: int, n_random: int = 10, seed: int = 0) -> list[np.ndarray]:
    """Point masses, the uniform law and ``n_random`` Dirichlet(1) draws."""
    rng = np.random.default_rng(seed)
    out = [np.eye(n)[i] for i in range(n)] + [np.full(n, 1.0 / n)]
    out += list(rng.dirichlet(np.ones(n), size=n_random))
    return out


def estimate_constants(spec: ProblemSpec, q_samples, mu_samples) -> tuple[AssumptionConstants, LipschitzEstimate]:
    """All constants from samples; beta is the minimum over probed (Q, mu)."""
    betas = []
    for q in q_samples:
        for mu in mu_samples:
            mins = induced_transition(q, mu, spec).min(axis=0)
            betas.append(float(mins.sum()))
    beta = min(betas)
    if beta <= 0:
        raise AssumptionViolation("no uniform minorization at some probed (Q, mu): beta = 0")
    lip = estimate_lipschitz(spec, q_samples, mu_samples)
    f_sup = max(float(np.abs(spec.cost_table(m)).max()) for m in mu_samples)
    prov = {"beta": LOWER_BOUND, "L_p": LOWER_BOUND, "L_Q": LOWER_BOUND, "L_f": LOWER_BOUND,
            "f_sup": LOWER_BOUND}
    ac = AssumptionConstants(min(beta, 1.0), lip.L_p, lip.L_Q, estimate_Lf(spec, mu_samples), f_sup, prov)
    return ac, lip


# ---------------------------------------------------------------------------
# contraction certificate


def theorem_constants(ac: AssumptionConstants, rates: LearningRates, gamma: float, h: float,
                      W: float) -> TheoremConstants:
    """Contraction constants for the weighted Lyapunov function.

    Raises ``AssumptionViolation`` when ``2 beta - 1 - L_p <= 0``. An
    invalid ``c`` (outside ``(0, 1)``) is reported through ``valid`` and an
    infinite floor, not raised.
    """
    g = ac.gap
    if g <= 0:
        raise AssumptionViolation(
            f"assumption regime violated: 2*beta - 1 - L_p = {g:.3e} <= 0 "
            f"(beta = {ac.beta:.3e}, L_p = {ac.L_p:.3e})")
    if W <= 0:
        raise ValueError("Lyapunov weight W must be positive")
    one_minus_disc = -math.expm1(-gamma * h)
    K = _coupling(ac, gamma, h)
    lam = 1.0 - rates.rho_mu * g
    c1 = rates.rho_q * (one_minus_disc - K * h * ac.L_Q / g) - 2.0 * lam * ac.L_Q / (W * g)
    c2 = 1.0 - lam - W * rates.rho_q * h * K
    c = min(c1, c2)
    box = (1.0 / g, 1.0 / one_minus_disc)
    admissible = 0 < rates.rho_mu < box[0] and 0 < rates.rho_q < box[1]
    valid = 0.0 < c < 1.0
    if valid:
        floor = 2.0 * h * lam * ac.L_Q * rates.rho_q * ac.f_sup / (c * one_minus_disc * g)
    else:
        floor = math.inf
    return TheoremConstants(lam, c1, c2, c, box, floor, W, admissible, valid, not ac.exact)


def weight_bounds(ac: AssumptionConstants, rates: LearningRates, gamma: float, h: float) -> tuple[float, float]:
    """Open interval of weights with ``c1 > 0`` and ``c2 > 0``."""
    g = ac.gap
    if g <= 0:
        raise AssumptionViolation(f"assumption regime violated: 2*beta - 1 - L_p = {g:.3e} <= 0")
    one_minus_disc = -math.expm1(-gamma * h)
    K = _coupling(ac, gamma, h)
    lam = 1.0 - rates.rho_mu * g
    inner = one_minus_disc - K * h * ac.L_Q / g
    if ac.L_Q == 0:
        low = 0.0
    elif inner <= 0 or rates.rho_q <= 0:
        low = math.inf
    else:
        # lam <= 0 (rho_mu beyond the box) makes the coupling term help c1 for every W
        low = max(0.0, 2.0 * lam * ac.L_Q / (rates.rho_q * g * inner))
    denom = rates.rho_q * h * K
    high = math.inf if denom == 0 else rates.rho_mu * g / denom
    return low, high


def suggest_weight(ac: AssumptionConstants, rates: LearningRates, gamma: float, h: float) -> float:
    """Geometric mean of the admissible weight interval.

    When the lower end is 0 (``L_Q = 0``, or ``Lambda_mu <= 0`` for rates
    outside the box) the suggestion is half the upper end, capped at 1.
    """
    low, high = weight_bounds(ac, rates, gamma, h)
    if not low < high:
        raise AssumptionViolation(f"empty weight interval: need W > {low:.6e} and W < {high:.6e}")
    if low == 0.0:
        return 1.0 if math.isinf(high) else min(1.0, 0.5 * high)
    if math.isinf(high):
        return 2.0 * low
    return math.sqrt(low * high)


def uniqueness_check(ac: AssumptionConstants, gamma: float, h: float, q_sup: float | None = None):
    """Sufficient condition for a unique fixed point; ``(factor, factor < 1)``."""
    g = ac.gap
    if g <= 0:
        raise AssumptionViolation(f"assumption regime violated: 2*beta - 1 - L_p = {g:.3e} <= 0")
    one_minus_disc = -math.expm1(-gamma * h)
    if q_sup is None:
        q_sup = h * ac.f_sup / one_minus_disc
    factor = ac.L_Q / g * (h * ac.L_f + math.exp(-gamma * h) * ac.L_p * q_sup) / one_minus_disc
    return factor, factor < 1.0


# ---------------------------------------------------------------------------
# Lyapunov function and monitors


def lyapunov(q, mu, fixed_points, spec: ProblemSpec, W: float, mu_tilde=None):
    """``(L, q_gap, mu_gap)`` with ``q_gap`` the sup-norm distance to the nearest reference table."""
    if not fixed_points:
        raise ValueError("need at least one reference fixed point")
    gaps = [sup_norm(np.asarray(q) - np.asarray(qs)) for qs in fixed_points]
    q_gap = min(gaps)
    if len(gaps) > 1 and gaps.index(q_gap) == len(gaps) - 1:
        logger.debug("Lyapunov minimum attained at the last reference point")
    if mu_tilde is None:
        mu_tilde = mu_fixed_point(q, spec)
    mu_gap = tv_distance(mu, mu_tilde)
    return W * q_gap + mu_gap, q_gap, mu_gap


class LyapunovMonitor:
    """Callable for ``engine.run``: caches the equilibrium per greedy policy.

    The cache is exact only when the equilibrium depends on Q through its
    greedy policy alone, which holds for every kernel in this package.
    """

    def __init__(self, spec: ProblemSpec, fixed_points, W: float):
        self.spec = spec
        self.fixed_points = [np.asarray(q, dtype=float) for q in fixed_points]
        self.W = W
        self._cache: dict = {}

    def mu_tilde(self, q):
        key = tuple(greedy_policy(q))
        if key not in self._cache:
            self._cache[key] = mu_fixed_point(q, self.spec)
        return self._cache[key]

    def __call__(self, k, q, mu):
        return lyapunov(q, mu, self.fixed_points, self.spec, self.W, mu_tilde=self.mu_tilde(q))


@dataclass
class MonitorReport:
    ratios: list
    bounds: list
    values: list
    violations: list  # step indices

    @property
    def ok(self) -> bool:
        return not self.violations


def monitor_prop_mu(mus, mu_tilde, lambda_mu: float, slack: float = PROP_MU_SLACK) -> MonitorReport:
    """Per-step TV contraction toward ``mu_tilde`` along a frozen-Q trajectory."""
    ratios, bounds, values, bad = [], [], [], []
    for k in range(len(mus) - 1):
        before = tv_distance(mus[k], mu_tilde)
        after = tv_distance(mus[k + 1], mu_tilde)
        values.append(after)
        bounds.append(lambda_mu * before + slack)
        ratios.append(after / before if before > 0 else math.nan)
        if after > lambda_mu * before + slack:
            bad.append(k)
    return MonitorReport(ratios, bounds, values, bad)


def check_prop_mu_preconditions(ac: AssumptionConstants, rates: LearningRates):
    if ac.gap <= 0:
        raise AssumptionViolation("monitor refused: 2*beta - 1 - L_p <= 0")
    if rates.rho_q != 0:
        raise ValueError("the distribution monitor needs a frozen Q-table (rho_q = 0)")


def monitor_prop_q(qs, mus, q_star, mu_star, ac: AssumptionConstants, rates: LearningRates,
                   gamma: float, h: float, slack: float = PROP_Q_SLACK) -> MonitorReport:
    """Per-step Q recursion against a reference pair ``(q_star, mu_star)``."""
    one_minus_disc = -math.expm1(-gamma * h)
    K = _coupling(ac, gamma, h)
    contraction = 1.0 - rates.rho_q * one_minus_disc
    ratios, bounds, values, bad = [], [], [], []
    for k in range(len(qs) - 1):
        before = sup_norm(qs[k] - q_star)
        after = sup_norm(qs[k + 1] - q_star)
        bound = contraction * before + rates.rho_q * h * tv_distance(mus[k], mu_star) * K
        values.append(after)
        bounds.append(bound + slack)
        ratios.append(after / before if before > 0 else math.nan)
        if after > bound + slack:
            bad.append(k)
    return MonitorReport(ratios, bounds, values, bad)


@dataclass
class EnvelopeReport:
    k: list
    L: list
    bound: list
    violations: list

    @property
    def ok(self) -> bool:
        return not self.violations

    def rows(self):
        for k, L, b in zip(self.k, self.L, self.bound):
            yield {"k": k, "L": L, "bound_value": b, "slack": b - L}


def check_envelope(record, tc: TheoremConstants, slack: float = 1e-9) -> EnvelopeReport:
    """Compare every recorded Lyapunov value with the contraction envelope."""
    k = np.asarray(record.k, dtype=float)
    L = np.asarray(record.lyapunov, dtype=float)
    if np.isnan(L).any():
        raise ValueError("record carries no Lyapunov values; attach a monitor to the run")
    bound = tc.envelope(k - k[0], L[0]) if tc.valid else np.full_like(L, np.inf)
    bad = [int(i) for i in np.nonzero(L > bound + slack)[0]]
    return EnvelopeReport(list(record.k), L.tolist(), bound.tolist(), bad)


def _jsonable(v):
    if isinstance(v, float) and not math.isfinite(v):
        return repr(v)
    if isinstance(v, np.generic):
        return _jsonable(v.item())
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    return v


def report(ac: AssumptionConstants, tc: TheoremConstants | None = None, uniqueness=None,
           lipschitz: LipschitzEstimate | None = None, notes=()) -> tuple[str, str]:
    """Human-readable text report and JSON summary."""
    doc = {"constants": asdict(ac)}
    lines = ["assumption constants"]
    for name in ("beta", "L_p", "L_Q", "L_f", "f_sup"):
        lines.append(f"  {name:6s} = {getattr(ac, name):.6e}  ({ac.provenance.get(name, 'unspecified')})")
    lines.append(f"  2*beta - 1 - L_p = {ac.gap:.6e}")
    if lipschitz is not None:
        doc["lipschitz"] = asdict(lipschitz)
        lines.append(f"  sampled pairs: {lipschitz.pairs_p} (mu), {lipschitz.pairs_q} (Q)")
        if lipschitz.greedy_discontinuity:
            lines.append(f"  WARNING: {lipschitz.message}")
    if tc is not None:
        doc["theorem"] = asdict(tc)
        lines.append("certificate" + (" (optimistic: sampled constants)" if tc.optimistic else ""))
        lines.append(f"  Lambda_mu = {tc.lambda_mu:.6e}, c1 = {tc.c1:.6e}, c2 = {tc.c2:.6e}, c = {tc.c:.6e}")
        lines.append(f"  W = {tc.W:.6e}, floor = {tc.asymptotic_floor:.6e}")
        lines.append(f"  rate box: rho_mu < {tc.rate_box[0]:.6e}, rho_q < {tc.rate_box[1]:.6e}")
        if not tc.rates_admissible:
            lines.append("  verdict: inadmissible rates")
        elif not tc.valid:
            lines.append("  verdict: no contraction certificate (c outside (0, 1))")
        else:
            lines.append("  verdict: contraction certified")
    if uniqueness is not None:
        factor, unique = uniqueness
        doc["uniqueness"] = {"factor": factor, "unique": unique}
        lines.append(f"uniqueness factor = {factor:.6e} -> {'unique' if unique else 'not certified'}")
    for n in notes:
        lines.append(f"note: {n}")
    doc["notes"] = list(notes)
    return "\n".join(lines) + "\n", json.dumps(_jsonable(doc), indent=1, sort_keys=True) + "\n"
