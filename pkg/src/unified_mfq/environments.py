"""Problem builders: the quadratic benchmark, tabular problem files, fixtures.

The benchmark discretizes ``dX = a dt + sigma dB`` on a uniform grid. Each
kernel row holds the Gaussian mass of every state bin, renormalized so that
mass falling outside the grid is redistributed instead of lost. Two drift
conventions are available: ``paper_mean_x_plus_a`` centres the Gaussian at
``x + a`` and ``euler_mean_x_plus_ah`` at ``x + a h`` (the Euler-Maruyama
mean). The former is the default.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.special import log_ndtr, logsumexp

from unified_mfq.core import (
    Grid,
    KernelFamily,
    MomentFunctional,
    ProblemSpec,
    point_mass,
    uniform,
)
from unified_mfq.errors import ConfigError

logger = logging.getLogger(__name__)

DRIFT_MODES = ("paper_mean_x_plus_a", "euler_mean_x_plus_ah")
PROBLEM_FORMAT = "unified-mfq/tabular-problem"
ROW_TOL = 1e-9


@dataclass(frozen=True)
class BenchmarkParams:
    c1: float = 0.25
    c2: float = 1.5
    c3: float = 0.5
    c4: float = 0.6
    c5: float = 5.0
    gamma: float = 1.0
    sigma: float = 0.3
    h: float = 0.01
    grid_step: float = 0.1
    x_min: float = -2.0
    x_max: float = 2.0
    a_min: float = -2.0
    a_max: float = 2.0
    x_c: float = 0.0
    drift_mode: str = "paper_mean_x_plus_a"

    def __post_init__(self):
        if self.grid_step <= 0:
            raise ValueError("grid_step must be positive")
        if self.x_max < self.x_min or self.a_max < self.a_min:
            raise ValueError("empty state or action grid")
        if self.sigma < 0 or self.h <= 0 or self.gamma <= 0:
            raise ValueError("sigma must be non-negative, h and gamma positive")
        if self.drift_mode not in DRIFT_MODES:
            raise ValueError(f"drift_mode must be one of {DRIFT_MODES}")

    @classmethod
    def desk(cls, **overrides) -> "BenchmarkParams":
        """21 x 21 variant (grid step 0.2) used for fast experiments."""
        return cls(**{"grid_step": 0.2, **overrides})

    def state_grid(self) -> Grid:
        return Grid.uniform(self.x_min + self.x_c, self.x_max + self.x_c, self.grid_step)

    def action_grid(self) -> Grid:
        return Grid.uniform(self.a_min, self.a_max, self.grid_step)


def benchmark_cost(x: float, a: float, mu, params: BenchmarkParams, labels=None) -> float:
    """``a^2/2 + c1 (x - c2 m)^2 + c3 (x - c4)^2 + c5 m^2`` with ``m`` the mean of ``mu``."""
    labels = params.state_grid().values if labels is None else np.asarray(labels)
    m = float(labels @ np.asarray(mu, dtype=float))
    p = params
    return 0.5 * a * a + p.c1 * (x - p.c2 * m) ** 2 + p.c3 * (x - p.c4) ** 2 + p.c5 * m * m


class BenchmarkCost:
    """Vectorized benchmark cost over the whole grid.

    The table is ``fixed + m * slope + m^2 * curv`` with the three pieces
    precomputed, since ``f`` is quadratic in the mean field ``m``.
    """

    def __init__(self, params: BenchmarkParams, states: Grid, actions: Grid):
        p = params
        self.params = params
        self.x = states.values
        self.a = actions.values
        self._fixed = (p.c1 * self.x**2 + p.c3 * (self.x - p.c4) ** 2)[:, None] + 0.5 * self.a[None, :] ** 2
        self._slope = (-2.0 * p.c1 * p.c2 * self.x)[:, None]
        self._curv = p.c1 * p.c2**2 + p.c5

    def mean_field(self, mu) -> float:
        return float(self.x @ np.asarray(mu, dtype=float))

    def __call__(self, mu) -> np.ndarray:
        m = self.mean_field(mu)
        return self._fixed + (m * self._slope + m * m * self._curv)

    def point(self, x: int, a: int, mu) -> float:
        p = self.params
        m = self.mean_field(mu)
        xv, av = self.x[x], self.a[a]
        return 0.5 * av * av + p.c1 * (xv - p.c2 * m) ** 2 + p.c3 * (xv - p.c4) ** 2 + p.c5 * m * m


def gaussian_bin_masses(centers, step: float, mean: float, std: float) -> np.ndarray:
    """Normalized Gaussian mass of bins ``[c - step/2, c + step/2]``.

    Computed in log space from whichever tail is smaller, so rows whose
    mean lies far outside the grid still normalize to their nearest bins.
    """
    z_hi = (centers + step / 2 - mean) / std
    z_lo = (centers - step / 2 - mean) / std
    right = z_lo > 0
    # P(lo < Z < hi) = Phi(hi) - Phi(lo) = Phi(-lo) - Phi(-hi)
    log_big = np.where(right, log_ndtr(-z_lo), log_ndtr(z_hi))
    log_small = np.where(right, log_ndtr(-z_hi), log_ndtr(z_lo))
    with np.errstate(divide="ignore"):
        log_mass = log_big + np.log1p(-np.exp(log_small - log_big))
    return np.exp(log_mass - logsumexp(log_mass))


def build_sde_kernel(params: BenchmarkParams) -> KernelFamily:
    xs = params.state_grid().values
    acts = params.action_grid().values
    std = params.sigma * np.sqrt(params.h)
    kern = np.zeros((xs.size, acts.size, xs.size))
    if std == 0.0:
        warnings.warn("zero diffusion: using a deterministic nearest-bin kernel", RuntimeWarning,
                      stacklevel=2)
    for i, x in enumerate(xs):
        for j, a in enumerate(acts):
            mean = x + a if params.drift_mode == "paper_mean_x_plus_a" else x + a * params.h
            if std == 0.0:
                kern[i, j, np.argmin(np.abs(xs - mean))] = 1.0
            else:
                kern[i, j] = gaussian_bin_masses(xs, params.grid_step, mean, std)
    return KernelFamily(kern)


def build_benchmark_spec(params: BenchmarkParams | None = None) -> ProblemSpec:
    params = params or BenchmarkParams()
    states = params.state_grid()
    actions = params.action_grid()
    return ProblemSpec(
        states=states,
        actions=actions,
        cost=BenchmarkCost(params, states, actions),
        kernel=build_sde_kernel(params),
        gamma=params.gamma,
        h=params.h,
        name="benchmark",
        meta={"params": asdict(params)},
    )


# ---------------------------------------------------------------------------
# tabular problem files


class TabularCost:
    """``f(., ., mu) = base + sum_j m_j(mu) * pert_j``."""

    def __init__(self, base, perturbations=(), labels=None):
        self.base = np.array(base, dtype=float)
        self.perturbations = [(m, np.array(t, dtype=float)) for m, t in perturbations]
        self.labels = None if labels is None else np.asarray(labels, dtype=float)

    @property
    def depends_on_mu(self) -> bool:
        return bool(self.perturbations)

    def __call__(self, mu) -> np.ndarray:
        if not self.perturbations:
            return self.base
        out = self.base.copy()
        for m, t in self.perturbations:
            out += m(mu, self.labels) * t
        return out

    def point(self, x: int, a: int, mu) -> float:
        val = self.base[x, a]
        for m, t in self.perturbations:
            val += m(mu, self.labels) * t[x, a]
        return float(val)


def _moment(entry: dict, where: str, n_states: int) -> MomentFunctional:
    name = entry.get("functional")
    try:
        m = MomentFunctional(name, entry.get("at"))
    except ValueError as exc:
        raise ConfigError(f"{where}.functional: {exc}") from None
    if m.at is not None and not 0 <= m.at < n_states:
        raise ConfigError(f"{where}.at: state index {m.at} out of range")
    return m


def _matrix(value, shape, where: str) -> np.ndarray:
    try:
        arr = np.array(value, dtype=float)
    except (TypeError, ValueError):
        raise ConfigError(f"{where}: expected a numeric table") from None
    if arr.shape != shape:
        raise ConfigError(f"{where}: expected shape {shape}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ConfigError(f"{where}: non-finite entries")
    return arr


def problem_from_dict(doc: dict) -> ProblemSpec:
    """Build a ``ProblemSpec`` from a parsed tabular-problem document.

    Kernel rows are listed state-major: row ``x * n_actions + a`` is
    ``p(. | x, a)``.
    """
    if not isinstance(doc, dict):
        raise ConfigError("problem document must be a mapping")
    allowed = {"format", "version", "name", "states", "actions", "gamma", "h", "cost", "kernel"}
    unknown = set(doc) - allowed
    if unknown:
        raise ConfigError(f"unknown field(s): {', '.join(sorted(unknown))}")
    for key in ("states", "actions", "gamma", "h", "cost", "kernel"):
        if key not in doc:
            raise ConfigError(f"missing field: {key}")
    if doc.get("format", PROBLEM_FORMAT) != PROBLEM_FORMAT:
        raise ConfigError(f"format: expected {PROBLEM_FORMAT!r}")
    try:
        states, actions = Grid(tuple(doc["states"])), Grid(tuple(doc["actions"]))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"states/actions: {exc}") from None
    n, k = states.size, actions.size
    labels = states.values

    cost_doc = doc["cost"]
    if not isinstance(cost_doc, dict) or "table" not in cost_doc:
        raise ConfigError("cost.table: missing")
    cost_base = _matrix(cost_doc["table"], (n, k), "cost.table")
    cost_pert = []
    for i, entry in enumerate(cost_doc.get("perturbations", [])):
        where = f"cost.perturbations[{i}]"
        cost_pert.append((_moment(entry, where, n), _matrix(entry.get("table"), (n, k), f"{where}.table")))

    kern_doc = doc["kernel"]
    if not isinstance(kern_doc, dict) or "base" not in kern_doc:
        raise ConfigError("kernel.base: missing")
    base = _matrix(kern_doc["base"], (n * k, n), "kernel.base")
    if base.min() < -ROW_TOL:
        r = int(np.argmin(base.min(axis=1)))
        raise ConfigError(f"kernel.base[{r}]: negative probability")
    sums = base.sum(axis=1)
    bad = np.flatnonzero(np.abs(sums - 1.0) > ROW_TOL)
    if bad.size:
        r = int(bad[0])
        raise ConfigError(f"kernel.base[{r}]: row sums to {sums[r]:.12g}, not 1")
    pert = []
    for i, entry in enumerate(kern_doc.get("perturbations", [])):
        where = f"kernel.perturbations[{i}]"
        rows = _matrix(entry.get("rows"), (n * k, n), f"{where}.rows")
        bad = np.flatnonzero(np.abs(rows.sum(axis=1)) > ROW_TOL)
        if bad.size:
            raise ConfigError(f"{where}.rows[{int(bad[0])}]: perturbation rows must sum to 0")
        pert.append((_moment(entry, where, n), rows.reshape(n, k, n)))

    try:
        gamma, h = float(doc["gamma"]), float(doc["h"])
        kernel = KernelFamily(base.reshape(n, k, n), pert, labels=labels)
        spec = ProblemSpec(states, actions, TabularCost(cost_base, cost_pert, labels), kernel,
                           gamma, h, name=str(doc.get("name", "tabular")))
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    spec.meta["source"] = doc
    spec.meta["validation"] = validate_problem(spec)
    if spec.meta["validation"]["clamped"]:
        logger.warning("kernel rows needed clamping on the validation mesh")
    return spec


def validate_problem(spec: ProblemSpec, n_random: int = 10, seed: int = 0) -> dict:
    """Probe the kernel on point masses, uniform and random distributions."""
    n = spec.states.size
    rng = np.random.default_rng(seed)
    mesh = [point_mass(n, i) for i in range(n)] + [uniform(n)] + list(rng.dirichlet(np.ones(n), n_random))
    clamped = False
    worst = 0.0
    f_sup = 0.0
    for mu in mesh:
        p = spec.kernel.tensor(mu)
        clamped |= spec.kernel.last_clamped
        worst = max(worst, float(np.abs(p.sum(axis=2) - 1.0).max()))
        f_sup = max(f_sup, float(np.abs(spec.cost_table(mu)).max()))
    return {"mesh_size": len(mesh), "clamped": bool(clamped), "max_row_error": worst, "f_sup": f_sup}


def load_problem(path) -> ProblemSpec:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    return problem_from_dict(doc)


def canonical_json(doc) -> str:
    return json.dumps(doc, sort_keys=True, indent=1) + "\n"


def problem_to_dict(spec: ProblemSpec) -> dict:
    if not isinstance(spec.cost, TabularCost):
        raise TypeError("only tabular problems can be serialized")
    n, k = spec.shape
    doc = {
        "format": PROBLEM_FORMAT,
        "version": 1,
        "name": spec.name,
        "states": list(spec.states.labels),
        "actions": list(spec.actions.labels),
        "gamma": spec.gamma,
        "h": spec.h,
        "cost": {"table": spec.cost.base.tolist()},
        "kernel": {"base": spec.kernel.base.reshape(n * k, n).tolist()},
    }
    if spec.cost.perturbations:
        doc["cost"]["perturbations"] = [
            {**m.to_dict(), "table": t.tolist()} for m, t in spec.cost.perturbations
        ]
    if spec.kernel.perturbations:
        doc["kernel"]["perturbations"] = [
            {**m.to_dict(), "rows": p.reshape(n * k, n).tolist()} for m, p in spec.kernel.perturbations
        ]
    return doc


def save_problem(spec: ProblemSpec, path) -> None:
    Path(path).write_text(canonical_json(problem_to_dict(spec)))


# ---------------------------------------------------------------------------
# analytic fixtures


@dataclass(frozen=True)
class MixtureFixture:
    """Three-state, two-action problem with hand-derivable assumption constants.

    Every kernel row is ``beta0 * nu + (1 - beta0) * (B_a[x] + m(mu) E[x])``
    with ``m`` the mean of ``mu`` over labels ``(-1, 0, 1)``. Action 1 moves
    ``kappa`` of mass from state 1 to state 2 and costs ``action_gap`` more,
    which keeps action 0 strictly greedy along any iteration started from
    ``Q = 0``.
    """

    beta0: float = 0.9
    pert: float = 0.25
    kappa: float = 1e-4
    action_gap: float = 1.0
    coupling: float = 0.5
    gamma: float = 1.0
    h: float = 1.0

    def build(self) -> ProblemSpec:
        labels = np.array([-1.0, 0.0, 1.0])
        nu = np.full(3, 1.0 / 3.0)
        b0 = np.array([[0.4, 0.35, 0.25], [0.25, 0.4, 0.35], [0.25, 0.3, 0.45]])
        move = np.array([0.0, -1.0, 1.0]) * self.kappa
        b = np.stack([b0, b0 + move], axis=1)
        e_row = np.array([-self.pert, 0.0, self.pert])
        e = np.broadcast_to(e_row, (3, 2, 3)).copy()
        base = self.beta0 * nu + (1.0 - self.beta0) * b
        kernel = KernelFamily(base, [(MomentFunctional("mean"), (1.0 - self.beta0) * e)], labels=labels)
        f0 = np.array([1.0, 0.0, 0.5])
        cost_base = f0[:, None] + np.array([0.0, self.action_gap])[None, :]
        cost = TabularCost(cost_base, [(MomentFunctional("mean"), np.full((3, 2), self.coupling))], labels)
        return ProblemSpec(Grid((-1.0, 0.0, 1.0)), Grid((0.0, 1.0)), cost, kernel, self.gamma, self.h,
                           name="mixture-fixture", meta={"fixture": asdict(self)})

    def f_sup(self) -> float:
        # cost is affine in m in [-1, 1]: extremes sit at the endpoints
        f0 = np.array([1.0, 0.0, 0.5])
        tables = [f0[:, None] + np.array([0.0, self.action_gap])[None, :] + m * self.coupling for m in (-1, 1)]
        return float(max(np.abs(t).max() for t in tables))

    def lipschitz_p(self) -> float:
        """Row L1 change per unit TV: ``(1 - beta0) * |E_x|_1 * range(labels)``."""
        return (1.0 - self.beta0) * 2 * self.pert * 2.0

    def lipschitz_f(self) -> float:
        return abs(self.coupling) * 2.0

    def action_kernel_gap(self) -> float:
        """``max_x |p(.|x,1,mu) - p(.|x,0,mu)|_1``, independent of ``mu``."""
        return (1.0 - self.beta0) * 2 * self.kappa

    def greedy_margin(self) -> float:
        """Lower bound on ``Q(x,1) - Q(x,0)`` at every fixed point and every iterate from zero."""
        spec_disc = np.exp(-self.gamma * self.h)
        q_bound = self.h * self.f_sup() / (1.0 - spec_disc)
        return self.h * self.action_gap - spec_disc * self.action_kernel_gap() * q_bound

    def lipschitz_q(self) -> float:
        """Valid for pairs in which one member has greedy margin at least ``greedy_margin()``.

        Flipping the argmin at some state costs at least half the margin in
        sup norm, and a flip changes a row by at most ``action_kernel_gap()``.
        """
        return 2.0 * self.action_kernel_gap() / self.greedy_margin()

    def doeblin_beta(self) -> float:
        """Exact infimum over policies and distributions of the maximal minorization constant."""
        spec = self.build()
        best = np.inf
        for policy in np.ndindex(2, 2, 2):
            # column minima are concave in m, so the endpoints m = -1, 1 suffice
            for mu in (point_mass(3, 0), point_mass(3, 2)):
                m = spec.kernel.tensor(mu)[np.arange(3), list(policy)]
                best = min(best, float(m.min(axis=0).sum()))
        return best


def coordination_problem(noise: float = 0.1, attraction: float = 1.0, bias: float = 0.05,
                         gamma: float = 1.0, h: float = 0.5) -> ProblemSpec:
    """Three-state crowd-seeking game with several equilibria.

    Action ``a`` moves to state ``a`` with probability ``1 - noise`` (else
    uniform). Being at ``x`` costs ``-attraction * mu(x)`` plus a small
    ``bias`` penalty on states 0 and 1, so best responses to the uniform
    distribution head to state 2 while an all-zero Q-table heads to state 0.
    """
    n = 3
    base = np.zeros((n, n, n))
    for x in range(n):
        for a in range(n):
            base[x, a] = noise / n
            base[x, a, a] += 1.0 - noise
    cost_base = np.zeros((n, n))
    cost_base[:2, :] += bias
    perts = []
    for x in range(n):
        t = np.zeros((n, n))
        t[x, :] = -attraction
        perts.append((MomentFunctional("mass_at", x), t))
    labels = np.arange(n, dtype=float)
    return ProblemSpec(Grid((0.0, 1.0, 2.0)), Grid((0.0, 1.0, 2.0)), TabularCost(cost_base, perts, labels),
                       KernelFamily(base), gamma, h, name="coordination")
