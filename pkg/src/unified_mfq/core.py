"""Domain types and the two operators driving the iteration.

Distributions and Q-tables are plain numpy arrays: a distribution is a
1-D array over states, a Q-table is a ``(n_states, n_actions)`` array.
The helpers here validate them; nothing wraps them in custom classes.

Costs are minimized everywhere, so the greedy policy is a per-state argmin.
Total variation is ``0.5 * sum(|a - b|)``; for a zero-mass signed measure
this equals ``sup_A |sum_{x in A} (a - b)(x)|``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

SIMPLEX_TOL = 1e-12


@dataclass(frozen=True)
class Grid:
    """Ordered, strictly increasing grid of real labels."""

    labels: tuple[float, ...]

    def __post_init__(self):
        labels = tuple(float(v) for v in self.labels)
        if not labels:
            raise ValueError("a grid needs at least one label")
        if any(b <= a for a, b in zip(labels, labels[1:])):
            raise ValueError("grid labels must be strictly increasing")
        object.__setattr__(self, "labels", labels)

    @classmethod
    def uniform(cls, lo: float, hi: float, step: float) -> "Grid":
        n = int(round((hi - lo) / step))
        return cls(tuple(lo + i * step for i in range(n + 1)))

    @property
    def size(self) -> int:
        return len(self.labels)

    @property
    def values(self) -> np.ndarray:
        return np.asarray(self.labels, dtype=float)

    def __len__(self):
        return len(self.labels)


StateSpace = Grid
ActionSpace = Grid


def probability_vector(weights, normalize: bool = True) -> np.ndarray:
    """Validate ``weights`` as a distribution over states.

    Small negative entries (down to ``-SIMPLEX_TOL``) are clipped. With
    ``normalize`` the result is rescaled to unit mass; otherwise the mass
    must already be 1 within ``SIMPLEX_TOL``.
    """
    w = np.array(weights, dtype=float)
    if w.ndim != 1 or w.size == 0:
        raise ValueError("a distribution must be a non-empty 1-D vector")
    if not np.all(np.isfinite(w)):
        raise ValueError("distribution has non-finite weights")
    if w.min() < -SIMPLEX_TOL:
        raise ValueError(f"negative weight {w.min():.3e} in distribution")
    w = np.clip(w, 0.0, None)
    total = w.sum()
    if normalize:
        if total <= 0:
            raise ValueError("distribution has zero mass")
        return w / total
    if abs(total - 1.0) > SIMPLEX_TOL:
        raise ValueError(f"distribution mass {total!r} differs from 1")
    return w


def uniform(n: int) -> np.ndarray:
    return np.full(n, 1.0 / n)


def point_mass(n: int, i: int) -> np.ndarray:
    mu = np.zeros(n)
    mu[i] = 1.0
    return mu


@dataclass(frozen=True)
class MomentFunctional:
    """Scalar summary of a distribution: ``mean``, ``second_moment`` or ``mass_at``.

    For ``mass_at`` the ``at`` field holds the state index.
    """

    name: str
    at: int | None = None

    def __post_init__(self):
        if self.name not in ("mean", "second_moment", "mass_at"):
            raise ValueError(f"unknown moment functional {self.name!r}")
        if self.name == "mass_at" and self.at is None:
            raise ValueError("mass_at needs a state index")

    def __call__(self, mu: np.ndarray, labels: np.ndarray) -> float:
        if self.name == "mean":
            return float(labels @ mu)
        if self.name == "second_moment":
            return float((labels**2) @ mu)
        return float(mu[self.at])

    def lipschitz_tv(self, labels: np.ndarray) -> float:
        """Smallest L with ``|m(mu1) - m(mu2)| <= L * tv(mu1, mu2)``."""
        if self.name == "mean":
            return float(labels.max() - labels.min())
        if self.name == "second_moment":
            sq = labels**2
            return float(sq.max() - sq.min())
        return 1.0

    def to_dict(self) -> dict:
        d = {"functional": self.name}
        if self.at is not None:
            d["at"] = self.at
        return d


class KernelFamily:
    """Transition law ``p(x' | x, a, mu)`` on a finite grid.

    The law is affine in moment functionals of ``mu``::

        p(.|x, a, mu) = base[x, a] + sum_j m_j(mu) * pert_j[x, a]

    With perturbations present, rows are clamped to ``[0, 1]`` and
    renormalized after evaluation; ``last_clamped`` reports whether that
    happened on the most recent call.
    """

    def __init__(self, base, perturbations: Sequence[tuple[MomentFunctional, np.ndarray]] = (),
                 labels=None):
        base = np.array(base, dtype=float)
        if base.ndim != 3 or base.shape[0] != base.shape[2]:
            raise ValueError("kernel base must have shape (n_states, n_actions, n_states)")
        self.base = base
        self.perturbations = [(m, np.array(p, dtype=float)) for m, p in perturbations]
        for _, p in self.perturbations:
            if p.shape != base.shape:
                raise ValueError("perturbation block shape differs from base kernel")
        if self.perturbations and labels is None:
            raise ValueError("state labels are required for mu-dependent kernels")
        self.labels = None if labels is None else np.asarray(labels, dtype=float)
        self.last_clamped = False

    @property
    def n_states(self) -> int:
        return self.base.shape[0]

    @property
    def n_actions(self) -> int:
        return self.base.shape[1]

    @property
    def depends_on_mu(self) -> bool:
        return bool(self.perturbations)

    def tensor(self, mu=None) -> np.ndarray:
        """Full ``(n_states, n_actions, n_states)`` table at ``mu``."""
        if not self.perturbations:
            self.last_clamped = False
            return self.base
        p = self.base.copy()
        for m, block in self.perturbations:
            p += m(mu, self.labels) * block
        if p.min() < 0.0 or p.max() > 1.0:
            self.last_clamped = True
            p = np.clip(p, 0.0, 1.0)
            p /= p.sum(axis=2, keepdims=True)
        else:
            self.last_clamped = False
        return p

    def eval(self, x: int, a: int, mu=None) -> np.ndarray:
        if not self.perturbations:
            return self.base[x, a]
        row = self.base[x, a].copy()
        for m, block in self.perturbations:
            row += m(mu, self.labels) * block[x, a]
        if row.min() < 0.0 or row.max() > 1.0:
            row = np.clip(row, 0.0, 1.0)
            row /= row.sum()
        return row


CostFn = Callable[[np.ndarray], np.ndarray]


@dataclass
class ProblemSpec:
    """A finite discounted mean-field problem.

    ``cost`` maps a distribution to the ``(n_states, n_actions)`` table of
    running costs ``f(x, a, mu)``; the one-step cost is ``h * f``.
    """

    states: Grid
    actions: Grid
    cost: CostFn
    kernel: KernelFamily
    gamma: float
    h: float
    name: str = "problem"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.gamma <= 0 or self.h <= 0:
            raise ValueError("gamma and h must be positive")
        if self.kernel.n_states != self.states.size or self.kernel.n_actions != self.actions.size:
            raise ValueError("kernel shape does not match the state/action grids")

    @property
    def discount(self) -> float:
        return float(np.exp(-self.gamma * self.h))

    @property
    def shape(self) -> tuple[int, int]:
        return (self.states.size, self.actions.size)

    def cost_table(self, mu) -> np.ndarray:
        return np.asarray(self.cost(mu), dtype=float)

    def cost_at(self, x: int, a: int, mu) -> float:
        point = getattr(self.cost, "point", None)
        if point is not None:
            return point(x, a, mu)
        return float(self.cost_table(mu)[x, a])

    def q_bound(self, f_sup: float) -> float:
        """Sup-norm bound ``h * |f|_inf / (1 - exp(-gamma h))`` on Q-iterates from zero."""
        return self.h * f_sup / (1.0 - self.discount)


@dataclass(frozen=True)
class LearningRates:
    rho_mu: float
    rho_q: float

    def __post_init__(self):
        if not (self.rho_mu >= 0 and self.rho_q >= 0):
            raise ValueError("learning rates must be non-negative")

    @property
    def ratio(self) -> float:
        """``rho_q / rho_mu``; large values are the MFG regime."""
        return self.rho_q / self.rho_mu if self.rho_mu else float("inf")


def greedy_policy(q) -> np.ndarray:
    """Per-state argmin of ``q``; ties go to the lowest action index."""
    return np.argmin(np.asarray(q), axis=1)


def induced_transition(q, mu, spec: ProblemSpec) -> np.ndarray:
    """Row-stochastic matrix of the chain driven by the greedy policy of ``q``."""
    policy = greedy_policy(q)
    kern = spec.kernel.tensor(mu)
    return kern[np.arange(spec.states.size), policy]


def op_P(q, mu, spec: ProblemSpec) -> np.ndarray:
    """Distribution drift ``mu M - mu`` for the greedy chain ``M``."""
    mu = np.asarray(mu, dtype=float)
    return mu @ induced_transition(q, mu, spec) - mu


def op_T(q, mu, spec: ProblemSpec) -> np.ndarray:
    """Bellman residual ``h f + e^{-gamma h} E[min_a' Q(x', a')] - Q``."""
    q = np.asarray(q, dtype=float)
    kern = spec.kernel.tensor(mu)
    return spec.h * spec.cost_table(mu) + spec.discount * (kern @ q.min(axis=1)) - q


def tv_distance(a, b) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return 0.5 * float(np.abs(a - b).sum())


def sup_norm(t) -> float:
    t = np.asarray(t, dtype=float)
    return float(np.abs(t).max()) if t.size else 0.0
