"""Exact-operator two-timescale iteration and the scalar toy system.

One step moves both iterates from the same snapshot::

    mu <- mu + rho_mu * P(Q, mu)
    Q  <- Q  + rho_q  * T(Q, mu)

The toy system replaces ``P`` and ``T`` by two scalar polynomials whose
fixed points (1, 0), (1/2, 1/2) and (1, 1/2) make the effect of the
learning-rate ratio visible.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from unified_mfq.core import LearningRates, ProblemSpec, greedy_policy, uniform
from unified_mfq.errors import NumericalFailure

logger = logging.getLogger(__name__)

DIVERGENCE_LIMIT = 1e6
FINITE_CHECK_EVERY = 256


@dataclass(frozen=True)
class IterationConfig:
    rates: LearningRates
    max_iters: int = 10_000
    tol_T: float = 1e-10
    tol_P: float = 1e-10
    record_every: int = 1
    stop_on_tolerance: bool = False
    keep_q: bool = False

    def __post_init__(self):
        if self.max_iters < 1 or self.record_every < 1:
            raise ValueError("max_iters and record_every must be positive")
        if self.tol_T <= 0 or self.tol_P <= 0:
            raise ValueError("tolerances must be positive")


@dataclass
class RunRecord:
    """Trajectory of recorded iterates.

    ``res_P`` is on the total-variation scale (half the L1 norm).
    Diagnostic columns hold NaN when no Lyapunov monitor was attached.
    """

    k: list = field(default_factory=list)
    mu: list = field(default_factory=list)
    q: list = field(default_factory=list)
    res_T: list = field(default_factory=list)
    res_P: list = field(default_factory=list)
    lyapunov: list = field(default_factory=list)
    q_gap: list = field(default_factory=list)
    mu_gap: list = field(default_factory=list)
    final_q: np.ndarray | None = None
    final_mu: np.ndarray | None = None
    converged: bool = False

    def append(self, k, q, mu, res_t, res_p, diag=None, keep_q=False):
        if self.k and k <= self.k[-1]:
            raise ValueError("record indices must increase")
        self.k.append(int(k))
        self.mu.append(np.array(mu))
        if keep_q:
            self.q.append(np.array(q))
        self.res_T.append(float(res_t))
        self.res_P.append(float(res_p))
        lv, qg, mg = diag if diag is not None else (np.nan, np.nan, np.nan)
        self.lyapunov.append(float(lv))
        self.q_gap.append(float(qg))
        self.mu_gap.append(float(mg))

    def __len__(self):
        return len(self.k)


def operators(q, mu, spec: ProblemSpec) -> tuple[np.ndarray, np.ndarray]:
    """``(P(Q, mu), T(Q, mu))`` sharing one kernel and cost evaluation."""
    return _Operators(spec)(q, mu)


class _Operators:
    """``operators`` with the per-problem constants hoisted out of the loop."""

    def __init__(self, spec: ProblemSpec):
        self.spec = spec
        self.n, self.k = spec.shape
        self.rows = np.arange(self.n)
        self.h = spec.h
        self.disc = spec.discount
        self.static = None if spec.kernel.depends_on_mu else spec.kernel.base

    def __call__(self, q, mu):
        n, k = self.n, self.k
        kern = self.static if self.static is not None else self.spec.kernel.tensor(mu)
        M = kern[self.rows, q.argmin(axis=1)]
        drift = mu @ M - mu
        future = (kern.reshape(n * k, n) @ q.min(axis=1)).reshape(n, k)
        bell = self.h * self.spec.cost(mu) + self.disc * future - q
        return drift, bell


def step(q, mu, spec: ProblemSpec, rates: LearningRates) -> tuple[np.ndarray, np.ndarray]:
    q = np.asarray(q, dtype=float)
    mu = np.asarray(mu, dtype=float)
    drift, bell = operators(q, mu, spec)
    return q + rates.rho_q * bell, mu + rates.rho_mu * drift


def _project(mu, k):
    if mu.min() < 0.0:
        logger.warning("iteration %d: distribution left the simplex; clamping", k)
        mu = np.clip(mu, 0.0, None)
    return mu / mu.sum()


def run(spec: ProblemSpec, cfg: IterationConfig, q0=None, mu0=None,
        monitor: Callable | None = None) -> RunRecord:
    """Iterate ``step`` for ``cfg.max_iters`` steps (or until both residuals meet tolerance).

    ``monitor(k, q, mu)`` may return ``(lyapunov, q_gap, mu_gap)``; it is
    called at every recorded step. Raises ``NumericalFailure`` on NaN/inf.
    """
    q = np.zeros(spec.shape) if q0 is None else np.array(q0, dtype=float)
    mu = uniform(spec.states.size) if mu0 is None else np.array(mu0, dtype=float)
    rates = cfg.rates
    rec = RunRecord()
    ops = _Operators(spec)
    rho_q, rho_mu = rates.rho_q, rates.rho_mu
    for k in range(cfg.max_iters + 1):
        drift, bell = ops(q, mu)
        recording = k % cfg.record_every == 0 or k == cfg.max_iters
        # residuals are only needed when recording, testing tolerance or checking for overflow
        if recording or cfg.stop_on_tolerance or k % FINITE_CHECK_EVERY == 0:
            res_t = float(np.abs(bell).max())
            res_p = 0.5 * float(np.abs(drift).sum())
            if not (np.isfinite(res_t) and np.isfinite(res_p)):
                raise NumericalFailure(f"non-finite residual at iteration {k}", iteration=k)
        done = cfg.stop_on_tolerance and res_t < cfg.tol_T and res_p < cfg.tol_P
        last = done or k == cfg.max_iters
        if recording or last:
            diag = monitor(k, q, mu) if monitor is not None else None
            rec.append(k, q, mu, res_t, res_p, diag, keep_q=cfg.keep_q)
        if last:
            rec.converged = res_t < cfg.tol_T and res_p < cfg.tol_P
            break
        q = q + rho_q * bell
        mu = mu + rho_mu * drift
        if rho_mu > 1.0:
            mu = _project(mu, k + 1)
    rec.final_q, rec.final_mu = q, mu
    return rec


# ---------------------------------------------------------------------------
# scalar toy system


class ToyState(NamedTuple):
    q: float
    mu: float


TOY_FIXED_POINTS = (ToyState(1.0, 0.0), ToyState(0.5, 0.5), ToyState(1.0, 0.5))


def toy_operators(s: ToyState) -> tuple[float, float]:
    q, mu = s
    return (q - 1.0) * (mu - q), -(mu - 0.5) * (mu - q + 1.0)


def toy_step(s: ToyState, rates: LearningRates) -> ToyState:
    p, t = toy_operators(s)
    return ToyState(s.q + rates.rho_q * t, s.mu + rates.rho_mu * p)


def toy_run(s0: ToyState, rates: LearningRates, max_iters: int = 1_000_000,
            tol: float = 1e-12) -> list[ToyState]:
    """Trajectory from ``s0`` until a step moves less than ``tol`` (sup norm)."""
    s = ToyState(float(s0[0]), float(s0[1]))
    traj = [s]
    for k in range(1, max_iters + 1):
        nxt = toy_step(s, rates)
        if not (abs(nxt.q) <= DIVERGENCE_LIMIT and abs(nxt.mu) <= DIVERGENCE_LIMIT):
            raise NumericalFailure(f"toy iteration diverged at step {k}: {nxt}", iteration=k)
        traj.append(nxt)
        if max(abs(nxt.q - s.q), abs(nxt.mu - s.mu)) < tol:
            break
        s = nxt
    return traj


def toy_jacobian(s: ToyState) -> np.ndarray:
    """``[[dP/dmu, dP/dQ], [dT/dmu, dT/dQ]]``."""
    q, mu = s
    return np.array([[q - 1.0, mu - 2.0 * q + 1.0],
                     [-2.0 * mu + q - 0.5, mu - 0.5]])


def toy_spectral_radius(s: ToyState, rates: LearningRates) -> float:
    """Spectral radius of the linearized update ``I + diag(rho_mu, rho_q) J`` at ``s``."""
    lin = np.eye(2) + np.diag([rates.rho_mu, rates.rho_q]) @ toy_jacobian(s)
    return float(np.abs(np.linalg.eigvals(lin)).max())
