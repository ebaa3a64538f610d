"""Reference solvers for the stationary-point equations.

None of these routines run the two-timescale iteration; they solve the
defining equations directly (linear solves, value iteration, damped
nested fixed points) and are used to check the iteration's output.

Both nested solvers target the same coupled system::

    mu = mu P^{Q, mu}                (greedy chain of Q)
    Q  = h f(., ., mu) + e^{-gamma h} p(. | ., ., mu) min_a' Q

``mfg_solve`` iterates on the distribution with the Q-table solved inside,
``mfc_solve`` iterates on the Q-table with the distribution solved inside.
When the system has several solutions the two may land on different ones.
"""

from __future__ import annotations

import logging
import warnings

import numpy as np

from unified_mfq.core import (
    ProblemSpec,
    greedy_policy,
    induced_transition,
    op_P,
    op_T,
    sup_norm,
    tv_distance,
    uniform,
)
from unified_mfq.errors import ConvergenceError

logger = logging.getLogger(__name__)

STATIONARY_TOL = 1e-10


class ReducibleChainWarning(RuntimeWarning):
    """The chain has more than one stationary distribution."""


def _gth(M: np.ndarray) -> np.ndarray:
    # Grassmann-Taksar-Heyman elimination: subtraction-free, stable for nearly reducible chains
    A = np.array(M, dtype=float)
    n = A.shape[0]
    for k in range(n - 1, 0, -1):
        s = A[k, :k].sum()
        if s <= 0.0:
            raise np.linalg.LinAlgError("GTH pivot vanished")
        A[:k, k] /= s
        A[:k, :k] += np.outer(A[:k, k], A[k, :k])
    pi = np.zeros(n)
    pi[0] = 1.0
    for k in range(1, n):
        pi[k] = pi[:k] @ A[:k, k]
    return pi / pi.sum()


def _power(M: np.ndarray, tol: float, max_iters: int = 100_000) -> np.ndarray:
    mu = uniform(M.shape[0])
    lazy = 0.5 * (M + np.eye(M.shape[0]))
    for _ in range(max_iters):
        nxt = mu @ lazy
        if np.abs(nxt - mu).sum() < tol * 1e-2:
            return nxt
        mu = nxt
    return mu


def stationary_distribution(M, tol: float = STATIONARY_TOL) -> np.ndarray:
    """Stationary distribution of the row-stochastic matrix ``M``.

    Solves ``mu (M - I) = 0`` with the normalization row appended by least
    squares. If the residual ``|mu M - mu|_1`` misses ``tol`` the solve is
    repeated with GTH elimination and finally with lazy power iteration.
    A ``ReducibleChainWarning`` is issued when ``I - M`` has a null space
    of dimension above one (several stationary distributions); one of them
    is still returned.
    """
    M = np.asarray(M, dtype=float)
    n = M.shape[0]
    A = np.vstack([M.T - np.eye(n), np.ones(n)])
    b = np.zeros(n + 1)
    b[-1] = 1.0
    if n > 1:
        sv = np.linalg.svd(M.T - np.eye(n), compute_uv=False)
        if sv[-2] < 1e-12 * max(1.0, sv[0]):
            warnings.warn("chain is reducible: stationary distribution is not unique",
                          ReducibleChainWarning, stacklevel=2)

    def residual(mu):
        return float(np.abs(mu @ M - mu).sum())

    mu = np.linalg.lstsq(A, b, rcond=None)[0]
    mu = np.clip(mu, 0.0, None)
    mu /= mu.sum()
    if residual(mu) < tol:
        return mu
    try:
        mu = _gth(M)
    except np.linalg.LinAlgError:
        mu = _power(M, tol)
    if residual(mu) >= tol:
        mu = _power(M, tol)
    if residual(mu) >= tol:
        raise ConvergenceError("stationary distribution did not reach tolerance", residual(mu))
    return mu


def mu_fixed_point(q, spec: ProblemSpec, damping: float = 0.5, tol: float = 1e-12,
                   max_iters: int = 100_000, mu0=None) -> np.ndarray:
    """Equilibrium distribution of the greedy population for a frozen Q-table.

    Returns ``mu`` with ``|mu - mu P^{Q, mu}|_1 < tol``. For distribution-free
    kernels this is a single stationary solve; otherwise the damped map
    ``mu <- (1 - damping) mu + damping mu P^{Q, mu}`` is iterated.
    """
    if not 0 < damping <= 1:
        raise ValueError("damping must lie in (0, 1]")
    if not spec.kernel.depends_on_mu:
        return stationary_distribution(induced_transition(q, None, spec), tol=max(tol, 1e-14))
    mu = uniform(spec.states.size) if mu0 is None else np.array(mu0, dtype=float)
    res = np.inf
    for _ in range(max_iters):
        nxt = mu @ induced_transition(q, mu, spec)
        res = float(np.abs(nxt - mu).sum())
        if res < tol:
            return mu
        mu = (1.0 - damping) * mu + damping * nxt
    raise ConvergenceError(
        "equilibrium distribution did not converge; the Doeblin or Lipschitz assumptions "
        "are probably violated", res)


def bellman_solve(mu, spec: ProblemSpec, tol: float = 1e-10, max_iters: int = 1_000_000,
                  q0=None) -> np.ndarray:
    """Optimal Q-table for the frozen distribution ``mu`` by value iteration.

    Stops once a step is below ``tol * (1 - e^{-gamma h})``, which bounds the
    distance to the true fixed point by ``tol``. ``q0`` warm-starts the
    iteration (zeros by default).
    """
    disc = spec.discount
    f = spec.h * spec.cost_table(mu)
    kern = spec.kernel.tensor(mu)
    q = np.zeros(spec.shape) if q0 is None else np.array(q0, dtype=float)
    step_tol = tol * (1.0 - disc)
    step = np.inf
    for _ in range(max_iters):
        nxt = f + disc * (kern @ q.min(axis=1))
        step = sup_norm(nxt - q)
        q = nxt
        if step < step_tol:
            return q
    raise ConvergenceError("value iteration exceeded max_iters", step / (1.0 - disc))


def residuals(q, mu, spec: ProblemSpec) -> tuple[float, float]:
    """``(sup |T(Q, mu)|, tv-scale |P(Q, mu)|)`` for a candidate pair."""
    return sup_norm(op_T(q, mu, spec)), 0.5 * float(np.abs(op_P(q, mu, spec)).sum())


def _check_pair(q, mu, spec, tol, history, who):
    res_t, res_p = residuals(q, mu, spec)
    if res_t >= tol or res_p >= tol:
        raise ConvergenceError(
            f"{who}: final pair misses tolerance (T residual {res_t:.3e}, P residual {res_p:.3e})",
            max(res_t, res_p), history)
    return q, mu


def mfg_solve(spec: ProblemSpec, tol: float = 1e-9, max_iters: int = 500, mu0=None,
              damping: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
    """Nash-type solution: damped iteration on the distribution.

    Each outer step best-responds to the current distribution and moves
    the distribution toward the equilibrium of that best response. The
    damping is halved whenever the residual grows twice in a row.
    """
    mu = uniform(spec.states.size) if mu0 is None else np.array(mu0, dtype=float)
    q = None
    history = []
    grew = 0
    inner = tol * 1e-2
    for it in range(max_iters):
        q = bellman_solve(mu, spec, tol=inner, q0=q)
        target = mu_fixed_point(q, spec, tol=inner, mu0=mu)
        res = tv_distance(target, mu)
        history.append(res)
        if res < tol * 1e-1:
            mu = target
            q = bellman_solve(mu, spec, tol=inner, q0=q)
            logger.debug("mfg_solve converged after %d outer steps", it + 1)
            return _check_pair(q, mu, spec, tol, history, "mfg_solve")
        grew = grew + 1 if len(history) > 1 and res > history[-2] else 0
        if grew >= 2:
            damping *= 0.5
            grew = 0
        mu = (1.0 - damping) * mu + damping * target
    raise ConvergenceError("mfg_solve did not converge", history[-1], history)


def mfc_solve(spec: ProblemSpec, tol: float = 1e-9, max_iters: int = 500, q0=None,
              damping: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
    """Control-type solution: damped iteration on the Q-table.

    Each outer step freezes the Q-table, lets the population equilibrate
    under its greedy policy and moves the Q-table toward the optimal
    Q-table for that population.
    """
    q = np.zeros(spec.shape) if q0 is None else np.array(q0, dtype=float)
    mu = None
    history = []
    grew = 0
    inner = tol * 1e-2
    for it in range(max_iters):
        mu = mu_fixed_point(q, spec, tol=inner, mu0=mu)
        target = bellman_solve(mu, spec, tol=inner, q0=q)
        res = sup_norm(target - q)
        history.append(res)
        if res < tol * 1e-1 and np.array_equal(greedy_policy(target), greedy_policy(q)):
            logger.debug("mfc_solve converged after %d outer steps", it + 1)
            return _check_pair(target, mu, spec, tol, history, "mfc_solve")
        grew = grew + 1 if len(history) > 1 and res > history[-2] else 0
        if grew >= 2:
            damping *= 0.5
            grew = 0
        q = (1.0 - damping) * q + damping * target
    raise ConvergenceError("mfc_solve did not converge", history[-1], history)


def policy_evaluation(policy, mu, spec: ProblemSpec) -> tuple[np.ndarray, np.ndarray]:
    """Value and Q-table of a fixed Markov policy against a frozen distribution.

    ``V`` solves ``(I - e^{-gamma h} P_alpha) V = h f_alpha`` directly.
    """
    policy = np.asarray(policy, dtype=int)
    n = spec.states.size
    rows = np.arange(n)
    kern = spec.kernel.tensor(mu)
    f = spec.h * spec.cost_table(mu)
    P = kern[rows, policy]
    V = np.linalg.solve(np.eye(n) - spec.discount * P, f[rows, policy])
    Q = f + spec.discount * (kern @ V)
    return V, Q
