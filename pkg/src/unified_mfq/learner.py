"""Sample-based tabular two-timescale Q-learning.

Each episode starts from a state drawn from the last per-step distribution
and runs ``T`` inner steps. Inner step ``n`` does, in this order:

1. ``mu_n <- mu_n + rho_mu * (delta(X_n) - mu_n)``
2. pick ``A_n`` epsilon-greedily from ``Q[X_n]``
3. observe the cost ``f(X_n, A_n, mu_n)`` with the updated ``mu_n``
4. draw ``X_{n+1}`` from ``p(. | X_n, A_n, mu)`` where ``mu`` is the updated
   ``mu_n`` (``env_mu="current"``) or its pre-update value (``"previous"``)
5. update the single entry ``Q[X_n, A_n]``

After the last inner step the terminal distribution ``mu_T`` is updated
with ``X_T`` so the next episode's initial draw follows the learned
terminal occupancy.

Random draws come from a PCG64 generator in a fixed order: one uniform
for the initial state, then per inner step one uniform for the
exploration branch, one integer only when exploring, and one uniform for
the next state (inverse CDF).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from unified_mfq.core import LearningRates, ProblemSpec, sup_norm, tv_distance, uniform
from unified_mfq.errors import ConfigError

CHECKPOINT_FORMAT = "unified-mfq/checkpoint"


@dataclass(frozen=True)
class EpisodeConfig:
    episodes: int
    steps_per_episode: int
    rates: LearningRates
    epsilon: float = 0.1
    seed: int = 0
    env_mu: str = "current"
    record_every: int = 100
    update_terminal: bool = True
    debug: bool = False  # check the simplex and single-entry Q updates at every inner step

    def __post_init__(self):
        if self.episodes < 1 or self.steps_per_episode < 1 or self.record_every < 1:
            raise ValueError("episode counts must be positive")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError("epsilon must lie in [0, 1]")
        if self.env_mu not in ("current", "previous"):
            raise ValueError("env_mu must be 'current' or 'previous'")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")


@dataclass
class LearnerState:
    q: np.ndarray
    mu: np.ndarray  # shape (T + 1, n_states); row n is mu_n
    rng: np.random.Generator
    episode: int = 0


@dataclass
class TrainRecord:
    episode: list = field(default_factory=list)
    q_change: list = field(default_factory=list)
    mu_T_drift: list = field(default_factory=list)
    distance: list = field(default_factory=list)


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def init_learner(spec: ProblemSpec, cfg: EpisodeConfig) -> LearnerState:
    n = spec.states.size
    mu = np.tile(uniform(n), (cfg.steps_per_episode + 1, 1))
    return LearnerState(q=np.zeros(spec.shape), mu=mu, rng=make_rng(cfg.seed))


def epsilon_greedy(q_row, epsilon: float, rng: np.random.Generator) -> int:
    """Greedy (lowest-index argmin) with probability ``1 - epsilon``, else uniform."""
    if rng.random() < epsilon:
        return int(rng.integers(len(q_row)))
    return int(np.argmin(q_row))


def sample_index(probs, rng: np.random.Generator) -> int:
    """Inverse-CDF draw from ``probs`` using one uniform."""
    cdf = np.cumsum(probs)
    i = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    return min(i, len(cdf) - 1)


def run_episode(state: LearnerState, spec: ProblemSpec, cfg: EpisodeConfig) -> LearnerState:
    """Advance ``state`` by one episode in place and return it."""
    q, mus, rng = state.q, state.mu, state.rng
    rho_mu, rho_q = cfg.rates.rho_mu, cfg.rates.rho_q
    h, disc, eps = spec.h, spec.discount, cfg.epsilon
    kernel = spec.kernel
    static_cdf = None if kernel.depends_on_mu else np.cumsum(kernel.base, axis=2)
    n_actions = spec.actions.size
    use_previous = cfg.env_mu == "previous"

    x = sample_index(mus[-1], rng)
    for n in range(cfg.steps_per_episode):
        mu_n = mus[n]
        prev = mu_n.copy() if use_previous else None
        mu_n *= 1.0 - rho_mu
        mu_n[x] += rho_mu
        if rng.random() < eps:
            a = int(rng.integers(n_actions))
        else:
            a = int(np.argmin(q[x]))
        cost = spec.cost_at(x, a, mu_n)
        if static_cdf is not None:
            cdf = static_cdf[x, a]
            x_next = min(int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right")), len(cdf) - 1)
        else:
            x_next = sample_index(kernel.eval(x, a, prev if use_previous else mu_n), rng)
        if cfg.debug:
            before = q.copy()
        q[x, a] += rho_q * (h * cost + disc * q[x_next].min() - q[x, a])
        if cfg.debug:
            _check_step(before, q, x, a, mu_n, n)
        x = x_next
    if cfg.update_terminal:
        mu_T = mus[-1]
        mu_T *= 1.0 - rho_mu
        mu_T[x] += rho_mu
    state.episode += 1
    return state


def _check_step(before, q, x, a, mu_n, n):
    changed = np.argwhere(before != q)
    if len(changed) > 1 or (len(changed) == 1 and tuple(changed[0]) != (x, a)):
        raise AssertionError(f"step {n}: Q entries {changed.tolist()} changed, expected only {(x, a)}")
    if mu_n.min() < 0 or abs(mu_n.sum() - 1.0) > 1e-12:
        raise AssertionError(f"step {n}: per-step distribution left the simplex")


def train(spec: ProblemSpec, cfg: EpisodeConfig, distance=None, state: LearnerState | None = None):
    """Run ``cfg.episodes`` episodes.

    ``distance(q, mu_per_step)`` is an optional callable recorded every
    ``cfg.record_every`` episodes alongside the Q change and the drift of
    ``mu_T`` since the previous record.

    Returns ``(q, mu_per_step, record)``.
    """
    state = state or init_learner(spec, cfg)
    rec = TrainRecord()
    last_q, last_mu = state.q.copy(), state.mu[-1].copy()
    for _ in range(cfg.episodes):
        run_episode(state, spec, cfg)
        if state.episode % cfg.record_every == 0:
            rec.episode.append(state.episode)
            rec.q_change.append(sup_norm(state.q - last_q))
            rec.mu_T_drift.append(tv_distance(state.mu[-1], last_mu))
            rec.distance.append(float(distance(state.q, state.mu)) if distance else float("nan"))
            last_q, last_mu = state.q.copy(), state.mu[-1].copy()
    return state.q, state.mu, rec


def sample_mu_drift(spec: ProblemSpec, q, mu, n_samples: int, rng: np.random.Generator):
    """Monte Carlo mean and standard error of the learner's distribution update direction.

    Each sample runs one single-step greedy episode with ``rho_mu = 1`` and
    ``rho_q = 0`` from per-step distributions reset to ``mu``, so the
    terminal update returns ``delta(X_1) - mu`` with ``X_0 ~ mu`` and the
    kernel evaluated at ``mu``. The mean estimates ``P(Q, mu)``.
    """
    mu = np.asarray(mu, dtype=float)
    cfg = EpisodeConfig(1, 1, LearningRates(1.0, 0.0), epsilon=0.0, env_mu="previous")
    state = LearnerState(q=np.array(q, dtype=float), mu=np.tile(mu, (2, 1)), rng=rng)
    hits = np.zeros(mu.size)
    for _ in range(n_samples):
        state.mu[:] = mu
        run_episode(state, spec, cfg)
        hits += state.mu[-1]
    freq = hits / n_samples
    return freq - mu, np.sqrt(freq * (1.0 - freq) / n_samples)


# ---------------------------------------------------------------------------
# checkpoints


def checkpoint_dict(spec: ProblemSpec, q, mu_per_step, episode: int = 0, rng_state=None) -> dict:
    mu_arr = np.atleast_2d(np.asarray(mu_per_step, dtype=float))
    return {
        "format": CHECKPOINT_FORMAT,
        "states": list(spec.states.labels),
        "actions": list(spec.actions.labels),
        "q": np.asarray(q, dtype=float).tolist(),
        "mu": mu_arr.tolist(),
        "episode": int(episode),
        "rng_state": rng_state,
    }


def save_checkpoint(path, spec: ProblemSpec, q, mu_per_step, episode: int = 0, rng_state=None) -> None:
    doc = checkpoint_dict(spec, q, mu_per_step, episode, rng_state)
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def save_learner(path, spec: ProblemSpec, state: LearnerState) -> None:
    save_checkpoint(path, spec, state.q, state.mu, state.episode, state.rng.bit_generator.state)


def load_checkpoint(path) -> dict:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"{path}: not a checkpoint file")
    doc["q"] = np.array(doc["q"], dtype=float)
    doc["mu"] = np.array(doc["mu"], dtype=float)
    return doc


def restore_learner(path) -> LearnerState:
    doc = load_checkpoint(path)
    rng = np.random.Generator(np.random.PCG64())
    if doc.get("rng_state") is None:
        raise ConfigError(f"{path}: checkpoint carries no RNG state")
    rng.bit_generator.state = doc["rng_state"]
    return LearnerState(q=doc["q"], mu=doc["mu"], rng=rng, episode=int(doc["episode"]))
