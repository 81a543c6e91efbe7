"""Variational opponent modeling for tabular games.

An agent models each other agent ``j`` as a soft-optimal player of an
estimated reward table ``r_hat_j(s, a)`` (``a`` the joint action): the model
is the prior tilted by the exponentiated expected soft value.  The reward
table is fitted to observed trajectories with a self-normalised importance
sampling gradient over rollouts of the current model.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .errors import ConvergenceError, DegenerateWeightsError, ParameterError
from .game import GameSpec, horizon_trunc as default_trunc, product_distribution, split_joint
from .soft import EVAL_TOL, MAX_EVAL_ITERS, kl, safe_log

LOG_W_CLIP = 50.0
REWARD_CLIP = 10.0
MIN_LOG_Z = math.log(1e-300)


@dataclass(frozen=True, eq=False)
class RewardEstimate:
    """Tabular estimate of one agent's reward over (state, joint action)."""

    table: np.ndarray
    step: float = 0.05
    clip: float = REWARD_CLIP

    def __post_init__(self):
        t = np.asarray(self.table, dtype=float)
        if not np.all(np.isfinite(t)):
            raise ParameterError("reward estimate has non-finite entries")
        object.__setattr__(self, "table", np.clip(t, -self.clip, self.clip))

    @classmethod
    def zeros(cls, game: GameSpec, **kw) -> "RewardEstimate":
        return cls(np.zeros((game.n_states, game.n_joint)), **kw)


@dataclass(frozen=True, eq=False)
class Trajectory:
    """A sequence of ``(state, joint action)`` steps.

    ``logp`` and ``base_logp`` hold the per-step log-probability of the
    modelled agent's action under the generating model and under the base
    measure; they are only needed for model rollouts.
    """

    states: np.ndarray
    actions: np.ndarray
    rewards: Optional[np.ndarray] = None
    logp: Optional[np.ndarray] = None
    base_logp: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "states", np.asarray(self.states, dtype=np.int64))
        object.__setattr__(self, "actions", np.asarray(self.actions, dtype=np.int64))
        if self.states.shape != self.actions.shape:
            raise ParameterError("states and actions must have the same length")

    def __len__(self):
        return len(self.states)

    def check(self, game: GameSpec) -> None:
        if np.any((self.states < 0) | (self.states >= game.n_states)):
            raise ParameterError("state index out of range")
        if np.any((self.actions < 0) | (self.actions >= game.n_joint)):
            raise ParameterError("joint action index out of range")
        s, a = self.states, self.actions
        if len(s) > 1 and np.any(game.transition[s[:-1], a[:-1], s[1:]] <= 0):
            raise ParameterError("trajectory uses a zero-probability transition")


class ReplayBuffer:
    """FIFO trajectory store bounded by the total number of transitions."""

    def __init__(self, capacity: int = 100_000):
        if capacity < 1:
            raise ParameterError("capacity must be positive")
        self.capacity = capacity
        self._trajs: deque = deque()
        self._size = 0

    def add(self, traj: Trajectory) -> None:
        self._trajs.append(traj)
        self._size += len(traj)
        while self._size > self.capacity and len(self._trajs) > 1:
            self._size -= len(self._trajs.popleft())

    def extend(self, trajs) -> None:
        for t in trajs:
            self.add(t)

    def __len__(self):
        return len(self._trajs)

    @property
    def transitions(self) -> int:
        return self._size

    def snapshot(self) -> list:
        return list(self._trajs)


@dataclass
class OpponentModelConfig:
    step: float = 0.05
    inner_iters: int = 5
    n_rollouts: int = 64
    horizon_trunc: Optional[int] = None
    clip: float = REWARD_CLIP
    log_w_clip: float = LOG_W_CLIP
    prior: str = "empirical"
    weights: str = "prior"
    laplace: float = 1.0
    tol: float = EVAL_TOL


# ---------------------------------------------------------------------------
# counting and sampling helpers
# ---------------------------------------------------------------------------

def action_frequencies(game: GameSpec, trajs: Sequence[Trajectory], j: int,
                       alpha: float = 1.0) -> np.ndarray:
    """Laplace-smoothed state-conditioned action frequencies of agent ``j``."""
    counts = np.zeros((game.n_states, game.actions[j]))
    if trajs:
        s = np.concatenate([t.states for t in trajs])
        a = np.concatenate([t.actions for t in trajs])
        own = np.unravel_index(a, game.actions)[j]
        np.add.at(counts, (s, own), 1.0)
    counts += alpha
    return counts / counts.sum(axis=1, keepdims=True)


def sample_rows(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One categorical draw per row of ``probs`` by inverse CDF."""
    cdf = np.cumsum(probs, axis=-1)
    u = rng.random(probs.shape[:-1]) * cdf[..., -1]
    return np.minimum((u[..., None] > cdf).sum(axis=-1), probs.shape[-1] - 1)


def simulate(game: GameSpec, marginals: Sequence[np.ndarray], n_episodes: int, length: int,
             rng: np.random.Generator) -> tuple:
    """Roll out independent per-agent state-conditioned policies.

    ``marginals[k]`` is ``(S, n_k)`` or time-indexed ``(T, S, n_k)``.
    Returns ``(states, own_actions, joint_actions)`` with shapes
    ``(E, L)``, ``(E, L, N)`` and ``(E, L)``.
    """
    E, N = n_episodes, game.n_agents
    states = np.empty((E, length), dtype=np.int64)
    own = np.empty((E, length, N), dtype=np.int64)
    s = sample_rows(np.broadcast_to(game.initial, (E, game.n_states)), rng)
    for t in range(length):
        states[:, t] = s
        for k in range(N):
            m = marginals[k]
            m = m[min(t, m.shape[0] - 1)] if m.ndim == 3 else m
            own[:, t, k] = sample_rows(m[s], rng)
        joint = np.ravel_multi_index(tuple(own[:, t].T), game.actions)
        s = sample_rows(game.transition[s, joint], rng)
    joint = np.ravel_multi_index(tuple(np.moveaxis(own, -1, 0)), game.actions)
    return states, own, joint


# ---------------------------------------------------------------------------
# soft opponent values and the optimal model
# ---------------------------------------------------------------------------

def soft_q_rho(game: GameSpec, j: int, rho: Sequence[np.ndarray], reward, priors: np.ndarray,
               tol: float = EVAL_TOL, kl_others: Optional[np.ndarray] = None,
               max_iters: int = MAX_EVAL_ITERS) -> np.ndarray:
    """Soft action value of agent ``j`` over (state, joint action) under models ``rho``.

    ``rho`` holds one ``(S, n_k)`` factor for every agent (``rho[j]`` is the
    model of ``j`` itself).  Solves::

        Q(s, a) = r_hat(s, a) - kl_others(s)
                  + gamma * E_{s'~P, a'~rho}[Q(s', a')] - gamma * E_{s'~P} KL(rho_j(s') || prior_j(s'))

    ``kl_others`` defaults to zero, the stand-in used when the other agents'
    true policies are unobservable.
    """
    if game.horizon is not None:
        raise ParameterError("soft_q_rho needs an infinite-horizon game")
    table = reward.table if isinstance(reward, RewardEstimate) else np.asarray(reward, dtype=float)
    joint = product_distribution(rho)                                  # (S, A)
    penalty = kl(rho[j], priors)                                       # (S,)
    imm = table - (0.0 if kl_others is None else np.asarray(kl_others)[:, None])
    absorbing = list(game.absorbing)
    q = imm.copy()
    for it in range(1, max_iters + 1):
        w = np.einsum("sa,sa->s", joint, q) - penalty
        w[absorbing] = 0.0
        q_new = imm + game.gamma * game.transition @ w
        res = float(np.max(np.abs(q_new - q)))
        q = q_new
        if not np.isfinite(res):
            raise ConvergenceError("opponent soft value diverged", it, res)
        if res < tol:
            return q
    raise ConvergenceError("opponent soft value hit the iteration cap", max_iters, res)


def optimal_opponent_policy(q_rho: np.ndarray, prior: np.ndarray, rho_others, j: int,
                            actions: Sequence[int]) -> np.ndarray:
    """Prior tilted by the exponentiated expected soft value (max-subtracted).

    ``rho_others`` is the joint distribution over the other agents' actions
    ``(S, m_j)`` or a sequence of their ``(S, n_k)`` factors.
    """
    q = split_joint(q_rho, actions, j)                                 # (S, m_j, n_j)
    if not isinstance(rho_others, np.ndarray):
        others = list(rho_others)
        rho_others = product_distribution(others) if others else np.ones(q.shape[:1] + (1,))
    expected = np.einsum("sx,sxa->sa", rho_others, q)
    logits = safe_log(prior) + expected
    logits -= logits.max(axis=-1, keepdims=True)
    w = np.exp(logits)
    return w / w.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# reward estimation
# ---------------------------------------------------------------------------

def _flatten(trajs: Sequence[Trajectory], gamma: float, horizon: int) -> tuple:
    lens = np.array([min(len(t), horizon) for t in trajs], dtype=np.int64)
    idx = np.repeat(np.arange(len(trajs)), lens)
    s = np.concatenate([t.states[:L] for t, L in zip(trajs, lens)])
    a = np.concatenate([t.actions[:L] for t, L in zip(trajs, lens)])
    pos = np.concatenate([np.arange(L) for L in lens])
    disc = gamma ** pos if gamma > 0 else (pos == 0).astype(float)
    return lens, idx, s, a, disc


def discounted_counts(trajs: Sequence[Trajectory], shape: tuple, gamma: float, horizon: int,
                      weights: Optional[np.ndarray] = None) -> np.ndarray:
    """Weighted sum over trajectories of discounted visitation tables.

    ``weights`` defaults to ``1 / len(trajs)``, giving the empirical mean.
    """
    _, idx, s, a, disc = _flatten(trajs, gamma, horizon)
    if weights is None:
        weights = np.full(len(trajs), 1.0 / len(trajs))
    out = np.zeros(shape)
    np.add.at(out, (s, a), disc * np.asarray(weights)[idx])
    return out


def importance_log_weights(trajs: Sequence[Trajectory], reward, gamma: float,
                           horizon: int) -> np.ndarray:
    """``log w = sum_t gamma^t r_hat(s_t, a_t) + sum_t base_logp_t - sum_t logp_t``."""
    table = reward.table if isinstance(reward, RewardEstimate) else np.asarray(reward)
    lens, idx, s, a, disc = _flatten(trajs, gamma, horizon)
    out = np.bincount(idx, weights=disc * table[s, a], minlength=len(trajs))
    for k, t in enumerate(trajs):
        L = lens[k]
        if t.logp is None:
            raise ParameterError("model rollouts must carry generating log-probabilities")
        out[k] -= t.logp[:L].sum()
        if t.base_logp is not None:
            out[k] += t.base_logp[:L].sum()
    return out


def reward_gradient(trajs: Sequence[Trajectory], reward, gamma: float, horizon_trunc: int,
                    model_trajs: Sequence[Trajectory] = (), log_w_clip: float = LOG_W_CLIP,
                    data_counts: Optional[np.ndarray] = None):
    """Gradient of the trajectory-matching objective in the tabular reward entries.

    ``G = -E_data[sum_t gamma^t 1{(s_t, a_t) = (s, a)}]
          + sum_k w_k / sum_k w_k * sum_t gamma^t 1{...}`` over model rollouts.
    """
    if len(trajs) == 0:
        raise ParameterError("reward_gradient needs at least one data trajectory")
    table = reward.table if isinstance(reward, RewardEstimate) else np.asarray(reward)
    if data_counts is None:
        data_counts = discounted_counts(trajs, table.shape, gamma, horizon_trunc)
    grad = -data_counts
    if len(model_trajs) == 0:
        return grad
    log_w = importance_log_weights(model_trajs, table, gamma, horizon_trunc)
    top = log_w.max()
    if not np.isfinite(top):
        raise DegenerateWeightsError("importance weights are not finite; lower the step or clip")
    shifted = np.maximum(log_w - top, -log_w_clip)
    w = np.exp(shifted)
    log_z = top + math.log(w.mean())
    if log_z < MIN_LOG_Z:
        raise DegenerateWeightsError(
            f"importance normaliser {log_z:.1f} (log) underflows; clip rewards or raise the temperature")
    w /= w.sum()
    return grad + discounted_counts(model_trajs, table.shape, gamma, horizon_trunc, weights=w)


def rollout_model(game: GameSpec, rho: Sequence[np.ndarray], j: int, n: int, length: int,
                  rng: np.random.Generator, base: Optional[np.ndarray] = None) -> list:
    """Sample ``n`` trajectories with every agent ``k`` playing ``rho[k]``.

    Records the log-probability of agent ``j``'s actions under ``rho[j]`` and,
    when given, under the base measure ``base``.
    """
    states, own, joint = simulate(game, rho, n, length, rng)
    lp = safe_log(rho[j])[states, own[..., j]]
    blp = safe_log(base)[states, own[..., j]] if base is not None else None
    return [Trajectory(states[k], joint[k], logp=lp[k],
                       base_logp=None if blp is None else blp[k]) for k in range(n)]


def fit_opponent_model(game: GameSpec, buffer, j: int, config: Optional[OpponentModelConfig] = None,
                       rng=None, reward: Optional[RewardEstimate] = None,
                       rho_others: Optional[Sequence[np.ndarray]] = None,
                       prior: Optional[np.ndarray] = None) -> tuple:
    """Alternate reward-gradient steps and model refreshes for agent ``j``.

    Returns ``(rho_j, reward_estimate)``.  ``reward`` warm-starts the
    estimate; ``rho_others`` (one factor per agent, entry ``j`` ignored)
    defaults to smoothed action frequencies in the buffer.
    """
    config = config or OpponentModelConfig()
    rng = np.random.default_rng(rng)
    data = buffer.snapshot() if isinstance(buffer, ReplayBuffer) else list(buffer)
    if not data:
        raise ParameterError("opponent fitting needs a non-empty buffer")
    if game.horizon is not None:
        raise ParameterError("opponent fitting needs an infinite-horizon game")
    H = config.horizon_trunc or default_trunc(game.gamma)
    if prior is None:
        if config.prior == "empirical":
            prior = action_frequencies(game, data, j, config.laplace)
        else:
            prior = np.full((game.n_states, game.actions[j]), 1.0 / game.actions[j])
    if rho_others is None:
        rho_others = [action_frequencies(game, data, k, config.laplace) for k in range(game.n_agents)]
    rho = [np.asarray(f, dtype=float) for f in rho_others]
    if reward is None:
        reward = RewardEstimate.zeros(game, step=config.step, clip=config.clip)
    base = prior if config.weights == "prior" else None
    others = [rho[k] for k in range(game.n_agents) if k != j]

    def refresh(est):
        q = soft_q_rho(game, j, rho, est, prior, tol=config.tol)
        return optimal_opponent_policy(q, prior, others, j, game.actions)

    data_counts = discounted_counts(data, reward.table.shape, game.gamma, H)
    rho[j] = refresh(reward)
    for _ in range(config.inner_iters):
        model = rollout_model(game, rho, j, config.n_rollouts, H, rng, base)
        g = reward_gradient(data, reward, game.gamma, H, model, config.log_w_clip, data_counts)
        reward = replace(reward, table=reward.table - config.step * g)
        rho[j] = refresh(reward)
    return rho[j], reward
