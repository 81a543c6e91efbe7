"""Finite-horizon mean-field games solved by a regularized fixed-point loop.

A representative agent plays against the population's state-action
distribution ``L_t``.  Each outer round computes a KL-regularized soft-optimal
policy against the current mean field (backward pass, closed-form policy per
step) and then pushes the population forward under that policy.

Tables are time-indexed with ``T + 1`` slices, ``t = 0..T``; the last slice
carries only the terminal reward.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import ParameterError
from .soft import entropy, safe_log, total_variation

TableFn = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True, eq=False)
class MFGameSpec:
    """Representative-agent game; ``reward(L)`` gives ``(S, A)``, ``transition(L)`` gives ``(S, A, S)``.

    ``L`` is the current slice of the mean field, an ``(S, A)`` distribution.
    """

    n_states: int
    n_actions: int
    reward: TableFn
    transition: TableFn
    horizon: int
    initial: np.ndarray
    name: str = "mf"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "initial", np.asarray(self.initial, dtype=float))
        if self.horizon < 0:
            raise ParameterError("horizon must be non-negative")
        if self.initial.shape != (self.n_states,):
            raise ParameterError("initial distribution has the wrong shape")

    def check(self, L: np.ndarray) -> list:
        problems = []
        P = self.transition(L)
        if np.any(P < 0) or np.max(np.abs(P.sum(axis=-1) - 1.0)) > 1e-12:
            problems.append("transition is not row-stochastic for the supplied mean field")
        if not np.all(np.isfinite(self.reward(L))):
            problems.append("reward is not finite for the supplied mean field")
        return problems


def constant_mf_game(reward, transition, horizon: int, initial, name: str = "static") -> MFGameSpec:
    """A mean-field game whose reward and dynamics ignore the population."""
    reward = np.asarray(reward, dtype=float)
    transition = np.asarray(transition, dtype=float)
    S, A = reward.shape
    return MFGameSpec(S, A, lambda L: reward, lambda L: transition, horizon, initial, name,
                      {"base_reward": reward, "transition": transition})


def crowd_aversion_game(base_reward, transition, horizon: int, initial, weight: float = 1.0,
                        name: str = "crowd") -> MFGameSpec:
    """Reward ``base_reward(s, a) - weight * L(s, a)``: crowded pairs pay less."""
    base = np.asarray(base_reward, dtype=float)
    P = np.asarray(transition, dtype=float)
    S, A = base.shape
    return MFGameSpec(S, A, lambda L: base - weight * L, lambda L: P, horizon, initial, name,
                      {"base_reward": base, "transition": P, "weight": weight})


def example_crowd_game(horizon: int = 20, bonus: float = 2.0, weight: float = 15.0) -> MFGameSpec:
    """Three locations on a ring; actions stay, move left, move right.

    Any action that lands on location 0 earns ``bonus``, so a lone agent
    would always head there; the crowd penalty ``weight * L(s, a)`` pushes
    the population to spread out.
    """
    S, A = 3, 3
    P = np.zeros((S, A, S))
    for s in range(S):
        P[s, 0, s] = 1.0
        P[s, 1, (s - 1) % S] = 1.0
        P[s, 2, (s + 1) % S] = 1.0
    base = bonus * (P[:, :, 0] == 1.0)
    return crowd_aversion_game(base, P, horizon, np.full(S, 1.0 / S), weight=weight)


def example_static_game(horizon: int = 20) -> MFGameSpec:
    """Two-state, two-action game with population-independent reward and dynamics."""
    P = np.array([[[0.9, 0.1], [0.2, 0.8]], [[0.7, 0.3], [0.05, 0.95]]])
    r = np.array([[1.0, 0.0], [0.0, 0.5]])
    return constant_mf_game(r, P, horizon, np.array([0.5, 0.5]))


# ---------------------------------------------------------------------------
# forward and backward passes
# ---------------------------------------------------------------------------

def kolmogorov_step(L_prev: np.ndarray, pi_t: np.ndarray, mf: MFGameSpec) -> np.ndarray:
    """``L_t(s, a) = pi_t(a|s) sum_{s~, a~} P(s | s~, a~, L_prev) L_prev(s~, a~)``."""
    state = np.einsum("ia,iat->t", L_prev, mf.transition(L_prev))
    return state[:, None] * pi_t


def forward_flow(mf: MFGameSpec, policy: np.ndarray) -> np.ndarray:
    """Mean field ``(T + 1, S, A)`` generated by a time-indexed policy."""
    T = mf.horizon
    L = np.empty((T + 1, mf.n_states, mf.n_actions))
    L[0] = mf.initial[:, None] * policy[0]
    for t in range(1, T + 1):
        L[t] = kolmogorov_step(L[t - 1], policy[t], mf)
    return L


def uniform_policy(mf: MFGameSpec) -> np.ndarray:
    return np.full((mf.horizon + 1, mf.n_states, mf.n_actions), 1.0 / mf.n_actions)


def soft_q_backward(mf: MFGameSpec, L: np.ndarray, policy: np.ndarray,
                    prior: np.ndarray) -> np.ndarray:
    """KL-regularized action values of ``policy`` against the frozen mean field ``L``.

    ``Q_T = r(L_T)`` and for ``t < T``::

        Q_t(s, a) = r(s, a, L_t) + sum_s' P(s'|s, a, L_t)
                    E_{a'~pi_{t+1}}[Q_{t+1}(s', a') - log pi_{t+1}(a'|s') + log prior_{t+1}(a'|s')]
    """
    T = mf.horizon
    if L.shape[0] != T + 1:
        raise ParameterError(f"mean field needs {T + 1} slices, got {L.shape[0]}")
    Q = np.empty((T + 1, mf.n_states, mf.n_actions))
    Q[T] = mf.reward(L[T])
    for t in range(T - 1, -1, -1):
        nxt = policy[t + 1] * (Q[t + 1] - safe_log(policy[t + 1]) + safe_log(prior[t + 1]))
        Q[t] = mf.reward(L[t]) + mf.transition(L[t]) @ nxt.sum(axis=-1)
    return Q


def closed_form_policy(q_t: np.ndarray, prior_t: np.ndarray) -> np.ndarray:
    """``pi(a|s) ~ prior(a|s) exp(Q(s, a))`` per state, max-subtracted."""
    logits = safe_log(prior_t) + q_t
    logits = logits - logits.max(axis=-1, keepdims=True)
    w = np.exp(logits)
    return w / w.sum(axis=-1, keepdims=True)


def soft_optimal_policy(mf: MFGameSpec, L: np.ndarray, prior: np.ndarray) -> tuple:
    """Backward pass that builds each slice's closed-form policy before stepping back.

    Returns ``(Q, policy)``; ``Q`` equals ``soft_q_backward`` evaluated at the
    returned policy.
    """
    T = mf.horizon
    Q = np.empty((T + 1, mf.n_states, mf.n_actions))
    pi = np.empty_like(Q)
    Q[T] = mf.reward(L[T])
    pi[T] = closed_form_policy(Q[T], prior[T])
    for t in range(T - 1, -1, -1):
        nxt = pi[t + 1] * (Q[t + 1] - safe_log(pi[t + 1]) + safe_log(prior[t + 1]))
        Q[t] = mf.reward(L[t]) + mf.transition(L[t]) @ nxt.sum(axis=-1)
        pi[t] = closed_form_policy(Q[t], prior[t])
    return Q, pi


# ---------------------------------------------------------------------------
# outer loop
# ---------------------------------------------------------------------------

@dataclass
class MFConfig:
    outer_iters: int = 500
    residual_tol: float = 1e-6
    damping: float = 0.5
    prior: str = "previous"

    def __post_init__(self):
        if not 0.0 <= self.damping < 1.0:
            raise ParameterError("damping must lie in [0, 1)")
        if self.prior not in ("previous", "uniform"):
            raise ParameterError("prior must be 'previous' or 'uniform'")


@dataclass
class MFResult:
    policy: np.ndarray
    prior: np.ndarray
    mean_field: np.ndarray
    q: np.ndarray
    residuals: list
    converged: bool
    iterations: int
    history: list = field(default_factory=list)

    @property
    def final_residual(self) -> float:
        return self.residuals[-1] if self.residuals else float("nan")


def run_mf_bayesian_q(mf: MFGameSpec, config: Optional[MFConfig] = None,
                      record: bool = False) -> MFResult:
    """Alternate soft-optimal response to the mean field and damped forward flow.

    Round ``k``: build the policy against ``L^{k-1}`` with prior ``pi^{k-1}``
    (uniform in round 1, or always when ``config.prior == "uniform"``), push the
    population forward, and mix ``L^k = (1 - damping) L_new + damping L^{k-1}``.
    Stops when ``max_t TV(L^k_t, L^{k-1}_t) < residual_tol``.  Running out of
    rounds is reported through ``converged``, not raised.
    """
    config = config or MFConfig()
    uniform = uniform_policy(mf)
    L = forward_flow(mf, uniform)
    pi = uniform
    prior = uniform
    residuals, history = [], []
    converged = False
    Q = None
    k = 0
    for k in range(1, config.outer_iters + 1):
        prior = pi if config.prior == "previous" else uniform
        Q, pi = soft_optimal_policy(mf, L, prior)
        L_new = forward_flow(mf, pi)
        L_new = (1.0 - config.damping) * L_new + config.damping * L
        res = float(np.max(total_variation(L_new, L)))
        residuals.append(res)
        if record:
            history.append(L_new)
        L = L_new
        if not np.isfinite(res):
            break
        if res < config.residual_tol:
            converged = True
            break
    return MFResult(pi, prior, L, Q, residuals, converged, k, history)


def policy_return(mf: MFGameSpec, policy: np.ndarray, L: np.ndarray) -> float:
    """Unregularized expected return of ``policy`` against the frozen mean field."""
    T = mf.horizon
    v = np.zeros(mf.n_states)
    for t in range(T, -1, -1):
        q = mf.reward(L[t]) + (mf.transition(L[t]) @ v if t < T else 0.0)
        v = np.einsum("sa,sa->s", policy[t], q)
    return float(mf.initial @ v)


def best_response_return(mf: MFGameSpec, L: np.ndarray) -> tuple:
    """Exact unregularized best response to the frozen mean field by backward induction."""
    T = mf.horizon
    v = np.zeros(mf.n_states)
    pol = np.zeros((T + 1, mf.n_states), dtype=np.int64)
    for t in range(T, -1, -1):
        q = mf.reward(L[t]) + (mf.transition(L[t]) @ v if t < T else 0.0)
        pol[t] = np.argmax(q, axis=-1)
        v = q.max(axis=-1)
    return float(mf.initial @ v), pol


def mf_exploitability(mf: MFGameSpec, policy: np.ndarray, mean_field: np.ndarray) -> float:
    """Best-response return minus the policy's return, both against ``mean_field``."""
    best, _ = best_response_return(mf, mean_field)
    return best - policy_return(mf, policy, mean_field)


def state_entropies(policy: np.ndarray) -> np.ndarray:
    return entropy(policy)
