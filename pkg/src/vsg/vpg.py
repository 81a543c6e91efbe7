"""Decentralised soft natural policy gradient with opponent models.

Each round every agent refreshes its model of the others, evaluates its soft
action values against that model and takes a closed-form natural gradient
step in log space::

    log pi' = (1 - eta / (1 - gamma)) * log pi + (eta / (1 - gamma)) * Q + const

Rounds are synchronous: all agents read the same snapshot of the previous
iterate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConvergenceError, GameKindError, ParameterError
from .game import GameKind, GameSpec, horizon_trunc, product_distribution, verify_kind
from .opponent import (OpponentModelConfig, ReplayBuffer, RewardEstimate, Trajectory,
                       action_frequencies, fit_opponent_model, simulate)
from .oracle import exploitability as exact_exploitability
from .oracle import policy_values
from .soft import (EvalMode, EVAL_TOL, entropy, joint_opponent, kl, marginal_policy, safe_log,
                   soft_policy_evaluation, softmax, total_variation, uniform_conditioned)

OPPONENT_MODES = ("Oracle", "Empirical", "Variational")


@dataclass
class VPGConfig:
    """Settings for :func:`run_vpg`.

    ``eta`` defaults to ``(1 - gamma) / 2`` (``0.5`` for finite horizon, where
    the update uses ``gamma = 0``).  ``episodes_per_iter`` trajectories are
    simulated per round in the sample-based modes.
    """

    eta: Optional[float] = None
    max_iters: int = 1000
    policy_tol: float = 1e-8
    opponent_mode: str = "Oracle"
    seed: int = 0
    eval_tol: float = EVAL_TOL
    episodes_per_iter: int = 16
    buffer_capacity: int = 100_000
    laplace: float = 1.0
    om: OpponentModelConfig = field(default_factory=OpponentModelConfig)
    initial_policies: Optional[Sequence[np.ndarray]] = None
    exploitability_every: int = 0
    potential: Optional[str] = "joint"

    def resolved_eta(self, game: GameSpec) -> float:
        g = 0.0 if game.horizon is not None else game.gamma
        eta = 0.5 * (1.0 - g) if self.eta is None else float(self.eta)
        check_eta(eta, g)
        return eta


@dataclass(frozen=True)
class TraceRow:
    iter: int
    potential: float
    elbos: tuple
    values: tuple
    tv_delta: float
    exploitability: float = float("nan")
    greedy: float = float("nan")


@dataclass
class VPGResult:
    policies: list
    models: list
    marginals: list
    trace: list
    converged: bool
    iterations: int
    reward_estimates: Optional[dict] = None

    @property
    def potentials(self) -> np.ndarray:
        return np.array([row.potential for row in self.trace])


def check_eta(eta: float, gamma: float) -> None:
    if not (0.0 < eta <= (1.0 - gamma) * (1.0 + 1e-12)):
        raise ParameterError(f"eta must lie in (0, 1 - gamma] = (0, {1.0 - gamma:g}], got {eta!r}")


def npg_step(pi_i: np.ndarray, q_i, eta: float, gamma: float) -> np.ndarray:
    """Closed-form natural gradient step for a softmax policy with entropy bonus.

    Row-wise ``pi' ~ pi^(1 - eta / (1 - gamma)) * exp(eta * Q / (1 - gamma))``,
    normalised over the agent's own action (last axis) in the log domain.
    For finite-horizon tables pass ``gamma = 0``.
    """
    check_eta(eta, gamma)
    q = getattr(q_i, "q", q_i)
    beta = min(eta / (1.0 - gamma), 1.0)
    return softmax((1.0 - beta) * safe_log(pi_i) + beta * q, axis=-1)


def consistent_marginals(game: GameSpec, policies: Sequence[np.ndarray], tol: float = 1e-14,
                         max_iters: int = 100_000) -> list:
    """Marginal plays that agree with the conditioned policies they feed.

    Finds ``m_j = sum_x prod_{k != j} m_k(x_k) pi_j(.|x)`` for every agent.  Two
    agents reduce to the stationary distribution of a positive stochastic
    matrix, solved directly; more agents use a fixed-point iteration.
    """
    N = game.n_agents
    if N == 1:
        return [policies[0][..., 0, :]]
    if N == 2:
        A0 = policies[0]                                   # (..., n1, n0): rows b
        A1 = policies[1]                                   # (..., n0, n1): rows a
        C = A1 @ A0                                        # (..., n0, n0)
        n0 = C.shape[-1]
        M = np.swapaxes(C, -1, -2) - np.eye(n0)
        M[..., -1, :] = 1.0
        rhs = np.zeros(C.shape[:-1])
        rhs[..., -1] = 1.0
        m0 = np.linalg.solve(M, rhs[..., None])[..., 0]
        m0 = np.maximum(m0, 0.0)
        m0 /= m0.sum(axis=-1, keepdims=True)
        m1 = np.einsum("...a,...ab->...b", m0, A1)
        return [m0, m1]
    lead = policies[0].shape[:-2]
    marg = [np.full(lead + (n,), 1.0 / n) for n in game.actions]
    for _ in range(max_iters):
        new = []
        for j in range(N):
            others = [marg[k] for k in range(N) if k != j]
            m = marginal_policy(policies[j], product_distribution(others))
            # renormalise: row-sum rounding errors multiply across agents and grow otherwise
            new.append(m / m.sum(axis=-1, keepdims=True))
        delta = max(np.abs(a - b).max() for a, b in zip(new, marg))
        marg = [0.5 * (a + b) for a, b in zip(new, marg)]
        if delta < tol:
            return new
    raise ConvergenceError("consistent marginals did not converge", max_iters, delta)


def discounted_visitation(game: GameSpec, joint_policy) -> np.ndarray:
    """Normalised discounted state occupancy ``d = (1 - gamma) (I - gamma P_pi^T)^-1 mu0``.

    ``joint_policy`` is a joint-action distribution ``(S, A)`` or a list of
    per-agent marginals.
    """
    if game.horizon is not None:
        raise ParameterError("discounted visitation needs an infinite-horizon game")
    if game.gamma >= 1.0:
        raise ParameterError("discounted visitation needs gamma < 1")
    mu = joint_policy if isinstance(joint_policy, np.ndarray) else product_distribution(joint_policy)
    P = np.einsum("sa,sat->st", mu, game.transition)
    d = np.linalg.solve(np.eye(game.n_states) - game.gamma * P.T, game.initial)
    return (1.0 - game.gamma) * d


def smoothness_constant(n: int, gamma: float, max_actions: int) -> float:
    """Smoothness constant of the regularized potential; its inverse is a safe step size."""
    if n < 1 or not 0.0 <= gamma < 1.0 or max_actions < 2:
        raise ParameterError("need n >= 1, gamma in [0, 1) and max_actions >= 2")
    g = 1.0 - gamma
    return (2.0 * (n + 1) ** 2 / g**3
            + 2.0 * (n * n + n + 1) * (1.0 + math.log(max_actions)) / g**2
            + (3.0 * n + 2.0) / g)


# ---------------------------------------------------------------------------
# potential
# ---------------------------------------------------------------------------

def _chain_value(game: GameSpec, mu: np.ndarray, step_reward: np.ndarray) -> float:
    """Expected (discounted or T-step) sum of a per-state reward under joint play ``mu``."""
    live = np.ones(game.n_states)
    live[list(game.absorbing)] = 0.0
    if game.horizon is not None:
        T = int(game.horizon)
        mu = np.broadcast_to(mu, (T,) + mu.shape[-2:])
        rew = np.broadcast_to(step_reward, (T, game.n_states))
        v = np.zeros(game.n_states)
        for t in range(T - 1, -1, -1):
            v = (rew[t] + np.einsum("sa,sat,t->s", mu[t], game.transition, v)) * live
        return float(game.initial @ v)
    P = np.einsum("sa,sat->st", mu, game.transition) * live[:, None]
    v = np.linalg.solve(np.eye(game.n_states) - game.gamma * P, step_reward * live)
    return float(game.initial @ v)


def potential_value(game: GameSpec, policies: Sequence[np.ndarray], models: Sequence,
                    convention: str = "joint") -> float:
    """Potential of the regularized identical-interest game.

    ``convention="agent"`` returns the first agent's soft value (its own
    entropy only).  ``convention="joint"`` returns the common reward plus
    every agent's conditional-policy entropy minus every agent's model KL,
    accumulated under the product of the agents' marginal plays.
    ``models[i]`` is agent ``i``'s opponent model (factors or joint table).
    """
    if not verify_kind(game, GameKind.IDENTICAL_INTEREST):
        raise GameKindError("potential_value needs an identical-interest game")
    joints = [joint_opponent(game, i, models[i]) for i in range(game.n_agents)]
    if convention == "agent":
        table = soft_policy_evaluation(game, 0, policies[0], joints[0])
        v = table.v[0] if table.finite else table.v
        return float(game.initial @ v)
    if convention != "joint":
        raise ParameterError(f"unknown potential convention {convention!r}")
    marg = [marginal_policy(policies[i], joints[i]) for i in range(game.n_agents)]
    mu = product_distribution(marg)
    step = np.einsum("...sa,sa->...s", mu, game.reward[0])
    for i in range(game.n_agents):
        step = step + np.einsum("...sx,...sx->...s", joints[i], entropy(policies[i]))
        others = [marg[k] for k in range(game.n_agents) if k != i]
        if others:
            step = step - kl(joints[i], product_distribution(others))
    return _chain_value(game, mu, step)


# ---------------------------------------------------------------------------
# main loop
# ---------------------------------------------------------------------------

def greedy_joint_action(marginals: Sequence[np.ndarray], state: int = 0) -> tuple:
    """Per-agent argmax of the marginal play in ``state``."""
    return tuple(int(np.argmax(m[state])) for m in marginals)


def greedy_return(game: GameSpec, marginals: Sequence[np.ndarray]) -> float:
    """Per-step return, averaged over agents, when every agent plays its marginal's argmax.

    Discounted values are scaled by ``1 - gamma`` and finite-horizon ones
    divided by ``T`` so the figure reads as a per-step reward.
    """
    onehot = [np.eye(m.shape[-1])[np.argmax(m, axis=-1)] for m in marginals]
    v = policy_values(game, product_distribution(onehot))
    if game.horizon is not None:
        return float(np.mean(v[:, 0] @ game.initial)) / int(game.horizon)
    scale = 1.0 - game.gamma if game.gamma < 1.0 else 1.0
    return scale * float(np.mean(v @ game.initial))


OpponentUpdate = Callable[..., list]


def run_vpg(game: GameSpec, config: Optional[VPGConfig] = None,
            opponent_update: Optional[OpponentUpdate] = None,
            callback: Optional[Callable] = None) -> VPGResult:
    """Iterate model refresh, soft evaluation and natural gradient step for all agents.

    ``opponent_update(game, i, table, policies, models, marginals)``, when
    given, replaces the model refresh: the values are evaluated against the
    current model first and the model is updated afterwards, before the
    policy step.  ``callback(k, policies, models)`` is called every round.
    """
    config = config or VPGConfig()
    if config.opponent_mode not in OPPONENT_MODES:
        raise ParameterError(f"opponent_mode must be one of {OPPONENT_MODES}")
    if config.policy_tol <= 0:
        raise ParameterError("policy_tol must be positive")
    eta = config.resolved_eta(game)
    finite = game.horizon is not None
    gamma_step = 0.0 if finite else game.gamma
    if config.opponent_mode == "Variational" and finite:
        raise ParameterError("variational opponent modeling needs an infinite-horizon game")
    rng = np.random.default_rng(config.seed)
    N = game.n_agents
    T = int(game.horizon) if finite else None

    if config.initial_policies is not None:
        policies = [np.array(p, dtype=float) for p in config.initial_policies]
        if finite:
            policies = [np.array(np.broadcast_to(p, (T,) + p.shape[-3:])) for p in policies]
    else:
        policies = [uniform_conditioned(game, i, T) for i in range(N)]
    lead = (T,) if finite else ()
    factors = [np.full(lead + (game.n_states, n), 1.0 / n) for n in game.actions]
    models = [[f for k, f in enumerate(factors) if k != i] for i in range(N)]
    track_potential = config.potential is not None and verify_kind(game, GameKind.IDENTICAL_INTEREST)
    buffer = ReplayBuffer(config.buffer_capacity)
    estimates: dict = {}
    episode_len = T if finite else horizon_trunc(game.gamma)
    trace = []
    converged = False
    k = 0
    tables = [None] * N

    for k in range(config.max_iters):
        snapshot = [p.copy() for p in policies]

        # (a) opponent models
        if opponent_update is None:
            models = _refresh_models(game, config, snapshot, models, buffer, estimates, rng,
                                     episode_len)
        joints = [joint_opponent(game, i, models[i]) for i in range(N)]
        marg = [marginal_policy(snapshot[i], joints[i]) for i in range(N)]

        # (b) evaluation and (c) policy step
        elbos = []
        new_models = list(models)
        for i in range(N):
            table = soft_policy_evaluation(game, i, snapshot[i], joints[i], mode=EvalMode.MODELED,
                                           tol=config.eval_tol,
                                           v0=None if tables[i] is None or finite else tables[i].v)
            if not np.all(np.isfinite(table.q)):
                raise ConvergenceError(f"agent {i}: soft values are not finite", k)
            tables[i] = table
            v0 = table.v[0] if finite else table.v
            elbos.append(float(game.initial @ v0))
            if opponent_update is not None:
                new_models[i] = opponent_update(game, i, table, snapshot, models, marg)
            policies[i] = npg_step(snapshot[i], table, eta, gamma_step)
        models = new_models

        tv = max(float(np.max(total_variation(a, b))) for a, b in zip(policies, snapshot))
        pot = potential_value(game, snapshot, [joints[i] for i in range(N)], config.potential) \
            if track_potential else float("nan")
        values = policy_values(game, product_distribution(marg))
        values = values[:, 0] if finite else values
        vals = tuple(float(game.initial @ values[i]) for i in range(N))
        expl = float("nan")
        if config.exploitability_every and k % config.exploitability_every == 0:
            expl = exact_exploitability(game, marg).max_gap
        trace.append(TraceRow(k, pot, tuple(elbos), vals, tv, expl, greedy_return(game, marg)))
        if callback is not None:
            callback(k, policies, models)
        if tv < config.policy_tol:
            converged = True
            break

    if opponent_update is None and config.opponent_mode == "Oracle":
        models = [[m for j, m in enumerate(consistent_marginals(game, policies)) if j != i]
                  for i in range(N)]
    joints = [joint_opponent(game, i, models[i]) for i in range(N)]
    marg = [marginal_policy(policies[i], joints[i]) for i in range(N)]
    return VPGResult(policies, models, marg, trace, converged, k + 1,
                     estimates or None)


def _refresh_models(game, config, snapshot, models, buffer, estimates, rng, episode_len):
    N = game.n_agents
    if config.opponent_mode == "Oracle":
        marg = consistent_marginals(game, snapshot)
        return [[m for j, m in enumerate(marg) if j != i] for i in range(N)]

    # sample-based modes: play the current marginals and record what happened
    joints = [joint_opponent(game, i, models[i]) for i in range(N)]
    plays = [marginal_policy(snapshot[i], joints[i]) for i in range(N)]
    states, _, joint = simulate(game, plays, config.episodes_per_iter, episode_len, rng)
    buffer.extend(Trajectory(s, a) for s, a in zip(states, joint))
    data = buffer.snapshot()
    freq = [action_frequencies(game, data, j, config.laplace) for j in range(N)]
    if game.horizon is not None:
        freq = [np.broadcast_to(f, (int(game.horizon),) + f.shape) for f in freq]
    if config.opponent_mode == "Empirical":
        return [[freq[j] for j in range(N) if j != i] for i in range(N)]

    # variational: one fit per modelee, shared by every modeler that observes it
    fitted = []
    for j in range(N):
        rho_j, est = fit_opponent_model(game, data, j, config.om, rng, reward=estimates.get(j),
                                        rho_others=freq)
        estimates[j] = est
        fitted.append(rho_j)
    return [[fitted[j] for j in range(N) if j != i] for i in range(N)]
