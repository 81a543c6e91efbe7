"""Soft (entropy and KL regularized) policy evaluation.

Conventions used across the package:

* A conditioned policy for agent ``i`` is an array ``(S, m_i, n_i)``: the
  distribution over the agent's own action given the state and the others'
  joint action.  Finite-horizon solvers may add a leading time axis ``T``.
* An opponent model for agent ``i`` is either a sequence of per-opponent
  state-conditioned factors ``(S, n_j)`` for ``j != i`` (increasing ``j``) or
  the already-multiplied joint table ``(S, m_i)``.
* Marginal policies ``(S, n_i)`` are what an agent actually plays after
  averaging its conditioned policy over its opponent model.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from .errors import ConvergenceError, DivergenceError, ModeConflictError, ParameterError
from .game import GameSpec, product_distribution

PROB_FLOOR = 1e-12
EVAL_TOL = 1e-10
MAX_EVAL_ITERS = 10**6

ModelLike = Union[np.ndarray, Sequence[np.ndarray]]


class EvalMode(str, enum.Enum):
    ORACLE = "OracleOpponent"
    MODELED = "ModeledOpponent"


@dataclass(frozen=True, eq=False)
class SoftQTable:
    """Soft action values ``q`` (layout ``(S, m_i, n_i)``, or ``(T, S, m_i, n_i)``)
    with state values ``v`` (``(S,)`` or ``(T + 1, S)`` with a zero terminal row)."""

    agent: int
    q: np.ndarray
    v: np.ndarray
    mode: EvalMode
    iterations: int = 0
    residual: float = 0.0

    @property
    def finite(self) -> bool:
        return self.q.ndim == 4


# ---------------------------------------------------------------------------
# distribution utilities
# ---------------------------------------------------------------------------

def safe_log(p) -> np.ndarray:
    return np.log(np.maximum(p, PROB_FLOOR))


def softmax(logits, axis: int = -1) -> np.ndarray:
    z = np.asarray(logits, dtype=float)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def entropy(dist, axis: int = -1):
    """Shannon entropy in nats, with ``0 log 0 = 0``."""
    p = np.asarray(dist, dtype=float)
    terms = np.where(p > 0, -p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    out = terms.sum(axis=axis)
    return float(out) if np.ndim(out) == 0 else out


def kl(p, q, axis: int = -1):
    """KL(p || q) in nats; raises :class:`DivergenceError` if q misses p's support."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    p, q = np.broadcast_arrays(p, q)
    on = p > 0
    if np.any(on & (q <= 0)):
        raise DivergenceError("q is zero where p is positive")
    safe_p = np.where(on, p, 1.0)
    safe_q = np.where(on, q, 1.0)
    out = np.where(on, p * (np.log(safe_p) - np.log(safe_q)), 0.0).sum(axis=axis)
    out = np.maximum(out, 0.0)                 # rounding can dip below zero
    return float(out) if np.ndim(out) == 0 else out


def total_variation(p, q, axis: int = -1):
    out = 0.5 * np.abs(np.asarray(p, dtype=float) - np.asarray(q, dtype=float)).sum(axis=axis)
    return float(out) if np.ndim(out) == 0 else out


def uniform_conditioned(game: GameSpec, i: int, horizon: Optional[int] = None) -> np.ndarray:
    shape = (game.n_states, game.n_others(i), game.actions[i])
    if horizon is not None:
        shape = (horizon,) + shape
    return np.full(shape, 1.0 / game.actions[i])


def uniform_marginals(game: GameSpec) -> list:
    return [np.full((game.n_states, n), 1.0 / n) for n in game.actions]


def opponent_factors(marginals: Sequence[np.ndarray], i: int) -> list:
    return [m for j, m in enumerate(marginals) if j != i]


def joint_opponent(game: GameSpec, i: int, model: ModelLike) -> np.ndarray:
    """Joint distribution over the others' actions, shape ``(..., S, m_i)``."""
    m_i = game.n_others(i)
    if isinstance(model, np.ndarray):
        if model.shape[-1] != m_i:
            raise ParameterError(f"joint model has {model.shape[-1]} columns, expected {m_i}")
        return model
    factors = list(model)
    if len(factors) == 0:
        return np.ones((game.n_states, 1))
    if len(factors) != game.n_agents - 1:
        raise ParameterError(f"expected {game.n_agents - 1} opponent factors, got {len(factors)}")
    return product_distribution(factors)


def marginal_policy(pi_i: np.ndarray, rho_joint: np.ndarray) -> np.ndarray:
    """Play distribution ``sum_x rho(x|s) pi_i(a|s, x)``."""
    return np.einsum("...sx,...sxa->...sa", rho_joint, pi_i)


def check_conditioned(pi_i: np.ndarray, tol: float = 1e-10) -> None:
    if np.any(~np.isfinite(pi_i)) or np.any(pi_i < 0):
        raise ParameterError("policy has negative or non-finite entries")
    err = np.abs(pi_i.sum(axis=-1) - 1.0).max()
    if err > tol:
        raise ParameterError(f"policy rows do not sum to 1 (max error {err:.3g})")


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def _resolve_mode(mode, true_opponents) -> EvalMode:
    if mode is None:
        return EvalMode.ORACLE if true_opponents is not None else EvalMode.MODELED
    mode = EvalMode(mode)
    if mode == EvalMode.MODELED and true_opponents is not None:
        raise ModeConflictError("ModeledOpponent evaluation must not be given the true opponents")
    if mode == EvalMode.ORACLE and true_opponents is None:
        raise ParameterError("OracleOpponent evaluation needs the true opponent policies")
    return mode


def _absorbing_mask(game: GameSpec) -> np.ndarray:
    mask = np.zeros(game.n_states, dtype=bool)
    mask[list(game.absorbing)] = True
    return mask


def soft_policy_evaluation(game: GameSpec, i: int, pi_i: np.ndarray, rho: ModelLike,
                           true_opponents: Optional[ModelLike] = None, tol: float = EVAL_TOL,
                           mode=None, v0: Optional[np.ndarray] = None,
                           max_iters: int = MAX_EVAL_ITERS) -> SoftQTable:
    """Soft values of agent ``i`` playing ``pi_i`` while believing ``rho``.

    Infinite horizon (synchronous fixed-point iteration to sup residual < tol)::

        Q(s, a, x) = r_i(s, a, x) + log pi_opp(x|s) + gamma * sum_s' P(s'|s, a, x) V(s')
        V(s)       = E_{x~rho, a~pi_i}[Q(s, a, x) - log pi_i(a|s, x) - log rho(x|s)]

    where ``pi_opp`` is the true opponents' product policy in oracle mode and
    ``rho`` itself in modeled mode.  Finite horizon uses undiscounted backward
    induction over ``T`` decision steps with time-indexed tables.
    """
    if tol <= 0:
        raise ParameterError("tol must be positive")
    mode = _resolve_mode(mode, true_opponents)
    rho_joint = joint_opponent(game, i, rho)
    opp = joint_opponent(game, i, true_opponents) if mode == EvalMode.ORACLE else rho_joint
    if game.horizon is not None:
        return _evaluate_finite(game, i, pi_i, rho_joint, opp, mode)

    if game.gamma >= 1.0 and not (game.pre_discounted and game.absorbing):
        raise ParameterError("gamma >= 1 needs the absorbing-state transform")
    S = game.n_states
    r = game.split(game.reward[i], i)                         # (S, m, n)
    P = game.split_transition(i)                              # (S, m, n, S')
    log_pi = safe_log(pi_i)
    log_rho = safe_log(rho_joint)
    log_opp = safe_log(opp)
    weight = rho_joint[:, :, None] * pi_i                     # (S, m, n)
    base = r + log_opp[:, :, None]
    const = np.einsum("sxa,sxa->s", weight, base - log_pi - log_rho[:, :, None])
    flow = game.gamma * np.einsum("sxa,sxat->st", weight, P)
    absorbing = _absorbing_mask(game)
    const[absorbing] = 0.0
    flow[absorbing] = 0.0

    v = np.zeros(S) if v0 is None else np.array(v0, dtype=float)
    residual = np.inf
    it = 0
    while it < max_iters:
        it += 1
        v_new = const + flow @ v
        residual = float(np.max(np.abs(v_new - v)))
        v = v_new
        if not np.isfinite(residual):
            raise ConvergenceError("soft evaluation produced non-finite values", it, residual)
        if residual < tol:
            break
    else:
        raise ConvergenceError(
            f"soft evaluation hit the iteration cap ({max_iters}) with residual {residual:.3g}",
            it, residual)
    q = base + game.gamma * np.einsum("sxat,t->sxa", P, v)
    return SoftQTable(i, q, v, mode, it, residual)


def _evaluate_finite(game, i, pi_i, rho_joint, opp, mode) -> SoftQTable:
    T, S = int(game.horizon), game.n_states
    pi_t = np.broadcast_to(pi_i, (T,) + pi_i.shape[-3:])
    rho_t = np.broadcast_to(rho_joint, (T,) + rho_joint.shape[-2:])
    opp_t = np.broadcast_to(opp, (T,) + opp.shape[-2:])
    r = game.split(game.reward[i], i)
    P = game.split_transition(i)
    q = np.zeros((T, S) + r.shape[1:])
    v = np.zeros((T + 1, S))
    absorbing = _absorbing_mask(game)
    for t in range(T - 1, -1, -1):
        q[t] = r + safe_log(opp_t[t])[:, :, None] + np.einsum("sxat,t->sxa", P, v[t + 1])
        inner = q[t] - safe_log(pi_t[t]) - safe_log(rho_t[t])[:, :, None]
        v[t] = np.einsum("sx,sxa,sxa->s", rho_t[t], pi_t[t], inner)
        v[t, absorbing] = 0.0
    return SoftQTable(i, q, v, mode, T, 0.0)


def bellman_residual(game: GameSpec, table: SoftQTable, pi_i, rho: ModelLike,
                     true_opponents: Optional[ModelLike] = None) -> float:
    """Sup-norm violation of the soft Bellman identities by ``table``."""
    i = table.agent
    rho_joint = joint_opponent(game, i, rho)
    opp = joint_opponent(game, i, true_opponents) if true_opponents is not None else rho_joint
    r = game.split(game.reward[i], i)
    P = game.split_transition(i)
    inner = table.q - safe_log(pi_i) - safe_log(rho_joint)[:, :, None]
    v = np.einsum("sx,sxa,sxa->s", rho_joint, pi_i, inner)
    v[_absorbing_mask(game)] = 0.0
    q = r + safe_log(opp)[:, :, None] + game.gamma * np.einsum("sxat,t->sxa", P, table.v)
    return float(max(np.abs(v - table.v).max(), np.abs(q - table.q).max()))


def elbo(game: GameSpec, i: int, pi_i: np.ndarray, rho: ModelLike,
         true_opponents: Optional[ModelLike] = None, tol: float = EVAL_TOL, mode=None) -> float:
    """Expected soft value from the initial distribution (the evidence lower bound)."""
    table = soft_policy_evaluation(game, i, pi_i, rho, true_opponents, tol=tol, mode=mode)
    v0 = table.v[0] if table.finite else table.v
    return float(game.initial @ v0)


def soft_best_response(q, i: Optional[int] = None) -> np.ndarray:
    """Row-wise softmax of soft Q over the agent's own action (the last axis)."""
    values = q.q if isinstance(q, SoftQTable) else q
    return softmax(values, axis=-1)
