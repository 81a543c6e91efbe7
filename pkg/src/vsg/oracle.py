"""Exact reference computations used to certify solver output.

Everything here is unregularized or evaluated by direct linear algebra, and
deliberately avoids the iterative soft evaluation used by the solvers, so a
bug there cannot hide behind a matching bug here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import DegenerateFisherError, ParameterError
from .game import GameSpec, product_distribution
from .soft import soft_best_response, soft_policy_evaluation, total_variation

VI_TOL = 1e-12
TIE_TOL = 1e-12
FD_STEP = 1e-5
PINV_CUTOFF = 1e-8


@dataclass(frozen=True)
class ExploitabilityReport:
    gaps: tuple
    achieved: tuple
    best_response: tuple
    bound_name: str = ""
    bound: float = float("nan")
    passed: Optional[bool] = None

    @property
    def max_gap(self) -> float:
        return max(self.gaps)

    def rows(self) -> list:
        """``(agent, gap, bound, pass)`` rows for CSV output."""
        return [(i, g, self.bound, self.passed) for i, g in enumerate(self.gaps)]


@dataclass(frozen=True)
class Certificate:
    mode: str
    bound: float
    max_gap: float
    passed: Optional[bool]
    applicable: bool = True

    @property
    def label(self) -> str:
        if not self.applicable:
            return "bound not applicable"
        return "pass" if self.passed else "fail"


# ---------------------------------------------------------------------------
# plain value computations
# ---------------------------------------------------------------------------

def _live(game: GameSpec) -> np.ndarray:
    mask = np.ones(game.n_states)
    mask[list(game.absorbing)] = 0.0
    return mask


def joint_from_marginals(marginals: Sequence[np.ndarray]) -> np.ndarray:
    return product_distribution(marginals)


def policy_values(game: GameSpec, joint_dist: np.ndarray) -> np.ndarray:
    """Unregularized values of every agent under a joint-action distribution.

    ``joint_dist`` is ``(S, A)`` (or ``(T, S, A)`` for finite horizon).  Returns
    ``(N, S)`` from an exact linear solve, or ``(N, T + 1, S)`` by backward
    induction.
    """
    live = _live(game)
    if game.horizon is not None:
        T = int(game.horizon)
        mu = np.broadcast_to(joint_dist, (T, game.n_states, game.n_joint))
        v = np.zeros((game.n_agents, T + 1, game.n_states))
        for t in range(T - 1, -1, -1):
            q = game.reward + np.einsum("sap,np->nsa", game.transition, v[:, t + 1])
            v[:, t] = np.einsum("sa,nsa->ns", mu[t], q) * live
        return v
    r = np.einsum("sa,nsa->ns", joint_dist, game.reward) * live
    flow = game.gamma * np.einsum("sa,sap->sp", joint_dist, game.transition) * live[:, None]
    return np.linalg.solve(np.eye(game.n_states) - flow, r.T).T


def exact_best_response(game: GameSpec, i: int, opponents: np.ndarray) -> tuple:
    """Unregularized best response of agent ``i`` to a frozen opponent distribution.

    ``opponents`` is the joint distribution over the others' actions, ``(S, m_i)``
    or time-indexed ``(T, S, m_i)``.  Returns ``(policy, values)`` with a
    deterministic action index per state (per time step when finite), ties
    broken toward the lowest index.
    """
    r = game.split(game.reward[i], i)                  # (S, m, n)
    P = game.split_transition(i)                       # (S, m, n, S')
    live = _live(game)
    if game.horizon is not None:
        T = int(game.horizon)
        opp = np.broadcast_to(opponents, (T,) + r.shape[:2])
        v = np.zeros((T + 1, game.n_states))
        pol = np.zeros((T, game.n_states), dtype=np.int64)
        for t in range(T - 1, -1, -1):
            q = np.einsum("sx,sxa->sa", opp[t], r + P @ v[t + 1])
            pol[t] = _argmax_low(q)
            v[t] = q[np.arange(game.n_states), pol[t]] * live
        return pol, v

    opp = np.asarray(opponents)
    r_own = np.einsum("sx,sxa->sa", opp, r)             # (S, n)
    P_own = np.einsum("sx,sxat->sat", opp, P)           # (S, n, S')
    v = np.zeros(game.n_states)
    for _ in range(10**6):
        v_new = (r_own + game.gamma * P_own @ v).max(axis=1) * live
        done = np.max(np.abs(v_new - v)) < VI_TOL
        v = v_new
        if done:
            break
    pol = _argmax_low(r_own + game.gamma * P_own @ v)
    # polish with exact policy iteration so the reported value is exact
    idx = np.arange(game.n_states)
    for _ in range(1000):
        v = _deterministic_value(game, r_own, P_own, pol, live)
        q = r_own + game.gamma * P_own @ v
        better = q.max(axis=1) > q[idx, pol] + TIE_TOL * np.maximum(1.0, np.abs(q.max(axis=1)))
        if not np.any(better):
            break
        pol = np.where(better, q.argmax(axis=1), pol)
    return _argmax_low(q), v


def _argmax_low(q: np.ndarray) -> np.ndarray:
    top = q.max(axis=-1, keepdims=True)
    return np.argmax(q >= top - TIE_TOL * np.maximum(1.0, np.abs(top)), axis=-1)


def _deterministic_value(game, r_own, P_own, pol, live):
    idx = np.arange(game.n_states)
    r = r_own[idx, pol] * live
    flow = game.gamma * P_own[idx, pol] * live[:, None]
    return np.linalg.solve(np.eye(game.n_states) - flow, r)


def exploitability(game: GameSpec, marginals: Sequence[np.ndarray]) -> ExploitabilityReport:
    """Per-agent gap between the exact best-response value and the achieved value.

    ``marginals[k]`` is agent ``k``'s state-conditioned play ``(S, n_k)`` (or
    ``(T, S, n_k)``); the joint play is their product.  Values are averaged
    over the initial distribution.
    """
    marginals = [np.asarray(m, dtype=float) for m in marginals]
    joint = product_distribution(marginals)
    values = policy_values(game, joint)
    gaps, achieved, best = [], [], []
    for i in range(game.n_agents):
        others = [m for j, m in enumerate(marginals) if j != i]
        opp = product_distribution(others) if others else np.ones(marginals[i].shape[:-1] + (1,))
        _, v_br = exact_best_response(game, i, opp)
        v_i = values[i]
        if game.horizon is not None:
            v_br, v_i = v_br[0], v_i[0]
        a = float(game.initial @ v_i)
        b = float(game.initial @ v_br)
        achieved.append(a)
        best.append(b)
        gaps.append(b - a)
    return ExploitabilityReport(tuple(gaps), tuple(achieved), tuple(best))


# ---------------------------------------------------------------------------
# bounds and certification
# ---------------------------------------------------------------------------

def finite_horizon_bound(T: int, max_actions: int) -> float:
    return T * math.log(max_actions)


def convergence_bound(gamma: float, n_actions: int, delta: float = 0.0) -> float:
    return delta + math.log(n_actions) / (1.0 - gamma)


def model_error_delta(gamma: float, n_actions_i: int, eps_rho: float) -> float:
    """Value error from an opponent model with KL error ``eps_rho`` (rewards in [-1, 1])."""
    return (2.0 * (1.0 + math.log(n_actions_i)) / (1.0 - gamma) ** 2 * math.sqrt(eps_rho / 2.0)
            + eps_rho / (1.0 - gamma))


CERT_MODES = ("entropy-gap", "convergence-joint", "convergence-max")


def certify_eps_nash(report: ExploitabilityReport, game: GameSpec, mode: str,
                     delta: float = 0.0, eps_rho: Optional[float] = None) -> Certificate:
    """Compare the exploitability against the entropy-gap or convergence bound.

    ``mode`` is ``entropy-gap`` (finite horizon, ``T ln max_i |A_i|``) or
    ``convergence-joint`` / ``convergence-max`` (infinite horizon,
    ``delta + ln|A| / (1 - gamma)`` with ``|A|`` the joint or the largest
    per-agent action count).  When ``eps_rho`` is given, ``delta`` is derived
    from it, which requires rewards in [-1, 1]; otherwise the certificate is
    marked not applicable.
    """
    if mode not in CERT_MODES:
        raise ParameterError(f"unknown certification mode {mode!r}")
    max_a = max(game.actions)
    if mode == "entropy-gap":
        if game.horizon is None:
            raise ParameterError("entropy-gap certifies finite-horizon games only")
        bound = finite_horizon_bound(int(game.horizon), max_a)
    else:
        if game.horizon is not None:
            raise ParameterError(f"{mode} certifies infinite-horizon games only")
        if eps_rho is not None:
            if np.abs(game.reward).max() > 1.0:
                return Certificate(mode, float("nan"), report.max_gap, None, applicable=False)
            delta = max(model_error_delta(game.gamma, game.actions[i], eps_rho)
                        for i in range(game.n_agents))
        n = game.n_joint if mode == "convergence-joint" else max_a
        bound = convergence_bound(game.gamma, n, delta)
    return Certificate(mode, bound, report.max_gap, bool(report.max_gap <= bound))


# ---------------------------------------------------------------------------
# global natural-gradient reference
# ---------------------------------------------------------------------------

def _softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _view_flow(game, i, pi_i, rho):
    """State kernel and joint-action weights seen by agent ``i``."""
    weight = rho[:, :, None] * pi_i                                    # (S, m, n)
    P = game.split_transition(i)
    return weight, np.einsum("sxa,sxat->st", weight, P)


def agent_objective(game: GameSpec, i: int, pi_i: np.ndarray, rho: np.ndarray,
                    opp: np.ndarray) -> float:
    """Regularized objective of agent ``i`` by a direct linear solve.

    Per-step payoff ``r + log opp - log pi_i - log rho`` averaged under
    ``rho x pi_i``; ``rho`` and ``opp`` are ``(S, m_i)`` tables.
    """
    live = _live(game)
    r = game.split(game.reward[i], i)
    weight, flow = _view_flow(game, i, pi_i, rho)
    lp = np.log(np.maximum(pi_i, 1e-12))
    step = r + np.log(np.maximum(opp, 1e-12))[:, :, None] - lp - np.log(np.maximum(rho, 1e-12))[:, :, None]
    c = np.einsum("sxa,sxa->s", weight, step) * live
    v = np.linalg.solve(np.eye(game.n_states) - game.gamma * flow * live[:, None], c)
    return float(game.initial @ v)


def snapshot_potential(game: GameSpec, thetas: Sequence[np.ndarray], models: Sequence[np.ndarray],
                       opps: Optional[Sequence[np.ndarray]] = None) -> float:
    """Sum of per-agent objectives with each agent's view of the others frozen."""
    opps = models if opps is None else opps
    return sum(agent_objective(game, i, _softmax(th), models[i], opps[i])
               for i, th in enumerate(thetas))


def _visitation(game, flow):
    live = _live(game)
    d = np.linalg.solve(np.eye(game.n_states) - game.gamma * (flow * live[:, None]).T, game.initial)
    return (1.0 - game.gamma) * d


def fisher_matrix(game: GameSpec, policies: Sequence[np.ndarray],
                  models: Sequence[np.ndarray]) -> tuple:
    """Fisher information of the joint softmax parameters, by explicit enumeration.

    Diagonal blocks are expectations of score outer products over agent
    ``i``'s own discounted visitation, opponent model and policy.  Cross blocks
    pair two agents' independently drawn samples at a common state drawn from
    the visitation of the product of marginal plays.  Returns ``(F, offsets)``.
    """
    sizes = [p.size for p in policies]
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    F = np.zeros((offsets[-1], offsets[-1]))
    mean_scores = []
    views = []
    for i, (pi, rho) in enumerate(zip(policies, models)):
        weight, flow = _view_flow(game, i, pi, rho)
        d = _visitation(game, flow)
        block = np.zeros((pi.size, pi.size))
        mean = np.zeros((game.n_states, pi.size))
        S, m, n = pi.shape
        for s in range(S):
            for x in range(m):
                for a in range(n):
                    g = np.zeros(pi.shape)
                    g[s, x] -= pi[s, x]
                    g[s, x, a] += 1.0
                    g = g.ravel()
                    p = weight[s, x, a]
                    block += d[s] * p * np.outer(g, g)
                    mean[s] += p * g
        F[offsets[i]:offsets[i + 1], offsets[i]:offsets[i + 1]] = block
        mean_scores.append(mean)
        views.append(np.einsum("sx,sxa->sa", rho, pi))
    joint = product_distribution(views)
    d_joint = _visitation(game, np.einsum("sa,sat->st", joint, game.transition))
    for i in range(len(policies)):
        for j in range(len(policies)):
            if i != j:
                cross = np.einsum("s,sp,sq->pq", d_joint, mean_scores[i], mean_scores[j])
                F[offsets[i]:offsets[i + 1], offsets[j]:offsets[j + 1]] = cross
    return F, offsets


def potential_gradient(game: GameSpec, policies: Sequence[np.ndarray], models: Sequence[np.ndarray],
                       step: float = FD_STEP) -> np.ndarray:
    """Central finite differences of the snapshot potential in the log-policy parameters."""
    thetas = [np.log(p) for p in policies]
    flat = np.concatenate([t.ravel() for t in thetas])
    shapes = [t.shape for t in thetas]
    splits = np.cumsum([t.size for t in thetas])[:-1]

    def unpack(v):
        return [c.reshape(sh) for c, sh in zip(np.split(v, splits), shapes)]

    grad = np.zeros_like(flat)
    for k in range(flat.size):
        e = np.zeros_like(flat)
        e[k] = step
        hi = snapshot_potential(game, unpack(flat + e), models)
        lo = snapshot_potential(game, unpack(flat - e), models)
        grad[k] = (hi - lo) / (2.0 * step)
    return grad


def global_npg_reference_step(game: GameSpec, policies: Sequence[np.ndarray],
                              models: Sequence[np.ndarray], eta: float,
                              cutoff: float = PINV_CUTOFF) -> list:
    """One natural-gradient step on the snapshot potential with the full Fisher matrix.

    ``policies[i]`` is agent ``i``'s conditioned policy ``(S, m_i, n_i)`` and
    ``models[i]`` its joint opponent distribution ``(S, m_i)``, taken as the
    true opponent play.  The pseudo-inverse drops eigenvalues below ``cutoff``.
    """
    if game.horizon is not None:
        raise ParameterError("the reference step is defined for discounted games")
    n_params = sum(p.size for p in policies)
    if n_params > 1000:
        raise ParameterError(f"{n_params} parameters is too many for dense linear algebra")
    policies = [np.asarray(p, dtype=float) for p in policies]
    models = [np.asarray(m, dtype=float) for m in models]
    if eta == 0:
        return [p.copy() for p in policies]
    F, offsets = fisher_matrix(game, policies, models)
    grad = potential_gradient(game, policies, models)
    w, U = np.linalg.eigh(F)
    keep = w > cutoff
    if not np.any(keep):
        raise DegenerateFisherError("no Fisher eigenvalue exceeds the cutoff")
    direction = U[:, keep] @ ((U[:, keep].T @ grad) / w[keep])
    out = []
    for i, p in enumerate(policies):
        theta = np.log(p) + eta * direction[offsets[i]:offsets[i + 1]].reshape(p.shape)
        out.append(_softmax(theta))
    return out


def soft_nash_residual(game: GameSpec, policies: Sequence[np.ndarray], models) -> float:
    """Largest TV distance between a policy row and the soft best response to it.

    ``models[i]`` is agent ``i``'s opponent model (factors or joint table); it
    is used both as belief and as the opponents' play.
    """
    worst = 0.0
    for i, pi in enumerate(policies):
        table = soft_policy_evaluation(game, i, pi, models[i], tol=1e-12)
        worst = max(worst, float(np.max(total_variation(pi, soft_best_response(table)))))
    return worst
