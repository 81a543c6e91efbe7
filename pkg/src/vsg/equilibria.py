"""Correlated equilibria by signal augmentation, and two-player zero-sum solving.

A public signal drawn afresh each step from ``sigma`` is folded into the
state, so any Nash solver run on the augmented game yields signal-dependent
policies whose mixture over the signal is a correlated device.  In zero-sum
games the opponent model has a closed form that needs no reward estimation.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .errors import ParameterError
from .game import GameKind, GameSpec, product_distribution, require_kind
from .oracle import ExploitabilityReport, exploitability
from .soft import SoftQTable, joint_opponent, safe_log
from .vpg import VPGConfig, VPGResult, run_vpg


@dataclass(frozen=True, eq=False)
class SignalScheme:
    """Signal distribution, redrawn independently at every step."""

    sigma: np.ndarray
    iid: bool = True

    def __post_init__(self):
        sigma = np.asarray(self.sigma, dtype=float)
        if sigma.ndim != 1 or sigma.size < 1:
            raise ParameterError("sigma must be a non-empty vector")
        if np.any(sigma < 0) or abs(sigma.sum() - 1.0) > 1e-12:
            raise ParameterError("sigma must be a probability vector")
        if not self.iid:
            raise ParameterError("only signals redrawn every step are supported")
        object.__setattr__(self, "sigma", sigma)

    @property
    def n_signals(self) -> int:
        return self.sigma.size

    @classmethod
    def uniform(cls, k: int) -> "SignalScheme":
        return cls(np.full(k, 1.0 / k))


def augment_with_signal(game: GameSpec, scheme: SignalScheme) -> GameSpec:
    """Game on states ``(s, w)`` indexed ``s * |W| + w``.

    The kernel to ``(s', w')`` is ``sigma(w') P(s'|s, a)``, rewards ignore the
    signal and the initial distribution is ``initial(s) sigma(w)``.
    """
    k = scheme.n_signals
    S = game.n_states
    sigma = scheme.sigma
    P = np.einsum("sap,w->sapw", game.transition, sigma)   # (S, A, S', W')
    P = np.repeat(P.reshape(S, game.n_joint, S * k)[:, None], k, axis=1)     # (S, W, A, S'W')
    P = P.reshape(S * k, game.n_joint, S * k)
    R = np.repeat(game.reward[:, :, None, :], k, axis=2).reshape(game.n_agents, S * k, game.n_joint)
    init = np.outer(game.initial, sigma).ravel()
    absorbing = tuple(s * k + w for s in game.absorbing for w in range(k))
    return replace(game, n_states=S * k, reward=R, transition=P, initial=init, absorbing=absorbing,
                   meta=dict(game.meta, n_signals=k, base_states=S))


def correlated_device(aug_marginals: Sequence[np.ndarray], scheme: SignalScheme) -> np.ndarray:
    """Joint action distribution per base state, ``sum_w sigma(w) prod_i pi_i(a_i | s, w)``.

    ``aug_marginals[i]`` is agent ``i``'s play on the augmented states
    ``(S * |W|, n_i)``; returns ``(S, A)``.
    """
    k = scheme.n_signals
    joint = product_distribution([np.asarray(m, dtype=float) for m in aug_marginals])
    joint = joint.reshape(-1, k, joint.shape[-1])
    return np.einsum("w,swa->sa", scheme.sigma, joint)


def is_product(device: np.ndarray, actions: Sequence[int], tol: float = 1e-10) -> bool:
    """Whether every row of a joint distribution equals the product of its marginals."""
    device = np.asarray(device)
    t = device.reshape((-1,) + tuple(actions))
    margs = []
    for i in range(len(actions)):
        axes = tuple(a + 1 for a in range(len(actions)) if a != i)
        margs.append(t.sum(axis=axes))
    prod = product_distribution(margs)
    return bool(np.max(np.abs(prod - device.reshape(prod.shape))) <= tol)


@dataclass
class CorrelatedResult:
    device: np.ndarray
    report: ExploitabilityReport
    game: GameSpec
    result: VPGResult

    @property
    def gaps(self) -> tuple:
        return self.report.gaps


def solve_correlated(game: GameSpec, scheme: SignalScheme,
                     config: Optional[VPGConfig] = None) -> CorrelatedResult:
    """Run the Nash solver on the signal-augmented game and read off the device.

    Gaps are certified against deviations that may condition on the state
    and the signal, via exact best responses on the augmented game.
    """
    aug = augment_with_signal(game, scheme)
    res = run_vpg(aug, config)
    device = correlated_device(res.marginals, scheme)
    return CorrelatedResult(device, exploitability(aug, res.marginals), aug, res)


# ---------------------------------------------------------------------------
# zero-sum
# ---------------------------------------------------------------------------

def zero_sum_opponent_update(q_i, prior: np.ndarray, rho: np.ndarray, i: int,
                             own_marginal: np.ndarray) -> np.ndarray:
    """Closed-form model of the opponent in a two-player zero-sum game.

    ``rho_opp(x|s) ~ prior(x|s) exp(-E_{a ~ own_marginal}[Q_i(s, x, a) - log rho(x|s)])``.
    The ``log rho`` term removes the opponent log-likelihood that the soft
    values carry for the agent's own bookkeeping, leaving the payoff-driven
    part that the opponent minimises.
    """
    q = q_i.q if isinstance(q_i, SoftQTable) else np.asarray(q_i)
    rho = np.asarray(rho, dtype=float)
    expected = np.einsum("...sa,...sxa->...sx", own_marginal, q) - safe_log(rho)
    logits = safe_log(prior) - expected
    logits -= logits.max(axis=-1, keepdims=True)
    w = np.exp(logits)
    return w / w.sum(axis=-1, keepdims=True)


def solve_zero_sum(game: GameSpec, config: Optional[VPGConfig] = None,
                   prior: Optional[Sequence[np.ndarray]] = None) -> VPGResult:
    """Soft policy iteration where each agent models its opponent in closed form.

    ``prior[i]`` is agent ``i``'s prior over the opponent's action
    ``(S, n_opp)``; uniform by default.
    """
    require_kind(game, GameKind.ZERO_SUM_TWO_PLAYER)
    if prior is None:
        prior = [np.full((game.n_states, game.actions[1 - i]), 1.0 / game.actions[1 - i])
                 for i in range(2)]

    def update(g, i, table, policies, models, marginals):
        rho = joint_opponent(g, i, models[i])
        return [zero_sum_opponent_update(table, prior[i], rho, i, marginals[i])]

    return run_vpg(game, config, opponent_update=update)
