"""Finite stochastic games: data model, validation, transforms and generators.

Joint actions are flattened row-major with agent 0 outermost, i.e. joint index
``np.ravel_multi_index((a0, a1, ..., aN-1), actions)``.  Most solvers work on a
per-agent view of a joint table, shaped ``(..., m_i, n_i)`` where ``n_i`` is the
agent's own action count and ``m_i`` the number of joint actions of the other
agents (flattened row-major in increasing agent order).  ``split_joint`` and
``merge_joint`` convert between the two layouts.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import DimensionError, GameKindError, ParameterError

ROW_TOL = 1e-12
JOINT_ORDER = "row-major, agent 0 outermost"


class GameKind(str, enum.Enum):
    GENERAL_SUM = "GeneralSum"
    IDENTICAL_INTEREST = "IdenticalInterest"
    ZERO_SUM_TWO_PLAYER = "ZeroSumTwoPlayer"


def _frozen(x, dtype=float):
    a = np.array(x, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class GameSpec:
    """A finite N-agent stochastic game.

    ``reward`` has shape ``(N, S, A)`` and ``transition`` shape ``(S, A, S)``
    where ``A`` is the joint-action count.  ``horizon`` is ``None`` for the
    infinite discounted setting and a positive int ``T`` for ``T`` decision
    steps (t = 0..T-1), in which case returns are undiscounted.

    ``absorbing`` lists states produced by :func:`absorbing_transform`; their
    value is pinned to zero.  ``pre_discounted`` marks a kernel that already
    carries the discount, which is why ``gamma`` is then 1.
    """

    n_agents: int
    n_states: int
    actions: tuple
    reward: np.ndarray
    transition: np.ndarray
    gamma: float
    initial: np.ndarray
    horizon: Optional[int] = None
    kind: GameKind = GameKind.GENERAL_SUM
    absorbing: tuple = ()
    pre_discounted: bool = False
    reward_scale: tuple = (1.0, 0.0)
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "actions", tuple(int(a) for a in self.actions))
        object.__setattr__(self, "reward", _frozen(self.reward))
        object.__setattr__(self, "transition", _frozen(self.transition))
        object.__setattr__(self, "initial", _frozen(self.initial))
        object.__setattr__(self, "kind", GameKind(self.kind))
        object.__setattr__(self, "absorbing", tuple(int(s) for s in self.absorbing))
        expected_r = (self.n_agents, self.n_states, self.n_joint)
        expected_p = (self.n_states, self.n_joint, self.n_states)
        if len(self.actions) != self.n_agents:
            raise DimensionError(f"actions has {len(self.actions)} entries for {self.n_agents} agents")
        if self.reward.shape != expected_r:
            raise DimensionError(f"reward shape {self.reward.shape}, expected {expected_r}")
        if self.transition.shape != expected_p:
            raise DimensionError(f"transition shape {self.transition.shape}, expected {expected_p}")
        if self.initial.shape != (self.n_states,):
            raise DimensionError(f"initial shape {self.initial.shape}, expected {(self.n_states,)}")
        if self.horizon is not None and int(self.horizon) < 1:
            raise ParameterError("finite horizon must be a positive count")

    @property
    def n_joint(self) -> int:
        return int(np.prod(self.actions))

    @property
    def infinite(self) -> bool:
        return self.horizon is None

    def n_others(self, i: int) -> int:
        return self.n_joint // self.actions[i]

    def others(self, i: int) -> list:
        return [j for j in range(self.n_agents) if j != i]

    def joint_index(self, profile: Sequence[int]) -> int:
        return int(np.ravel_multi_index(tuple(profile), self.actions))

    def profile(self, joint: int) -> tuple:
        return tuple(int(a) for a in np.unravel_index(joint, self.actions))

    def split(self, x: np.ndarray, i: int, axis: int = -1) -> np.ndarray:
        return split_joint(x, self.actions, i, axis)

    def split_transition(self, i: int) -> np.ndarray:
        """Transition kernel in agent ``i``'s layout ``(S, m_i, n_i, S')``."""
        return np.moveaxis(split_joint(self.transition, self.actions, i, axis=1), 1, -1)

    def merge(self, y: np.ndarray, i: int) -> np.ndarray:
        return merge_joint(y, self.actions, i)

    def with_(self, **changes) -> "GameSpec":
        return replace(self, **changes)


def split_joint(x: np.ndarray, dims: Sequence[int], i: int, axis: int = -1) -> np.ndarray:
    """Reshape a joint-action axis into ``(m_i, n_i)``, placed at the end."""
    x = np.moveaxis(np.asarray(x), axis, -1)
    lead = x.shape[:-1]
    n = dims[i]
    t = x.reshape(lead + tuple(dims))
    t = np.moveaxis(t, len(lead) + i, -1)
    return t.reshape(lead + (x.shape[-1] // n, n))


def merge_joint(y: np.ndarray, dims: Sequence[int], i: int) -> np.ndarray:
    """Inverse of :func:`split_joint` for a trailing ``(m_i, n_i)`` pair."""
    y = np.asarray(y)
    lead = y.shape[:-2]
    other = tuple(d for k, d in enumerate(dims) if k != i)
    t = y.reshape(lead + other + (dims[i],))
    t = np.moveaxis(t, -1, len(lead) + i)
    return t.reshape(lead + (int(np.prod(dims)),))


def product_distribution(factors: Sequence[np.ndarray]) -> np.ndarray:
    """Row-major outer product of per-agent distributions along the last axis."""
    out = np.asarray(factors[0], dtype=float)
    for f in factors[1:]:
        f = np.asarray(f, dtype=float)
        out = (out[..., :, None] * f[..., None, :]).reshape(out.shape[:-1] + (-1,))
    return out


# ---------------------------------------------------------------------------
# validation and kind checks
# ---------------------------------------------------------------------------

def validate(game: GameSpec) -> list:
    """Return human-readable invariant violations; empty when the game is valid."""
    problems = []
    P = game.transition
    neg = np.argwhere(P < 0)
    for s, a, s2 in neg:
        problems.append(f"transition[{s}, {a}, {s2}] = {P[s, a, s2]!r} is negative")
    sums = P.sum(axis=-1)
    for s, a in np.argwhere(np.abs(sums - 1.0) > ROW_TOL):
        problems.append(f"transition row (s={s}, a={a}) sums to {sums[s, a]!r}")
    if np.any(game.initial < 0):
        problems.append("initial distribution has negative entries")
    if abs(game.initial.sum() - 1.0) > ROW_TOL:
        problems.append(f"initial distribution sums to {game.initial.sum()!r}")
    if not np.all(np.isfinite(game.reward)):
        for idx in np.argwhere(~np.isfinite(game.reward)):
            problems.append(f"reward[{', '.join(map(str, idx))}] is not finite")
    top = 1.0 if game.pre_discounted else 1.0 - 1e-15
    if not 0.0 <= game.gamma <= top:
        problems.append(f"gamma = {game.gamma!r} outside [0, 1)")
    if game.kind != GameKind.GENERAL_SUM and not verify_kind(game, game.kind):
        problems.append(f"declared kind {game.kind.value} does not hold for reward")
    return problems


def verify_kind(game: GameSpec, kind) -> bool:
    kind = GameKind(kind)
    r = game.reward
    if kind == GameKind.IDENTICAL_INTEREST:
        return bool(np.all(r == r[0]))
    if kind == GameKind.ZERO_SUM_TWO_PLAYER:
        return game.n_agents == 2 and bool(np.all(r[0] == -r[1]))
    return True


def infer_kind(reward: np.ndarray) -> GameKind:
    reward = np.asarray(reward)
    if reward.shape[0] == 2 and np.all(reward[0] == -reward[1]) and np.any(reward != 0):
        return GameKind.ZERO_SUM_TWO_PLAYER
    if np.all(reward == reward[0]):
        return GameKind.IDENTICAL_INTEREST
    return GameKind.GENERAL_SUM


def require_kind(game: GameSpec, kind) -> None:
    kind = GameKind(kind)
    if not verify_kind(game, kind):
        raise GameKindError(f"operation requires a {kind.value} game")


# ---------------------------------------------------------------------------
# transforms
# ---------------------------------------------------------------------------

def absorbing_transform(game: GameSpec, gamma: float) -> GameSpec:
    """Fold the discount into the kernel by adding a zero-reward absorbing state.

    Every transition keeps probability ``gamma * P(s'|s,a)`` and sends the
    remaining ``1 - gamma`` to the new last state, which loops onto itself.
    The result is pre-discounted: its ``gamma`` field is 1.
    """
    if game.horizon is not None:
        raise ParameterError("absorbing_transform needs an infinite-horizon game")
    if not 0.0 < gamma <= 1.0:
        raise ParameterError(f"gamma must lie in (0, 1], got {gamma}")
    S, A = game.n_states, game.n_joint
    P = np.zeros((S + 1, A, S + 1))
    P[:S, :, :S] = gamma * game.transition
    P[:S, :, S] = 1.0 - gamma
    P[S, :, S] = 1.0
    R = np.zeros((game.n_agents, S + 1, A))
    R[:, :S] = game.reward
    init = np.append(game.initial, 0.0)
    return replace(
        game,
        n_states=S + 1,
        reward=R,
        transition=P,
        initial=init,
        gamma=1.0,
        pre_discounted=True,
        absorbing=game.absorbing + (S,),
        meta=dict(game.meta, absorbing_from_gamma=gamma),
    )


def normalize_rewards(game: GameSpec) -> GameSpec:
    """Affinely rescale all rewards into [-1, 1]; the map is kept in ``reward_scale``.

    ``reward_scale = (scale, offset)`` satisfies ``original = scale * new + offset``.
    """
    lo, hi = float(game.reward.min()), float(game.reward.max())
    offset = 0.5 * (hi + lo)
    scale = 0.5 * (hi - lo) or 1.0
    new = (game.reward - offset) / scale
    old_scale, old_offset = game.reward_scale
    return replace(
        game,
        reward=new,
        reward_scale=(old_scale * scale, old_scale * offset + old_offset),
    )


# ---------------------------------------------------------------------------
# generators
# ---------------------------------------------------------------------------

def make_matrix_game(payoffs, gamma: float = 0.0, kind=None) -> GameSpec:
    """Lift a one-shot normal-form game to a single-state stochastic game."""
    mats = [np.asarray(p, dtype=float) for p in payoffs]
    n = len(mats)
    if n == 0:
        raise DimensionError("need at least one payoff matrix")
    shape = mats[0].shape
    if len(shape) != n:
        raise DimensionError(f"{n} agents need {n}-dimensional payoff arrays, got {shape}")
    for k, m in enumerate(mats):
        if m.shape != shape:
            raise DimensionError(f"payoff {k} has shape {m.shape}, expected {shape}")
    A = int(np.prod(shape))
    reward = np.stack([m.reshape(A) for m in mats])[:, None, :]
    transition = np.ones((1, A, 1))
    if kind is None:
        kind = infer_kind(reward)
    game = GameSpec(n, 1, shape, reward, transition, gamma, np.ones(1), kind=kind)
    if not verify_kind(game, game.kind):
        raise GameKindError(f"payoffs are not {GameKind(kind).value}")
    return game


def matching_pennies(gamma: float = 0.0) -> GameSpec:
    m = np.array([[1.0, -1.0], [-1.0, 1.0]])
    return make_matrix_game([m, -m], gamma)


def rock_paper_scissors(gamma: float = 0.0) -> GameSpec:
    m = np.array([[0.0, -1.0, 1.0], [1.0, 0.0, -1.0], [-1.0, 1.0, 0.0]])
    return make_matrix_game([m, -m], gamma)


def prisoners_dilemma(gamma: float = 0.0, T=5.0, R=3.0, P=1.0, S=0.0) -> GameSpec:
    """Actions: 0 = Cooperate, 1 = Defect."""
    row = np.array([[R, S], [T, P]])
    return make_matrix_game([row, row.T], gamma)


def chicken(gamma: float = 0.0) -> GameSpec:
    """Actions: 0 = Dare, 1 = Chicken; two pure equilibria plus a mixed one."""
    row = np.array([[0.0, 7.0], [2.0, 6.0]])
    return make_matrix_game([row, row.T], gamma)


def differential_game_reward(a1, a2):
    f1 = 0.8 * (-(((a1 + 5.0) / 3.0) ** 2) - ((a2 + 5.0) / 3.0) ** 2)
    f2 = 1.0 * (-(((a1 - 5.0) / 1.0) ** 2) - ((a2 - 5.0) / 1.0) ** 2) + 10.0
    return np.maximum(f1, f2)


def make_differential_game(grid: int = 41, gamma: float = 0.5) -> GameSpec:
    """Two-agent shared-reward differential game tabulated on an even grid over [-10, 10].

    The default 41 points put 5.0 exactly on the grid, where the global
    optimum of 10 sits.
    """
    if grid < 3:
        raise ParameterError("grid must have at least 3 points")
    pts = np.linspace(-10.0, 10.0, grid)
    r = differential_game_reward(pts[:, None], pts[None, :])
    game = make_matrix_game([r, r], gamma, kind=GameKind.IDENTICAL_INTEREST)
    return replace(game, meta={"action_points": pts.tolist(), "name": "differential"})


def make_random_identical_interest_mpg(seed, n_agents: int = 2, n_states: int = 2,
                                       n_actions=2, gamma: float = 0.9) -> GameSpec:
    """Random identical-interest Markov game (hence a Markov potential game).

    Rewards are i.i.d. uniform on [-1, 1] and shared by every agent; each
    transition row is a normalised vector of i.i.d. uniforms.
    """
    if n_agents < 1 or n_states < 1:
        raise ParameterError("sizes must be >= 1")
    if np.isscalar(n_actions):
        n_actions = (int(n_actions),) * n_agents
    if min(n_actions) < 1:
        raise ParameterError("sizes must be >= 1")
    rng = np.random.default_rng(seed)
    A = int(np.prod(n_actions))
    common = rng.uniform(-1.0, 1.0, size=(n_states, A))
    P = rng.uniform(size=(n_states, A, n_states))
    P /= P.sum(axis=-1, keepdims=True)
    init = rng.uniform(size=n_states)
    init /= init.sum()
    reward = np.broadcast_to(common, (n_agents, n_states, A))
    return GameSpec(n_agents, n_states, n_actions, reward, P, gamma, init,
                    kind=GameKind.IDENTICAL_INTEREST)


def make_random_general_sum(seed, n_agents: int = 2, n_states: int = 2, n_actions=2,
                            gamma: float = 0.9, horizon=None) -> GameSpec:
    rng = np.random.default_rng(seed)
    if np.isscalar(n_actions):
        n_actions = (int(n_actions),) * n_agents
    A = int(np.prod(n_actions))
    reward = rng.uniform(-1.0, 1.0, size=(n_agents, n_states, A))
    P = rng.uniform(size=(n_states, A, n_states))
    P /= P.sum(axis=-1, keepdims=True)
    init = rng.uniform(size=n_states)
    init /= init.sum()
    return GameSpec(n_agents, n_states, n_actions, reward, P, gamma, init,
                    horizon=horizon, kind=infer_kind(reward))


# ---------------------------------------------------------------------------
# JSON game files
# ---------------------------------------------------------------------------

def game_to_dict(game: GameSpec) -> dict:
    d = {
        "_joint_order": JOINT_ORDER,
        "n_agents": game.n_agents,
        "states": game.n_states,
        "actions": list(game.actions),
        "gamma": game.gamma,
        "horizon": "inf" if game.horizon is None else int(game.horizon),
        "initial": game.initial.tolist(),
        "reward": game.reward.tolist(),
        "transition": game.transition.tolist(),
        "kind": game.kind.value,
    }
    if game.absorbing:
        d["absorbing"] = list(game.absorbing)
        d["pre_discounted"] = game.pre_discounted
    if "action_points" in game.meta:
        d["action_points"] = game.meta["action_points"]
    return d


def game_from_dict(d: dict) -> GameSpec:
    horizon = d.get("horizon", "inf")
    horizon = None if horizon in ("inf", None) else int(horizon)
    meta = {}
    if "action_points" in d:
        meta["action_points"] = d["action_points"]
    reward = np.asarray(d["reward"], dtype=float)
    kind = d.get("kind") or infer_kind(reward)
    return GameSpec(
        n_agents=int(d["n_agents"]),
        n_states=int(d["states"]),
        actions=tuple(d["actions"]),
        reward=reward,
        transition=np.asarray(d["transition"], dtype=float),
        gamma=float(d["gamma"]),
        initial=np.asarray(d["initial"], dtype=float),
        horizon=horizon,
        kind=kind,
        absorbing=tuple(d.get("absorbing", ())),
        pre_discounted=bool(d.get("pre_discounted", False)),
        meta=meta,
    )


def save_game(game: GameSpec, path) -> None:
    Path(path).write_text(json.dumps(game_to_dict(game), indent=1), encoding="utf-8")


def load_game(path) -> GameSpec:
    return game_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def horizon_trunc(gamma: float, eps: float = 1e-3) -> int:
    """Steps after which the discount weight drops below ``eps``."""
    if gamma <= 0.0:
        return 1
    if gamma >= 1.0:
        raise ParameterError("truncation needs gamma < 1")
    return max(1, math.ceil(math.log(eps) / math.log(gamma)))
