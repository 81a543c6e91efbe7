"""Tabular soft-equilibrium solvers for stochastic games."""

__version__ = "0.1.0"

from .errors import (ConvergenceError, DegenerateFisherError, DegenerateWeightsError,
                     DimensionError, DivergenceError, GameKindError, ModeConflictError,
                     ParameterError, VSGError)
from .game import (GameKind, GameSpec, load_game, make_differential_game, make_matrix_game,
                   make_random_general_sum, make_random_identical_interest_mpg, matching_pennies,
                   prisoners_dilemma, rock_paper_scissors, save_game, validate)
from .soft import EvalMode, SoftQTable, soft_best_response, soft_policy_evaluation
from .vpg import VPGConfig, VPGResult, run_vpg
from .opponent import OpponentModelConfig, ReplayBuffer, Trajectory, fit_opponent_model
from .oracle import certify_eps_nash, exact_best_response, exploitability
from .equilibria import SignalScheme, solve_correlated, solve_zero_sum
from .mean_field import MFConfig, MFGameSpec, run_mf_bayesian_q

__all__ = [name for name in dir() if not name.startswith("_")]
