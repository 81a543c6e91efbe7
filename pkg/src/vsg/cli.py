"""Command-line harness: solve, certify and generate games, writing CSV artifacts.

Every run writes into ``--out DIR``:

* ``trace.csv``: ``run_id, iter, agent, elbo, value, potential, policy_tv_delta,
  exploitability_if_computed``
* ``final_policy.csv``: marginal play per agent, state (and step ``t`` for
  finite-horizon games) and action
* ``report.csv``: per-agent exploitability gap, bound and verdict
* ``config_echo.json``: the resolved configuration

Exit codes: 0 success, 1 usage or I/O error, 2 invalid game, 3 the solver
did not converge (artifacts are still written).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .equilibria import SignalScheme, correlated_device, solve_correlated, solve_zero_sum
from .errors import VSGError
from .game import (GameSpec, chicken, load_game, make_differential_game,
                   make_random_general_sum, make_random_identical_interest_mpg, matching_pennies,
                   prisoners_dilemma, rock_paper_scissors, save_game, validate)
from .mean_field import (MFConfig, crowd_aversion_game, example_crowd_game, example_static_game,
                         mf_exploitability, run_mf_bayesian_q)
from .opponent import OpponentModelConfig
from .oracle import Certificate, certify_eps_nash, exploitability
from .soft import kl
from .vpg import VPGConfig, VPGResult, greedy_return, run_vpg

log = logging.getLogger("vsg")

EXIT_OK, EXIT_USAGE, EXIT_INVALID, EXIT_NOT_CONVERGED = 0, 1, 2, 3
TRACE_COLUMNS = ("run_id", "iter", "agent", "elbo", "value", "potential", "policy_tv_delta",
                 "exploitability_if_computed")
COMMANDS = ("solve-nash", "solve-zs", "solve-ce", "solve-mf", "exploitability", "gen-game",
            "certify")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def fmt(x) -> str:
    """17 significant digits; NaN and None become empty cells."""
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    return "" if math.isnan(x) else "%.17g" % x


def _write_csv(path: Path, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([v if isinstance(v, str) else fmt(v) for v in row])


# ---------------------------------------------------------------------------
# records
# ---------------------------------------------------------------------------

@dataclass
class RunRecord:
    run_id: str
    config: dict
    trace_rows: list = field(default_factory=list)
    curve: list = field(default_factory=list)
    converged: bool = True
    wall_clock: float = 0.0
    files: dict = field(default_factory=dict)


def make_run_id(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def emit_learning_curve(records, path) -> Path:
    """Write the learning curve as tab-separated text.

    A single run gives ``iteration  mean_return``.  Several runs (one
    :class:`RunRecord` per seed) give ``iteration  seed_<k>...``; the mean
    return is the row average, see :func:`curve_mean`.
    """
    if isinstance(records, RunRecord):
        records = [records]
    records = list(records)
    if not records or any(len(r.curve) == 0 for r in records):
        raise UsageError("learning curve needs at least one metric row per run")
    length = max(len(r.curve) for r in records)
    table = np.full((length, len(records)), np.nan)
    for k, r in enumerate(records):
        vals = [v for _, v in r.curve]
        table[:len(vals), k] = vals
        table[len(vals):, k] = vals[-1]      # runs that stopped early hold their last value
    iters = np.arange(length)
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        if len(records) > 1:
            header = ["iteration"] + [f"seed_{r.config.get('seed', k)}" for k, r in enumerate(records)]
        else:
            header = ["iteration", "mean_return"]
        fh.write("\t".join(header) + "\n")
        for i in range(length):
            fh.write("\t".join([str(int(iters[i]))] + [fmt(v) for v in table[i]]) + "\n")
    return path


def read_learning_curve(path) -> tuple:
    lines = Path(path).read_text(encoding="utf-8").strip().split("\n")
    header = lines[0].split("\t")
    data = np.array([[float(v) for v in ln.split("\t")] for ln in lines[1:]])
    return header, data


def curve_mean(data: np.ndarray) -> np.ndarray:
    """Mean return per row of a learning curve read by :func:`read_learning_curve`."""
    return data[:, 1:].mean(axis=1)


# ---------------------------------------------------------------------------
# policy files
# ---------------------------------------------------------------------------

def policy_rows(marginals, finite: bool):
    for i, m in enumerate(marginals):
        if finite:
            for t, s, a in np.ndindex(m.shape):
                yield (i, t, s, a, float(m[t, s, a]))
        else:
            for s, a in np.ndindex(m.shape):
                yield (i, s, a, float(m[s, a]))


def write_policy_csv(path: Path, marginals, finite: bool) -> None:
    header = ("agent", "t", "state", "action", "prob") if finite else ("agent", "state", "action", "prob")
    _write_csv(path, header, policy_rows(marginals, finite))


def read_policy_csv(path, game: GameSpec) -> list:
    """Inverse of :func:`write_policy_csv` for a given game."""
    finite = game.horizon is not None
    lead = (int(game.horizon),) if finite else ()
    out = [np.zeros(lead + (game.n_states, n)) for n in game.actions]
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            i, s, a = int(row["agent"]), int(row["state"]), int(row["action"])
            idx = (int(row["t"]), s, a) if finite else (s, a)
            out[i][idx] = float(row["prob"])
    return out


def uniform_play(game: GameSpec) -> list:
    lead = (int(game.horizon),) if game.horizon is not None else ()
    return [np.full(lead + (game.n_states, n), 1.0 / n) for n in game.actions]


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _load_valid_game(path) -> GameSpec:
    try:
        game = load_game(path)
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise UsageError(f"cannot read game file {path}: {exc}") from exc
    problems = validate(game)
    if problems:
        raise InvalidGame(problems)
    return game


class InvalidGame(Exception):
    def __init__(self, problems):
        super().__init__("; ".join(problems))
        self.problems = problems


def _vpg_config(args, game: GameSpec) -> VPGConfig:
    return VPGConfig(eta=args.eta, max_iters=args.iters, policy_tol=args.tol,
                     opponent_mode=args.opponent_mode, seed=args.seed,
                     exploitability_every=args.cadence,
                     om=OpponentModelConfig(step=args.om_step, inner_iters=args.om_sweeps))


def _certify(game: GameSpec, report, mode: Optional[str], eps_rho: Optional[float],
             delta: float = 0.0) -> Certificate:
    if mode is None:
        mode = "entropy-gap" if game.horizon is not None else "convergence-joint"
    return certify_eps_nash(report, game, mode, delta=delta, eps_rho=eps_rho)


def _report_rows(report, cert: Certificate):
    verdict = cert.label
    for i, gap in enumerate(report.gaps):
        yield (i, gap, cert.bound, verdict)


def _model_error(game: GameSpec, res: VPGResult) -> float:
    worst = 0.0
    for i in range(game.n_agents):
        truth = [m for j, m in enumerate(res.marginals) if j != i]
        for model, true in zip(res.models[i], truth):
            worst = max(worst, float(np.max(kl(model, true))))
    return worst


def _write_vpg(out: Path, record: RunRecord, game: GameSpec, res: VPGResult, cadence: int,
               mode: Optional[str], opponent_mode: str) -> None:
    rows = []
    for row in res.trace:
        if row.iter % cadence and row.iter != res.trace[-1].iter:
            continue
        for i in range(game.n_agents):
            rows.append((record.run_id, row.iter, i, row.elbos[i], row.values[i], row.potential,
                         row.tv_delta, row.exploitability))
    _write_csv(out / "trace.csv", TRACE_COLUMNS, rows)
    write_policy_csv(out / "final_policy.csv", res.marginals, game.horizon is not None)
    report = exploitability(game, res.marginals)
    eps = None if opponent_mode == "Oracle" or game.horizon is not None else _model_error(game, res)
    cert = _certify(game, report, mode, eps)
    _write_csv(out / "report.csv", ("agent", "gap", "bound", "pass"), _report_rows(report, cert))
    record.curve = [(row.iter, row.greedy) for row in res.trace]
    record.curve.append((res.iterations, greedy_return(game, res.marginals)))
    emit_learning_curve(record, out / "learning_curve.txt")
    record.converged = res.converged


def _echo(out: Path, record: RunRecord) -> None:
    echo = dict(record.config, run_id=record.run_id, suite_version=__version__)
    (out / "config_echo.json").write_text(json.dumps(echo, indent=1, sort_keys=True, default=str),
                                          encoding="utf-8")


def _base_config(args) -> dict:
    cfg = {k: v for k, v in vars(args).items() if k not in ("func", "out")}
    if getattr(args, "game", None):
        cfg["game_sha256"] = hashlib.sha256(Path(args.game).read_bytes()).hexdigest()
    return cfg


def cmd_solve(args) -> RunRecord:
    game = _load_valid_game(args.game)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seeds = [args.seed + k for k in range(args.seeds)]
    if len(seeds) > 1:
        return _batch(args, seeds)
    config = _base_config(args)
    record = RunRecord(make_run_id(config), config)
    t0 = time.perf_counter()
    vcfg = _vpg_config(args, game)
    if args.command == "solve-zs":
        res = solve_zero_sum(game, vcfg)
    elif args.command == "solve-ce":
        scheme = _signal_scheme(args)
        ce = solve_correlated(game, scheme, vcfg)
        res = ce.result
        rows = [(s, a, float(ce.device[s, a])) for s, a in np.ndindex(ce.device.shape)]
        _write_csv(out / "device.csv", ("state", "joint_action", "mass"), rows)
        game = ce.game
    else:
        res = run_vpg(game, vcfg)
    _write_vpg(out, record, game, res, args.cadence, args.bound, args.opponent_mode)
    record.wall_clock = time.perf_counter() - t0
    _echo(out, record)
    log.info("run %s finished in %.2fs (converged=%s)", record.run_id, record.wall_clock,
             record.converged)
    return record


def _batch_job(payload) -> tuple:
    argv, = payload
    args = build_parser().parse_args(argv)
    rec = cmd_solve(args)
    return rec.converged, str(Path(args.out) / "learning_curve.txt"), args.seed


def _batch(args, seeds) -> RunRecord:
    out = Path(args.out)
    jobs = []
    for s in seeds:
        argv = [args.command, "--game", args.game, "--out", str(out / f"seed_{s}"),
                "--seed", str(s), "--iters", str(args.iters), "--tol", repr(args.tol),
                "--opponent-mode", args.opponent_mode, "--cadence", str(args.cadence),
                "--om-step", repr(args.om_step), "--om-sweeps", str(args.om_sweeps)]
        if args.eta is not None:
            argv += ["--eta", repr(args.eta)]
        if args.bound:
            argv += ["--bound", args.bound]
        if getattr(args, "signal", None):
            argv += ["--signal", args.signal]
        if getattr(args, "signals", None):
            argv += ["--signals", str(args.signals)]
        jobs.append((argv,))
    workers = max(1, int(os.environ.get("VSG_THREADS", "1")))
    if workers == 1:
        results = [_batch_job(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_batch_job, jobs))
    records = []
    for converged, curve_path, seed in results:
        _, data = read_learning_curve(curve_path)
        rec = RunRecord("", {"seed": seed}, curve=[(int(r[0]), r[1]) for r in data],
                        converged=converged)
        records.append(rec)
    emit_learning_curve(records, out / "learning_curve.txt")
    config = _base_config(args)
    batch = RunRecord(make_run_id(config), config, converged=all(r.converged for r in records))
    _echo(out, batch)
    return batch


def _signal_scheme(args) -> SignalScheme:
    if args.signal:
        try:
            data = json.loads(Path(args.signal).read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            raise UsageError(f"cannot read signal file {args.signal}: {exc}") from exc
        return SignalScheme(np.asarray(data["sigma"], dtype=float))
    return SignalScheme.uniform(args.signals or 1)


def _mf_game(args):
    if args.mf_spec:
        try:
            d = json.loads(Path(args.mf_spec).read_text(encoding="utf-8"))
            return crowd_aversion_game(d["base_reward"], d["transition"], int(d["horizon"]),
                                       d["initial"], float(d.get("weight", 0.0)),
                                       d.get("name", "custom"))
        except (OSError, ValueError, KeyError) as exc:
            raise UsageError(f"cannot read mean-field spec {args.mf_spec}: {exc}") from exc
    if args.mf == "crowd":
        return example_crowd_game(args.horizon)
    return example_static_game(args.horizon)


def cmd_solve_mf(args) -> RunRecord:
    mf = _mf_game(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    config = _base_config(args)
    record = RunRecord(make_run_id(config), config)
    res = run_mf_bayesian_q(mf, MFConfig(args.iters, args.tol, args.damping, args.prior), record=True)
    rows = [(record.run_id, k + 1, 0, "", "", "", r, "") for k, r in enumerate(res.residuals)]
    _write_csv(out / "trace.csv", TRACE_COLUMNS, rows)
    mf_rows = [(k + 1, t, s, a, float(L[t, s, a]))
               for k, L in enumerate(res.history) for t, s, a in np.ndindex(L.shape)]
    _write_csv(out / "mean_field.csv", ("iter", "t", "s", "a", "mass"), mf_rows)
    rows = [(0, t, s, a, float(res.policy[t, s, a])) for t, s, a in np.ndindex(res.policy.shape)]
    _write_csv(out / "final_policy.csv", ("agent", "t", "state", "action", "prob"), rows)
    gap = mf_exploitability(mf, res.policy, res.mean_field)
    bound = (mf.horizon + 1) * math.log(mf.n_actions)   # horizon T has T + 1 decision slices
    _write_csv(out / "report.csv", ("agent", "gap", "bound", "pass"),
               [(0, gap, bound, "pass" if gap <= bound else "fail")])
    record.converged = res.converged
    _echo(out, record)
    return record


def _policy_for(args, game: GameSpec):
    if args.policy == "uniform":
        return uniform_play(game)
    try:
        return read_policy_csv(args.policy, game)
    except (OSError, ValueError, KeyError, IndexError) as exc:
        raise UsageError(f"cannot read policy file {args.policy}: {exc}") from exc


def cmd_exploitability(args) -> RunRecord:
    game = _load_valid_game(args.game)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    config = _base_config(args)
    record = RunRecord(make_run_id(config), config)
    marg = _policy_for(args, game)
    report = exploitability(game, marg)
    cert = _certify(game, report, args.bound, args.eps_rho, args.delta)
    _write_csv(out / "report.csv", ("agent", "gap", "bound", "pass"), _report_rows(report, cert))
    _echo(out, record)
    if args.command == "certify":
        print(f"{cert.mode}: max gap {fmt(report.max_gap)} vs bound {fmt(cert.bound)} -> {cert.label}")
    else:
        print(f"max gap {fmt(report.max_gap)}")
    return record


GENERATORS = ("random-mpg", "random", "matching-pennies", "rps", "pd", "chicken", "differential")


def cmd_gen_game(args) -> RunRecord:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    kind = args.kind
    if kind == "random-mpg":
        game = make_random_identical_interest_mpg(args.seed, args.agents, args.states, args.actions,
                                                  args.gamma)
    elif kind == "random":
        game = make_random_general_sum(args.seed, args.agents, args.states, args.actions, args.gamma)
    elif kind == "differential":
        game = make_differential_game(args.grid, args.gamma)
    else:
        make = {"matching-pennies": matching_pennies, "rps": rock_paper_scissors,
                "pd": prisoners_dilemma, "chicken": chicken}[kind]
        game = make(args.gamma)
    if args.horizon:
        game = game.with_(horizon=args.horizon)
    save_game(game, out / "game.json")
    config = _base_config(args)
    record = RunRecord(make_run_id(config), config)
    _echo(out, record)
    return record


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="vsg", description="Tabular soft-equilibrium solvers for stochastic games.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def common(sp, game=True):
        if game:
            sp.add_argument("--game", required=True, help="game JSON file")
        sp.add_argument("--out", default="out", help="output directory")
        sp.add_argument("--seed", type=int, default=0)

    for name in ("solve-nash", "solve-zs", "solve-ce"):
        sp = sub.add_parser(name)
        common(sp)
        sp.add_argument("--eta", type=float, default=None)
        sp.add_argument("--iters", type=int, default=1000)
        sp.add_argument("--tol", type=float, default=1e-8)
        sp.add_argument("--opponent-mode", dest="opponent_mode", default="Oracle",
                        choices=("Oracle", "Empirical", "Variational"))
        sp.add_argument("--cadence", type=int, default=1, help="trace and exploitability every k iterations")
        sp.add_argument("--seeds", type=int, default=1, help="number of consecutive seeds to batch")
        sp.add_argument("--om-step", dest="om_step", type=float, default=0.05)
        sp.add_argument("--om-sweeps", dest="om_sweeps", type=int, default=5)
        sp.add_argument("--bound", choices=("entropy-gap", "convergence-joint", "convergence-max"),
                        default=None)
        if name == "solve-ce":
            sp.add_argument("--signal", default=None, help='JSON file {"sigma": [...]}')
            sp.add_argument("--signals", type=int, default=None, help="uniform signal count")
        sp.set_defaults(func=cmd_solve)

    sp = sub.add_parser("solve-mf")
    common(sp, game=False)
    sp.add_argument("--mf", choices=("crowd", "static"), default="crowd")
    sp.add_argument("--mf-spec", dest="mf_spec", default=None,
                    help="JSON with base_reward, transition, initial, horizon and weight")
    sp.add_argument("--horizon", type=int, default=20)
    sp.add_argument("--iters", type=int, default=500)
    sp.add_argument("--tol", type=float, default=1e-6)
    sp.add_argument("--damping", type=float, default=0.5)
    sp.add_argument("--prior", choices=("previous", "uniform"), default="previous")
    sp.set_defaults(func=cmd_solve_mf)

    for name in ("exploitability", "certify"):
        sp = sub.add_parser(name)
        common(sp)
        sp.add_argument("--policy", default="uniform", help="'uniform' or a final_policy.csv")
        sp.add_argument("--bound", choices=("entropy-gap", "convergence-joint", "convergence-max"),
                        default=None)
        sp.add_argument("--delta", type=float, default=0.0)
        sp.add_argument("--eps-rho", dest="eps_rho", type=float, default=None)
        sp.set_defaults(func=cmd_exploitability)

    sp = sub.add_parser("gen-game")
    common(sp, game=False)
    sp.add_argument("--kind", choices=GENERATORS, default="random-mpg")
    sp.add_argument("--agents", type=int, default=2)
    sp.add_argument("--states", type=int, default=2)
    sp.add_argument("--actions", type=int, default=2)
    sp.add_argument("--gamma", type=float, default=0.9)
    sp.add_argument("--horizon", type=int, default=None)
    sp.add_argument("--grid", type=int, default=41)
    sp.set_defaults(func=cmd_gen_game)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(level=os.environ.get("VSG_LOG", "WARNING"), format="%(message)s")
    try:
        args = build_parser().parse_args(argv)
        if getattr(args, "cadence", 1) < 1:
            raise UsageError("--cadence must be >= 1")
        record = args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except InvalidGame as exc:
        print("invalid game:", file=sys.stderr)
        for problem in exc.problems:
            print(f"  {problem}", file=sys.stderr)
        return EXIT_INVALID
    except VSGError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK if record.converged else EXIT_NOT_CONVERGED


if __name__ == "__main__":
    sys.exit(main())
