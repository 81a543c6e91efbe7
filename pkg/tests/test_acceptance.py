"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v``; the verdict lines are
printed even when output capture is on.
"""

import math
import time

import numpy as np
import pytest

from vsg.equilibria import (SignalScheme, augment_with_signal, correlated_device, is_product,
                            solve_correlated, solve_zero_sum)
from vsg.game import (chicken, horizon_trunc, make_differential_game, make_matrix_game,
                      make_random_general_sum, make_random_identical_interest_mpg,
                      matching_pennies, prisoners_dilemma, rock_paper_scissors)
from vsg.mean_field import (MFConfig, example_crowd_game, example_static_game, forward_flow,
                            run_mf_bayesian_q, soft_optimal_policy, uniform_policy)
from vsg.opponent import OpponentModelConfig, Trajectory, fit_opponent_model, simulate
from vsg.oracle import (certify_eps_nash, exploitability, fisher_matrix,
                        global_npg_reference_step, model_error_delta)
from vsg.soft import elbo, kl, soft_policy_evaluation, softmax, total_variation
from vsg.vpg import (VPGConfig, consistent_marginals, greedy_return, npg_step, run_vpg,
                     smoothness_constant)

import test_mean_field
import test_soft
import test_vpg
from oracles import enumerated_soft_value, random_policy, soft_integrand_rollouts


@pytest.fixture
def verdict(capsys):
    def report(number, ok, detail):
        with capsys.disabled():
            print(f"\ncriterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, detail
    return report


@pytest.mark.slow
def test_criterion_01_differential_game(verdict):
    g = make_differential_game(41, 0.5)
    returns, times = [], []
    for seed in range(10):
        t0 = time.perf_counter()
        res = run_vpg(g, VPGConfig(opponent_mode="Variational", seed=seed))
        times.append(time.perf_counter() - t0)
        returns.append(greedy_return(g, res.marginals))
    hits = sum(r >= 9.5 for r in returns)
    ok = hits >= 8 and max(times) <= 60.0
    verdict(1, ok, f"{hits}/10 seeds reach >= 9.5 (returns {np.round(returns, 3).tolist()}), "
                   f"slowest run {max(times):.1f}s")


def test_criterion_02_fisher_reference(verdict):
    worst_tv, worst_cross = 0.0, 0.0
    eta = 0.05
    for seed in range(20):
        g = make_random_identical_interest_mpg(seed)
        rng = np.random.default_rng(seed + 100)
        pols = [random_policy(rng, (2, 2, 2)) for _ in range(2)]
        marg = consistent_marginals(g, pols)
        models = [marg[1], marg[0]]
        ref = global_npg_reference_step(g, pols, models, eta)
        for i in range(2):
            q = soft_policy_evaluation(g, i, pols[i], models[i], true_opponents=models[i],
                                       tol=1e-13)
            worst_tv = max(worst_tv, float(np.max(total_variation(ref[i], npg_step(pols[i], q, eta,
                                                                                     g.gamma)))))
        F, off = fisher_matrix(g, pols, models)
        worst_cross = max(worst_cross, float(np.abs(F[off[0]:off[1], off[1]:off[2]]).max()))
    ok = worst_tv <= 1e-6 and worst_cross <= 1e-8
    verdict(2, ok, f"max per-row TV {worst_tv:.2e}, max cross block {worst_cross:.2e}")


def test_criterion_03_potential_monotone(verdict):
    L = smoothness_constant(2, 0.9, 2)
    worst = 0.0
    for seed in range(20):
        g = make_random_identical_interest_mpg(seed)
        res = run_vpg(g, VPGConfig(eta=1.0 / L, max_iters=200, policy_tol=1e-300))
        assert len(res.potentials) >= 200
        worst = min(worst, float(np.diff(res.potentials).min()))
    ok = worst >= -1e-9
    verdict(3, ok, f"eta = 1/{L:.3f}, largest potential drop {max(0.0, -worst):.2e}")


def test_criterion_04_convergence_bound(verdict):
    gaps, all_converged = [], True
    joint = per_agent = None
    ok = True
    for seed in range(20):
        g = make_random_identical_interest_mpg(seed)
        res = run_vpg(g)
        all_converged &= res.converged
        rep = exploitability(g, res.marginals)
        joint = certify_eps_nash(rep, g, "convergence-joint")
        per_agent = certify_eps_nash(rep, g, "convergence-max")
        ok &= joint.passed
        gaps.append(rep.max_gap)
    ok = ok and all_converged
    verdict(4, ok, f"max exploitability {max(gaps):.3f} <= joint bound {joint.bound:.3f} "
                   f"(max-agent bound {per_agent.bound:.3f}, "
                   f"{'met' if max(gaps) <= per_agent.bound else 'not met'})")


def test_criterion_05_finite_horizon_bound(verdict):
    worst_ratio, cases = 0.0, 0
    ok = True
    for seed in range(12):
        rng = np.random.default_rng(seed)
        T = int(rng.integers(1, 11))
        acts = tuple(int(x) for x in rng.integers(2, 5, size=2))
        g = make_random_general_sum(seed, n_states=2, n_actions=acts, horizon=T)
        res = run_vpg(g)
        if not res.converged:
            ok = False
            continue
        rep = exploitability(g, res.marginals)
        bound = T * math.log(max(acts))
        ok &= certify_eps_nash(rep, g, "entropy-gap").passed and rep.max_gap <= bound
        worst_ratio = max(worst_ratio, rep.max_gap / bound)
        cases += 1
    verdict(5, ok, f"{cases} converged games, worst gap/bound {worst_ratio:.3f}")


def test_criterion_06_model_error_bound(verdict):
    worst = 0.0
    for k in range(300):
        rng = np.random.default_rng(k)
        g = make_random_general_sum(k, n_states=2, n_actions=2, gamma=0.9)
        pi = softmax(rng.normal(size=(2, 2, 2)))
        opp = softmax(rng.normal(size=(2, 2)))
        scale = [0.01, 0.1, 1.0, 3.0][k % 4]
        rho = softmax(np.log(opp) + scale * rng.normal(size=(2, 2)))
        eps = float(kl(rho, opp).max())
        q = soft_policy_evaluation(g, 0, pi, opp, true_opponents=opp).q
        q_hat = soft_policy_evaluation(g, 0, pi, rho).q
        delta = model_error_delta(0.9, 2, eps)
        worst = max(worst, float(np.abs(q - q_hat).max()) / delta)
    verdict(6, worst <= 1.0, f"300 perturbations, worst |Q - Q_hat| / bound = {worst:.3f}")


def test_criterion_07_zero_sum(verdict):
    lines, ok = [], True
    for name, make in (("matching pennies", matching_pennies), ("rps", rock_paper_scissors)):
        g = make()
        res = solve_zero_sum(g)
        tv = max(float(np.max(total_variation(m, np.full(n, 1.0 / n))))
                 for m, n in zip(res.marginals, g.actions))
        ok &= res.converged and tv <= 0.05
        if name == "matching pennies":
            value = res.trace[-1].values[0]
            ok &= abs(value) <= 0.1
            lines.append(f"{name}: TV {tv:.1e}, value {value:.1e}")
        else:
            lines.append(f"{name}: TV {tv:.1e}")
    verdict(7, ok, "; ".join(lines))


def test_criterion_08_correlated(verdict):
    worst = 0.0
    games = [chicken(), prisoners_dilemma(), make_random_general_sum(8, 2, 2, 2, gamma=0.5)]
    for g in games:
        nash = run_vpg(g)
        ce = solve_correlated(g, SignalScheme.uniform(1))
        for a, b in zip(ce.result.marginals, nash.marginals):
            worst = max(worst, float(np.max(total_variation(a, b))))
    # designed signal on chicken: signal 0 tells agent 0 to dare and agent 1
    # to yield, signal 1 the reverse
    g = chicken()
    scheme = SignalScheme([0.5, 0.5])
    follow = [np.array([[1.0, 0.0], [0.0, 1.0]]), np.array([[0.0, 1.0], [1.0, 0.0]])]
    device = correlated_device(follow, scheme)
    gap = exploitability(augment_with_signal(g, scheme), follow).max_gap
    ok = worst <= 1e-8 and not is_product(device, g.actions) and gap <= 1e-12
    verdict(8, ok, f"single-signal vs Nash TV {worst:.1e}; designed device "
                   f"{np.round(device[0], 3).tolist()} non-product, deviation gain {gap:.1e}")


def test_criterion_09_mean_field(verdict):
    crowd = run_mf_bayesian_q(example_crowd_game(), MFConfig(damping=0.5))
    mf = example_static_game()
    static = run_mf_bayesian_q(mf, MFConfig(damping=0.0, prior="uniform"))
    prior = uniform_policy(mf)
    _, single = soft_optimal_policy(mf, forward_flow(mf, prior), prior)
    diff = float(np.abs(static.policy - single).max())
    ok = (crowd.converged and crowd.iterations <= 500 and crowd.final_residual < 1e-6
          and static.converged and static.iterations <= 2 and diff <= 1e-12)
    verdict(9, ok, f"crowd toy: {crowd.iterations} rounds, residual {crowd.final_residual:.1e}; "
                   f"static game: {static.iterations} rounds, policy diff {diff:.1e}")


def test_criterion_10_opponent_recovery(verdict):
    p = np.array([0.8, 0.2])
    r = np.log(p)[None, :] + np.zeros((2, 2))
    g = make_matrix_game([np.zeros((2, 2)), r], 0.5)
    rng = np.random.default_rng(0)
    states, _, joint = simulate(g, [np.array([[0.5, 0.5]]), p[None]], 500, horizon_trunc(0.5), rng)
    data = [Trajectory(s, a) for s, a in zip(states, joint)]
    rho, _ = fit_opponent_model(g, data, 1, OpponentModelConfig(inner_iters=200, step=0.05), rng=1)
    tv = float(total_variation(rho[0], p))
    verdict(10, tv <= 0.1, f"500 trajectories, recovered {np.round(rho[0], 3).tolist()}, TV {tv:.3f}")


def test_criterion_11_numerical_equivalence(verdict):
    lines, ok = [], True
    fixtures = {"matching pennies": matching_pennies(0.5), "prisoners dilemma": prisoners_dilemma(0.5),
                "random general-sum": make_random_general_sum(7, 2, 2, 2, gamma=0.5),
                "random identical-interest": make_random_identical_interest_mpg(3, gamma=0.5)}
    worst_z = 0.0
    for k, g in enumerate(fixtures.values()):
        rng = np.random.default_rng(k)
        S, m, n = g.n_states, g.n_others(0), g.actions[0]
        pi, opp, rho = (random_policy(rng, (S, m, n)), random_policy(rng, (S, m)),
                        random_policy(rng, (S, m)))
        v = elbo(g, 0, pi, [rho], true_opponents=[opp], tol=1e-13)
        samples = soft_integrand_rollouts(g, 0, pi, rho, opp, 200_000, 50, rng)
        z = abs(samples.mean() - v) / (samples.std() / math.sqrt(samples.size))
        worst_z = max(worst_z, z)
    ok &= worst_z < 3.0
    lines.append(f"rollouts: worst |z| {worst_z:.2f} on {len(fixtures)} games")
    worst_enum = 0.0
    for T in (1, 2, 3):
        for g in (make_random_general_sum(10 + T, 2, 2, 2, horizon=T),
                  prisoners_dilemma().with_(horizon=T), matching_pennies().with_(horizon=T)):
            rng = np.random.default_rng(T)
            S = g.n_states
            pi = random_policy(rng, (T, S, 2, 2))
            opp, rho = random_policy(rng, (T, S, 2)), random_policy(rng, (T, S, 2))
            table = soft_policy_evaluation(g, 1, pi, rho, true_opponents=opp)
            worst_enum = max(worst_enum, abs(g.initial @ table.v[0]
                                             - enumerated_soft_value(g, 1, pi, rho, opp, T)))
    ok &= worst_enum <= 1e-10
    lines.append(f"enumeration: worst diff {worst_enum:.1e}")
    # the property suites, each drawing 1000 cases
    for prop in (test_soft.test_pinsker, test_soft.test_softmax_shift_invariance,
                 test_vpg.test_npg_step_preserves_simplex,
                 test_mean_field.test_kolmogorov_conserves_mass):
        prop()
    lines.append("4 property suites x 1000 cases passed")
    verdict(11, ok, "; ".join(lines))
