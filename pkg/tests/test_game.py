import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vsg.errors import DimensionError, GameKindError, ParameterError
from vsg.game import (GameKind, GameSpec, absorbing_transform, chicken, game_from_dict,
                      game_to_dict, horizon_trunc, infer_kind, load_game, make_differential_game,
                      make_matrix_game, make_random_general_sum,
                      make_random_identical_interest_mpg, matching_pennies, merge_joint,
                      normalize_rewards, prisoners_dilemma, product_distribution,
                      rock_paper_scissors, save_game, split_joint, validate, verify_kind)
from vsg.oracle import policy_values

from oracles import truncated_discounted_value


def two_by_two(seed=0):
    return make_random_general_sum(seed, n_agents=2, n_states=2, n_actions=2)


class TestValidate:
    def test_well_formed_game_has_no_violations(self):
        assert validate(two_by_two()) == []

    def test_row_summing_to_point_nine_is_named(self):
        g = two_by_two()
        P = np.array(g.transition)
        P[1, 2] *= 0.9
        problems = validate(g.with_(transition=P))
        assert len(problems) == 1
        assert "s=1" in problems[0] and "a=2" in problems[0]

    def test_negative_entry_is_reported(self):
        g = two_by_two()
        P = np.array(g.transition)
        P[0, 0] = [1.2, -0.2]
        problems = validate(g.with_(transition=P))
        assert any("negative" in p and "[0, 0, 1]" in p for p in problems)

    def test_bad_initial_and_gamma(self):
        g = two_by_two().with_(initial=np.array([0.7, 0.7]), gamma=1.0)
        problems = validate(g)
        assert any("initial" in p for p in problems)
        assert any("gamma" in p for p in problems)

    def test_declared_kind_must_hold(self):
        g = two_by_two().with_(kind=GameKind.IDENTICAL_INTEREST)
        assert any("IdenticalInterest" in p for p in validate(g))

    def test_shape_errors_raise(self):
        with pytest.raises(DimensionError):
            GameSpec(2, 1, (2, 2), np.zeros((2, 1, 3)), np.ones((1, 4, 1)), 0.5, np.ones(1))
        with pytest.raises(ParameterError):
            GameSpec(1, 1, (2,), np.zeros((1, 1, 2)), np.ones((1, 2, 1)), 0.5, np.ones(1),
                     horizon=0)

    @pytest.mark.parametrize("seed", range(5))
    def test_every_generator_output_validates(self, seed):
        games = [make_random_identical_interest_mpg(seed, 3, 2, (2, 3, 2)),
                 make_random_general_sum(seed, 2, 3, 3, horizon=4), make_differential_game(),
                 matching_pennies(), rock_paper_scissors(), prisoners_dilemma(), chicken()]
        for g in games:
            assert validate(g) == []


class TestJointLayout:
    def test_split_and_merge_round_trip(self, rng):
        dims = (2, 3, 4)
        x = rng.normal(size=(5, 24))
        for i in range(3):
            y = split_joint(x, dims, i)
            assert y.shape == (5, 24 // dims[i], dims[i])
            np.testing.assert_array_equal(merge_joint(y, dims, i), x)

    def test_split_puts_own_action_last(self):
        dims = (2, 3)
        x = np.arange(6)                               # joint index = 3 * a0 + a1
        y = split_joint(x, dims, 0)                    # (m=3 over a1, n=2 over a0)
        assert y[2, 1] == 3 * 1 + 2
        y = split_joint(x, dims, 1)
        assert y[1, 2] == 3 * 1 + 2

    def test_product_distribution_is_row_major(self):
        p = product_distribution([np.array([0.25, 0.75]), np.array([0.1, 0.2, 0.7])])
        assert p.shape == (6,)
        assert p[1 * 3 + 2] == pytest.approx(0.75 * 0.7)


class TestKinds:
    def test_matching_pennies_is_zero_sum(self):
        assert matching_pennies().kind == GameKind.ZERO_SUM_TWO_PLAYER

    def test_prisoners_dilemma_defect_dominates(self):
        g = prisoners_dilemma()
        assert g.kind == GameKind.GENERAL_SUM
        r0 = g.reward[0, 0].reshape(2, 2)              # rows: own action
        r1 = g.reward[1, 0].reshape(2, 2).T
        assert np.all(r0[1] > r0[0]) and np.all(r1[1] > r1[0])

    def test_identical_matrices_pass_identical_interest(self):
        m = np.array([[1.0, 0.0], [0.0, 2.0]])
        g = make_matrix_game([m, m])
        assert g.kind == GameKind.IDENTICAL_INTEREST
        assert verify_kind(g, GameKind.IDENTICAL_INTEREST)

    def test_wrong_declared_kind_raises(self):
        with pytest.raises(GameKindError):
            make_matrix_game([np.eye(2), np.zeros((2, 2))], kind=GameKind.ZERO_SUM_TWO_PLAYER)

    def test_dimension_mismatch_raises(self):
        with pytest.raises(DimensionError):
            make_matrix_game([np.eye(2), np.eye(3)])

    def test_infer_kind(self):
        assert infer_kind(np.zeros((2, 1, 4))) == GameKind.IDENTICAL_INTEREST
        assert infer_kind(np.array([[[1.0, 0.0]], [[0.0, 1.0]]])) == GameKind.GENERAL_SUM


class TestAbsorbing:
    def test_one_state_gamma_point_nine(self):
        g = absorbing_transform(make_matrix_game([np.ones((2, 2))] * 2, 0.9), 0.9)
        assert g.n_states == 2
        np.testing.assert_allclose(g.transition[0, :, 1], 0.1)
        np.testing.assert_allclose(g.transition[1, :, 1], 1.0)
        assert g.gamma == 1.0 and g.pre_discounted and g.absorbing == (1,)
        assert validate(g) == []

    def test_gamma_one_recovers_kernel(self):
        g = two_by_two()
        h = absorbing_transform(g, 1.0)
        np.testing.assert_array_equal(h.transition[:2, :, :2], g.transition)
        assert np.all(h.transition[:2, :, 2] == 0)

    def test_out_of_range_gamma(self):
        with pytest.raises(ParameterError):
            absorbing_transform(two_by_two(), 0.0)
        with pytest.raises(ParameterError):
            absorbing_transform(two_by_two(), 1.5)

    def test_undiscounted_return_matches_discounted_return(self, rng):
        g = two_by_two(3).with_(gamma=0.8)
        joint = rng.dirichlet(np.ones(4), size=2)
        h = absorbing_transform(g, 0.8).with_(gamma=1.0)
        disc = truncated_discounted_value(g, joint, 0)
        closed = policy_values(g, joint)[0] @ g.initial
        joint_h = np.vstack([joint, np.full((1, 4), 0.25)])
        undisc = policy_values(h, joint_h)[0] @ h.initial
        assert disc == pytest.approx(closed, abs=1e-10)
        assert undisc == pytest.approx(closed, abs=1e-10)

    def test_undiscounted_return_matches_rollouts(self):
        g = two_by_two(4).with_(gamma=0.7)
        h = absorbing_transform(g, 0.7)
        joint = np.full((2, 4), 0.25)
        target = policy_values(g, joint)[0] @ g.initial
        rng = np.random.default_rng(0)
        n = 200_000
        s = rng.choice(2, size=n, p=g.initial)
        total = np.zeros(n)
        alive = np.ones(n, dtype=bool)
        for _ in range(200):
            a = rng.integers(0, 4, size=n)
            total += np.where(alive, h.reward[0][s, a], 0.0)
            cdf = np.cumsum(h.transition[s, a], axis=1)
            s = (rng.random(n)[:, None] > cdf).sum(axis=1)
            alive &= s != 2
        se = total.std() / np.sqrt(n)
        assert abs(total.mean() - target) < 3 * se

    def test_two_applications_compose(self):
        g = two_by_two(5)
        once = absorbing_transform(g, 0.5 * 0.8)
        twice = absorbing_transform(absorbing_transform(g, 0.5).with_(absorbing=()), 0.8)
        joint = np.full((once.n_states, 4), 0.25)
        for T in range(1, 4):
            # T-step reach probabilities of the original states under uniform play
            P1 = np.einsum("sa,sat->st", joint, once.transition)
            P2 = np.einsum("sa,sat->st", np.full((twice.n_states, 4), 0.25), twice.transition)
            reach1 = np.linalg.matrix_power(P1, T)[:2, :2]
            reach2 = np.linalg.matrix_power(P2, T)[:2, :2]
            np.testing.assert_allclose(reach1, reach2, atol=1e-14)


class TestDifferentialGame:
    def test_formula_values(self):
        g = make_differential_game()
        pts = np.array(g.meta["action_points"])
        r = g.reward[0, 0].reshape(41, 41)
        i5, im5 = int(np.argmin(abs(pts - 5))), int(np.argmin(abs(pts + 5)))
        assert r[i5, i5] == pytest.approx(10.0)
        assert r[im5, im5] == pytest.approx(0.0)
        f1 = 0.8 * (-2 * (10 / 3) ** 2)
        assert f1 == pytest.approx(-17.777777, abs=1e-5)

    def test_grid_argmax_is_five_five(self):
        g = make_differential_game()
        pts = np.array(g.meta["action_points"])
        best = int(np.argmax(g.reward[0, 0]))
        a, b = np.unravel_index(best, (41, 41))
        assert (pts[a], pts[b]) == (5.0, 5.0)

    def test_symmetric_and_identical(self):
        g = make_differential_game(grid=21)
        r = g.reward[0, 0].reshape(21, 21)
        np.testing.assert_array_equal(r, r.T)
        assert g.kind == GameKind.IDENTICAL_INTEREST

    def test_small_grid_rejected(self):
        with pytest.raises(ParameterError):
            make_differential_game(grid=2)


class TestRandomGames:
    def test_same_seed_is_bit_identical(self):
        a = make_random_identical_interest_mpg(11, 2, 3, 2)
        b = make_random_identical_interest_mpg(11, 2, 3, 2)
        np.testing.assert_array_equal(a.reward, b.reward)
        np.testing.assert_array_equal(a.transition, b.transition)
        np.testing.assert_array_equal(a.initial, b.initial)

    def test_identical_interest_and_bounded(self):
        g = make_random_identical_interest_mpg(2, 3, 2, 2)
        assert verify_kind(g, GameKind.IDENTICAL_INTEREST)
        assert np.abs(g.reward).max() <= 1.0

    def test_bad_sizes(self):
        with pytest.raises(ParameterError):
            make_random_identical_interest_mpg(0, 0, 2, 2)


class TestNormalize:
    def test_scale_round_trip(self):
        g = make_differential_game(grid=11)
        h = normalize_rewards(g)
        assert np.abs(h.reward).max() == pytest.approx(1.0)
        scale, offset = h.reward_scale
        np.testing.assert_allclose(scale * h.reward + offset, g.reward, atol=1e-12)


class TestSerialization:
    def test_round_trip(self, tmp_path):
        g = make_random_general_sum(1, 2, 2, (2, 3), horizon=3)
        save_game(g, tmp_path / "g.json")
        h = load_game(tmp_path / "g.json")
        assert h.actions == (2, 3) and h.horizon == 3
        np.testing.assert_array_equal(h.reward, g.reward)
        d = json.loads((tmp_path / "g.json").read_text())
        assert d["_joint_order"] == "row-major, agent 0 outermost"

    def test_infinite_horizon_written_as_inf(self):
        d = game_to_dict(matching_pennies(0.9))
        assert d["horizon"] == "inf"
        assert game_from_dict(d).horizon is None


def test_horizon_trunc():
    assert horizon_trunc(0.0) == 1
    assert horizon_trunc(0.5) == 10
    assert 0.9 ** horizon_trunc(0.9) <= 1e-3 < 0.9 ** (horizon_trunc(0.9) - 1)


@settings(max_examples=200)
@given(st.lists(st.integers(1, 4), min_size=1, max_size=4), st.data())
def test_split_merge_inverse_property(dims, data):
    i = data.draw(st.integers(0, len(dims) - 1))
    x = np.arange(int(np.prod(dims)), dtype=float)
    np.testing.assert_array_equal(merge_joint(split_joint(x, dims, i), dims, i), x)
