import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from liftgame import bimatrix as bm
from oracles import central_difference, rel_err, support_enumeration, zero_sum_value


def test_matching_pennies_style_game():
    A = np.array([[1.0, 4.0], [3.0, 2.0]])
    B = np.array([[4.0, 1.0], [2.0, 3.0]])
    sol = bm.bmg(bm.CostMatrixPair(A, B))
    np.testing.assert_allclose(sol.q1, [0.25, 0.75], atol=1e-12)
    np.testing.assert_allclose(sol.q2, [0.5, 0.5], atol=1e-12)
    assert sol.strict


def test_rock_paper_scissors_thirds():
    A = np.array([[0, 1, -1], [-1, 0, 1], [1, -1, 0]], dtype=float)
    sol = bm.bmg(bm.CostMatrixPair(A, -A))
    np.testing.assert_allclose(sol.q1, 1 / 3, atol=1e-12)
    np.testing.assert_allclose(sol.q2, 1 / 3, atol=1e-12)


def test_dominant_strategy_gives_pure_equilibrium():
    A = np.array([[0.0, 0.0], [1.0, 1.0]])  # row 0 dominates for player 1
    B = np.array([[2.0, 0.0], [0.0, 2.0]])
    sol = bm.bmg(bm.CostMatrixPair(A, B))
    np.testing.assert_array_equal(sol.q1, [1.0, 0.0])
    np.testing.assert_array_equal(sol.q2, [0.0, 1.0])


def test_one_by_one_game():
    sol = bm.bmg(bm.CostMatrixPair([[3.0]], [[-2.0]]))
    assert sol.q1.tolist() == [1.0] and sol.q2.tolist() == [1.0]
    gA, gB = bm.bmg_vjp(bm.CostMatrixPair([[3.0]], [[-2.0]]), sol, [1.0], [1.0])
    assert not gA.any() and not gB.any()


def test_shift_positive():
    pair = bm.CostMatrixPair([[-3.0, 2.0]], [[0.5, 1.0]])
    sg = bm.shift_positive(pair, margin=1.0)
    assert sg.Abar.min() == 1.0 and sg.Bbar.min() == 1.0
    assert sg.alpha == 4.0 and sg.beta == 0.5
    with pytest.raises(ValueError):
        bm.shift_positive(pair, margin=0.0)


def test_lcp_complementarity():
    rng = np.random.default_rng(3)
    pair = bm.CostMatrixPair(rng.normal(size=(3, 4)), rng.normal(size=(3, 4)))
    sg = bm.shift_positive(pair)
    p1, p2 = bm.lemke_howson(sg)
    w1 = sg.Abar @ p2 - 1.0
    w2 = sg.Bbar.T @ p1 - 1.0
    assert np.all(p1 >= 0) and np.all(p2 >= 0)
    assert np.all(w1 >= -1e-12) and np.all(w2 >= -1e-12)
    assert abs(p1 @ w1) < 1e-12 and abs(p2 @ w2) < 1e-12


def test_every_entering_label_reaches_an_equilibrium():
    rng = np.random.default_rng(4)
    pair = bm.CostMatrixPair(rng.normal(size=(4, 3)), rng.normal(size=(4, 3)))
    for label in range(7):
        sol = bm.bmg(pair, entering_label=label)
        assert bm.verify_equilibrium(pair, sol.q1, sol.q2)[0]
    with pytest.raises(ValueError):
        bm.bmg(pair, entering_label=7)


def test_pivot_limit():
    rng = np.random.default_rng(5)
    sg = bm.shift_positive(bm.CostMatrixPair(rng.normal(size=(6, 6)), rng.normal(size=(6, 6))))
    with pytest.raises(bm.PivotLimitError):
        bm.lemke_howson(sg, max_pivots=1)


def test_invalid_inputs():
    with pytest.raises(ValueError):
        bm.CostMatrixPair(np.ones((2, 2)), np.ones((2, 3)))
    with pytest.raises(ValueError):
        bm.CostMatrixPair([[np.nan]], [[0.0]])
    with pytest.raises(bm.DegenerateSolutionError):
        bm.normalize(np.zeros(2), np.ones(2))


def test_support_enumeration_agreement_small_integer_games():
    rng = np.random.default_rng(6)
    for shape in [(2, 2), (3, 3), (2, 4)]:
        for _ in range(30):
            A = rng.integers(-4, 5, shape).astype(float)
            B = rng.integers(-4, 5, shape).astype(float)
            sol = bm.bmg(bm.CostMatrixPair(A, B))
            supports = {(tuple(np.flatnonzero(q1 > 1e-9)), tuple(np.flatnonzero(q2 > 1e-9)))
                        for q1, q2 in support_enumeration(A, B)}
            assert (tuple(np.flatnonzero(sol.q1 > 1e-9)), tuple(np.flatnonzero(sol.q2 > 1e-9))) in supports


def test_zero_sum_value_matches_linear_program():
    rng = np.random.default_rng(7)
    for _ in range(50):
        A = rng.normal(size=(rng.integers(2, 6), rng.integers(2, 6)))
        sol = bm.bmg(bm.CostMatrixPair(A, -A))
        assert abs(sol.q1 @ A @ sol.q2 - zero_sum_value(A)) < 1e-9


def test_vjp_matches_finite_differences():
    rng = np.random.default_rng(8)
    checked = 0
    while checked < 10:
        A, B = rng.normal(size=(3, 3)), rng.normal(size=(3, 3))
        sol = bm.bmg(bm.CostMatrixPair(A, B))
        if len(sol.support1) < 2 or not sol.strict:
            continue
        q1bar, q2bar = rng.normal(size=3), rng.normal(size=3)

        def f(M, which):
            pair = bm.CostMatrixPair(M, B) if which == "A" else bm.CostMatrixPair(A, M)
            s = bm.bmg(pair)
            return q1bar @ s.q1 + q2bar @ s.q2

        gA, gB = bm.bmg_vjp(bm.CostMatrixPair(A, B), sol, q1bar, q2bar)
        assert rel_err(gA, central_difference(lambda M: f(M, "A"), A)) < 1e-5
        assert rel_err(gB, central_difference(lambda M: f(M, "B"), B)) < 1e-5
        checked += 1


def test_q1_does_not_depend_on_own_costs():
    rng = np.random.default_rng(9)
    A, B = rng.normal(size=(3, 3)), rng.normal(size=(3, 3))
    sol = bm.bmg(bm.CostMatrixPair(A, B))
    gA, _ = bm.bmg_vjp(bm.CostMatrixPair(A, B), sol, rng.normal(size=3), np.zeros(3))
    assert not gA.any()


def test_zero_sum_indirect_path_vanishes():
    # the equilibrium value of a zero-sum game is stationary in the weights
    rng = np.random.default_rng(10)
    A = rng.normal(size=(3, 3))
    sol = bm.bmg(bm.CostMatrixPair(A, -A))
    gA, gB = bm.bmg_vjp(bm.CostMatrixPair(A, -A), sol, A @ sol.q2, A.T @ sol.q1)
    assert np.max(np.abs(gA)) < 1e-10 and np.max(np.abs(gB)) < 1e-10


def test_singular_block_raises():
    A = np.array([[1.0, 1.0], [1.0, 1.0]])
    B = np.array([[0.0, 1.0], [1.0, 0.0]])
    pair = bm.CostMatrixPair(A, B)
    sol = bm.BimatrixSolution(np.array([0.5, 0.5]), np.array([0.25, 0.25]), np.array([0.5, 0.5]),
                              np.array([0.5, 0.5]), np.array([0, 1]), np.array([0, 1]), True)
    with pytest.raises(bm.NonIsolatedEquilibriumError):
        bm.bmg_vjp(pair, sol, np.zeros(2), np.array([1.0, -1.0]))


def test_text_round_trip_and_errors():
    pair = bm.CostMatrixPair([[1.5, -2.0]], [[0.25, 3.0]])
    back = bm.parse_bimatrix_text(bm.format_bimatrix_text(pair))
    np.testing.assert_array_equal(back.A, pair.A)
    np.testing.assert_array_equal(back.B, pair.B)
    for bad in ("", "2", "2 x\n1 2", "0 2", "1 2\n1 2 3", "1 1\n1 nope"):
        with pytest.raises(ValueError):
            bm.parse_bimatrix_text(bad)


games = st.integers(2, 4).flatmap(lambda n1: st.integers(2, 4).flatmap(lambda n2: st.tuples(
    arrays(float, (n1, n2), elements=st.floats(-10, 10, allow_nan=False)),
    arrays(float, (n1, n2), elements=st.floats(-10, 10, allow_nan=False)))))


@given(games)
def test_property_output_is_equilibrium(AB):
    A, B = AB
    pair = bm.CostMatrixPair(A, B)
    sol = bm.bmg(pair)
    assert abs(sol.q1.sum() - 1) < 1e-12 and abs(sol.q2.sum() - 1) < 1e-12
    assert np.all(sol.q1 >= 0) and np.all(sol.q2 >= 0)
    ok, worst = bm.verify_equilibrium(pair, sol.q1, sol.q2, tol=1e-8 * max(1.0, np.abs(A).max(), np.abs(B).max()))
    assert ok, worst


@given(games, st.floats(0.1, 10), st.floats(-5, 5))
def test_property_invariant_to_affine_cost_changes(AB, scale, shift):
    A, B = AB
    s1 = bm.bmg(bm.CostMatrixPair(A, B))
    s2 = bm.bmg(bm.CostMatrixPair(scale * A + shift, scale * B - shift))
    # same path, same equilibrium (affine maps keep every ratio test)
    pair = bm.CostMatrixPair(A, B)
    assert bm.verify_equilibrium(pair, s2.q1, s2.q2, tol=1e-7 * max(1.0, np.abs(A).max(), np.abs(B).max()))[0]
    assert s1.q1.shape == s2.q1.shape
