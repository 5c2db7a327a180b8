import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tailsink import (
    EpsSchedule,
    InfeasibleSupport,
    InvalidTemperature,
    ScoreField,
    augment_dustbin,
    build_band_support,
    random_problem,
    solve,
    stopped_base_solve,
    tail_refine,
)
from tailsink.oracle import DenseProblem, dense_forward
from tailsink.sinkhorn import (
    apply_transport,
    center,
    col_half_step,
    col_sums,
    output,
    row_half_step,
    row_sums,
    scaled_scores,
    staircase_plan,
    trace_plan,
)
from tailsink.support import augment_tensors, explicit_support

from conftest import max_abs


def dense_field(S, W=None, **kw):
    S = np.asarray(S, dtype=np.float64)
    n, m = S.shape
    sup = build_band_support(n, m, max(n, m) if W is None else W, **kw)
    return ScoreField(sup, 1.0, values=S, raw=False, block=4)


# -- scores ---------------------------------------------------------------------------------

def test_scaled_scores_unit_example():
    sup = build_band_support(1, 1, 0)
    e = np.array([[1.0, 0, 0, 0]])
    assert scaled_scores(e, e, 0.5, sup).dense()[0, 0] == pytest.approx(1.0)


def test_zero_factors_give_zero_scores():
    sup = build_band_support(3, 3, 3)
    assert not scaled_scores(np.zeros((3, 2)), np.zeros((3, 2)), 1.0, sup).dense().any()


def test_scores_scale_inversely_with_epsilon(gen):
    sup = build_band_support(6, 6, 2)
    Q, K = gen.standard_normal((6, 3)), gen.standard_normal((6, 3))
    s1 = scaled_scores(Q, K, 1.0, sup).dense()
    s2 = scaled_scores(Q, K, 2.0, sup).dense()
    on = sup.dense()
    np.testing.assert_allclose(s2[on], s1[on] / 2, rtol=1e-15)


@pytest.mark.parametrize("eps", [0.0, -1.0])
def test_nonpositive_epsilon_rejected(eps):
    with pytest.raises(InvalidTemperature):
        scaled_scores(np.ones((2, 2)), np.ones((2, 2)), eps, build_band_support(2, 2, 1))


# -- half-steps and centering ---------------------------------------------------------------

def test_row_half_step_examples():
    assert row_half_step(dense_field([[0.0]]), np.zeros(1))[0] == 0.0
    u = row_half_step(dense_field([[0.0, 0.0]]), np.zeros(2))
    assert u[0] == pytest.approx(-math.log(2))
    # single active edge in the row: u = -(S + v)
    f = dense_field([[3.0, 0.0], [0.0, 0.0]], W=0)
    assert row_half_step(f, np.array([-1.0, 0.0]))[0] == pytest.approx(-2.0)


def test_col_half_step_examples():
    v = col_half_step(dense_field([[0.0], [0.0]]), np.full(2, -math.log(2)))
    assert v[0] == pytest.approx(0.0, abs=1e-15)
    f = dense_field([[-1.0, 0.0], [0.0, 0.0]], W=0)
    assert col_half_step(f, np.array([2.0, 0.0]))[0] == pytest.approx(-1.0)


def test_half_steps_are_transposes(gen):
    S = gen.standard_normal((5, 5))
    S = S + S.T
    w = gen.standard_normal(5)
    np.testing.assert_allclose(row_half_step(dense_field(S), w), col_half_step(dense_field(S.T), w), atol=1e-14)


def test_half_step_infeasible_row():
    f = dense_field([[0.0, 0.0], [0.0, 0.0]])
    with pytest.raises(InfeasibleSupport):
        row_half_step(f, np.array([-np.inf, -np.inf]))


def test_center_example():
    u, v, c = center(np.array([1.0, 3.0]), np.zeros(2), np.ones(2, bool))
    assert c == 2.0
    np.testing.assert_array_equal(u, [-1, 1])
    np.testing.assert_array_equal(v, [2, 2])


@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12), st.lists(st.floats(-50, 50), min_size=1, max_size=12))
def test_center_preserves_pair_sums(u, v):
    u, v = np.array(u), np.array(v)
    u2, v2, c = center(u, v, np.ones(u.size, bool))
    assert abs(u2.mean()) <= 1e-12 * (1 + np.abs(u).max())
    np.testing.assert_allclose(u2[:, None] + v2[None, :], u[:, None] + v[None, :], atol=1e-12)
    u3, v3, c3 = center(u2, v2, np.ones(u.size, bool))
    assert abs(c3) <= 1e-12 * (1 + np.abs(u).max())


# -- base solve and tail --------------------------------------------------------------------

@pytest.mark.parametrize("n", [1, 2, 5])
def test_one_step_on_zero_scores(n):
    f = dense_field(np.zeros((n, n)))
    tr = stopped_base_solve(f, 1)
    # the row half-step gives -ln n everywhere; centering moves it onto v
    np.testing.assert_allclose(tr.u[1], 0.0, atol=1e-15)
    np.testing.assert_allclose(tr.v[1], -math.log(n), atol=1e-15)
    assert tr.gauge(1) == pytest.approx(-math.log(n))
    np.testing.assert_allclose(trace_plan(f, tr, 1, 1).dense(), 1.0 / n, atol=1e-15)


def test_cold_start_when_T_is_zero():
    tr = stopped_base_solve(dense_field(np.ones((3, 3))), 0)
    assert tr.T == 0 and len(tr.u) == 1
    assert not tr.u[0].any() and not tr.v[0].any()
    assert tr.gauge(0) == 0.0


def test_fixed_point_persists_in_tail():
    f = dense_field(np.zeros((4, 4)))
    tr = solve(f, 3, 3)
    for k in range(4):
        u, v = tr.tail(k)
        np.testing.assert_allclose(u, tr.u[tr.T], atol=1e-15)
        np.testing.assert_allclose(v, tr.v[tr.T], atol=1e-15)


def test_two_step_tail_on_uniform_two_by_two():
    f = dense_field(np.zeros((2, 2)))
    tr = solve(f, 1, 2)
    T = tr.T
    for a, b in [(T + 2, T + 2), (T + 2, T + 1), (T + 1, T + 1), (T + 1, T)]:
        np.testing.assert_allclose(trace_plan(f, tr, a, b).dense(), 0.5, atol=1e-15)


def test_tail_contracts_on_random_instance():
    p = random_problem(64, 16, T=4, R=2, seed=5)
    _, tr = p.forward()
    (u0, _), (u1, _), (u2, _) = (tr.tail(k) for k in range(3))
    assert np.abs(u2 - u1).max() < np.abs(u1 - u0).max()


def test_tail_refine_restarts_from_base():
    p = random_problem(20, 4, T=5, R=3, seed=2, block=8)
    _, tr = p.forward()
    again = tail_refine(p.score(), tr, 3)
    for a, b in zip(again.u, tr.u):
        np.testing.assert_array_equal(a, b)


def test_schedule_stages_and_final_temperature():
    p = random_problem(16, 4, T=6, R=2, seed=0, block=8, schedule=[(4.0, 2), (2.0, 2), (1.0, 2)])
    _, tr = p.forward()
    assert tr.epsilons[1:] == [4.0, 4.0, 2.0, 2.0, 1.0, 1.0, 1.0, 1.0]
    assert [tr.stage(t) for t in range(1, 9)] == [0, 0, 1, 1, 2, 2, 2, 2]
    with pytest.raises(ValueError):
        solve(p.score(), 6, 2, EpsSchedule(((4.0, 3), (2.0, 3))))


# -- unit-target invariants -----------------------------------------------------------------

def check_unit_targets(score, trace, tol):
    rows, cols = score.row_valid, score.col_valid
    for t in range(1, trace.n_steps + 1):
        s = score if trace.epsilons[t] == score.epsilon else score.with_epsilon(trace.epsilons[t])
        after_row = trace_plan(s, trace, t, t - 1)
        after_col = trace_plan(s, trace, t, t)
        assert np.abs(row_sums(after_row)[rows] - 1).max() <= tol
        assert np.abs(col_sums(after_col)[cols] - 1).max() <= tol
        assert not row_sums(after_col)[~rows].any() and not col_sums(after_col)[~cols].any()


@given(L=st.integers(2, 40), W=st.integers(1, 12), seed=st.integers(0, 2**16), drop=st.floats(0, 0.4))
def test_half_step_plans_have_unit_marginals(L, W, seed, drop):
    g = np.random.default_rng(seed)
    rows = g.random(L) >= drop
    rows[0] = True
    try:
        p = random_problem(L, W, d=4, T=4, R=2, seed=seed, block=8, row_mask=rows)
    except InfeasibleSupport:
        return
    _, tr = p.forward()
    check_unit_targets(p.score(), tr, 1e-12)


def test_unit_marginals_under_schedule():
    p = random_problem(32, 6, T=6, R=2, seed=1, block=8, schedule=[(3.0, 3), (1.0, 3)])
    _, tr = p.forward()
    check_unit_targets(p.score(), tr, 1e-12)


# -- gauge ledger ---------------------------------------------------------------------------

def test_centered_and_raw_same_time_plans_agree():
    p = random_problem(48, 10, T=8, R=2, seed=11, block=16)
    s = p.score()
    cen, raw = solve(s, 8, 2, centered=True), solve(s, 8, 2, centered=False)
    for t in range(cen.n_steps + 1):
        assert trace_plan(s, cen, t, t).max_abs_diff(trace_plan(s, raw, t, t)) <= 1e-12


def test_mixed_time_plans_need_the_gauge_factor():
    p = random_problem(16, 4, T=5, R=2, seed=4, block=8)
    s = p.score()
    cen, raw = solve(s, 5, 2, centered=True), solve(s, 5, 2, centered=False)
    for t in range(2, cen.n_steps + 1):
        truth = trace_plan(s, raw, t, t - 1, ungauged=False)
        fixed = trace_plan(s, cen, t, t - 1, ungauged=True)
        bare = trace_plan(s, cen, t, t - 1, ungauged=False)
        assert truth.max_abs_diff(fixed) <= 1e-12
        assert cen.log_gauge(t, t - 1) != 0.0
        assert truth.max_abs_diff(bare) > 1e-6


def test_same_time_plan_is_gauge_free():
    p = random_problem(12, 3, T=4, R=1, seed=9, block=4)
    s = p.score()
    _, tr = p.forward()
    assert tr.log_gauge(3, 3) == 0.0
    a = trace_plan(s, tr, 3, 3, ungauged=True)
    b = staircase_plan(s, tr.u[3], tr.v[3])
    assert a.max_abs_diff(b) == 0.0


# -- transport output -----------------------------------------------------------------------

def test_uniform_plan_output():
    f = dense_field(np.zeros((2, 2)))
    O = apply_transport(f, np.zeros(2), np.full(2, -math.log(2)), np.eye(2))
    np.testing.assert_allclose(O, 0.5, atol=1e-15)


def test_diagonal_support_reproduces_values(gen):
    sup = build_band_support(5, 5, 0)
    f = ScoreField(sup, 1.0, values=np.zeros((5, 5)), raw=False)
    tr = solve(f, 1, 0)
    V = gen.standard_normal((5, 3))
    np.testing.assert_allclose(output(f, tr, V), V, atol=1e-15)


@pytest.mark.parametrize("seed", range(50))
def test_blockwise_matches_dense(seed):
    g = np.random.default_rng(seed)
    L = int(g.integers(4, 48))
    W = int(g.integers(1, L))
    p = random_problem(L, W, d=4, T=int(g.integers(0, 8)), R=int(g.integers(0, 4)), seed=seed,
                       block=int(g.integers(2, 17)))
    O, _ = p.forward()
    Od, _ = dense_forward(DenseProblem.from_problem(p))
    assert max_abs(O, Od) <= 1e-12


def test_float32_forward_matches_dense():
    p = random_problem(32, 8, seed=7, dtype="float32", block=8)
    O, _ = p.forward()
    assert O.dtype == np.float32
    Od, _ = dense_forward(DenseProblem.from_problem(p))
    assert max_abs(O, Od) <= 1e-6


def test_tile_size_does_not_change_output():
    a = random_problem(40, 7, seed=3, block=4)
    b = random_problem(40, 7, seed=3, block=32)
    assert max_abs(a.forward()[0], b.forward()[0]) <= 1e-13


# -- dustbin augmentation -------------------------------------------------------------------

def dustbin_pair(L=12, W=2, B=4, seed=0):
    g = np.random.default_rng(seed)
    Q, K, V = g.standard_normal((L, 4)), g.standard_normal((L, 4)), g.standard_normal((L, 3))
    aug = augment_dustbin(build_band_support(L, L, W), B)
    Qa = augment_tensors(Q, g.standard_normal(4), B)
    Ka = augment_tensors(K, g.standard_normal(4), B)
    Va = augment_tensors(V, np.zeros(3), B)
    s = aug.support
    manual = explicit_support(s.dense(), s.n_rows, s.n_cols, row_mask=s.row_active, col_mask=s.col_active)
    return aug, ScoreField(s, 1.0, q=Qa, k=Ka, block=5), ScoreField(manual, 1.0, q=Qa, k=Ka, block=5), Va


def test_dustbin_equals_manual_explicit_support():
    aug, fa, fm, Va = dustbin_pair()
    ta, tm = solve(fa, 10, 2), solve(fm, 10, 2)
    assert max_abs(output(fa, ta, Va), output(fm, tm, Va)) <= 1e-12
    for a, b in zip(ta.v, tm.v):
        assert max_abs(a, b) <= 1e-12


def test_dustbin_fillers_carry_no_mass():
    aug, fa, _, _ = dustbin_pair(L=9, W=1, B=3, seed=2)
    tr = solve(fa, 6, 2)
    for t in range(1, tr.n_steps + 1):
        P = trace_plan(fa, tr, t, t).dense()
        assert not P[aug.filler_rows].any() and not P[:, aug.filler_cols].any()
    check_unit_targets(fa, tr, 1e-12)


def test_dustbin_matches_dense_oracle():
    aug, fa, _, Va = dustbin_pair(L=10, W=3, B=2, seed=1)
    tr = solve(fa, 7, 2)
    from tailsink.losses import LossSpec

    dp = DenseProblem(fa.q, fa.k, Va, aug.support.dense(), LossSpec.linear(np.zeros((12, 3))), 1.0, 7, 2)
    Od, _ = dense_forward(dp)
    assert max_abs(output(fa, tr, Va), Od) <= 1e-12
