import numpy as np
import pytest
from hypothesis import given, strategies as st

from deepkoopman import numkit
from oracles import cubic_char_roots, multiset_distance, pinv_lapack, qp_grid_refine, right_lstsq_formula


def penrose_residual(m, p):
    return max(np.abs(m @ p @ m - m).max(), np.abs(p @ m @ p - p).max(),
               np.abs((m @ p).T - m @ p).max(), np.abs((p @ m).T - p @ m).max())


# -- pinv ---------------------------------------------------------------------

def test_pinv_identity():
    np.testing.assert_allclose(numkit.pinv(np.eye(3)), np.eye(3), atol=1e-15)


def test_pinv_zero_matrix():
    out = numkit.pinv(np.zeros((2, 3)))
    assert out.shape == (3, 2) and not out.any()


def test_pinv_diagonal_with_zero():
    np.testing.assert_allclose(numkit.pinv(np.diag([2.0, 0.0])), np.diag([0.5, 0.0]), atol=1e-15)


def test_pinv_rejects_non_finite():
    with pytest.raises(ValueError):
        numkit.pinv(np.array([[1.0, np.nan]]))


@pytest.mark.parametrize("shape", [(5, 3), (3, 5), (8, 8), (40, 13)])
def test_pinv_penrose_identities_and_lapack_route(rng, shape):
    m = rng.normal(size=shape)
    p = numkit.pinv(m)
    assert penrose_residual(m, p) < 1e-8
    np.testing.assert_allclose(p, pinv_lapack(m), atol=1e-10)


def test_pinv_rank_deficient_matches_lapack(rng):
    m = rng.normal(size=(6, 2)) @ rng.normal(size=(2, 5))
    np.testing.assert_allclose(numkit.pinv(m), pinv_lapack(m), atol=1e-10)


def test_pinv_tolerance_truncates():
    m = np.diag([1.0, 1e-3])
    np.testing.assert_allclose(numkit.pinv(m, tol=1e-2), np.diag([1.0, 0.0]))


@given(st.integers(2, 7), st.integers(2, 7), st.integers(0, 2**32 - 1))
def test_pinv_is_an_involution_on_well_conditioned_full_rank(r, c, seed):
    m = np.random.default_rng(seed).normal(size=(r, c))
    if np.linalg.cond(m) > 1e6:
        return
    np.testing.assert_allclose(numkit.pinv(numkit.pinv(m)), m, atol=1e-8)


def test_svd_reconstructs(rng):
    m = rng.normal(size=(7, 4))
    u, s, vt = numkit.svd(m)
    np.testing.assert_allclose((u * s) @ vt, m, atol=1e-12)
    np.testing.assert_allclose(s, np.linalg.svd(m, compute_uv=False), atol=1e-12)
    assert np.all(np.diff(s) <= 0)


# -- lstsq_right -------------------------------------------------------------

def test_lstsq_right_square_consistent(rng):
    a = rng.normal(size=(4, 4))
    w = rng.normal(size=(4, 4))
    np.testing.assert_allclose(numkit.lstsq_right(a @ w, w), a, atol=1e-10)


def test_lstsq_right_duplicated_rows_matches_formula(rng):
    w = rng.normal(size=(3, 30))
    w = np.vstack([w, w[:1]])
    v = rng.normal(size=(5, 30))
    np.testing.assert_allclose(numkit.lstsq_right(v, w), right_lstsq_formula(v, w), atol=1e-8)


def test_lstsq_right_zero_target(rng):
    assert not numkit.lstsq_right(np.zeros((2, 9)), rng.normal(size=(3, 9))).any()


def test_lstsq_right_dimension_mismatch():
    with pytest.raises(ValueError):
        numkit.lstsq_right(np.zeros((2, 5)), np.zeros((3, 4)))


@given(st.integers(0, 2**32 - 1))
def test_lstsq_right_is_locally_optimal(seed):
    r = np.random.default_rng(seed)
    w = r.normal(size=(4, 12))
    v = r.normal(size=(3, 12))
    m = numkit.lstsq_right(v, w)
    base = np.linalg.norm(v - m @ w)
    for _ in range(100):
        d = r.normal(size=m.shape)
        d *= 1e-3 / np.linalg.norm(d)
        assert base <= np.linalg.norm(v - (m + d) @ w) + 1e-12


# -- eigvals -----------------------------------------------------------------

def test_eigvals_diagonal():
    assert multiset_distance(numkit.eigvals(np.diag([1.0, 2.0, 3.0])), [1, 2, 3]) < 1e-12


def test_eigvals_rotation():
    assert multiset_distance(numkit.eigvals(np.array([[0.0, -1.0], [1.0, 0.0]])), [1j, -1j]) < 1e-12


def test_eigvals_matches_cubic_formula_frozen():
    a = np.random.default_rng(7).normal(size=(3, 3))
    frozen = [0.089694359105077931, complex(-0.51767075473532377, 1.2880513226609399),
              complex(-0.51767075473532377, -1.2880513226609399)]
    assert multiset_distance(cubic_char_roots(a), frozen) < 1e-12
    assert multiset_distance(numkit.eigvals(a), frozen) < 1e-8


def test_eigvals_rejects_non_square():
    with pytest.raises(ValueError):
        numkit.eigvals(np.zeros((2, 3)))


def test_eigvals_large_random_against_lapack(rng):
    a = rng.normal(size=(64, 64))
    ev = numkit.eigvals(a)
    ref = np.linalg.eigvals(a)
    assert multiset_distance(ev, ref) < 1e-8 * max(1.0, np.abs(ref).max())


@given(st.integers(1, 12), st.integers(0, 2**32 - 1))
def test_eigvals_transpose_invariant(n, seed):
    a = np.random.default_rng(seed).normal(size=(n, n))
    scale = max(1.0, np.abs(np.linalg.eigvals(a)).max())
    assert multiset_distance(numkit.eigvals(a), numkit.eigvals(a.T)) < 1e-8 * scale


# -- QP -----------------------------------------------------------------------

def scalar_problem(upper=np.inf):
    # (x - 1)^2 = x^2 - 2x + 1 with slack row/col rho = 10
    return numkit.QpProblem(np.diag([1.0, 10.0]), np.array([-2.0, 0.0]),
                            np.array([-np.inf]), np.array([np.inf]),
                            np.array([[1.0]]), np.array([-np.inf]), np.array([upper]), 1.0)


def test_qp_unconstrained_scalar():
    sol = numkit.qp_solve(scalar_problem())
    assert sol.decision[0] == pytest.approx(1.0, abs=1e-12)
    assert sol.slack == pytest.approx(0.0, abs=1e-12)
    assert sol.objective == pytest.approx(0.0, abs=1e-12)


def test_qp_clipped_scalar():
    sol = numkit.qp_solve(scalar_problem(upper=0.5))
    assert sol.decision[0] == pytest.approx(0.5, abs=1e-12)
    assert sol.objective == pytest.approx(0.25, abs=1e-12)


def test_qp_slack_trades_against_increment_bound():
    # two decisions, increment bound |du| <= 0.2 tighter than the optimum (1, -0.5)
    h = np.diag([1.0, 1.0, 10.0])
    g = np.array([-2.0, 1.0, 0.0])
    p = numkit.QpProblem(h, g, np.full(2, -0.2), np.full(2, 0.2), constant=1.25)
    sol = numkit.qp_solve(p)

    def obj(z):
        return np.einsum("ij,jk,ik->i", z, h, z) + z @ g + 1.25

    def feas(z):
        return (z[:, 2] >= 0) & np.all(np.abs(z[:, :2]) <= 0.2 + z[:, 2:3], axis=1)

    _, f = qp_grid_refine(obj, feas, [-1.5, -1.5, 0.0], [1.5, 1.5, 1.5])
    assert sol.objective == pytest.approx(f, abs=1e-4)
    assert sol.slack > 0  # the penalty is cheap enough to widen the bound
    # analytic optimum: d1 = 0.2 + e, 10 e = (1 - d1) with shared slack on both rows
    assert numkit.kkt_residual(p, np.append(sol.decision, sol.slack), sol.active) < 1e-8


def test_qp_infeasible_hard_rows():
    p = numkit.QpProblem(np.eye(3), np.zeros(3), np.full(2, -1.0), np.full(2, 1.0),
                         np.array([[1.0, 0.0], [1.0, 0.0]]), np.array([1.0, -np.inf]), np.array([np.inf, 0.0]))
    with pytest.raises(numkit.InfeasibleError):
        numkit.qp_solve(p)


def test_qp_iteration_limit_carries_iterate():
    h = np.diag([1.0, 1.0, 1.0, 10.0])
    p = numkit.QpProblem(h, np.array([-5.0, -5.0, -5.0, 0.0]), np.full(3, -0.1), np.full(3, 0.1))
    with pytest.raises(numkit.ConvergenceError) as err:
        numkit.qp_solve(p, max_iter=1)
    assert err.value.last is not None


def test_qp_problem_validation():
    with pytest.raises(ValueError):
        numkit.QpProblem(np.array([[1.0, 2.0], [0.0, 1.0]]), np.zeros(2), np.zeros(1), np.zeros(1))
    with pytest.raises(ValueError):
        numkit.QpProblem(np.eye(2), np.zeros(2), np.ones(1), np.zeros(1))


@given(st.integers(0, 2**32 - 1))
def test_qp_beats_random_feasible_points(seed):
    r = np.random.default_rng(seed)
    d = 3
    m = r.normal(size=(d, d))
    h = np.zeros((d + 1, d + 1))
    h[:d, :d] = m @ m.T + 0.1 * np.eye(d)
    h[d, d] = 5.0
    g = np.append(r.normal(size=d) * 3, 0.0)
    lo, hi = -r.uniform(0.1, 1, d), r.uniform(0.1, 1, d)
    cum = numkit.cumulative_map(1, d)
    p = numkit.QpProblem(h, g, lo, hi, cum, np.full(d, -1.5), np.full(d, 1.5))
    sol = numkit.qp_solve(p)
    z = np.append(sol.decision, sol.slack)
    gr, hr = p.inequality_rows()
    assert np.all(gr @ z <= hr + 1e-9)
    eps = r.uniform(0, 1, 1000)
    pts = r.uniform(lo - 1, hi + 1, (1000, d))
    pts = np.clip(pts, lo - eps[:, None], hi + eps[:, None])
    cs = pts @ cum.T
    ok = np.all(np.abs(cs) <= 1.5, axis=1)
    for x, e in zip(pts[ok], eps[ok]):
        assert sol.objective <= p.objective(np.append(x, e)) + 1e-9


def test_qp_slack_inactive_when_interior(rng):
    h = np.diag([2.0, 3.0, 10.0])
    g = np.array([-0.2, 0.3, 0.0])
    sol = numkit.qp_solve(numkit.QpProblem(h, g, np.full(2, -1.0), np.full(2, 1.0)))
    assert sol.slack <= 1e-8
    np.testing.assert_allclose(sol.decision, [0.05, -0.05], atol=1e-12)


def test_cumulative_map_shape():
    s = numkit.cumulative_map(2, 3)
    assert s.shape == (6, 6)
    np.testing.assert_array_equal(s @ np.ones(6), [1, 1, 2, 2, 3, 3])
