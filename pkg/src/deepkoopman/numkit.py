"""Dense linear-algebra kernels: Jacobi SVD, pseudoinverse, least squares,
Hessenberg/QR eigenvalues and a small active-set QP solver.

Matrices are plain float64 ``numpy.ndarray`` objects.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

EPS = np.finfo(float).eps


class ConvergenceError(RuntimeError):
    """An iterative kernel hit its iteration limit.

    ``last`` carries the last iterate so callers can inspect or fall back.
    """

    def __init__(self, message, last=None):
        super().__init__(message)
        self.last = last


class InfeasibleError(RuntimeError):
    pass


def _as_finite_matrix(m, name="matrix"):
    a = np.array(m, dtype=float, copy=True)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite entries")
    return a


# ---------------------------------------------------------------------------
# SVD (one-sided Jacobi)
# ---------------------------------------------------------------------------

def _round_robin(n):
    """Disjoint index pairs for each round of a cyclic tournament."""
    players = list(range(n)) + ([-1] if n % 2 else [])
    k = len(players)
    rounds = []
    for _ in range(k - 1):
        pairs = [(players[i], players[k - 1 - i]) for i in range(k // 2)]
        pairs = [(min(a, b), max(a, b)) for a, b in pairs if a >= 0 and b >= 0]
        rounds.append((np.array([a for a, _ in pairs], dtype=int),
                       np.array([b for _, b in pairs], dtype=int)))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def svd(m, max_sweeps=60):
    """Thin SVD ``m = U @ diag(s) @ Vt`` by one-sided Jacobi rotations.

    Singular values are returned in descending order. Columns of ``U`` that
    belong to zero singular values are left as zero vectors.
    """
    a = _as_finite_matrix(m)
    transposed = a.shape[0] < a.shape[1]
    if transposed:
        a = a.T
    rows, cols = a.shape
    work = a.copy()
    v = np.eye(cols)
    rounds = _round_robin(cols) if cols > 1 else []
    for _ in range(max_sweeps):
        rotated = False
        for p, q in rounds:
            if p.size == 0:
                continue
            wp, wq = work[:, p], work[:, q]
            alpha = np.einsum("ij,ij->j", wp, wp)
            beta = np.einsum("ij,ij->j", wq, wq)
            gamma = np.einsum("ij,ij->j", wp, wq)
            active = np.abs(gamma) > EPS * np.sqrt(alpha * beta)
            active &= gamma != 0.0
            if not np.any(active):
                continue
            rotated = True
            p, q = p[active], q[active]
            alpha, beta, gamma = alpha[active], beta[active], gamma[active]
            zeta = (beta - alpha) / (2.0 * gamma)
            t = np.sign(zeta) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            t[zeta == 0.0] = 1.0
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            for mat in (work, v):
                mp, mq = mat[:, p].copy(), mat[:, q]
                mat[:, p] = c * mp - s * mq
                mat[:, q] = s * mp + c * mq
        if not rotated:
            break
    else:
        raise ConvergenceError("Jacobi SVD did not converge", last=work)
    sv = np.sqrt(np.einsum("ij,ij->j", work, work))
    order = np.argsort(-sv, kind="stable")
    sv, work, v = sv[order], work[:, order], v[:, order]
    u = np.zeros_like(work)
    nz = sv > 0.0
    u[:, nz] = work[:, nz] / sv[nz]
    if transposed:
        return v, sv, u.T
    return u, sv, v.T


def pinv(m, tol=0.0):
    """Moore-Penrose pseudoinverse via the Jacobi SVD.

    Singular values at or below ``tol`` are treated as zero. ``tol = 0``
    selects ``max(rows, cols) * sigma_max * eps``.
    """
    if tol < 0:
        raise ValueError("tol must be nonnegative")
    a = _as_finite_matrix(m)
    if not np.any(a):
        return np.zeros((a.shape[1], a.shape[0]))
    u, s, vt = svd(a)
    if tol == 0.0:
        tol = max(a.shape) * s[0] * EPS
    keep = s > tol
    return (vt[keep].T / s[keep]) @ u[:, keep].T


def lstsq_right(v, w, tol=0.0):
    """Minimum-norm ``M`` minimizing ``||V - M W||_F``: ``V W^T (W W^T)^+``."""
    v = _as_finite_matrix(v, "V")
    w = _as_finite_matrix(w, "W")
    if v.shape[1] != w.shape[1]:
        raise ValueError(f"snapshot count mismatch: V has {v.shape[1]}, W has {w.shape[1]}")
    return v @ w.T @ pinv(w @ w.T, tol)


# ---------------------------------------------------------------------------
# Eigenvalues
# ---------------------------------------------------------------------------

def hessenberg(m):
    """Upper Hessenberg form by Householder similarity transforms."""
    h = _as_finite_matrix(m)
    n = h.shape[0]
    for k in range(n - 2):
        x = h[k + 1:, k].copy()
        alpha = np.linalg.norm(x)
        if alpha == 0.0:
            continue
        if x[0] > 0:
            alpha = -alpha
        x[0] -= alpha
        vn = np.linalg.norm(x)
        if vn == 0.0:
            continue
        x /= vn
        h[k + 1:, k:] -= 2.0 * np.outer(x, x @ h[k + 1:, k:])
        h[:, k + 1:] -= 2.0 * np.outer(h[:, k + 1:] @ x, x)
        h[k + 2:, k] = 0.0
    return h


def _balance(a):
    """Diagonal similarity scaling that evens out row/column norms."""
    a = a.copy()
    n = a.shape[0]
    radix = 2.0
    done = False
    while not done:
        done = True
        for i in range(n):
            c = np.sum(np.abs(a[:, i])) - abs(a[i, i])
            r = np.sum(np.abs(a[i, :])) - abs(a[i, i])
            if c == 0.0 or r == 0.0:
                continue
            g, f, s = r / radix, 1.0, c + r
            while c < g:
                f *= radix
                c *= radix * radix
            g = r * radix
            while c > g:
                f /= radix
                c /= radix * radix
            if (c + r) / f < 0.95 * s:
                done = False
                a[i, :] /= f
                a[:, i] *= f
    return a


def eigvals(m, max_iter=60):
    """All eigenvalues of a square matrix (Francis double-shift QR on the
    Hessenberg form), as complex numbers in no particular order."""
    a0 = _as_finite_matrix(m)
    n = a0.shape[0]
    if a0.shape[1] != n:
        raise ValueError(f"eigvals needs a square matrix, got {a0.shape}")
    if n > 64:
        raise ValueError("eigvals supports dimension <= 64")
    h = hessenberg(_balance(a0))
    # 1-based working copy mirrors the classic EISPACK hqr indexing
    a = [[0.0] * (n + 1)] + [[0.0] + [float(x) for x in row] for row in h]
    wr = [0.0] * (n + 1)
    wi = [0.0] * (n + 1)
    anorm = sum(abs(a[i][j]) for i in range(1, n + 1) for j in range(max(i - 1, 1), n + 1))
    nn = n
    t = 0.0
    while nn >= 1:
        its = 0
        while True:
            l = 1
            for ll in range(nn, 1, -1):
                s = abs(a[ll - 1][ll - 1]) + abs(a[ll][ll])
                if s == 0.0:
                    s = anorm
                if abs(a[ll][ll - 1]) + s == s:
                    a[ll][ll - 1] = 0.0
                    l = ll
                    break
            x = a[nn][nn]
            if l == nn:
                wr[nn], wi[nn] = x + t, 0.0
                nn -= 1
            else:
                y = a[nn - 1][nn - 1]
                w = a[nn][nn - 1] * a[nn - 1][nn]
                if l == nn - 1:
                    p = 0.5 * (y - x)
                    q = p * p + w
                    z = math.sqrt(abs(q))
                    x += t
                    if q >= 0.0:
                        z = p + math.copysign(z, p)
                        wr[nn - 1] = wr[nn] = x + z
                        if z:
                            wr[nn] = x - w / z
                        wi[nn - 1] = wi[nn] = 0.0
                    else:
                        wr[nn - 1] = wr[nn] = x + p
                        wi[nn] = z
                        wi[nn - 1] = -z
                    nn -= 2
                else:
                    if its >= max_iter:
                        raise ConvergenceError("QR iteration did not converge", last=np.array(a)[1:, 1:])
                    if its and its % 10 == 0:
                        # exceptional shift
                        t += x
                        for i in range(1, nn + 1):
                            a[i][i] -= x
                        s = abs(a[nn][nn - 1]) + abs(a[nn - 1][nn - 2])
                        y = x = 0.75 * s
                        w = -0.4375 * s * s
                    its += 1
                    mm = nn - 2
                    while mm >= l:
                        z = a[mm][mm]
                        r = x - z
                        s = y - z
                        p = (r * s - w) / a[mm + 1][mm] + a[mm][mm + 1]
                        q = a[mm + 1][mm + 1] - z - r - s
                        r = a[mm + 2][mm + 1]
                        s = abs(p) + abs(q) + abs(r)
                        p /= s
                        q /= s
                        r /= s
                        if mm == l:
                            break
                        u = abs(a[mm][mm - 1]) * (abs(q) + abs(r))
                        v = abs(p) * (abs(a[mm - 1][mm - 1]) + abs(z) + abs(a[mm + 1][mm + 1]))
                        if u + v == v:
                            break
                        mm -= 1
                    for i in range(mm + 2, nn + 1):
                        a[i][i - 2] = 0.0
                        if i != mm + 2:
                            a[i][i - 3] = 0.0
                    for k in range(mm, nn):
                        if k != mm:
                            p = a[k][k - 1]
                            q = a[k + 1][k - 1]
                            r = a[k + 2][k - 1] if k != nn - 1 else 0.0
                            x = abs(p) + abs(q) + abs(r)
                            if x != 0.0:
                                p /= x
                                q /= x
                                r /= x
                        s = math.copysign(math.sqrt(p * p + q * q + r * r), p)
                        if s != 0.0:
                            if k == mm:
                                if l != mm:
                                    a[k][k - 1] = -a[k][k - 1]
                            else:
                                a[k][k - 1] = -s * x
                            p += s
                            x = p / s
                            y = q / s
                            z = r / s
                            q /= p
                            r /= p
                            for j in range(k, nn + 1):
                                p = a[k][j] + q * a[k + 1][j]
                                if k != nn - 1:
                                    p += r * a[k + 2][j]
                                    a[k + 2][j] -= p * z
                                a[k + 1][j] -= p * y
                                a[k][j] -= p * x
                            mmin = min(nn, k + 3)
                            for i in range(l, mmin + 1):
                                p = x * a[i][k] + y * a[i][k + 1]
                                if k != nn - 1:
                                    p += z * a[i][k + 2]
                                    a[i][k + 2] -= p * r
                                a[i][k + 1] -= p * q
                                a[i][k] -= p
            if not (l < nn - 1):
                break
    return np.array([complex(wr[i], wi[i]) for i in range(1, n + 1)])


# ---------------------------------------------------------------------------
# Quadratic programming
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class QpProblem:
    """``min z^T H z + g^T z + c`` over ``z = [d; eps]``.

    Constraints:

    * ``lower - eps <= d <= upper + eps`` (slack-widened increment bounds),
    * ``cum_lower <= cum_map @ d <= cum_upper`` (hard rows, e.g. absolute
      control bounds expressed through cumulative sums of increments),
    * ``eps >= 0``.

    Infinite bounds are allowed and simply dropped.
    """

    hessian: np.ndarray
    linear: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    cum_map: np.ndarray | None = None
    cum_lower: np.ndarray | None = None
    cum_upper: np.ndarray | None = None
    constant: float = 0.0
    slack_lower: float = field(default=0.0, init=False)

    def __post_init__(self):
        h = np.asarray(self.hessian, dtype=float)
        d = h.shape[0] - 1
        if h.shape != (d + 1, d + 1):
            raise ValueError("hessian must be square")
        if not np.allclose(h, h.T, rtol=0.0, atol=1e-12 * max(1.0, np.abs(h).max())):
            raise ValueError("hessian must be symmetric")
        if np.shape(self.linear) != (d + 1,):
            raise ValueError("linear term must have length d + 1")
        if np.shape(self.lower) != (d,) or np.shape(self.upper) != (d,):
            raise ValueError("increment bounds must have length d")
        if np.any(np.asarray(self.lower) > np.asarray(self.upper)):
            raise ValueError("lower bound exceeds upper bound")
        if self.cum_map is not None:
            s = np.asarray(self.cum_map)
            if s.ndim != 2 or s.shape[1] != d:
                raise ValueError("cum_map must have d columns")
            if np.shape(self.cum_lower) != (s.shape[0],) or np.shape(self.cum_upper) != (s.shape[0],):
                raise ValueError("cumulative bounds must match cum_map rows")
            if np.any(np.asarray(self.cum_lower) > np.asarray(self.cum_upper)):
                raise ValueError("cumulative lower bound exceeds upper bound")

    @property
    def n_decisions(self):
        return self.hessian.shape[0] - 1

    def objective(self, z):
        z = np.asarray(z, dtype=float)
        return float(z @ self.hessian @ z + self.linear @ z + self.constant)

    def inequality_rows(self):
        """All constraints as ``G z <= h`` (finite rows only)."""
        d = self.n_decisions
        rows, rhs = [], []
        eye = np.eye(d)
        lo, up = np.asarray(self.lower, float), np.asarray(self.upper, float)
        for i in range(d):
            if np.isfinite(up[i]):
                rows.append(np.append(eye[i], -1.0))
                rhs.append(up[i])
            if np.isfinite(lo[i]):
                rows.append(np.append(-eye[i], -1.0))
                rhs.append(-lo[i])
        if self.cum_map is not None:
            s = np.asarray(self.cum_map, float)
            cl, cu = np.asarray(self.cum_lower, float), np.asarray(self.cum_upper, float)
            for i in range(s.shape[0]):
                if np.isfinite(cu[i]):
                    rows.append(np.append(s[i], 0.0))
                    rhs.append(cu[i])
                if np.isfinite(cl[i]):
                    rows.append(np.append(-s[i], 0.0))
                    rhs.append(-cl[i])
        slack_row = np.zeros(d + 1)
        slack_row[-1] = -1.0
        rows.append(slack_row)
        rhs.append(-self.slack_lower)
        return np.array(rows), np.array(rhs)


@dataclass(frozen=True)
class QpSolution:
    decision: np.ndarray
    slack: float
    objective: float
    iterations: int
    active: tuple


def cumulative_map(m, n_steps):
    """Block lower-triangular map from stacked increments to cumulative sums."""
    return np.kron(np.tril(np.ones((n_steps, n_steps))), np.eye(m))


def _initial_point(p, g_rows, h_rhs):
    d = p.n_decisions
    z = np.zeros(d + 1)
    if p.cum_map is not None:
        s = np.asarray(p.cum_map, float)
        cl, cu = np.asarray(p.cum_lower, float), np.asarray(p.cum_upper, float)
        if np.any(cl > 0.0) or np.any(cu < 0.0):
            # zero increments violate a hard row: phase-1 LP for any feasible point
            from scipy.optimize import linprog

            fin_u, fin_l = np.isfinite(cu), np.isfinite(cl)
            res = linprog(np.zeros(d), A_ub=np.vstack([s[fin_u], -s[fin_l]]),
                          b_ub=np.concatenate([cu[fin_u], -cl[fin_l]]),
                          bounds=[(None, None)] * d, method="highs")
            if res.status != 0:
                raise InfeasibleError("hard cumulative bounds admit no point")
            z[:d] = res.x
    lo, up = np.asarray(p.lower, float), np.asarray(p.upper, float)
    over = np.concatenate([z[:d] - up, lo - z[:d]])
    over = over[np.isfinite(over)]
    z[-1] = max(0.0, over.max(initial=0.0))
    if np.any(g_rows @ z - h_rhs > 1e-9 * (1.0 + np.abs(h_rhs))):
        raise InfeasibleError("could not construct a feasible starting point")
    return z


def qp_solve(p: QpProblem, max_iter=500, tol=1e-9, start=None):
    """Primal active-set solve of a :class:`QpProblem`.

    Pivot ties are broken toward the lowest constraint index. Raises
    :class:`ConvergenceError` (carrying the last iterate) if ``max_iter``
    working-set changes are not enough, :class:`InfeasibleError` if the hard
    rows admit no point.
    """
    g_rows, h_rhs = p.inequality_rows()
    hess = 2.0 * np.asarray(p.hessian, float)
    lin = np.asarray(p.linear, float)
    n = hess.shape[0]
    z = _initial_point(p, g_rows, h_rhs) if start is None else np.array(start, float)
    scale = max(1.0, np.abs(hess).max(), np.abs(lin).max())
    feas_tol = 1e-10 * (1.0 + np.abs(h_rhs))
    resid = h_rhs - g_rows @ z
    working = sorted(int(i) for i in np.flatnonzero(np.abs(resid) <= feas_tol))
    working = _independent(g_rows, working)
    for it in range(max_iter):
        grad = hess @ z + lin
        aw = g_rows[working]
        k = len(working)
        kkt = np.zeros((n + k, n + k))
        kkt[:n, :n] = hess
        kkt[:n, n:] = aw.T
        kkt[n:, :n] = aw
        rhs = np.concatenate([-grad, np.zeros(k)])
        try:
            sol = np.linalg.solve(kkt, rhs)
        except np.linalg.LinAlgError:
            sol = np.linalg.lstsq(kkt, rhs, rcond=None)[0]
        step, lam = sol[:n], sol[n:]
        if np.max(np.abs(step), initial=0.0) <= tol * (1.0 + np.max(np.abs(z))):
            if k == 0 or lam.min() >= -tol * scale:
                return QpSolution(z[:-1].copy(), float(z[-1]), p.objective(z), it, tuple(working))
            working.pop(int(np.argmin(lam)))
            continue
        gp = g_rows @ step
        resid = h_rhs - g_rows @ z
        alpha, block = 1.0, None
        in_w = set(working)
        for i in np.flatnonzero(gp > 1e-14 * (1.0 + np.abs(g_rows).sum(axis=1) * np.abs(step).max())):
            if i in in_w:
                continue
            ratio = max(resid[i], 0.0) / gp[i]
            if ratio < alpha:
                alpha, block = ratio, int(i)
        z = z + alpha * step
        if block is not None:
            working = sorted(working + [block])
    raise ConvergenceError(f"active set did not converge in {max_iter} iterations", last=z)


def _independent(g_rows, idx):
    keep = []
    for i in idx:
        trial = g_rows[keep + [i]]
        if np.linalg.matrix_rank(trial) == len(keep) + 1:
            keep.append(i)
    return keep


def kkt_residual(p: QpProblem, z, active):
    """Max violation of stationarity, feasibility and dual sign at ``z``."""
    g_rows, h_rhs = p.inequality_rows()
    z = np.asarray(z, float)
    grad = 2.0 * np.asarray(p.hessian) @ z + p.linear
    active = list(active)
    if active:
        lam = np.linalg.lstsq(g_rows[active].T, -grad, rcond=None)[0]
        stat = grad + g_rows[active].T @ lam
        dual = max(0.0, -lam.min())
    else:
        stat, dual = grad, 0.0
    primal = max(0.0, (g_rows @ z - h_rhs).max())
    return float(max(np.abs(stat).max(), primal, dual))
