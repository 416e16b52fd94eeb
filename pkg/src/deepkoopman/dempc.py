"""Linear MPC on a lifted model: augmented increment form, condensed
prediction matrices, the slack-relaxed QP and the receding-horizon loop."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numkit, plant

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AugmentedModel:
    A: np.ndarray  # (L+m, L+m)
    B: np.ndarray  # (L+m, m)
    C: np.ndarray  # (L, L+m)

    @property
    def lifted_dim(self):
        return self.C.shape[0]

    @property
    def input_dim(self):
        return self.B.shape[1]


def augment(A, B):
    """State ``[phi; u_prev]`` driven by the increment ``du``."""
    A, B = np.asarray(A, float), np.asarray(B, float)
    L, m = B.shape
    if A.shape != (L, L):
        raise ValueError("A must be L x L with L = rows of B")
    a_bar = np.zeros((L + m, L + m))
    a_bar[:L, :L] = A
    a_bar[:L, L:] = B
    a_bar[L:, L:] = np.eye(m)
    b_bar = np.vstack([B, np.eye(m)])
    c_bar = np.hstack([np.eye(L), np.zeros((L, m))])
    return AugmentedModel(a_bar, b_bar, c_bar)


def build_prediction(aug: AugmentedModel, n_p, n_c):
    """``Y = Gamma xi + Theta dU`` over ``n_p`` steps with ``n_c`` free increments.

    ``Gamma`` stacks ``C A^i`` (i = 1..n_p); block ``(i, j)`` of ``Theta`` is
    ``C A^(i-j) B`` for ``j <= i`` and ``j < n_c`` (zero otherwise).
    """
    if not 1 <= n_c <= n_p:
        raise ValueError("need 1 <= n_c <= n_p")
    L, m = aug.lifted_dim, aug.input_dim
    ca = [aug.C]  # C A^k, k = 0..n_p
    for _ in range(n_p):
        ca.append(ca[-1] @ aug.A)
    cab = [c @ aug.B for c in ca]
    gamma = np.vstack(ca[1:])
    theta = np.zeros((n_p * L, n_c * m))
    for i in range(n_p):
        for j in range(min(i + 1, n_c)):
            theta[i * L:(i + 1) * L, j * m:(j + 1) * m] = cab[i - j]
    return gamma, theta


@dataclass(frozen=True)
class MpcConfig:
    """Horizons, weights and bounds in the model's own (normalized) units.

    ``q`` weights every lifted coordinate, or only the first ``q_dims`` of
    them when given (the raw-state block for state-first lifts). Bounds are
    per-input sequences or ``None`` for unbounded.
    """

    n_p: int = 10
    n_c: int = 7
    q: float = 1000.0
    r: float = 5.0
    rho: float = 10.0
    q_dims: int | None = None
    u_min: tuple | None = None
    u_max: tuple | None = None
    du_min: tuple | None = None
    du_max: tuple | None = None

    def __post_init__(self):
        if not 1 <= self.n_c <= self.n_p:
            raise ValueError(f"need 1 <= n_c <= n_p, got n_p={self.n_p}, n_c={self.n_c}")
        if self.q <= 0 or self.r <= 0 or self.rho <= 0:
            raise ValueError("q, r and rho must be positive")
        for lo, hi, name in ((self.u_min, self.u_max, "u"), (self.du_min, self.du_max, "du")):
            if lo is not None and hi is not None and np.any(np.asarray(lo) > np.asarray(hi)):
                raise ValueError(f"{name} lower bound exceeds upper bound")

    def q_matrix(self, L):
        w = np.full(L, self.q)
        if self.q_dims is not None:
            w[self.q_dims:] = 0.0
        return np.diag(w)

    def r_matrix(self, m):
        return self.r * np.eye(m)


def _vec(v, m, fill):
    return np.full(m, fill) if v is None else np.broadcast_to(np.asarray(v, float), (m,)).copy()


@dataclass
class Condensed:
    """Reference-independent parts of the condensed QP for one model/config."""

    gamma: np.ndarray
    theta: np.ndarray
    q_big: np.ndarray
    q_theta: np.ndarray
    hessian: np.ndarray
    cum: np.ndarray
    n_c: int
    m: int

    @classmethod
    def build(cls, aug, cfg: MpcConfig):
        gamma, theta = build_prediction(aug, cfg.n_p, cfg.n_c)
        L, m = aug.lifted_dim, aug.input_dim
        q_big = np.kron(np.eye(cfg.n_p), cfg.q_matrix(L))
        r_big = np.kron(np.eye(cfg.n_c), cfg.r_matrix(m))
        q_theta = q_big @ theta
        d = cfg.n_c * m
        h = np.zeros((d + 1, d + 1))
        h[:d, :d] = theta.T @ q_theta + r_big
        h[:d, :d] = 0.5 * (h[:d, :d] + h[:d, :d].T)
        h[d, d] = cfg.rho
        return cls(gamma, theta, q_big, q_theta, h, numkit.cumulative_map(m, cfg.n_c), cfg.n_c, m)

    def problem(self, xi, y_ref, u_prev, du_lo, du_hi, u_min, u_max):
        e = self.gamma @ xi - y_ref
        lin = np.append(2.0 * e @ self.q_theta, 0.0)
        const = float(e @ self.q_big @ e)
        reps = self.n_c
        cum_lo = np.tile(u_min - u_prev, reps)
        cum_hi = np.tile(u_max - u_prev, reps)
        fin = np.isfinite(cum_lo) | np.isfinite(cum_hi)
        cum = self.cum if fin.any() else None
        return numkit.QpProblem(self.hessian, lin, du_lo, du_hi,
                                cum, None if cum is None else cum_lo, None if cum is None else cum_hi,
                                const)


def condense(aug, cfg: MpcConfig, xi, y_ref, u_prev=None, du_bounds=None):
    """Condensed QP in ``z = [dU; eps]`` for the current augmented state.

    ``y_ref`` stacks the lifted reference over ``n_p`` steps. ``du_bounds``
    optionally overrides the config's increment bounds with explicit
    length-``m * n_c`` arrays. Absolute bounds act on ``u_prev + cumsum(dU)``.
    """
    L, m = aug.lifted_dim, aug.input_dim
    xi = np.asarray(xi, float)
    y_ref = np.asarray(y_ref, float)
    if xi.shape != (L + m,) or y_ref.shape != (cfg.n_p * L,):
        raise ValueError(f"expected xi of length {L + m} and y_ref of length {cfg.n_p * L}")
    u_prev = xi[L:] if u_prev is None else np.asarray(u_prev, float)
    if du_bounds is None:
        du_lo = np.tile(_vec(cfg.du_min, m, -np.inf), cfg.n_c)
        du_hi = np.tile(_vec(cfg.du_max, m, np.inf), cfg.n_c)
    else:
        du_lo, du_hi = (np.asarray(b, float) for b in du_bounds)
    return Condensed.build(aug, cfg).problem(xi, y_ref, u_prev, du_lo, du_hi,
                                             _vec(cfg.u_min, m, -np.inf), _vec(cfg.u_max, m, np.inf))


# ---------------------------------------------------------------------------
# Actuator limits (physical units)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BoxLimits:
    """Constant absolute and increment bounds per input."""

    u_min: tuple
    u_max: tuple
    du_max: tuple

    def absolute(self):
        return np.asarray(self.u_min, float), np.asarray(self.u_max, float)

    def increments(self, u_prev, n_c):
        """Per-step ``(lo, hi)`` for the horizon and the exact first-move bounds."""
        du = np.asarray(self.du_max, float)
        return np.tile(-du, n_c), np.tile(du, n_c), (-du, du)


@dataclass(frozen=True)
class VehicleLimits:
    """Steering-wheel angle plus one engine channel (throttle >= 0, brake < 0).

    Throttle and brake have different rate limits. The engine command may
    not cross zero in a single move, so the first move uses the rate of the
    side it stays on; at exactly zero either side may be entered. Later
    moves in the horizon reuse the current side's rate.
    """

    steer_limit: float = plant.STEER_LIMIT
    throttle_limit: float = plant.THROTTLE_LIMIT
    brake_limit: float = plant.BRAKE_LIMIT
    steer_rate: float = 2.25
    throttle_rate: float = 0.004
    brake_rate: float = 0.18

    def absolute(self):
        return (np.array([-self.steer_limit, -self.brake_limit]),
                np.array([self.steer_limit, self.throttle_limit]))

    def first_move(self, u_prev):
        eng = float(u_prev[1])
        if eng > 0.0:
            e_lo, e_hi = max(-self.throttle_rate, -eng), self.throttle_rate
        elif eng < 0.0:
            e_lo, e_hi = -self.brake_rate, min(self.brake_rate, -eng)
        else:
            e_lo, e_hi = -self.brake_rate, self.throttle_rate
        return np.array([-self.steer_rate, e_lo]), np.array([self.steer_rate, e_hi])

    def increments(self, u_prev, n_c):
        lo0, hi0 = self.first_move(u_prev)
        eng = float(u_prev[1])
        if eng > 0.0:
            rate_lo, rate_hi = self.throttle_rate, self.throttle_rate
        elif eng < 0.0:
            rate_lo, rate_hi = self.brake_rate, self.brake_rate
        else:
            rate_lo, rate_hi = self.brake_rate, self.throttle_rate
        lo = np.tile([-self.steer_rate, -rate_lo], n_c)
        hi = np.tile([self.steer_rate, rate_hi], n_c)
        lo[:2], hi[:2] = lo0, hi0
        return lo, hi, (lo0, hi0)


# ---------------------------------------------------------------------------
# Controller
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Scaling:
    """Affine maps between physical and model units (identity by default)."""

    x_offset: np.ndarray
    x_scale: np.ndarray
    u_offset: np.ndarray
    u_scale: np.ndarray

    @classmethod
    def identity(cls, n, m):
        return cls(np.zeros(n), np.ones(n), np.zeros(m), np.ones(m))

    @classmethod
    def from_stats(cls, stats):
        return cls(stats.x_min, stats.x_range, stats.u_min, stats.u_range)

    def x(self, x):
        return (np.asarray(x, float) - self.x_offset) / self.x_scale

    def u(self, u):
        return (np.asarray(u, float) - self.u_offset) / self.u_scale

    def du(self, du):
        return np.asarray(du, float) / self.u_scale

    def u_phys(self, un):
        return np.asarray(un, float) * self.u_scale + self.u_offset


class DeMpcController:
    """Receding-horizon controller around any model with ``encode``, ``A``, ``B``.

    Physical states are scaled, repeated ``tau`` times to fill the delay
    slots and encoded. References are lifted the same way. The first
    increment of each QP solution is clamped to the exact increment and
    absolute limits before it is applied.
    """

    def __init__(self, model, cfg: MpcConfig, limits, scaling: Scaling | None = None, tau=1,
                 u0=None, max_iter=500):
        self.model = model
        self.cfg = cfg
        self.limits = limits
        self.tau = tau
        m = model.B.shape[1]
        n = model.state_dim // tau if hasattr(model, "state_dim") else model.C.shape[0] // tau
        self.scaling = scaling or Scaling.identity(n, m)
        self.aug = augment(model.A, model.B)
        self.cond = Condensed.build(self.aug, cfg)
        self.u_prev = np.zeros(m) if u0 is None else np.asarray(u0, float).copy()
        self.max_iter = max_iter
        self.faults = 0
        self.last_slack = 0.0
        self.last_solve_ms = 0.0

    def lift(self, x):
        z = np.tile(self.scaling.x(x), self.tau)
        return self.model.encode(z)

    def lift_reference(self, ref):
        ref = np.atleast_2d(np.asarray(ref, float))[: self.cfg.n_p]
        z = np.tile(self.scaling.x(ref), (1, self.tau))
        return self.model.encode(z).reshape(-1)

    def step(self, x, ref_window):
        """One control move for physical state ``x``; returns the physical input."""
        ref_window = np.atleast_2d(ref_window)
        if len(ref_window) < self.cfg.n_p:
            raise ValueError(f"reference window needs {self.cfg.n_p} rows")
        xi = np.concatenate([self.lift(x), self.scaling.u(self.u_prev)])
        y_ref = self.lift_reference(ref_window)
        du_lo, du_hi, (first_lo, first_hi) = self.limits.increments(self.u_prev, self.cfg.n_c)
        u_lo, u_hi = self.limits.absolute()
        sc = self.scaling
        prob = self.cond.problem(xi, y_ref, sc.u(self.u_prev), sc.du(du_lo.reshape(-1, len(sc.u_scale))).ravel(),
                                 sc.du(du_hi.reshape(-1, len(sc.u_scale))).ravel(), sc.u(u_lo), sc.u(u_hi))
        t0 = time.perf_counter()
        try:
            sol = numkit.qp_solve(prob, max_iter=self.max_iter)
            du0 = sol.decision[: len(self.u_prev)] * sc.u_scale
            self.last_slack = sol.slack
        except (numkit.ConvergenceError, numkit.InfeasibleError, np.linalg.LinAlgError) as exc:
            log.warning("QP failure, holding previous input: %s", exc)
            self.faults += 1
            du0 = np.zeros_like(self.u_prev)
            self.last_slack = float("nan")
        self.last_solve_ms = 1e3 * (time.perf_counter() - t0)
        u = apply_increment(self.u_prev, du0, first_lo, first_hi, u_lo, u_hi)
        self.u_prev = u
        return u.copy()


def apply_increment(u_prev, du, du_lo, du_hi, u_lo, u_hi):
    """``u_prev + du`` clamped so that both ``u`` and the floating-point
    difference ``u - u_prev`` lie inside their bounds exactly."""
    u_prev = np.asarray(u_prev, float)
    u = np.clip(u_prev + np.clip(du, du_lo, du_hi), u_lo, u_hi)
    for i in range(len(u)):
        while u[i] - u_prev[i] > du_hi[i] or u[i] > u_hi[i]:
            u[i] = np.nextafter(u[i], -np.inf)
        while u[i] - u_prev[i] < du_lo[i] or u[i] < u_lo[i]:
            u[i] = np.nextafter(u[i], np.inf)
    return u


# ---------------------------------------------------------------------------
# Closed loop
# ---------------------------------------------------------------------------

LOG_COLUMNS = ("t", "v_x", "v_y", "yaw_rate", "ref_v_x", "ref_v_y", "ref_yaw_rate",
               "steer", "engine", "qp_ms", "slack")


@dataclass
class TrackingLog:
    dt: float
    states: np.ndarray
    refs: np.ndarray
    controls: np.ndarray
    qp_ms: np.ndarray
    slack: np.ndarray
    faults: int = 0
    aborted: bool = False
    notes: list = field(default_factory=list)

    @property
    def times(self):
        return np.arange(len(self.states)) * self.dt

    def rmse(self, start=0):
        e = self.states[start:] - self.refs[start:]
        return np.sqrt(np.mean(e * e, axis=0))

    def to_csv(self, path):
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(LOG_COLUMNS)
            for row in zip(self.times, self.states, self.refs, self.controls, self.qp_ms, self.slack):
                t, x, r, u, q, s = row
                w.writerow([f"{v:.17g}" for v in (t, *x, *r, *u, q, s)])


def reference_window(ref_states, k, n_p):
    """Rows ``k+1 .. k+n_p`` of the reference, padded with its last row."""
    idx = np.minimum(np.arange(k + 1, k + 1 + n_p), len(ref_states) - 1)
    return ref_states[idx]


def run_closed_loop(params: plant.VehicleParams, controller: DeMpcController, ref_states, steps,
                    x0=(0.0, 0.0, 0.0), dt=0.01, divergence=100.0):
    """Drive the plant with ``controller`` along ``ref_states`` for ``steps`` moves."""
    ref_states = np.asarray(ref_states, float)
    n_p = controller.cfg.n_p
    xs, rs, us, qs, ss = [], [], [], [], []
    x = plant.VehicleState(*map(float, x0))
    aborted = False
    for k in range(steps):
        u = controller.step(np.array(x), reference_window(ref_states, k, n_p))
        xs.append(np.array(x))
        rs.append(ref_states[min(k, len(ref_states) - 1)])
        us.append(u)
        qs.append(controller.last_solve_ms)
        ss.append(controller.last_slack)
        x = plant.step(x, plant.ControlInput(*u), params, dt)
        if not np.all(np.isfinite(x)) or max(abs(v) for v in x) > divergence:
            log.error("plant diverged at step %d", k)
            aborted = True
            break
    return TrackingLog(dt, np.array(xs), np.array(rs), np.array(us), np.array(qs), np.array(ss),
                       controller.faults, aborted)
