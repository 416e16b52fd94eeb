"""Planar single-track vehicle with a Pacejka longitudinal tire, linear
cornering stiffness laterally, RK4 integration and an excitation-policy
episode generator.

The plant replaces a proprietary high-fidelity simulator. Every number in
:class:`VehicleParams` is plant configuration chosen to resemble a mid-size
sedan, not measured ground truth.

Units: velocities in m/s, yaw rate in rad/s, steering-wheel angle in degrees,
engine command as throttle fraction (>= 0) or negative brake pressure (MPa).
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

STEER_LIMIT = 450.0
THROTTLE_LIMIT = 0.2
BRAKE_LIMIT = 9.1


class VehicleState(NamedTuple):
    v_x: float
    v_y: float
    yaw_rate: float


class ControlInput(NamedTuple):
    steer: float
    engine: float

    @property
    def throttle(self):
        return max(self.engine, 0.0)

    @property
    def brake(self):
        return max(-self.engine, 0.0)


@dataclass(frozen=True)
class VehicleParams:
    mass: float = 1500.0
    yaw_inertia: float = 2900.0
    a1: float = 1.15
    a2: float = 1.55
    c_alpha_f: float = 62000.0
    c_alpha_r: float = 76000.0
    # magic formula: B shape, C stiffness, D curvature; peak A = friction * m * g
    pacejka_b: float = 1.65
    pacejka_c: float = 10.0
    pacejka_d: float = 0.5
    friction: float = 0.9
    gravity: float = 9.81
    air_density: float = 1.2
    frontal_area: float = 2.3
    c_fx: float = 0.35
    c_fy: float = 0.0
    steering_ratio: float = 17.0
    throttle_slip_gain: float = 0.04
    brake_slip_gain: float = 0.011
    v_eps: float = 0.5

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not math.isfinite(value):
                raise ValueError(f"{name} must be finite")
            if name == "c_fy":
                if value < 0:
                    raise ValueError("c_fy must be nonnegative")
            elif value <= 0:
                raise ValueError(f"{name} must be strictly positive")

    @property
    def peak_force(self):
        return self.friction * self.mass * self.gravity

    @property
    def drag_group(self):
        return 0.5 * self.air_density * self.frontal_area

    @classmethod
    def from_json(cls, path):
        return cls(**json.loads(Path(path).read_text()))

    def to_json(self, path):
        Path(path).write_text(json.dumps(asdict(self), indent=2) + "\n")


@dataclass(frozen=True)
class Episode:
    dt: float
    states: np.ndarray  # (T, 3)
    controls: np.ndarray  # (T, 2)

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.states.ndim != 2 or self.states.shape[1] != 3:
            raise ValueError("states must have shape (T, 3)")
        if self.controls.shape != (self.states.shape[0], 2):
            raise ValueError("controls must have shape (T, 2) matching states")
        if len(self.states) < 2:
            raise ValueError("an episode needs at least two samples")

    def __len__(self):
        return len(self.states)

    @property
    def times(self):
        return np.arange(len(self)) * self.dt


def steering_angle(steer_deg, p: VehicleParams):
    """Road-wheel angle (rad) from steering-wheel angle (deg)."""
    return math.radians(steer_deg) / p.steering_ratio


def longitudinal_slip(u: ControlInput, v_x, p: VehicleParams):
    """Slip demand from the engine command.

    Brake slip fades linearly to zero below ``v_eps`` so braking never
    drives the car backwards.
    """
    if u.engine >= 0.0:
        return p.throttle_slip_gain * u.engine
    fade = min(max(v_x / p.v_eps, 0.0), 1.0)
    return p.brake_slip_gain * u.engine * fade


def magic_formula(s, p: VehicleParams):
    cs = p.pacejka_c * s
    return p.peak_force * math.sin(p.pacejka_b * math.atan(cs - p.pacejka_d * (cs - math.atan(cs))))


def tire_and_body_forces(s: VehicleState, u: ControlInput, p: VehicleParams):
    """Net longitudinal and lateral body-frame forces (N)."""
    v_x, v_y, r = s
    v_div = max(v_x, p.v_eps)
    delta = steering_angle(u.steer, p)
    air = p.drag_group * v_x * abs(v_x)
    alpha_f = delta - (v_y + p.a1 * r) / v_div
    alpha_r = -(v_y - p.a2 * r) / v_div
    f_yf = p.c_alpha_f * alpha_f
    # steered front tire: its lateral force has a longitudinal body component
    f_x = magic_formula(longitudinal_slip(u, v_x, p), p) - f_yf * math.sin(delta) - p.c_fx * air
    f_y = f_yf * math.cos(delta) + p.c_alpha_r * alpha_r - p.c_fy * air
    return f_x, f_y


def derivatives(s: VehicleState, u: ControlInput, p: VehicleParams):
    """Time derivative ``(dv_x, dv_y, dyaw_rate)`` of the single-track model."""
    v_x, v_y, r = s
    v_div = max(v_x, p.v_eps)
    f_x, _ = tire_and_body_forces(s, u, p)
    delta = steering_angle(u.steer, p)
    m, iz, a1, a2 = p.mass, p.yaw_inertia, p.a1, p.a2
    cf, cr = p.c_alpha_f, p.c_alpha_r
    lat_drag = p.c_fy * p.drag_group * v_x * abs(v_x) / m
    dv_x = f_x / m + r * v_y
    dv_y = ((-a1 * cf + a2 * cr) * r / (m * v_div) + cf * delta / m - r * v_x
            - (cf + cr) * v_y / (m * v_div) - lat_drag)
    dr = ((-a1 * a1 * cf - a2 * a2 * cr) * r / (iz * v_div) + a1 * cf * delta / iz
          - (a1 * cf - a2 * cr) * v_y / (iz * v_div))
    return dv_x, dv_y, dr


def step(s, u, p: VehicleParams, dt):
    """One classical RK4 step with the control held constant.

    Longitudinal velocity is floored at zero afterwards (forward driving only).
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    s = VehicleState(*s)
    u = ControlInput(*u)

    def shift(k, h):
        return VehicleState(s[0] + h * k[0], s[1] + h * k[1], s[2] + h * k[2])

    k1 = derivatives(s, u, p)
    k2 = derivatives(shift(k1, 0.5 * dt), u, p)
    k3 = derivatives(shift(k2, 0.5 * dt), u, p)
    k4 = derivatives(shift(k3, dt), u, p)
    nxt = [s[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]) for i in range(3)]
    return VehicleState(max(nxt[0], 0.0), nxt[1], nxt[2])


def simulate(x0, controls, p: VehicleParams, dt):
    """Roll the plant forward under a control sequence; returns (T, 3) states
    where ``states[k + 1] = step(states[k], controls[k])``."""
    controls = np.asarray(controls, dtype=float)
    out = np.empty((len(controls), 3))
    s = VehicleState(*map(float, x0))
    out[0] = s
    for k in range(len(controls) - 1):
        s = step(s, controls[k], p, dt)
        out[k + 1] = s
    return out


@dataclass(frozen=True)
class ExcitationPolicy:
    """Synthetic driver: low-pass random steering plus piecewise-constant
    throttle/brake segments (never both at once)."""

    steer_std: float = 90.0
    steer_time_constant: float = 1.5
    segment_min: float = 1.0
    segment_max: float = 4.0
    throttle_prob: float = 0.55
    brake_prob: float = 0.25
    throttle_max: float = THROTTLE_LIMIT
    brake_max: float = 3.0

    @classmethod
    def zero(cls):
        return cls(steer_std=0.0, throttle_prob=0.0, brake_prob=0.0)

    def controls(self, length, dt, rng: np.random.Generator):
        steer = np.zeros(length)
        if self.steer_std > 0:
            a = math.exp(-dt / self.steer_time_constant)
            noise = rng.normal(size=length) * self.steer_std * math.sqrt(1.0 - a * a)
            for k in range(1, length):
                steer[k] = a * steer[k - 1] + noise[k]
        steer = np.clip(steer, -STEER_LIMIT, STEER_LIMIT)
        engine = np.zeros(length)
        k = 0
        while k < length:
            seg = max(1, int(round(rng.uniform(self.segment_min, self.segment_max) / dt)))
            draw = rng.uniform()
            if draw < self.throttle_prob:
                level = rng.uniform(0.0, self.throttle_max)
            elif draw < self.throttle_prob + self.brake_prob:
                level = -rng.uniform(0.0, self.brake_max)
            else:
                level = 0.0
            engine[k:k + seg] = level
            k += seg
        engine = np.clip(engine, -BRAKE_LIMIT, THROTTLE_LIMIT)
        return np.column_stack([steer, engine])


def generate_episode(policy: ExcitationPolicy, length, seed, p: VehicleParams, dt=0.01):
    """Episode from rest under ``policy``; deterministic per ``seed``."""
    if length < 2:
        raise ValueError("length must be at least 2")
    rng = np.random.default_rng(seed)
    controls = policy.controls(length, dt, rng)
    states = simulate((0.0, 0.0, 0.0), controls, p, dt)
    return Episode(dt, states, controls)


def cruise_episode(length, p: VehicleParams, dt=0.01, speed=8.0, steer=30.0,
                   ramp_time=3.0, gain=0.1):
    """Reference-style episode: accelerate, then hold a steady turn.

    Throttle is a proportional speed law plus a feedforward that cancels the
    current resistive force, so the tail settles at a constant state the
    plant itself produced.
    """
    states = np.zeros((length, 3))
    controls = np.zeros((length, 2))
    s = VehicleState(0.0, 0.0, 0.0)
    slope = p.peak_force * p.pacejka_b * p.pacejka_c
    for k in range(length):
        target_steer = steer * min(k * dt / ramp_time, 1.0)
        coast = ControlInput(target_steer, 0.0)
        resist = -p.mass * derivatives(s, coast, p)[0]
        throttle = resist / slope / p.throttle_slip_gain + gain * (speed - s.v_x)
        u = ControlInput(target_steer, min(max(throttle, 0.0), THROTTLE_LIMIT))
        states[k], controls[k] = s, u
        s = step(s, u, p, dt)
    return Episode(dt, states, controls)
