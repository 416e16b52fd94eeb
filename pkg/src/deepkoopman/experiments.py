"""Experiment pipelines shared by the CLI, the scripts and the acceptance tests."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import dataset as ds
from . import dempc, koopman, lifting, plant
from . import mlp_baseline as mb
from .config import ExperimentConfig

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------

def episode_seeds(seed, n):
    """Independent per-episode seeds derived from one experiment seed."""
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(n)]


def simulate_episodes(cfg: ExperimentConfig, seed, params=None):
    params = params or cfg.vehicle_params()
    d = cfg.data
    policy = plant.ExcitationPolicy()
    return [plant.generate_episode(policy, d["length"], s, params, d["dt"])
            for s in episode_seeds(seed, d["episodes"])]


@dataclass
class DataBundle:
    train: list
    val: list
    test: list
    stats: ds.NormalizationStats

    def norm(self, split):
        return [self.stats.normalize_episode(e) for e in getattr(self, split)]


def make_bundle(episodes, seed):
    """Split, then normalize with statistics of the training split only."""
    train, val, test = ds.split_episodes(episodes, seed)
    return DataBundle(train, val, test, ds.NormalizationStats.from_episodes(train))


# ---------------------------------------------------------------------------
# Models
# ---------------------------------------------------------------------------

def fit_model(kind, bundle: DataBundle, cfg: ExperimentConfig, seed, random_sigma=None, **train_overrides):
    """Fit one model kind; returns ``(model, history or None)``."""
    tc = cfg.train_config(seed, **train_overrides)
    train_n, val_n = bundle.norm("train"), bundle.norm("val")
    K = cfg.raw["lifting"]["K"]
    if kind in ("edmd", "elm-edmd"):
        X, Y, U = koopman.snapshot_pairs(train_n, tc.tau)
        if kind == "edmd":
            dic = lifting.sample_centers(X.mean(axis=1), X.std(axis=1), K, seed)
        else:
            dic = lifting.ElmFeatureMap.random(X.shape[0], K, seed=seed)
        return koopman.edmd_fit(X, Y, U, dic), None
    if kind == "deep-edmd":
        return koopman.train_deep(train_n, val_n, tc, cfg.loss_weights, K=K,
                                  random_sigma=random_sigma, ab_init=cfg.ab_init)
    if kind == "mlp":
        return mb.train_mlp(train_n, val_n, tc, cfg.mlp_weights, random_sigma=random_sigma)
    raise ValueError(f"unknown model kind {kind!r}")


def predictor(model):
    """``f(x0 (b, d), u (b, p, m)) -> (b, p, d)`` open-loop predictions."""
    if isinstance(model, mb.MlpDynModel):
        return lambda x0, u: mb.predict_multistep_mlp(model, x0, u)
    return lambda x0, u: koopman.predict_multistep(model, x0, u)[:, 1:]


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

CHANNELS = ("v_x", "v_y", "yaw_rate")


def window_errors(model, episodes_norm, p, tau):
    """Prediction minus target, ``(windows, p, n)``, physical slot, normalized units."""
    f = predictor(model)
    errs = []
    for s, u in episodes_norm:
        pred, tgt = koopman.window_predictions(model, s, u, p, tau, predict=f)
        errs.append(pred - tgt)
    return np.concatenate(errs)


def horizon_metrics(model, episodes_norm, tau, horizons):
    """Per-channel RMSE at each requested step ``h`` (rows: horizon, cols: channel)."""
    err = window_errors(model, episodes_norm, max(horizons), tau)
    return {h: np.sqrt(np.mean(err[:, h - 1] ** 2, axis=0)) for h in horizons}


def window_rmse(model, episodes_norm, p, tau):
    """Per-channel RMSE over all steps ``1..p`` of every window."""
    err = window_errors(model, episodes_norm, p, tau)
    return np.sqrt(np.mean(err ** 2, axis=(0, 1)))


def open_loop_curve(model, states_norm, controls_norm, tau):
    """Absolute error of one open-loop rollout over a whole episode, ``(T - tau, n)``."""
    z = ds.stack_delays(states_norm, tau)
    u = np.asarray(controls_norm)[tau - 1:]
    n = np.shape(states_norm)[1]
    pred = predictor(model)(z[:1], u[None, :-1])[0]
    return np.abs(pred[:, -n:] - z[1:, -n:])


# ---------------------------------------------------------------------------
# Robustness
# ---------------------------------------------------------------------------

@dataclass
class RobustnessResult:
    kind: str
    mean_error: np.ndarray   # per channel, mean over repeats of the window RMSE
    variance: np.ndarray     # per channel, variance across repeats averaged over windows/steps
    traces: np.ndarray       # (repeats, p, n) predictions of the first test window
    history: object


def repeated_predictions(model, episodes_norm, p, tau, repeats, seed):
    """Predict every test window ``repeats`` times, redrawing the random layer each time."""
    rng = np.random.default_rng(seed)
    f = predictor(model)
    outs, target = [], None
    for _ in range(repeats):
        model.redraw(rng)
        preds, tgts = [], []
        for s, u in episodes_norm:
            pr, tg = koopman.window_predictions(model, s, u, p, tau, predict=f)
            preds.append(pr)
            tgts.append(tg)
        outs.append(np.concatenate(preds))
        target = np.concatenate(tgts)
    return np.stack(outs), target


def robustness_study(kind, bundle, cfg: ExperimentConfig, seed, repeats=None):
    rb = cfg.raw["robustness"]
    repeats = repeats or rb["repeats"]
    if repeats < 2:
        raise ValueError("repeats must be >= 2")
    model, hist = fit_model(kind, bundle, cfg, seed, random_sigma=rb["random_sigma"],
                            max_batches=rb["max_batches"])
    tc = cfg.train_config(seed)
    preds, target = repeated_predictions(model, bundle.norm("test"), tc.p, tc.tau, repeats, seed + 1)
    rmse = np.sqrt(np.mean((preds - target[None]) ** 2, axis=(1, 2)))  # (repeats, n)
    var = np.mean(np.var(preds, axis=0), axis=(0, 1))
    return RobustnessResult(kind, rmse.mean(axis=0), var, preds[:, 0], hist), model


# ---------------------------------------------------------------------------
# Closed loop
# ---------------------------------------------------------------------------

def cruise_reference(cfg: ExperimentConfig, params, extra=0):
    m = cfg.raw["mpc"]
    return plant.cruise_episode(m["steps"] + extra, params, cfg.data["dt"],
                                speed=m["reference_speed"], steer=m["reference_steer"])


def vehicle_limits(cfg: ExperimentConfig):
    m = cfg.raw["mpc"]
    return dempc.VehicleLimits(m["steer_limit"], m["throttle_limit"], m["brake_limit"],
                               m["steer_rate"], m["throttle_rate"], m["brake_rate"])


def make_controller(model, stats, cfg: ExperimentConfig, n_p, n_c, tau):
    m = cfg.raw["mpc"]
    q_dims = model.state_dim if m["q_state_only"] else None
    mcfg = dempc.MpcConfig(n_p=n_p, n_c=n_c, q=m["q"], r=m["r"], rho=m["rho"], q_dims=q_dims)
    return dempc.DeMpcController(model, mcfg, vehicle_limits(cfg), dempc.Scaling.from_stats(stats), tau=tau)


def steady_state_error(log_: dempc.TrackingLog, tail):
    """Max over the last ``tail`` steps of ``|x - ref| / |ref|`` (Euclidean norms)."""
    tail = min(tail, len(log_.states))
    e = np.linalg.norm(log_.states[-tail:] - log_.refs[-tail:], axis=1)
    return float(np.max(e / np.maximum(np.linalg.norm(log_.refs[-tail:], axis=1), 1e-12)))


def normalized_rmse(log_: dempc.TrackingLog, stats):
    e = (log_.states - log_.refs) / stats.x_range
    return float(np.sqrt(np.mean(e * e)))


def mpc_summary(log_, stats, limits: dempc.VehicleLimits, tail=200):
    u = log_.controls
    du = np.diff(np.vstack([np.zeros((1, u.shape[1])), u]), axis=0)
    lo, hi = limits.absolute()
    within_abs = bool(np.all(u >= lo) and np.all(u <= hi))
    prev = np.vstack([np.zeros((1, u.shape[1])), u[:-1]])
    ok_inc = True
    for k in range(len(u)):
        a, b = limits.first_move(prev[k])
        ok_inc &= bool(np.all(du[k] >= a) and np.all(du[k] <= b))
    return {
        "steps": int(len(u)),
        "aborted": bool(log_.aborted),
        "qp_faults": int(log_.faults),
        "rmse": log_.rmse().tolist(),
        "normalized_rmse": normalized_rmse(log_, stats),
        "steady_state_error": steady_state_error(log_, tail),
        "qp_ms_mean": float(np.mean(log_.qp_ms)),
        "qp_ms_p95": float(np.percentile(log_.qp_ms, 95)),
        "max_slack": float(np.nanmax(log_.slack)) if len(log_.slack) else 0.0,
        "controls_within_bounds": within_abs,
        "increments_within_bounds": ok_inc,
    }


def mpc_study(model, stats, cfg: ExperimentConfig, ref_states, params, tau):
    """Closed-loop runs for every configured horizon pair; returns ``{(n_p, n_c): (log, summary)}``."""
    out = {}
    steps = cfg.raw["mpc"]["steps"]
    for n_p, n_c in cfg.raw["mpc"]["horizons"]:
        ctrl = make_controller(model, stats, cfg, n_p, n_c, tau)
        lg = dempc.run_closed_loop(params, ctrl, ref_states, steps, dt=cfg.data["dt"])
        out[(n_p, n_c)] = (lg, mpc_summary(lg, stats, ctrl.limits))
    return out
