"""Experiment configuration: YAML files layered over built-in presets."""
from __future__ import annotations

import copy
from dataclasses import dataclass
from pathlib import Path

import yaml

from . import plant
from .koopman import LossWeights
from .mlp_baseline import MlpWeights
from .training import TrainConfig

SCHEMA_VERSION = 1
MODEL_KINDS = ("edmd", "elm-edmd", "deep-edmd", "mlp")
CONFIG_DIR = Path(__file__).resolve().parents[2] / "configs"

_BASE = {
    "schema_version": SCHEMA_VERSION,
    "plant_params": None,  # None: built-in defaults
    "data": {"episodes": 5, "length": 2000, "dt": 0.01},
    "model": "deep-edmd",
    "lifting": {"K": 10},
    "train": {"p": 41, "tau": 2, "batch_size": 64, "max_epochs": 1000000, "max_batches": 30000,
              "stop_tol": 1e-9, "freeze_ab_until": 0, "rate": 1e-4, "log_every": 1000,
              "ab_init": "lstsq"},
    "loss_weights": [1.0, 1.0, 0.3, 1e-9, 1e-9, 1e-9],
    "mlp_weights": [1.0, 1e-9, 1e-9],
    "evaluate": {"horizons": [1, 10, 41]},
    "robustness": {"repeats": 20, "random_sigma": 0.1, "max_batches": 10000},
    "mpc": {"horizons": [[10, 7], [60, 50]], "q": 1000.0, "r": 5.0, "rho": 10.0, "q_state_only": False,
            "steps": 1500, "reference": "cruise", "reference_speed": 6.0, "reference_steer": 30.0,
            "steer_rate": 2.25, "throttle_rate": 0.004, "brake_rate": 0.18,
            "steer_limit": plant.STEER_LIMIT, "throttle_limit": plant.THROTTLE_LIMIT,
            "brake_limit": plant.BRAKE_LIMIT},
}

PRESETS = {
    "desk": {},
    "paper": {"data": {"episodes": 40, "length": 10000},
              "train": {"max_batches": 100000},
              "robustness": {"repeats": 100, "max_batches": 30000}},
}


def _merge(base, over, path=""):
    out = copy.deepcopy(base)
    for k, v in (over or {}).items():
        if k not in out:
            raise ValueError(f"unknown config key {path}{k!r}")
        if isinstance(out[k], dict) and isinstance(v, dict):
            out[k] = _merge(out[k], v, f"{path}{k}.")
        else:
            out[k] = v
    return out


@dataclass(frozen=True)
class ExperimentConfig:
    raw: dict
    source: Path | None = None

    # typed views ----------------------------------------------------------------
    @property
    def model(self):
        return self.raw["model"]

    @property
    def data(self):
        return self.raw["data"]

    def train_config(self, seed, **overrides):
        t = {k: v for k, v in self.raw["train"].items() if k != "ab_init"}
        t.update(overrides)
        return TrainConfig(seed=seed, **t)

    @property
    def ab_init(self):
        return self.raw["train"]["ab_init"]

    @property
    def loss_weights(self):
        return LossWeights.from_sequence(self.raw["loss_weights"])

    @property
    def mlp_weights(self):
        return MlpWeights(*map(float, self.raw["mlp_weights"]))

    def vehicle_params(self):
        path = self.raw["plant_params"]
        if path is None:
            return plant.VehicleParams()
        return plant.VehicleParams.from_json(self._resolve(path))

    def _resolve(self, path):
        p = Path(path)
        if not p.is_absolute() and self.source is not None:
            p = self.source.parent / p
        return p

    def to_dict(self):
        return copy.deepcopy(self.raw)


def load_config(path=None, preset="desk"):
    """Preset defaults, overridden by the YAML file at ``path`` if given."""
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    raw = _merge(_BASE, PRESETS[preset])
    source = None
    if path is not None:
        source = Path(path)
        if not source.exists():
            raise FileNotFoundError(f"config file {source} does not exist")
        user = yaml.safe_load(source.read_text()) or {}
        if not isinstance(user, dict):
            raise ValueError(f"{source}: top level must be a mapping")
        version = user.pop("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ValueError(f"{source}: schema_version {version} is not supported (expected {SCHEMA_VERSION})")
        user.pop("preset", None)
        raw = _merge(raw, user)
    cfg = ExperimentConfig(raw, source)
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig):
    """Raise ``ValueError`` with an actionable message on any bad setting."""
    r = cfg.raw
    if r["model"] not in MODEL_KINDS:
        raise ValueError(f"model must be one of {MODEL_KINDS}, got {r['model']!r}")
    d = r["data"]
    if d["episodes"] < 1 or d["length"] < 2 or d["dt"] <= 0:
        raise ValueError("data: need episodes >= 1, length >= 2 and dt > 0")
    if r["plant_params"] is not None and not cfg._resolve(r["plant_params"]).exists():
        raise ValueError(f"plant_params file {r['plant_params']} does not exist")
    if r["lifting"]["K"] < 1:
        raise ValueError("lifting.K must be >= 1")
    cfg.train_config(0)  # TrainConfig checks its own ranges
    if r["train"]["ab_init"] not in ("lstsq", "random"):
        raise ValueError("train.ab_init must be 'lstsq' or 'random'")
    for key, n in (("loss_weights", 6), ("mlp_weights", 3)):
        w = r[key]
        if len(w) != n:
            raise ValueError(f"{key} needs {n} entries")
        if any(not float(v) > 0 for v in w):
            raise ValueError(f"{key} must all be positive, got {w}; use a tiny value to switch a term off")
    cfg.loss_weights
    cfg.mlp_weights
    for h in r["evaluate"]["horizons"]:
        if h < 1:
            raise ValueError("evaluate.horizons must be >= 1")
    rb = r["robustness"]
    if rb["repeats"] < 2:
        raise ValueError("robustness.repeats must be >= 2")
    if rb["random_sigma"] <= 0:
        raise ValueError("robustness.random_sigma must be positive")
    m = r["mpc"]
    for pair in m["horizons"]:
        n_p, n_c = pair
        if not 1 <= n_c < n_p:
            raise ValueError(f"mpc.horizons entry {pair}: need 1 <= N_c < N_p")
    for k in ("q", "r", "rho"):
        if m[k] <= 0:
            raise ValueError(f"mpc.{k} must be positive")
    for k in ("steer_rate", "throttle_rate", "brake_rate"):
        if m[k] <= 0:
            raise ValueError(f"mpc.{k} must be positive")
    limits = (("steer_limit", plant.STEER_LIMIT), ("throttle_limit", plant.THROTTLE_LIMIT),
              ("brake_limit", plant.BRAKE_LIMIT))
    for k, hi in limits:
        if not 0 < m[k] <= hi:
            raise ValueError(f"mpc.{k} must lie in (0, {hi}]")
    if m["steps"] < 1:
        raise ValueError("mpc.steps must be >= 1")
    if m["reference"] not in ("cruise", "test"):
        raise ValueError("mpc.reference must be 'cruise' or 'test'")
