"""Fixed observable dictionaries: thin-plate-spline RBFs and frozen random
(extreme-learning-machine) feature maps.

Both put the raw state first when ``includes_state`` is set, so a linear
decoder can recover it exactly.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import neuralnet as nn


def tps(r):
    """``r**2 * log(r)``, extended by its limit 0 at ``r = 0``."""
    r = np.asarray(r, dtype=float)
    out = np.zeros_like(r)
    pos = r > 0
    out[pos] = r[pos] ** 2 * np.log(r[pos])
    return out


def tps_rbf(x, c):
    return float(tps(np.linalg.norm(np.asarray(x, float) - np.asarray(c, float))))


def assemble_psi(phi, u):
    """Stack controls beneath lifted features: ``[phi; u]`` (row-wise for batches)."""
    phi, u = np.asarray(phi, float), np.asarray(u, float)
    if phi.ndim != u.ndim or (phi.ndim == 2 and phi.shape[0] != u.shape[0]):
        raise ValueError("phi and u batch shapes disagree")
    return np.concatenate([phi, u], axis=-1)


def _batched(x, n):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    if xb.shape[1] != n:
        raise ValueError(f"state width {xb.shape[1]} != dictionary width {n}")
    return xb, single


@dataclass(frozen=True)
class TpsDictionary:
    centers: np.ndarray  # (K, n)
    includes_state: bool = True

    def __post_init__(self):
        c = np.asarray(self.centers, float)
        if c.ndim != 2 or c.shape[0] < 1:
            raise ValueError("need at least one center")
        if not np.all(np.isfinite(c)):
            raise ValueError("centers must be finite")
        if len(np.unique(c, axis=0)) != len(c):
            raise ValueError("centers must be pairwise distinct")

    @property
    def state_dim(self):
        return self.centers.shape[1]

    @property
    def n_features(self):
        return self.centers.shape[0] + (self.state_dim if self.includes_state else 0)

    def lift(self, x):
        xb, single = _batched(x, self.state_dim)
        r = np.linalg.norm(xb[:, None, :] - self.centers[None, :, :], axis=2)
        phi = tps(r)
        if self.includes_state:
            phi = np.hstack([xb, phi])
        return phi[0] if single else phi

    def to_dict(self):
        return {"kind": "tps", "centers": self.centers.tolist(), "includes_state": self.includes_state}


def sample_centers(mean, std, k, seed, includes_state=True):
    """``k`` centers drawn i.i.d. from ``N(mean, std**2)`` per channel."""
    mean, std = np.asarray(mean, float), np.asarray(std, float)
    if k < 1:
        raise ValueError("k must be >= 1")
    if np.any(std <= 0):
        raise ValueError("center spread must be positive on every channel")
    rng = np.random.default_rng(seed)
    return TpsDictionary(mean + std * rng.standard_normal((k, mean.size)), includes_state)


@dataclass(frozen=True)
class ElmFeatureMap:
    """Frozen random ReLU network; weights never change after construction."""

    specs: tuple
    params: tuple
    includes_state: bool = True

    @classmethod
    def random(cls, state_dim, k=10, hidden=(32, 64), seed=0, includes_state=True):
        specs = tuple(nn.chain([state_dim, *hidden, k], last="linear", last_bias=False))
        params = nn.init_uniform(specs, seed)
        for w, b in params:
            w.setflags(write=False)
            if b is not None:
                b.setflags(write=False)
        return cls(specs, tuple(params), includes_state)

    @property
    def state_dim(self):
        return self.specs[0].in_dim

    @property
    def n_features(self):
        return self.specs[-1].out_dim + (self.state_dim if self.includes_state else 0)

    def lift(self, x):
        xb, single = _batched(x, self.state_dim)
        phi, _ = nn.forward(list(self.params), list(self.specs), xb)
        if self.includes_state:
            phi = np.hstack([xb, phi])
        return phi[0] if single else phi

    def fingerprint(self):
        h = hashlib.sha256()
        for a in nn.arrays(self.params):
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()

    def to_dict(self):
        return {"kind": "elm", "includes_state": self.includes_state,
                "layers": [{"in": s.in_dim, "out": s.out_dim, "activation": s.activation,
                            "W": w.tolist(), "b": None if b is None else b.tolist()}
                           for s, (w, b) in zip(self.specs, self.params)]}


@dataclass(frozen=True)
class IdentityDictionary:
    """``phi(x) = x``; turns EDMD into plain DMD with inputs."""

    state_dim: int

    @property
    def n_features(self):
        return self.state_dim

    def lift(self, x):
        xb, single = _batched(x, self.state_dim)
        return xb[0].copy() if single else xb.copy()

    def to_dict(self):
        return {"kind": "identity", "state_dim": self.state_dim}


def lift(x, dictionary):
    return dictionary.lift(x)


def elm_lift(x, feature_map: ElmFeatureMap):
    return feature_map.lift(x)


def dictionary_from_dict(d):
    kind = d["kind"]
    if kind == "tps":
        return TpsDictionary(np.asarray(d["centers"], float), d["includes_state"])
    if kind == "identity":
        return IdentityDictionary(int(d["state_dim"]))
    if kind == "elm":
        specs, params = [], []
        for layer in d["layers"]:
            has_b = layer["b"] is not None
            specs.append(nn.LayerSpec(layer["in"], layer["out"], layer["activation"], has_b))
            params.append((np.asarray(layer["W"], float), np.asarray(layer["b"], float) if has_b else None))
        return ElmFeatureMap(tuple(specs), tuple(params), d["includes_state"])
    raise ValueError(f"unknown dictionary kind {kind!r}")


def save_dictionary(dictionary, path):
    Path(path).write_text(json.dumps(dictionary.to_dict()))


def load_dictionary(path):
    return dictionary_from_dict(json.loads(Path(path).read_text()))
