"""Small fully-connected networks with hand-written backpropagation and Adam.

A network is described by a list of :class:`LayerSpec` and its parameters by
a same-length list of ``(W, b)`` pairs, ``W`` of shape ``(out, in)`` and ``b``
either a length-``out`` vector or ``None``. Inputs are batched along the first
axis; a 1-D input is treated as a batch of one and returned 1-D.
"""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass

import numpy as np

ACTIVATIONS = ("relu", "sigmoid", "linear")


@dataclass(frozen=True)
class LayerSpec:
    in_dim: int
    out_dim: int
    activation: str = "relu"
    has_bias: bool = True

    def __post_init__(self):
        if self.in_dim < 1 or self.out_dim < 1:
            raise ValueError("layer dimensions must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")


def chain(dims, hidden="relu", last="linear", last_bias=True):
    """Specs for a stack ``dims[0] -> dims[1] -> ... -> dims[-1]``."""
    specs = []
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        final = i == len(dims) - 2
        specs.append(LayerSpec(a, b, last if final else hidden, last_bias if final else True))
    return specs


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _check(params, specs):
    if len(params) != len(specs):
        raise ValueError("params and specs differ in layer count")
    for (w, b), s in zip(params, specs):
        if w.shape != (s.out_dim, s.in_dim):
            raise ValueError(f"weight shape {w.shape} does not match {s}")
        if (b is None) == s.has_bias:
            raise ValueError(f"bias presence does not match {s}")


def forward(params, specs, x):
    """Evaluate the network; returns ``(output, cache)`` for :func:`backward`."""
    _check(params, specs)
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    h = x[None, :] if single else x
    if h.shape[1] != specs[0].in_dim:
        raise ValueError(f"input width {h.shape[1]} != {specs[0].in_dim}")
    inputs, outputs = [], []
    for (w, b), s in zip(params, specs):
        inputs.append(h)
        z = h @ w.T
        if b is not None:
            z = z + b
        if s.activation == "relu":
            h = np.maximum(z, 0.0)
        elif s.activation == "sigmoid":
            h = _sigmoid(z)
        else:
            h = z
        outputs.append(h)
    cache = {"params": params, "inputs": inputs, "outputs": outputs, "single": single}
    return (h[0] if single else h), cache


def backward(params, specs, cache, grad_out):
    """Gradients of ``sum(grad_out * output)``.

    Returns ``(grads, grad_in)`` with ``grads`` shaped like ``params``.
    ReLU's derivative at zero is taken as zero.
    """
    if cache.get("params") is not params:
        raise ValueError("cache was produced by a different parameter set")
    _check(params, specs)
    g = np.asarray(grad_out, dtype=float)
    if cache["single"]:
        g = g[None, :]
    if g.shape != cache["outputs"][-1].shape:
        raise ValueError("output gradient shape mismatch")
    grads = [None] * len(specs)
    for i in range(len(specs) - 1, -1, -1):
        w, b = params[i]
        act, out = specs[i].activation, cache["outputs"][i]
        if act == "relu":
            g = g * (out > 0.0)
        elif act == "sigmoid":
            g = g * out * (1.0 - out)
        grads[i] = (g.T @ cache["inputs"][i], g.sum(axis=0) if b is not None else None)
        g = g @ w
    return grads, (g[0] if cache["single"] else g)


def init_uniform(specs, rng):
    """Weights and biases ~ U[-f, f] with ``f = 1/sqrt(in_dim)``.

    ``rng`` is a seed or a ``numpy.random.Generator``.
    """
    rng = np.random.default_rng(rng)
    params = []
    for s in specs:
        f = 1.0 / np.sqrt(s.in_dim)
        w = rng.uniform(-f, f, size=(s.out_dim, s.in_dim))
        b = rng.uniform(-f, f, size=s.out_dim) if s.has_bias else None
        params.append((w, b))
    return params


def arrays(params):
    """Flatten ``[(W, b), ...]`` into a list of arrays (``None`` biases skipped)."""
    out = []
    for w, b in params:
        out.append(w)
        if b is not None:
            out.append(b)
    return out


def rebuild(specs, flat):
    """Inverse of :func:`arrays`."""
    it = iter(flat)
    return [(next(it), next(it) if s.has_bias else None) for s in specs]


def sq_norm(params):
    return float(sum(np.sum(a * a) for a in arrays(params)))


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list | None = None
    v: list | None = None


def adam_step(state: AdamState, params, grads):
    """One bias-corrected Adam update over matching lists of arrays.

    Returns fresh arrays; the inputs are left untouched.
    """
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    for p, g in zip(params, grads):
        if np.shape(p) != np.shape(g):
            raise ValueError(f"shape mismatch {np.shape(p)} vs {np.shape(g)}")
    if state.m is None:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    new = []
    for i, (p, g) in enumerate(zip(params, grads)):
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        new.append(p - state.rate * (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + state.eps))
    return new


# ---------------------------------------------------------------------------
# Binary checkpoint layout: "MLPB", u32 version, u32 layers, per layer
# (u32 in, u32 out, u8 activation, u8 has_bias), then little-endian float64
# data, each layer's W (row-major) followed by its b.
# ---------------------------------------------------------------------------

_MAGIC = b"MLPB"


def params_to_bytes(specs, params):
    _check(params, specs)
    buf = io.BytesIO()
    buf.write(_MAGIC)
    buf.write(struct.pack("<II", 1, len(specs)))
    for s in specs:
        buf.write(struct.pack("<IIBB", s.in_dim, s.out_dim, ACTIVATIONS.index(s.activation), int(s.has_bias)))
    for a in arrays(params):
        buf.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return buf.getvalue()


def params_from_bytes(data):
    if data[:4] != _MAGIC:
        raise ValueError("not a network checkpoint")
    version, n = struct.unpack_from("<II", data, 4)
    if version != 1:
        raise ValueError(f"unsupported checkpoint version {version}")
    off = 12
    specs = []
    for _ in range(n):
        i, o, a, hb = struct.unpack_from("<IIBB", data, off)
        off += 10
        specs.append(LayerSpec(i, o, ACTIVATIONS[a], bool(hb)))
    flat = []
    for s in specs:
        shapes = [(s.out_dim, s.in_dim)] + ([(s.out_dim,)] if s.has_bias else [])
        for shp in shapes:
            count = int(np.prod(shp))
            flat.append(np.frombuffer(data, dtype="<f8", count=count, offset=off).reshape(shp).astype(float))
            off += 8 * count
    if off != len(data):
        raise ValueError("trailing bytes in checkpoint")
    return specs, rebuild(specs, flat)


def matrix_to_bytes(m):
    m = np.atleast_2d(np.asarray(m, dtype=float))
    return struct.pack("<II", *m.shape) + np.ascontiguousarray(m, dtype="<f8").tobytes()


def matrix_from_bytes(data):
    r, c = struct.unpack_from("<II", data, 0)
    return np.frombuffer(data, dtype="<f8", count=r * c, offset=8).reshape(r, c).astype(float)
