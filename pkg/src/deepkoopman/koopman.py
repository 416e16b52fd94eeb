"""Lifted linear predictors: analytic EDMD / ELM-EDMD fits, the deep
autoencoder Koopman model with its multi-step losses and training loop,
multi-step prediction and spectral diagnostics.

Array conventions: the fit functions take snapshot matrices with one
snapshot per *column* (``X`` is ``n x M``); everything else is batched along
the first axis (rows are samples).
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import neuralnet as nn
from . import numkit
from .dataset import stack_delays, window_sequences
from .lifting import ElmFeatureMap, IdentityDictionary
from .training import TrainConfig, inf_norm_rows, train_loop

log = logging.getLogger(__name__)

__all__ = [
    "LinearLiftedModel", "DeepKoopmanModel", "LossWeights", "LossTerms", "TrainConfig",
    "edmd_fit", "elm_edmd_fit", "rollout_lifted", "rollout_closed_form",
    "predict_multistep", "deep_losses", "train_deep", "refit_ab", "spectrum",
]


# ---------------------------------------------------------------------------
# Linear lifted models (EDMD)
# ---------------------------------------------------------------------------

@dataclass
class LinearLiftedModel:
    A: np.ndarray  # (L, L)
    B: np.ndarray  # (L, m)
    C: np.ndarray  # (n, L)
    dictionary: object
    residuals: dict = field(default_factory=dict)

    def __post_init__(self):
        L = self.A.shape[0]
        if self.A.shape != (L, L) or self.B.shape[0] != L or self.C.shape[1] != L:
            raise ValueError("inconsistent lifted dimensions")
        if L != self.dictionary.n_features:
            raise ValueError("dictionary output length differs from the lifted dimension")
        if not all(np.all(np.isfinite(m)) for m in (self.A, self.B, self.C)):
            raise ValueError("model matrices must be finite")

    @property
    def lifted_dim(self):
        return self.A.shape[0]

    def encode(self, x):
        return self.dictionary.lift(x)

    def decode(self, phi):
        return np.asarray(phi, float) @ self.C.T


def edmd_fit(X, Y, U, dictionary, tol=0.0):
    """Least-squares lifted model from snapshot triples ``y_k = f(x_k, u_k)``.

    ``[A B] = V W^T (W W^T)^+`` with ``W = [phi(X); U]`` and ``V = phi(Y)``,
    and the linear decoder ``C = X Xi^T (Xi Xi^T)^+`` with ``Xi = phi(X)``.
    Frobenius residuals of both fits are stored on the returned model.
    """
    X, Y, U = (np.atleast_2d(np.asarray(a, float)) for a in (X, Y, U))
    M = X.shape[1]
    if Y.shape != X.shape or U.shape[1] != M:
        raise ValueError("X, Y and U must have the same number of snapshot columns")
    xi = dictionary.lift(X.T).T
    v = dictionary.lift(Y.T).T
    w = np.vstack([xi, U])
    if M < w.shape[0]:
        warnings.warn(f"{M} snapshots for {w.shape[0]} unknowns per row; the fit is rank deficient",
                      stacklevel=2)
    ab = numkit.lstsq_right(v, w, tol)
    c = numkit.lstsq_right(X, xi, tol)
    L = xi.shape[0]
    res = {"ab": float(np.linalg.norm(v - ab @ w)), "c": float(np.linalg.norm(X - c @ xi))}
    return LinearLiftedModel(ab[:, :L], ab[:, L:], c, dictionary, res)


def elm_edmd_fit(X, Y, U, elm_map: ElmFeatureMap, tol=0.0):
    """EDMD with features from a frozen random network."""
    return edmd_fit(X, Y, U, elm_map, tol)


def snapshot_pairs(episodes_norm, tau):
    """Column snapshot matrices ``(X, Y, U)`` of delay states from normalized episodes."""
    xs, ys, us = [], [], []
    for states, controls in episodes_norm:
        z = stack_delays(states, tau)
        u = np.asarray(controls, float)[tau - 1:]
        xs.append(z[:-1])
        ys.append(z[1:])
        us.append(u[:-1])
    return np.vstack(xs).T, np.vstack(ys).T, np.vstack(us).T


# ---------------------------------------------------------------------------
# Rollout
# ---------------------------------------------------------------------------

def rollout_lifted(A, B, phi0, u_seq):
    """``phi_{i+1} = A phi_i + B u_i``; returns ``phi_1 .. phi_p``.

    ``phi0`` may be ``(L,)`` with ``u_seq (p, m)``, or batched ``(b, L)``
    with ``u_seq (b, p, m)``.
    """
    A, B = np.asarray(A, float), np.asarray(B, float)
    u_seq = np.asarray(u_seq, float)
    single = np.ndim(phi0) == 1
    cur = np.atleast_2d(np.asarray(phi0, float))
    u = u_seq[None] if single else u_seq
    if u.shape[0] != cur.shape[0] or u.shape[2] != B.shape[1] or cur.shape[1] != A.shape[0]:
        raise ValueError("rollout dimensions disagree")
    out = np.empty((cur.shape[0], u.shape[1], A.shape[0]))
    for i in range(u.shape[1]):
        cur = cur @ A.T + u[:, i] @ B.T
        out[:, i] = cur
    return out[0] if single else out


def rollout_closed_form(A, B, phi0, u_seq):
    """``phi_p = A^p phi_0 + sum_{i=1..p} A^{i-1} B u_{p-i}`` evaluated per step."""
    A, B, phi0 = np.asarray(A, float), np.asarray(B, float), np.asarray(phi0, float)
    u_seq = np.asarray(u_seq, float)
    p = len(u_seq)
    powers = [np.eye(A.shape[0])]
    for _ in range(p):
        powers.append(powers[-1] @ A)
    out = np.empty((p, A.shape[0]))
    for k in range(1, p + 1):
        out[k - 1] = powers[k] @ phi0 + sum(powers[i - 1] @ B @ u_seq[k - i] for i in range(1, k + 1))
    return out


def predict_multistep(model, x0, u_seq):
    """Open-loop prediction; index 0 is the reconstruction of ``x0``.

    Works for :class:`LinearLiftedModel` and :class:`DeepKoopmanModel`.
    Single ``x0 (d,)`` with ``u_seq (p, m)`` returns ``(p+1, d)``; batched
    ``(b, d)`` with ``(b, p, m)`` returns ``(b, p+1, d)``.
    """
    single = np.ndim(x0) == 1
    x0 = np.atleast_2d(np.asarray(x0, float))
    u = np.asarray(u_seq, float)
    u = u[None] if single else u
    if u.ndim == 2:  # zero-length sequence given as (0,) or (0, m)
        u = u.reshape(x0.shape[0], 0, model.B.shape[1])
    phi0 = model.encode(x0)
    phis = np.concatenate([phi0[:, None], rollout_lifted(model.A, model.B, phi0, u)], axis=1)
    b, q, L = phis.shape
    out = model.decode(phis.reshape(b * q, L)).reshape(b, q, -1)
    return out[0] if single else out


# ---------------------------------------------------------------------------
# Deep model
# ---------------------------------------------------------------------------

@dataclass
class DeepKoopmanModel:
    """Encoder ``z -> [z; net(z)]``, decoder back to ``z``, lifted ``A``, ``B``.

    When ``random_layer`` is set, that encoder layer is not trained: its
    weights and biases are redrawn from ``N(0, random_sigma**2)`` by
    :meth:`redraw`.
    """

    enc_specs: list
    enc_params: list
    dec_specs: list
    dec_params: list
    A: np.ndarray
    B: np.ndarray
    random_layer: int | None = None
    random_sigma: float = 0.1

    def __post_init__(self):
        d = self.state_dim
        if self.dec_specs[-1].out_dim != d:
            raise ValueError("decoder output width must equal encoder input width")
        L = d + self.enc_specs[-1].out_dim
        if self.A.shape != (L, L) or self.B.shape[0] != L or self.dec_specs[0].in_dim != L:
            raise ValueError(f"lifted dimension must be K + state width = {L}")

    @classmethod
    def init(cls, state_dim, input_dim, K=10, enc_hidden=(32, 64), dec_hidden=(128, 64, 32),
             seed=0, random_sigma=None):
        rng = np.random.default_rng(seed)
        dims = [state_dim, *enc_hidden, K]
        random_layer = None
        if random_sigma is not None:
            dims.insert(2, enc_hidden[0])  # square random layer after the first hidden one
            random_layer = 1
        enc_specs = nn.chain(dims, last="linear", last_bias=False)
        L = K + state_dim
        dec_specs = nn.chain([L, *dec_hidden, state_dim], last="sigmoid")
        enc = nn.init_uniform(enc_specs, rng)
        dec = nn.init_uniform(dec_specs, rng)
        f = 1.0 / np.sqrt(L + input_dim)
        A = np.eye(L) + rng.uniform(-f, f, (L, L)) * 0.1
        B = rng.uniform(-f, f, (L, input_dim))
        m = cls(enc_specs, enc, dec_specs, dec, A, B, random_layer,
                0.1 if random_sigma is None else float(random_sigma))
        return m

    @property
    def state_dim(self):
        return self.enc_specs[0].in_dim

    @property
    def lifted_dim(self):
        return self.A.shape[0]

    @property
    def input_dim(self):
        return self.B.shape[1]

    def encode(self, z):
        z = np.asarray(z, float)
        single = z.ndim == 1
        zb = np.atleast_2d(z)
        net, _ = nn.forward(self.enc_params, self.enc_specs, zb)
        phi = np.hstack([zb, net])
        return phi[0] if single else phi

    def decode(self, phi):
        return nn.forward(self.dec_params, self.dec_specs, phi)[0]

    def lift_state(self, x, tau=2):
        """Encode a single physical state by repeating it in every delay slot."""
        return self.encode(np.tile(np.asarray(x, float), tau))

    def redraw(self, rng):
        if self.random_layer is None:
            return
        s = self.enc_specs[self.random_layer]
        w = rng.normal(0.0, self.random_sigma, (s.out_dim, s.in_dim))
        b = rng.normal(0.0, self.random_sigma, s.out_dim)
        self.enc_params[self.random_layer] = (w, b)

    # trainable parameter plumbing -------------------------------------------------
    def _enc_trainable_idx(self):
        return [i for i in range(len(self.enc_specs)) if i != self.random_layer]

    def trainable(self):
        enc = [self.enc_params[i] for i in self._enc_trainable_idx()]
        return nn.arrays(enc) + nn.arrays(self.dec_params) + [self.A, self.B]

    def set_trainable(self, flat):
        idx = self._enc_trainable_idx()
        n_enc = len(nn.arrays([self.enc_params[i] for i in idx]))
        enc = nn.rebuild([self.enc_specs[i] for i in idx], flat[:n_enc])
        for i, pr in zip(idx, enc):
            self.enc_params[i] = pr
        n_dec = len(nn.arrays(self.dec_params))
        self.dec_params = nn.rebuild(self.dec_specs, flat[n_enc:n_enc + n_dec])
        self.A, self.B = flat[n_enc + n_dec], flat[n_enc + n_dec + 1]

    @property
    def ab_slice(self):
        n = len(self.trainable())
        return (n - 2, n - 1)

    def enc_sq_norm(self):
        return nn.sq_norm([self.enc_params[i] for i in self._enc_trainable_idx()])

    def copy(self):
        cp = lambda ps: [(w.copy(), None if b is None else b.copy()) for w, b in ps]
        return DeepKoopmanModel(list(self.enc_specs), cp(self.enc_params), list(self.dec_specs),
                                cp(self.dec_params), self.A.copy(), self.B.copy(),
                                self.random_layer, self.random_sigma)


@dataclass(frozen=True)
class LossWeights:
    recon: float = 1.0       # alpha1, reconstruction
    pred: float = 1.0        # alpha2, multi-step state prediction
    lin: float = 0.3         # alpha3, lifted-space linearity
    inf: float = 1e-9        # alpha4, infinity-norm terms
    reg_enc: float = 1e-9    # alpha5
    reg_dec: float = 1e-9    # alpha6

    def __post_init__(self):
        vals = self.as_tuple()
        if any(v < 0 for v in vals) or not any(v > 0 for v in vals):
            raise ValueError("loss weights must be nonnegative and not all zero")

    def as_tuple(self):
        return (self.recon, self.pred, self.lin, self.inf, self.reg_enc, self.reg_dec)

    @classmethod
    def from_sequence(cls, a):
        return cls(*map(float, a))


@dataclass(frozen=True)
class LossTerms:
    total: float
    pred: float   # multi-step prediction through the decoder
    lin: float    # lifted-space linearity
    recon: float  # autoencoder reconstruction
    inf: float    # both infinity-norm terms


def deep_losses(model: DeepKoopmanModel, batch, weights: LossWeights, need_grad=True):
    """Weighted multi-step loss and its exact gradient.

    All squared/infinity-norm terms are summed over channels and averaged
    over the ``b * p`` (window, step) pairs. The gradient is returned as a
    list aligned with ``model.trainable()`` and flows through every step of
    the lifted rollout.
    """
    a1, a2, a3, a4, a5, a6 = weights.as_tuple()
    b, p, d = batch.x_seq.shape
    n = b * p
    A, B = model.A, model.B
    U = batch.u_seq
    X = batch.x_seq.reshape(n, d)
    enc_in = np.vstack([batch.x0, X])
    net, enc_cache = nn.forward(model.enc_params, model.enc_specs, enc_in)
    phi = np.hstack([enc_in, net])
    phi0, phi_t = phi[:b], phi[b:]
    phi_p = rollout_lifted(A, B, phi0, U)  # (b, p, L)
    L = phi.shape[1]
    dec_out, dec_cache = nn.forward(model.dec_params, model.dec_specs,
                                    np.vstack([phi_t, phi_p.reshape(n, L)]))
    r = dec_out[:n] - X
    e = dec_out[n:] - X
    dl = phi_t - phi_p.reshape(n, L)
    l_recon = float(np.sum(r * r)) / n
    l_pred = float(np.sum(e * e)) / n
    l_lin = float(np.sum(dl * dl)) / n
    r_inf, r_sub = inf_norm_rows(r)
    e_inf, e_sub = inf_norm_rows(e)
    l_inf = float(r_inf.sum() + e_inf.sum()) / n
    reg_e = model.enc_sq_norm()
    reg_d = nn.sq_norm(model.dec_params)
    total = a1 * l_recon + a2 * l_pred + a3 * l_lin + a4 * l_inf + a5 * reg_e + a6 * reg_d
    terms = LossTerms(total, l_pred, l_lin, l_recon, l_inf)
    if not need_grad:
        return terms, None

    d_out = np.vstack([(2 * a1 * r + a4 * r_sub) / n, (2 * a2 * e + a4 * e_sub) / n])
    g_dec, g_in = nn.backward(model.dec_params, model.dec_specs, dec_cache, d_out)
    d_lin = 2 * a3 * dl / n
    d_phi_t = g_in[:n] + d_lin
    d_phi_p = (g_in[n:] - d_lin).reshape(b, p, L)

    dA = np.zeros_like(A)
    dB = np.zeros_like(B)
    lam = np.zeros((b, L))
    for i in range(p - 1, -1, -1):
        lam = lam + d_phi_p[:, i]
        prev = phi_p[:, i - 1] if i > 0 else phi0
        dA += lam.T @ prev
        dB += lam.T @ U[:, i]
        lam = lam @ A
    d_phi = np.vstack([lam, d_phi_t])
    g_enc, _ = nn.backward(model.enc_params, model.enc_specs, enc_cache, d_phi[:, d:])

    grads = []
    for i in model._enc_trainable_idx():
        (w, bias), (gw, gb) = model.enc_params[i], g_enc[i]
        grads.append(gw + 2 * a5 * w)
        if bias is not None:
            grads.append(gb + 2 * a5 * bias)
    for (w, bias), (gw, gb) in zip(model.dec_params, g_dec):
        grads.append(gw + 2 * a6 * w)
        if bias is not None:
            grads.append(gb + 2 * a6 * bias)
    grads += [dA, dB]
    return terms, grads


def refit_ab(model: DeepKoopmanModel, episodes_norm, tau, tol=0.0):
    """Least-squares ``A, B`` for the current encoder over all one-step pairs."""
    X, Y, U = snapshot_pairs(episodes_norm, tau)
    v = model.encode(Y.T).T
    w = np.vstack([model.encode(X.T).T, U])
    ab = numkit.lstsq_right(v, w, tol)
    L = model.lifted_dim
    model.A, model.B = ab[:, :L].copy(), ab[:, L:].copy()
    return model


def validation_recon(model, episodes_norm, tau):
    """Mean squared reconstruction error over every delay state of ``episodes_norm``."""
    z = np.vstack([stack_delays(s, tau) for s, _ in episodes_norm])
    r = model.decode(model.encode(z)) - z
    return float(np.sum(r * r)) / len(z)


def train_deep(train_eps, val_eps, config: TrainConfig, weights: LossWeights = LossWeights(),
               K=10, random_sigma=None, ab_init="lstsq", model=None):
    """Train the deep Koopman model on normalized ``(states, controls)`` episodes.

    ``ab_init='lstsq'`` fits ``A, B`` to the untrained encoder features before
    the first batch; ``'random'`` keeps the near-identity random draw.
    Returns ``(model, history)``; the history rows hold the batch index, the
    mean training reconstruction loss since the previous row, and the
    validation reconstruction loss.
    """
    if model is None:
        d = train_eps[0][0].shape[1] * config.tau
        m = train_eps[0][1].shape[1]
        model = DeepKoopmanModel.init(d, m, K=K, seed=config.seed, random_sigma=random_sigma)
    if ab_init == "lstsq":
        model.redraw(np.random.default_rng(config.seed))
        refit_ab(model, train_eps, config.tau)
    elif ab_init != "random":
        raise ValueError(f"unknown ab_init {ab_init!r}")

    def loss_fn(mdl, batch):
        terms, grads = deep_losses(mdl, batch, weights)
        return terms.total, terms.recon, grads

    hist = train_loop(model, loss_fn, lambda mdl: validation_recon(mdl, val_eps, config.tau),
                      train_eps, config)
    return model, hist


# ---------------------------------------------------------------------------
# Spectrum
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SpectrumReport:
    eigenvalues: np.ndarray  # sorted by modulus, descending
    stable: bool

    @property
    def dominant(self):
        return self.eigenvalues[0]

    @property
    def spectral_radius(self):
        return float(abs(self.eigenvalues[0]))


def spectrum(A, margin=1e-6):
    ev = numkit.eigvals(A)
    ev = ev[np.argsort(-np.abs(ev), kind="stable")]
    return SpectrumReport(ev, bool(np.all(np.abs(ev) <= 1.0 + margin)))


# ---------------------------------------------------------------------------
# Evaluation helpers
# ---------------------------------------------------------------------------

def window_predictions(model, states, controls, p, tau, predict=None):
    """Predictions and targets for every length-``p`` window of one episode.

    Returns ``(pred, target)``, each ``(windows, p, n)`` in the physical
    (most recent) slot of the delay state.
    """
    w = window_sequences(states, controls, p, tau, offset=0)
    if w is None:
        raise ValueError("episode too short for the requested horizon")
    predict = predict or (lambda x0, u: predict_multistep(model, x0, u)[:, 1:])
    n = np.shape(states)[1]
    return predict(w.x0, w.u_seq)[..., -n:], w.x_seq[..., -n:]


def horizon_rmse(pred, target):
    """Per-channel RMSE at each step of the horizon: ``(p, n)``."""
    return np.sqrt(np.mean((pred - target) ** 2, axis=0))


def identity_model(A, B, state_dim):
    """Plain linear model ``x+ = A x + B u`` wrapped as a lifted model."""
    return LinearLiftedModel(np.asarray(A, float), np.asarray(B, float), np.eye(state_dim),
                             IdentityDictionary(state_dim))
