"""Black-box MLP one-step predictor trained on self-fed multi-step rollouts."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import neuralnet as nn
from .dataset import window_sequences
from .training import TrainConfig, inf_norm_rows, train_loop

HIDDEN = (32, 64, 128, 128, 64, 32)


@dataclass(frozen=True)
class MlpWeights:
    mse: float = 1.0      # beta1
    inf: float = 1e-9     # beta2
    reg: float = 1e-9     # beta3

    def __post_init__(self):
        if min(self.mse, self.inf, self.reg) < 0:
            raise ValueError("weights must be nonnegative")


@dataclass
class MlpDynModel:
    """``x_next = M([x; u])`` with a sigmoid output head.

    ``random_layer`` marks an untrained layer redrawn from
    ``N(0, random_sigma**2)`` by :meth:`redraw`.
    """

    specs: list
    params: list
    random_layer: int | None = None
    random_sigma: float = 0.1

    def __post_init__(self):
        if self.specs[0].in_dim <= self.specs[-1].out_dim:
            raise ValueError("input must hold the state and at least one control")

    @classmethod
    def init(cls, state_dim, input_dim, hidden=HIDDEN, seed=0, random_sigma=None):
        dims = [state_dim + input_dim, *hidden, state_dim]
        random_layer = None
        if random_sigma is not None:
            dims.insert(2, hidden[0])
            random_layer = 1
        specs = nn.chain(dims, last="sigmoid")
        return cls(specs, nn.init_uniform(specs, seed), random_layer,
                   0.1 if random_sigma is None else float(random_sigma))

    @property
    def state_dim(self):
        return self.specs[-1].out_dim

    @property
    def input_dim(self):
        return self.specs[0].in_dim - self.state_dim

    def redraw(self, rng):
        if self.random_layer is None:
            return
        s = self.specs[self.random_layer]
        self.params[self.random_layer] = (rng.normal(0.0, self.random_sigma, (s.out_dim, s.in_dim)),
                                          rng.normal(0.0, self.random_sigma, s.out_dim))

    def _trainable_idx(self):
        return [i for i in range(len(self.specs)) if i != self.random_layer]

    def trainable(self):
        return nn.arrays([self.params[i] for i in self._trainable_idx()])

    def set_trainable(self, flat):
        idx = self._trainable_idx()
        for i, pr in zip(idx, nn.rebuild([self.specs[i] for i in idx], flat)):
            self.params[i] = pr

    ab_slice = ()


def predict_next(model: MlpDynModel, x, u):
    return nn.forward(model.params, model.specs, np.concatenate([x, u], axis=-1))[0]


def self_fed_rollout(step, x0, u_seq):
    """``x_hat_0 = x0``, ``x_hat_i = step(x_hat_{i-1}, u_{i-1})[0]``.

    ``step`` returns ``(next_state, aux)``; the auxes are collected so the
    caller can backpropagate. Returns ``(preds (b, p, n), auxes)``.
    """
    b, p = u_seq.shape[:2]
    preds = np.empty((b, p, np.shape(x0)[1]))
    auxes = []
    x = x0
    for i in range(p):
        x, aux = step(x, u_seq[:, i])
        preds[:, i] = x
        auxes.append(aux)
    return preds, auxes


def predict_multistep_mlp(model, x0, u_seq):
    """Batched open-loop prediction ``(b, p, n)`` (no reconstruction slot)."""
    preds, _ = self_fed_rollout(lambda x, u: (predict_next(model, x, u), None),
                                np.atleast_2d(x0), np.asarray(u_seq, float))
    return preds


def mlp_loss(model: MlpDynModel, batch, weights: MlpWeights = MlpWeights(), need_grad=True):
    """Self-fed multi-step loss; returns ``(total, mse_term, inf_term, grads)``.

    Both error terms are summed over channels and averaged over the
    ``b * p`` (window, step) pairs.
    """
    b, p, d = batch.x_seq.shape
    n = b * p

    def step(x, u):
        return nn.forward(model.params, model.specs, np.concatenate([x, u], axis=1))

    preds, caches = self_fed_rollout(step, batch.x0, batch.u_seq)
    e = (preds - batch.x_seq).reshape(n, d)
    mse = float(np.sum(e * e)) / n
    e_inf, e_sub = inf_norm_rows(e)
    inf = float(e_inf.sum()) / n
    theta = model.trainable()
    reg = float(sum(np.sum(a * a) for a in theta))
    total = weights.mse * mse + weights.inf * inf + weights.reg * reg
    if not need_grad:
        return total, mse, inf, None
    de = ((2 * weights.mse * e + weights.inf * e_sub) / n).reshape(b, p, d)
    acc = [(np.zeros_like(w), None if bb is None else np.zeros_like(bb)) for w, bb in model.params]
    g_next = np.zeros((b, d))
    for i in range(p - 1, -1, -1):
        g, g_in = nn.backward(model.params, model.specs, caches[i], de[:, i] + g_next)
        for k, (gw, gb) in enumerate(g):
            acc[k][0][...] += gw
            if gb is not None:
                acc[k][1][...] += gb
        g_next = g_in[:, :d]
    grads = nn.arrays([acc[i] for i in model._trainable_idx()])
    grads = [gr + 2 * weights.reg * th for gr, th in zip(grads, theta)]
    return total, mse, inf, grads


def validation_loss(model, episodes_norm, p, tau, weights=MlpWeights()):
    """Mean multi-step squared error over every window (offset 0) of ``episodes_norm``."""
    tot, cnt = 0.0, 0
    for s, u in episodes_norm:
        w = window_sequences(s, u, p, tau, offset=0)
        if w is None:
            continue
        e = predict_multistep_mlp(model, w.x0, w.u_seq) - w.x_seq
        tot += float(np.sum(e * e))
        cnt += e.shape[0] * e.shape[1]
    if cnt == 0:
        raise ValueError("no validation window")
    return tot / cnt


def train_mlp(train_eps, val_eps, config: TrainConfig, weights: MlpWeights = MlpWeights(),
              random_sigma=None, model=None):
    """Train the baseline on normalized episodes; returns ``(model, history)``.

    History rows hold the multi-step squared-error term on training batches
    and on the validation windows.
    """
    if model is None:
        d = train_eps[0][0].shape[1] * config.tau
        m = train_eps[0][1].shape[1]
        model = MlpDynModel.init(d, m, seed=config.seed, random_sigma=random_sigma)

    def loss_fn(mdl, batch):
        total, mse, _, grads = mlp_loss(mdl, batch, weights)
        return total, mse, grads

    hist = train_loop(model, loss_fn, lambda mdl: validation_loss(mdl, val_eps, config.p, config.tau, weights),
                      train_eps, config)
    return model, hist
