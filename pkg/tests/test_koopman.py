import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from deepkoopman import koopman as kp
from deepkoopman import lifting, neuralnet as nn
from deepkoopman.dataset import TrainingBatch
from deepkoopman.training import TrainConfig, TrainingFault, train_loop
from oracles import central_difference, lifted_closed_form, max_rel_error, right_lstsq_formula


def linear_episodes(a, b, n_eps=3, length=120, seed=0):
    r = np.random.default_rng(seed)
    eps = []
    for _ in range(n_eps):
        x = np.empty((length, a.shape[0]))
        u = r.uniform(-1, 1, size=(length, b.shape[1]))
        x[0] = r.uniform(-1, 1, size=a.shape[0])
        for k in range(length - 1):
            x[k + 1] = a @ x[k] + b @ u[k]
        eps.append((x, u))
    return eps


A_TRUE = np.array([[0.9, 0.1], [-0.2, 0.8]])
B_TRUE = np.array([[0.0], [0.5]])


def test_edmd_recovers_linear_system():
    X, Y, U = kp.snapshot_pairs(linear_episodes(A_TRUE, B_TRUE), 1)
    m = kp.edmd_fit(X, Y, U, lifting.IdentityDictionary(2))
    np.testing.assert_allclose(m.A, A_TRUE, atol=1e-10)
    np.testing.assert_allclose(m.B, B_TRUE, atol=1e-10)
    np.testing.assert_allclose(m.C, np.eye(2), atol=1e-10)
    assert m.residuals["ab"] < 1e-9


def test_edmd_matches_normal_equation_oracle(rng):
    X, Y, U = kp.snapshot_pairs(linear_episodes(A_TRUE, B_TRUE, seed=1), 1)
    dic = lifting.sample_centers(np.zeros(2), np.ones(2), 4, 0)
    m = kp.edmd_fit(X, Y, U, dic)
    w = np.vstack([dic.lift(X.T).T, U])
    ab = right_lstsq_formula(dic.lift(Y.T).T, w)
    np.testing.assert_allclose(np.hstack([m.A, m.B]), ab, atol=1e-7)
    assert m.lifted_dim == 6


def test_edmd_rank_deficient_warns():
    X, Y, U = np.ones((2, 2)), np.ones((2, 2)), np.ones((1, 2))
    with pytest.warns(UserWarning, match="rank deficient"):
        kp.edmd_fit(X, Y, U, lifting.IdentityDictionary(2))


@given(st.integers(0, 2**32 - 1))
def test_edmd_invariant_to_snapshot_order(seed):
    X, Y, U = kp.snapshot_pairs(linear_episodes(A_TRUE, B_TRUE, n_eps=1, length=40), 1)
    dic = lifting.sample_centers(np.zeros(2), np.ones(2), 3, 1)
    perm = np.random.default_rng(seed).permutation(X.shape[1])
    a = kp.edmd_fit(X, Y, U, dic)
    b = kp.edmd_fit(X[:, perm], Y[:, perm], U[:, perm], dic)
    np.testing.assert_allclose(a.A, b.A, atol=1e-8)
    np.testing.assert_allclose(a.B, b.B, atol=1e-8)


@given(st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_rollout_matches_closed_form(p, seed):
    r = np.random.default_rng(seed)
    a, b = 0.5 * r.normal(size=(4, 4)), r.normal(size=(4, 2))
    phi0, us = r.normal(size=4), r.normal(size=(p, 2))
    np.testing.assert_allclose(kp.rollout_lifted(a, b, phi0, us), lifted_closed_form(a, b, phi0, us), atol=1e-10)
    np.testing.assert_allclose(kp.rollout_closed_form(a, b, phi0, us), lifted_closed_form(a, b, phi0, us),
                               atol=1e-10)


def test_rollout_batched_equals_single(rng):
    a, b = 0.5 * rng.normal(size=(3, 3)), rng.normal(size=(3, 1))
    phi0, us = rng.normal(size=(2, 3)), rng.normal(size=(2, 5, 1))
    out = kp.rollout_lifted(a, b, phi0, us)
    np.testing.assert_allclose(out[1], kp.rollout_lifted(a, b, phi0[1], us[1]))


def test_predict_multistep_index_zero_is_reconstruction():
    m = kp.identity_model(A_TRUE, B_TRUE, 2)
    x0 = np.array([0.3, -0.1])
    out = kp.predict_multistep(m, x0, np.zeros((3, 1)))
    np.testing.assert_allclose(out[0], x0)
    np.testing.assert_allclose(out[3], np.linalg.matrix_power(A_TRUE, 3) @ x0)


def small_deep_model(seed=0, random_sigma=None):
    return kp.DeepKoopmanModel.init(4, 2, K=3, enc_hidden=(5,), dec_hidden=(6,), seed=seed,
                                    random_sigma=random_sigma)


def test_deep_encoder_is_state_first():
    m = small_deep_model()
    z = np.array([0.1, 0.2, 0.3, 0.4])
    phi = m.encode(z)
    assert phi.shape == (7,)
    np.testing.assert_array_equal(phi[:4], z)


def test_frozen_encoder_lstsq_equals_elm_edmd():
    eps = linear_episodes(A_TRUE, B_TRUE, seed=4)
    m = kp.DeepKoopmanModel.init(4, 1, K=3, enc_hidden=(5,), dec_hidden=(6,), seed=2)
    kp.refit_ab(m, eps, tau=2)
    X, Y, U = kp.snapshot_pairs(eps, 2)
    fmap = lifting.ElmFeatureMap(tuple(m.enc_specs), tuple(m.enc_params), includes_state=True)
    ref = kp.elm_edmd_fit(X, Y, U, fmap)
    np.testing.assert_allclose(m.A, ref.A, atol=1e-8)
    np.testing.assert_allclose(m.B, ref.B, atol=1e-8)


def random_batch(seed, b=3, p=4, d=4, m=2):
    r = np.random.default_rng(seed)
    return TrainingBatch(r.uniform(size=(b, d)), r.uniform(-1, 1, size=(b, p, m)), r.uniform(size=(b, p, d)))


@pytest.mark.parametrize("sigma", [None, 0.1])
def test_deep_loss_gradient_matches_finite_difference(sigma):
    m = small_deep_model(seed=1, random_sigma=sigma)
    m.redraw(np.random.default_rng(0))
    batch = random_batch(5)
    w = kp.LossWeights(1.0, 1.0, 0.3, 0.1, 0.01, 0.02)
    _, grads = kp.deep_losses(m, batch, w)
    num = central_difference(lambda: kp.deep_losses(m, batch, w, need_grad=False)[0].total, m.trainable())
    assert max_rel_error(grads, num) < 1e-5


def test_deep_loss_terms_by_hand():
    m = small_deep_model(seed=3)
    batch = random_batch(6)
    t, _ = kp.deep_losses(m, batch, kp.LossWeights(1, 1, 1, 1, 1, 1), need_grad=False)
    b, p, d = batch.x_seq.shape
    X = batch.x_seq.reshape(-1, d)
    phi_t = m.encode(X)
    phi_p = kp.rollout_lifted(m.A, m.B, m.encode(batch.x0), batch.u_seq).reshape(b * p, -1)
    r = m.decode(phi_t) - X
    e = m.decode(phi_p) - X
    assert t.recon == pytest.approx(np.sum(r ** 2) / (b * p), rel=1e-12)
    assert t.pred == pytest.approx(np.sum(e ** 2) / (b * p), rel=1e-12)
    assert t.lin == pytest.approx(np.sum((phi_t - phi_p) ** 2) / (b * p), rel=1e-12)
    assert t.inf == pytest.approx((np.abs(r).max(1).sum() + np.abs(e).max(1).sum()) / (b * p), rel=1e-12)
    reg = nn.sq_norm(m.enc_params) + nn.sq_norm(m.dec_params)
    assert t.total == pytest.approx(t.recon + t.pred + t.lin + t.inf + reg, rel=1e-12)


def test_random_layer_not_trained_and_redrawn():
    m = small_deep_model(random_sigma=0.1)
    assert m.random_layer == 1
    n_plain = len(small_deep_model().trainable())
    assert len(m.trainable()) == n_plain
    before = m.enc_params[1][0].copy()
    m.redraw(np.random.default_rng(1))
    assert not np.array_equal(before, m.enc_params[1][0])
    w, _ = m.enc_params[1]
    assert w.shape == (5, 5)
    reg_before = m.enc_sq_norm()
    m.enc_params[1] = (w * 100, m.enc_params[1][1])
    assert m.enc_sq_norm() == reg_before


def test_training_stop_tolerance_infinite_runs_no_batches():
    eps = linear_episodes(A_TRUE, B_TRUE, n_eps=2, length=60)
    m, h = kp.train_deep(eps, eps, TrainConfig(p=5, tau=2, stop_tol=math.inf), K=3)
    assert len(h.rows) == 1 and h.losses == []


def test_training_freeze_ab():
    eps = linear_episodes(A_TRUE, B_TRUE, n_eps=2, length=60)
    m0 = kp.DeepKoopmanModel.init(4, 1, K=3, seed=0)
    kp.refit_ab(m0, eps, 2)
    a0, b0 = m0.A.copy(), m0.B.copy()
    cfg = TrainConfig(p=5, tau=2, batch_size=4, max_batches=3, freeze_ab_until=3, rate=1e-2)
    m, h = kp.train_deep(eps, eps, cfg, model=m0)
    np.testing.assert_array_equal(m.A, a0)
    np.testing.assert_array_equal(m.B, b0)
    assert h.batches[-1] == 3


def test_training_reduces_validation_loss():
    eps = linear_episodes(A_TRUE, B_TRUE, n_eps=3, length=200)
    eps = [((x + 2) / 4, u) for x, u in eps]
    cfg = TrainConfig(p=5, tau=2, batch_size=16, max_epochs=1000, max_batches=300, rate=1e-3, log_every=100)
    _, h = kp.train_deep(eps[:2], eps[2:], cfg, K=3)
    assert h.val[-1] < h.val[0]
    assert list(h.batches) == [0, 100, 200, 300]


def test_training_deterministic():
    eps = linear_episodes(A_TRUE, B_TRUE, n_eps=2, length=80)
    cfg = TrainConfig(p=5, tau=2, batch_size=8, max_batches=20, rate=1e-3)
    m1, h1 = kp.train_deep(eps, eps, cfg, K=3)
    m2, h2 = kp.train_deep(eps, eps, cfg, K=3)
    assert h1.rows == h2.rows
    np.testing.assert_array_equal(m1.A, m2.A)


def test_history_csv_round_trip(tmp_path):
    eps = linear_episodes(A_TRUE, B_TRUE, n_eps=2, length=80)
    _, h = kp.train_deep(eps, eps, TrainConfig(p=5, tau=2, batch_size=8, max_batches=4, log_every=2), K=3)
    h.to_csv(tmp_path / "h.csv")
    from deepkoopman.training import History
    back = History.from_csv(tmp_path / "h.csv")
    np.testing.assert_array_equal(back.batches, h.batches)
    np.testing.assert_array_equal(back.val, h.val)


class _Exploding:
    ab_slice = ()

    def __init__(self):
        self.w = np.zeros(1)

    def redraw(self, rng):
        pass

    def trainable(self):
        return [self.w]

    def set_trainable(self, flat):
        self.w = flat[0]


def test_epoch_cap_stops_training():
    eps = linear_episodes(A_TRUE, B_TRUE, n_eps=1, length=60)
    _, h = kp.train_deep(eps, eps, TrainConfig(p=5, tau=2, batch_size=100, max_epochs=3), K=3)
    assert h.stopped == "max_epochs" and h.batches[-1] == 3


def test_divergence_raises_with_history():
    eps = linear_episodes(A_TRUE, B_TRUE, n_eps=1, length=60)
    calls = []

    def loss(model, batch):
        calls.append(1)
        value = 10.0 ** (3 * len(calls))
        return value, value, [np.ones(1)]

    with pytest.raises(TrainingFault) as exc:
        train_loop(_Exploding(), loss, lambda m: 0.0, eps, TrainConfig(p=2, tau=1, batch_size=2))
    assert exc.value.batch == 2
    assert len(exc.value.history.rows) == 1


def test_spectrum_stability():
    rep = kp.spectrum(np.diag([0.5, -0.9]))
    assert rep.stable and rep.spectral_radius == pytest.approx(0.9)
    rep = kp.spectrum(np.diag([0.5, 1.1]))
    assert not rep.stable and rep.dominant == pytest.approx(1.1)


def test_window_predictions_shapes():
    eps = linear_episodes(A_TRUE, B_TRUE, n_eps=1, length=50)
    m = kp.identity_model(A_TRUE, B_TRUE, 2)
    pred, tgt = kp.window_predictions(m, eps[0][0], eps[0][1], 5, 1)
    assert pred.shape == tgt.shape == (9, 5, 2)
    np.testing.assert_allclose(pred, tgt, atol=1e-12)
