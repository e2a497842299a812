import math

import numpy as np
import pytest

from masslearn import autodiff as ad
from masslearn import data as datamod
from masslearn import mixtures as mx
from masslearn import network as net
from masslearn import optim
from masslearn import training as tr


def _standard_normal_mixture(n_classes, dim):
    # zero means, unit covariance, equal weights and priors
    return mx.mixture_init(n_classes, 1, dim, seed=0, mean_scale=0.0)


def _identity_net(dim):
    cfg = net.MlpConfig(input_dim=dim, hidden_dims=(), output_dim=dim, nonlinearity="identity")
    params = net.mlp_init(cfg, seed=0)
    params.weights[0] = np.eye(dim)
    params.biases[0] = np.zeros(dim)
    return params


def test_single_sample_identity_map_loss_value():
    # f = identity on R^2, q = standard normal, one class, sample at the origin:
    # the conditional term is 0 (only one class), the entropy term is
    # -log N(0; 0, I) = log(2*pi), and the volume term vanishes because the
    # Jacobian is the identity.  beta = 1 adds them up to log(2*pi).
    params = _identity_net(2)
    mixture = _standard_normal_mixture(1, 2)
    cfg = tr.TrainConfig(beta=1.0, subsample_jacobian=False, jitter=0.0)
    x = np.zeros((1, 2))
    y = np.zeros(1, dtype=np.int64)
    breakdown, _, _ = tr.mass_minibatch_loss(params, mixture, x, y, cfg)
    assert abs(breakdown.cond_entropy_term) < 1e-12
    assert abs(breakdown.entropy_term - math.log(2.0 * math.pi)) < 1e-12
    assert abs(breakdown.jacobian_term) < 1e-12
    assert abs(breakdown.total - 1.8378770664093453) < 1e-9


def _toy_problem(seed, n=12, dim=4, n_classes=3, hidden=(6,), r=2, batchnorm=True):
    gen = np.random.default_rng(seed)
    x = gen.normal(size=(n, dim))
    y = gen.integers(0, n_classes, size=n).astype(np.int64)
    cfg_net = net.MlpConfig(input_dim=dim, hidden_dims=hidden, output_dim=r,
                            use_batchnorm=batchnorm)
    params = net.mlp_init(cfg_net, seed=seed)
    mixture = mx.mixture_init(n_classes, 2, r, seed=seed)
    return x, y, params, mixture


def test_loss_term_identity():
    # total must equal cond + beta*ent - beta*jac, not merely correlate with it
    for rep in range(8):
        x, y, params, mixture = _toy_problem(rep)
        beta = [0.0, 1e-3, 0.1, 1.0][rep % 4]
        cfg = tr.TrainConfig(beta=beta)
        breakdown, _, _ = tr.mass_minibatch_loss(params, mixture, x, y, cfg)
        recomposed = (breakdown.cond_entropy_term
                      + beta * breakdown.entropy_term
                      - beta * breakdown.jacobian_term)
        assert abs(breakdown.total - recomposed) <= 1e-12
        assert np.isfinite(breakdown.total)


def test_beta_zero_matches_posterior_nll_and_skips_jacobian(monkeypatch):
    x, y, params, mixture = _toy_problem(3)

    def boom(*args, **kwargs):
        raise AssertionError("volume term requested at beta=0")

    monkeypatch.setattr(net, "log_jacobian_nodes", boom)
    cfg = tr.TrainConfig(beta=0.0)
    breakdown, net_grads, mix_grads = tr.mass_minibatch_loss(params, mixture, x, y, cfg)
    assert breakdown.jacobian_term == 0.0
    assert breakdown.total == breakdown.cond_entropy_term
    monkeypatch.undo()

    # twin objective assembled by hand: mean -log q(y|z)
    tape = ad.Tape()
    pnodes = net.make_param_nodes(tape, params)
    mnodes = mx.make_mixture_nodes(tape, mixture)
    out, _ = net.forward_nodes(tape, pnodes, params, tape.constant(x), mode="train")
    dens = mx.density_nodes(tape, mnodes, mixture, out, y)
    loss = ad.neg(ad.mean_all(dens.log_post_own))
    grads = ad.backward(loss, list(pnodes.values()) + list(mnodes.values()))
    assert abs(loss.item() - breakdown.total) <= 1e-12
    for name, node in pnodes.items():
        np.testing.assert_allclose(net_grads[name], grads[node], rtol=0, atol=1e-10)
    for name, node in mnodes.items():
        np.testing.assert_allclose(mix_grads[name], grads[node], rtol=0, atol=1e-10)


def test_jacobian_term_matches_direct_computation():
    x, y, params, mixture = _toy_problem(7, n=10)
    cfg = tr.TrainConfig(beta=0.5, subsample_jacobian=True)
    breakdown, _, _ = tr.mass_minibatch_loss(params, mixture, x, y, cfg)
    n_sub = tr.jacobian_subbatch_size(len(x), params.config.output_dim)
    assert n_sub == 5
    _, stats = net.forward_fast(params, x, mode="train", return_stats=True)
    direct = net.log_jacobian_batch(params, x[:n_sub], jitter=cfg.jitter,
                                    mode="train", batch_stats=stats)
    assert abs(breakdown.jacobian_term - direct.mean()) <= 1e-12


def test_subsampled_jacobian_estimator_mean():
    # averaging the subsampled volume term over shuffles recovers the
    # full-batch value (no batchnorm, so per-sample terms are independent)
    gen = np.random.default_rng(42)
    x = gen.normal(size=(64, 4))
    y = gen.integers(0, 2, size=64).astype(np.int64)
    cfg_net = net.MlpConfig(input_dim=4, hidden_dims=(6,), output_dim=2)
    params = net.mlp_init(cfg_net, seed=1)
    mixture = mx.mixture_init(2, 1, 2, seed=1)

    full_cfg = tr.TrainConfig(beta=1.0, subsample_jacobian=False)
    full, _, _ = tr.mass_minibatch_loss(params, mixture, x, y, full_cfg)

    sub_cfg = tr.TrainConfig(beta=1.0, subsample_jacobian=True)
    estimates = []
    for rep in range(150):
        perm = gen.permutation(64)
        b, _, _ = tr.mass_minibatch_loss(params, mixture, x[perm], y[perm], sub_cfg)
        estimates.append(b.jacobian_term)
    err = abs(np.mean(estimates) - full.jacobian_term)
    assert err <= 0.02 * max(1.0, abs(full.jacobian_term))


def test_softmax_cross_entropy_oracle():
    gen = np.random.default_rng(11)
    cfg_net = net.MlpConfig(input_dim=5, hidden_dims=(7,), output_dim=4)
    params = net.mlp_init(cfg_net, seed=2)
    x = gen.normal(size=(9, 5))
    y = gen.integers(0, 4, size=9).astype(np.int64)
    loss, grads = tr.softmaxce_minibatch_loss(params, x, y)

    logits = net.forward_fast(params, x, mode="train")
    shift = logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(logits - shift).sum(axis=1)) + shift[:, 0]
    oracle = float(np.mean(lse - logits[np.arange(9), y]))
    assert abs(loss - oracle) <= 1e-12
    assert set(grads) == set(net.param_arrays(params))


def test_softmax_cross_entropy_uniform_logits():
    # zero weights give uniform class probabilities, so the loss is log C
    cfg_net = net.MlpConfig(input_dim=4, hidden_dims=(), output_dim=3)
    params = net.mlp_init(cfg_net, seed=0)
    params.weights[0] = np.zeros((3, 4))
    x = np.random.default_rng(0).normal(size=(5, 4))
    y = np.array([0, 1, 2, 1, 0], dtype=np.int64)
    loss, _ = tr.softmaxce_minibatch_loss(params, x, y)
    assert abs(loss - math.log(3.0)) < 1e-14


def test_adam_first_step_magnitude():
    lr = 0.1
    state = optim.AdamState()
    params = {"p": np.array([1.0, -2.0, 0.5])}
    grads = {"p": np.array([1.0, -1.0, 1.0])}
    new = optim.adam_step(params, grads, state, lr)
    # first bias-corrected step moves each coordinate by lr against the sign
    np.testing.assert_allclose(new["p"] - params["p"], [-lr, lr, -lr], rtol=0, atol=1e-8)
    assert state.step == 1


def test_adam_zero_gradient_is_noop():
    state = optim.AdamState()
    params = {"p": np.array([3.0, -1.0])}
    new = optim.adam_step(params, {"p": np.zeros(2)}, state, 0.5)
    np.testing.assert_array_equal(new["p"], params["p"])
    assert state.step == 1


def test_momentum_accumulates():
    state = optim.MomentumState()
    params = {"p": np.array([0.0])}
    g = {"p": np.array([1.0])}
    params = optim.momentum_step(params, g, state, lr=1.0)
    params = optim.momentum_step(params, g, state, lr=1.0)
    # v goes 1.0 then 1.9, so p = -(1.0 + 1.9) = -2.9
    assert abs(params["p"][0] + 2.9) < 1e-15


def test_clip_global_norm_scales_jointly():
    grads = {"a": np.array([3.0, 4.0]), "b": np.array([12.0])}
    clipped, norm = optim.clip_global_norm(grads, 6.5)
    assert abs(norm - 13.0) < 1e-12
    np.testing.assert_allclose(clipped["a"], [1.5, 2.0], rtol=0, atol=1e-12)
    np.testing.assert_allclose(clipped["b"], [6.0], rtol=0, atol=1e-12)
    same, norm2 = optim.clip_global_norm(grads, 100.0)
    assert norm2 == norm
    np.testing.assert_array_equal(same["a"], grads["a"])


def _blob_split(n_train, n_test, seed, n_classes=3, dim=4, separation=4.0):
    train, _ = datamod.gaussian_blobs(n_train, n_classes, dim, separation, seed)
    test, _ = datamod.gaussian_blobs(n_test, n_classes, dim, separation, seed + 1)
    return train, test


def test_train_is_deterministic(tmp_path):
    train, test = _blob_split(96, 48, seed=5)
    cfg_net = net.MlpConfig(input_dim=4, hidden_dims=(8,), output_dim=2,
                            use_batchnorm=True, dropout_rate=0.25)
    results = []
    for run in range(2):
        cfg = tr.TrainConfig(method="mass", beta=1e-3, lr=2e-3, variational_lr=1e-2,
                             batch_size=32, steps=6, eval_interval=3, seed=9,
                             curve_path=str(tmp_path / f"curves{run}.csv"))
        results.append(tr.train(train, test, cfg_net, cfg))
    a, b = results
    for name, arr in net.param_arrays(a.checkpoint.net).items():
        np.testing.assert_array_equal(arr, net.param_arrays(b.checkpoint.net)[name])
    for name, arr in mx.mixture_param_arrays(a.checkpoint.mixture).items():
        np.testing.assert_array_equal(arr, mx.mixture_param_arrays(b.checkpoint.mixture)[name])
    for li in range(len(a.checkpoint.net.bn_mean)):
        np.testing.assert_array_equal(a.checkpoint.net.bn_mean[li], b.checkpoint.net.bn_mean[li])
    assert a.curve_rows == b.curve_rows
    text0 = (tmp_path / "curves0.csv").read_text()
    text1 = (tmp_path / "curves1.csv").read_text()
    assert text0 == text1
    assert text0.splitlines()[0] == tr.CURVE_HEADER
    assert len(text0.splitlines()) == 3  # header + rows at steps 3 and 6


def test_train_zero_steps(tmp_path):
    train, _ = _blob_split(30, 6, seed=2)
    cfg_net = net.MlpConfig(input_dim=4, hidden_dims=(5,), output_dim=2)
    path = tmp_path / "curves.csv"
    cfg = tr.TrainConfig(steps=0, seed=4, curve_path=str(path))
    result = tr.train(train, None, cfg_net, cfg)
    assert path.read_text() == tr.CURVE_HEADER + "\n"
    assert result.curve_rows == []
    assert result.checkpoint.steps_trained == 0
    init = net.mlp_init(cfg_net, seed=4)
    for name, arr in net.param_arrays(result.checkpoint.net).items():
        np.testing.assert_array_equal(arr, net.param_arrays(init)[name])


def test_train_blobs_mass_accuracy():
    train, test = _blob_split(240, 120, seed=12)
    cfg_net = net.MlpConfig(input_dim=4, hidden_dims=(16,), output_dim=2, use_batchnorm=True)
    cfg = tr.TrainConfig(method="mass", beta=1e-3, lr=5e-3, variational_lr=2e-2,
                         batch_size=60, steps=200, eval_interval=100,
                         mixture_components=2, seed=3)
    result = tr.train(train, test, cfg_net, cfg)
    assert len(result.curve_rows) == 2
    last = result.curve_rows[-1].split(",")
    assert last[0] == "200"
    train_acc, test_acc = float(last[4]), float(last[5])
    assert train_acc > 0.8
    assert test_acc > 0.75
    assert result.amgm_violations == 0
    # every term column is a finite float
    for row in result.curve_rows:
        vals = [float(v) for v in row.split(",")[1:]]
        assert all(np.isfinite(vals))


def test_train_blobs_softmaxce_curves():
    train, test = _blob_split(240, 120, seed=21)
    cfg_net = net.MlpConfig(input_dim=4, hidden_dims=(8,), output_dim=3, use_batchnorm=True)
    cfg = tr.TrainConfig(method="softmaxce", lr=1e-2, batch_size=60, steps=60,
                         eval_interval=30, mixture_components=1, seed=6)
    result = tr.train(train, test, cfg_net, cfg)
    assert result.checkpoint.method == "softmaxce"
    assert result.checkpoint.mixture is None
    assert len(result.curve_rows) == 2
    for row in result.curve_rows:
        step, cond, ent, nlj, tr_acc, te_acc = row.split(",")
        # the logit map R^4 -> R^3 still has a Jacobian, so all columns are finite
        assert all(np.isfinite(float(v)) for v in (cond, ent, nlj, tr_acc, te_acc))
    assert float(result.curve_rows[-1].split(",")[4]) > 0.8


def test_entropy_upper_bound_one_sided():
    # on a distribution the density family can represent exactly, the fitted
    # cross entropy -E[log q] can only exceed the true entropy (up to noise)
    gen = np.random.default_rng(77)
    mean = np.array([0.7, -0.3])
    std = np.array([1.5, 0.8])
    z_train = gen.normal(size=(4000, 2)) * std + mean
    labels = np.zeros(4000, dtype=np.int64)
    fit = mx.mle_fit(z_train, labels, 1, 1, steps=300, seed=0, lr=0.05)
    fit = mx.mle_fit(z_train, labels, 1, 1, steps=200, seed=0, lr=0.002, init=fit)

    z_eval = gen.normal(size=(50_000, 2)) * std + mean
    ll = mx.marginal_log_density(fit, z_eval)
    nll = float(-ll.mean())
    se = float(ll.std(ddof=1) / math.sqrt(len(ll)))
    h_true = math.log(2.0 * math.pi * math.e) + float(np.log(std).sum())
    assert nll >= h_true - 3.0 * se
    assert nll <= h_true + 0.05  # and the fit is tight, not vacuously large


def test_train_validates_shapes():
    train, _ = _blob_split(30, 6, seed=8)
    wide = net.MlpConfig(input_dim=4, hidden_dims=(5,), output_dim=6)
    with pytest.raises(ValueError, match="output_dim"):
        tr.train(train, None, wide, tr.TrainConfig(method="mass", steps=1))
    logits_mismatch = net.MlpConfig(input_dim=4, hidden_dims=(5,), output_dim=2)
    with pytest.raises(ValueError, match="class count"):
        tr.train(train, None, logits_mismatch, tr.TrainConfig(method="softmaxce", steps=1))
    with pytest.raises(ValueError, match="optimizer"):
        tr.TrainConfig(optimizer="lbfgs").validate()


def test_small_batch_warning():
    train, _ = _blob_split(30, 6, seed=8)
    cfg_net = net.MlpConfig(input_dim=4, hidden_dims=(), output_dim=3)
    cfg = tr.TrainConfig(method="mass", batch_size=2, steps=1, seed=0,
                         mixture_components=1)
    with pytest.warns(UserWarning, match="batch_size"):
        tr.train(train, None, cfg_net, cfg)
