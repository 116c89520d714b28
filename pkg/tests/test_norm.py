import numpy as np
import pytest

from kermod import autodiff as ad
from kermod.autodiff import Tensor
from kermod.norm import (NormError, NormLayer, batch_norm, fold_norm_into_conv,
                         group_norm, implicit_modulation_check, norm_forward,
                         normalized_pre_affine)

from gradcheck import check_op_gradients


def standardized_input(rng, shape):
    """Per-channel zero-mean unit-variance data (population statistics)."""
    x = rng.normal(0, 1, shape)
    mu = x.mean(axis=(0, 2, 3), keepdims=True)
    sd = x.std(axis=(0, 2, 3), keepdims=True)
    return (x - mu) / sd


# -- forward -------------------------------------------------------------------


def test_identity_normalization_on_standardized_input():
    rng = np.random.default_rng(0)
    x = standardized_input(rng, (4, 3, 8, 8)).astype(np.float32)
    layer = batch_norm(3)
    out = norm_forward(Tensor(x), layer, mode="train")
    assert np.abs(out.data - x).max() < 1e-4


def test_affine_definition():
    rng = np.random.default_rng(1)
    x = Tensor(rng.normal(0, 1, (4, 3, 6, 6)))
    layer = batch_norm(3)
    ref = norm_forward(x, batch_norm(3), mode="train").data
    layer.gamma = Tensor(np.full(3, 2.0))
    layer.beta = Tensor(np.full(3, 0.5))
    out = norm_forward(x, layer, mode="train")
    np.testing.assert_allclose(out.data, 2.0 * ref + 0.5, rtol=1e-5, atol=1e-6)


def test_group_norm_groups_equal_channels_is_instance_norm():
    rng = np.random.default_rng(2)
    x = rng.normal(0, 2, (3, 4, 5, 5)).astype(np.float32)
    layer = group_norm(4, groups=4)
    out = norm_forward(Tensor(x), layer, mode="train").data
    # direct per-sample per-channel statistics oracle
    mu = x.mean(axis=(2, 3), keepdims=True)
    var = x.var(axis=(2, 3), keepdims=True)
    ref = (x - mu) / np.sqrt(var + layer.eps)
    assert np.abs(out - ref).max() < 1e-5


def test_group_norm_single_group_is_layer_norm():
    rng = np.random.default_rng(3)
    x = rng.normal(1, 3, (2, 4, 5, 5)).astype(np.float32)
    layer = group_norm(4, groups=1)
    out = norm_forward(Tensor(x), layer, mode="train").data
    mu = x.mean(axis=(1, 2, 3), keepdims=True)
    var = x.var(axis=(1, 2, 3), keepdims=True)
    ref = (x - mu) / np.sqrt(var + layer.eps)
    assert np.abs(out - ref).max() < 1e-5


def test_train_mode_statistics_before_affine():
    rng = np.random.default_rng(4)
    x = Tensor(rng.normal(3, 2, (8, 5, 6, 6)))
    for layer in (batch_norm(5), group_norm(5, groups=5)):
        pre = normalized_pre_affine(x, layer)
        if layer.kind == "batch":
            means = pre.mean(axis=(0, 2, 3))
            variances = pre.var(axis=(0, 2, 3))
        else:
            means = pre.mean(axis=(2, 3)).reshape(-1)
            variances = pre.var(axis=(2, 3)).reshape(-1)
        assert np.abs(means).max() < 1e-5
        assert np.abs(variances - 1).max() < 1e-4


def test_running_stats_update_and_eval_mode():
    rng = np.random.default_rng(5)
    layer = batch_norm(3, momentum=0.1)
    x = rng.normal(2.0, 1.5, (16, 3, 8, 8)).astype(np.float32)
    for _ in range(200):
        norm_forward(Tensor(x), layer, mode="train")
    # running stats converge to the batch statistics
    assert np.abs(layer.running_mu - x.mean(axis=(0, 2, 3))).max() < 1e-2
    assert np.abs(layer.running_sigma - x.std(axis=(0, 2, 3))).max() < 2e-2
    assert np.all(layer.running_sigma > 0)
    out = norm_forward(Tensor(x), layer, mode="eval").data
    ref = (x - layer.running_mu.reshape(1, 3, 1, 1)) / layer.running_sigma.reshape(1, 3, 1, 1)
    assert np.abs(out - ref).max() < 1e-4


def test_group_norm_is_stateless():
    rng = np.random.default_rng(6)
    layer = group_norm(4, groups=2)
    x = rng.normal(5, 2, (2, 4, 4, 4)).astype(np.float32)
    train_out = norm_forward(Tensor(x), layer, mode="train").data
    eval_out = norm_forward(Tensor(x), layer, mode="eval").data
    np.testing.assert_array_equal(train_out, eval_out)
    np.testing.assert_array_equal(layer.running_mu, np.zeros(4, dtype=np.float32))


def test_channel_mismatch_rejected():
    layer = batch_norm(3)
    with pytest.raises(NormError, match="C=4"):
        norm_forward(Tensor(np.zeros((1, 4, 2, 2))), layer)


def test_groups_must_divide_channels():
    with pytest.raises(NormError, match="divisible"):
        NormLayer(kind="group", channels=6, groups=4)


# -- implicit modulation (norm-then-conv equivalence) ----------------------------


def scalar_layer(gamma, beta, mu, sigma):
    layer = batch_norm(1)
    layer.gamma = Tensor(np.array([gamma]))
    layer.beta = Tensor(np.array([beta]))
    layer.running_mu = np.array([mu], dtype=np.float32)
    layer.running_sigma = np.array([sigma], dtype=np.float32)
    return layer


def test_implicit_modulation_scalar_worked_case():
    # w=2, x=3, gamma=1.5, sigma=0.5, mu=1, beta=0.2: both sides equal 12.4
    layer = scalar_layer(1.5, 0.2, 1.0, 0.5)
    w = np.full((1, 1, 1, 1), 2.0, dtype=np.float32)
    x = np.full((1, 1, 1, 1), 3.0, dtype=np.float32)
    xhat = (1.5 / 0.5) * (3.0 - 1.0) + 0.2
    assert 2.0 * xhat == pytest.approx(12.4)
    diff = implicit_modulation_check(w, x, layer)
    assert diff < 1e-6


def test_implicit_modulation_identity_affine():
    # gamma = sigma and beta = mu * gamma / sigma make normalization the identity
    rng = np.random.default_rng(7)
    sigma = rng.uniform(0.5, 2.0, 3).astype(np.float32)
    mu = rng.normal(0, 1, 3).astype(np.float32)
    layer = batch_norm(3)
    layer.gamma = Tensor(sigma)
    layer.beta = Tensor(mu)
    layer.running_mu = mu.copy()
    layer.running_sigma = sigma.copy()
    w = rng.normal(0, 1, (2, 3, 3, 3)).astype(np.float32)
    x = rng.normal(0, 1, (1, 3, 6, 6)).astype(np.float32)
    assert implicit_modulation_check(w, x, layer, padding=1) < 1e-5


def test_implicit_modulation_randomized_configs():
    rng = np.random.default_rng(8)
    worst = 0.0
    for _ in range(100):
        c = int(rng.integers(1, 5))
        kn = int(rng.integers(1, 7))
        k = int(rng.integers(1, 4))
        size = int(rng.integers(k, 9))
        layer = batch_norm(c)
        layer.gamma = Tensor(rng.uniform(-2, 2, c))
        layer.beta = Tensor(rng.uniform(-1, 1, c))
        layer.running_mu = rng.uniform(-1, 1, c).astype(np.float32)
        layer.running_sigma = rng.uniform(0.3, 3.0, c).astype(np.float32)
        w = rng.uniform(-1, 1, (kn, c, k, k)).astype(np.float64)
        x = rng.uniform(-1, 1, (1, c, size, size)).astype(np.float64)
        worst = max(worst, implicit_modulation_check(w, x, layer))
    assert worst < 1e-5


def test_implicit_modulation_spec_shapes_case():
    rng = np.random.default_rng(9)
    layer = batch_norm(4)
    layer.gamma = Tensor(rng.uniform(0.5, 1.5, 4))
    layer.beta = Tensor(rng.uniform(-0.5, 0.5, 4))
    layer.running_mu = rng.uniform(-0.5, 0.5, 4).astype(np.float32)
    layer.running_sigma = rng.uniform(0.5, 1.5, 4).astype(np.float32)
    w = rng.uniform(-1, 1, (6, 4, 3, 3)).astype(np.float64)
    x = rng.uniform(-1, 1, (1, 4, 8, 8)).astype(np.float64)
    assert implicit_modulation_check(w, x, layer) < 1e-5


# -- normalization folding (conv-then-norm) ---------------------------------------


def test_fold_identity_normalization():
    rng = np.random.default_rng(10)
    sigma = rng.uniform(0.5, 2.0, 4).astype(np.float32)
    layer = batch_norm(4)
    layer.gamma = Tensor(sigma)
    layer.running_sigma = sigma.copy()
    w = rng.normal(0, 1, (4, 3, 3, 3)).astype(np.float32)
    w_f, b_f = fold_norm_into_conv(w, None, layer)
    np.testing.assert_allclose(w_f, w, rtol=1e-6)
    np.testing.assert_allclose(b_f, np.zeros(4), atol=1e-7)


def test_fold_pure_scaling():
    rng = np.random.default_rng(11)
    sigma = rng.uniform(0.5, 2.0, 3).astype(np.float32)
    layer = batch_norm(3)
    layer.gamma = Tensor(2.0 * sigma)
    layer.running_sigma = sigma.copy()
    w = rng.normal(0, 1, (3, 2, 3, 3)).astype(np.float32)
    w_f, _ = fold_norm_into_conv(w, None, layer)
    np.testing.assert_allclose(w_f, 2.0 * w, rtol=1e-6)


def test_fold_two_path_equivalence_randomized():
    rng = np.random.default_rng(12)
    worst = 0.0
    for _ in range(100):
        c_in = int(rng.integers(1, 4))
        c_out = int(rng.integers(1, 5))
        k = int(rng.integers(1, 4))
        size = int(rng.integers(k, 8))
        layer = batch_norm(c_out)
        layer.gamma = Tensor(rng.uniform(-2, 2, c_out))
        layer.beta = Tensor(rng.uniform(-1, 1, c_out))
        layer.running_mu = rng.uniform(-1, 1, c_out).astype(np.float32)
        layer.running_sigma = rng.uniform(0.3, 3.0, c_out).astype(np.float32)
        w = rng.uniform(-1, 1, (c_out, c_in, k, k)).astype(np.float64)
        bias = rng.uniform(-1, 1, c_out).astype(np.float64)
        x = rng.uniform(-1, 1, (2, c_in, size, size)).astype(np.float64)

        w_f, b_f = fold_norm_into_conv(w, bias, layer)
        folded, _, _ = ad._conv_forward(x, w_f, 1, 0)
        folded = folded + b_f.reshape(1, -1, 1, 1)

        raw, _, _ = ad._conv_forward(x, w, 1, 0)
        raw = raw + bias.reshape(1, -1, 1, 1)
        scale = (layer.gamma.data / layer.running_sigma).astype(np.float64)
        shift = (layer.beta.data - layer.running_mu * scale).astype(np.float64)
        normed = raw * scale.reshape(1, -1, 1, 1) + shift.reshape(1, -1, 1, 1)
        worst = max(worst, float(np.abs(folded - normed).max()))
    assert worst < 1e-5


def test_fold_rejects_train_mode():
    layer = batch_norm(2)
    with pytest.raises(NormError, match="eval"):
        fold_norm_into_conv(np.zeros((2, 2, 3, 3), dtype=np.float32), None, layer,
                            mode="train")


# -- gradients ----------------------------------------------------------------------


@pytest.mark.parametrize("kind", ["batch", "group"])
def test_norm_gradients_finite_difference(kind):
    # statistics-path curvature shrinks with reduction size, so use
    # realistically sized maps: tiny groups make the epsilon^2 truncation
    # of the oracle itself dominate the comparison
    rng = np.random.default_rng(13)
    x = rng.uniform(-1, 1, (4, 6, 6, 6))
    gamma = rng.uniform(0.5, 1.5, 6)
    beta = rng.uniform(-0.5, 0.5, 6)

    def op(tx, tg, tb):
        layer = batch_norm(6) if kind == "batch" else group_norm(6, groups=2)
        layer.gamma = tg
        layer.beta = tb
        return norm_forward(tx, layer, mode="train")

    errs = check_op_gradients(op, [x, gamma, beta])
    assert max(errs) < 1e-4


def test_gradient_flows_through_norm_to_upstream_conv():
    rng = np.random.default_rng(14)
    x = rng.uniform(-1, 1, (2, 2, 5, 5))
    w = rng.uniform(-1, 1, (3, 2, 3, 3))

    def op(tw):
        h = ad.conv2d(Tensor(x), tw, 1, 1)
        layer = batch_norm(3)
        return norm_forward(h, layer, mode="train")

    errs = check_op_gradients(op, [w])
    assert max(errs) < 1e-4


def test_eval_mode_gradients_to_gamma_beta():
    rng = np.random.default_rng(15)
    layer = batch_norm(3)
    layer.set_trainable(True)
    layer.running_mu = rng.normal(0, 1, 3).astype(np.float32)
    layer.running_sigma = rng.uniform(0.5, 2, 3).astype(np.float32)
    x = Tensor(rng.normal(0, 1, (2, 3, 4, 4)))
    out = norm_forward(x, layer, mode="eval")
    ad.sum_(out).backward()
    assert layer.gamma.grad is not None and np.abs(layer.gamma.grad).sum() > 0
    assert layer.beta.grad is not None
