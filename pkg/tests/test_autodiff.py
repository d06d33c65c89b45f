"""Layer gradients against central finite differences, plus forward oracles."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cinedx.autodiff import (
    BatchNormParams, ConvLayerParams, batchnorm_backward, batchnorm_forward, conv2d_backward,
    conv2d_forward, conv_output_size, grouped_softmax, grouped_softmax_backward, relu, relu_backward,
    sgd_step,
)
from cinedx.trainer import dice_loss_and_grad

H = 1e-6
RTOL = 1e-3


def numeric_grad(f, x, h=H):
    """Central differences of scalar ``f`` with respect to every entry of ``x`` (modified in place)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return np.linalg.norm(a - b) / scale


def conv_oracle(x, w, b, d):
    """Direct nested-loop dilated valid convolution."""
    n, ci, hh, ww = x.shape
    co, _, k, _ = w.shape
    ho, wo = hh - d * (k - 1), ww - d * (k - 1)
    out = np.zeros((n, co, ho, wo))
    for i in range(k):
        for j in range(k):
            patch = x[:, :, i * d:i * d + ho, j * d:j * d + wo]
            out += np.einsum("nchw,oc->nohw", patch, w[:, :, i, j])
    return out + b[None, :, None, None]


def random_conv(rng, k=3):
    d = int(rng.integers(1, 4))
    ci, co = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    side = d * (k - 1) + int(rng.integers(1, 4))
    x = rng.standard_normal((int(rng.integers(1, 3)), ci, side, side + int(rng.integers(0, 2))))
    p = ConvLayerParams(rng.standard_normal((co, ci, k, k)), rng.standard_normal(co), d)
    return x, p


def test_conv_output_size():
    assert conv_output_size(281, 3, 1) == 279
    assert conv_output_size(10, 3, 4) == 2


@pytest.mark.parametrize("seed", range(5))
def test_conv_forward_matches_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    x, p = random_conv(rng)
    np.testing.assert_allclose(conv2d_forward(x, p), conv_oracle(x, p.weights, p.bias, p.dilation),
                               rtol=1e-12, atol=1e-12)


def test_conv_gradients_finite_differences():
    for seed in range(40):
        rng = np.random.default_rng(seed)
        x, p = random_conv(rng, k=3 if seed % 4 else 1)
        r = rng.standard_normal(conv2d_forward(x, p).shape)
        f = lambda: float((conv2d_forward(x, p) * r).sum())  # noqa: E731
        gx, gw, gb = conv2d_backward(x, p, r)
        assert rel_err(gx, numeric_grad(f, x)) < RTOL, seed
        assert rel_err(gw, numeric_grad(f, p.weights)) < RTOL, seed
        assert rel_err(gb, numeric_grad(f, p.bias)) < RTOL, seed


def test_batchnorm_gradients_finite_differences():
    for seed in range(30):
        rng = np.random.default_rng(100 + seed)
        c = int(rng.integers(1, 4))
        x = rng.standard_normal((int(rng.integers(2, 4)), c, 3, 3)) * 2 + 1
        p = BatchNormParams(rng.standard_normal(c), rng.standard_normal(c), np.zeros(c), np.ones(c))
        mode = "train" if seed % 3 else "eval"
        if mode == "eval":
            p.running_mean[...] = rng.standard_normal(c)
            p.running_var[...] = rng.uniform(0.5, 2, c)
        r = rng.standard_normal(x.shape)
        saved = (p.running_mean.copy(), p.running_var.copy())

        def f():
            out = batchnorm_forward(x, p, mode)
            p.running_mean[...], p.running_var[...] = saved
            return float((out * r).sum())

        gx, gs, gb = batchnorm_backward(x, p, r, mode)
        assert rel_err(gx, numeric_grad(f, x)) < RTOL, seed
        assert rel_err(gs, numeric_grad(f, p.scale)) < RTOL, seed
        assert rel_err(gb, numeric_grad(f, p.shift)) < RTOL, seed


def test_softmax_dice_composition_finite_differences():
    groups = ((0, 1, 2, 3), (4, 5, 6, 7))
    for seed in range(30):
        rng = np.random.default_rng(200 + seed)
        logits = rng.standard_normal((2, 8, 3, 3)) * 2
        lab = rng.integers(0, 4, size=(2, 2, 3, 3))
        ref = np.concatenate([lab[:, :1] == np.arange(4)[None, :, None, None],
                              lab[:, 1:] == np.arange(4)[None, :, None, None]], axis=1).astype(float)
        factor2 = bool(seed % 2)
        f = lambda: dice_loss_and_grad(grouped_softmax(logits, groups), ref, factor2=factor2)[0]  # noqa: E731
        y = grouped_softmax(logits, groups)
        _, gy = dice_loss_and_grad(y, ref, factor2=factor2)
        g = grouped_softmax_backward(y, groups, gy)
        assert rel_err(g, numeric_grad(f, logits)) < RTOL, seed


def test_relu_backward_masks_nonpositive():
    x = np.array([-1.0, 0.0, 2.0])
    np.testing.assert_array_equal(relu(x), [0, 0, 2])
    np.testing.assert_array_equal(relu_backward(x, np.ones(3)), [0, 0, 1])


def test_softmax_groups_sum_to_one_and_passthrough():
    x = np.random.default_rng(0).standard_normal((2, 9, 4, 4))
    y = grouped_softmax(x, ((0, 1, 2), (3, 4)))
    np.testing.assert_allclose(y[:, :3].sum(axis=1), 1, atol=1e-12)
    np.testing.assert_allclose(y[:, 3:5].sum(axis=1), 1, atol=1e-12)
    np.testing.assert_array_equal(y[:, 5:], x[:, 5:])


def test_softmax_overlapping_groups_rejected():
    with pytest.raises(ValueError):
        grouped_softmax(np.zeros((1, 4, 2, 2)), ((0, 1), (1, 2)))


@settings(max_examples=30, deadline=None)
@given(st.floats(-50, 50), st.floats(-50, 50), st.floats(-50, 50))
def test_softmax_shift_invariance(a, b, shift):
    x = np.array([a, b, 0.0]).reshape(1, 3, 1, 1)
    np.testing.assert_allclose(grouped_softmax(x, ((0, 1, 2),)), grouped_softmax(x + shift, ((0, 1, 2),)),
                               atol=1e-12)


def test_batchnorm_running_stats_update():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((4, 2, 5, 5)) * 3 + 2
    p = BatchNormParams.identity(2, np.float64)
    out = batchnorm_forward(x, p, "train")
    mean = x.mean(axis=(0, 2, 3))
    var = x.var(axis=(0, 2, 3))
    np.testing.assert_allclose(p.running_mean, 0.1 * mean, rtol=1e-12)
    np.testing.assert_allclose(p.running_var, 0.9 + 0.1 * var, rtol=1e-12)
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0, atol=1e-12)


def test_float32_preserved():
    x = np.ones((1, 1, 5, 5), np.float32)
    p = ConvLayerParams(np.ones((1, 1, 3, 3), np.float32), np.zeros(1, np.float32), 1)
    assert conv2d_forward(x, p).dtype == np.float32


def test_sgd_step_weight_decay_and_exemption():
    params = {"w": np.array([1.0, 2.0]), "bn.scale": np.array([1.0])}
    grads = {"w": np.array([0.5, 0.5]), "bn.scale": np.array([1.0])}
    sgd_step(params, grads, lr=0.1, weight_decay=0.5, no_decay={"bn.scale"})
    np.testing.assert_allclose(params["w"], [1 - 0.1 * (0.5 + 0.5), 2 - 0.1 * (0.5 + 1.0)])
    np.testing.assert_allclose(params["bn.scale"], [0.9])
