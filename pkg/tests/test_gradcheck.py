"""Central finite-difference checks for every differentiable op.

All checks run in 64-bit mode with step 1e-4 on inputs of spatial size <= 5^3
and require relative error below 1e-4 against the analytic gradients.
"""

import numpy as np
import pytest

from helpers import finite_diff_grads, rel_grad_error
from vseg import autodiff as ad

TOL = 1e-4
STEP = 1e-4


def check(op_forward, arrays, names):
    """analytic grads via the tape vs central differences on the same arrays."""
    tensors = [ad.Tensor(a, requires_grad=True, dtype=np.float64) for a in arrays]
    # tensor .data aliases the arrays, so in-place perturbation reaches f()
    buffers = [t.data for t in tensors]

    with ad.Tape():
        loss = op_forward(*tensors)
    ad.backward(loss)
    analytic = [t.grad for t in tensors]

    def f():
        fresh = [ad.Tensor(b, dtype=np.float64) for b in buffers]
        return op_forward(*fresh).item()

    numeric = finite_diff_grads(f, buffers, h=STEP)
    for name, a, n in zip(names, analytic, numeric):
        err = rel_grad_error(a, n)
        assert err < TOL, f"gradient mismatch for {name}: rel error {err:.3e}"


def weighted_sum(t, rng):
    """Random linear functional keeps the scalar loss generic."""
    w = ad.Tensor(rng.standard_normal(t.shape), dtype=np.float64)
    return ad.tensor_sum(ad.mul(t, w))


def test_conv3d_gradients():
    rng = np.random.default_rng(42)
    x = rng.standard_normal((2, 2, 5, 5, 5))
    w = rng.standard_normal((3, 2, 3, 3, 3))
    b = rng.standard_normal(3)

    def fwd(xt, wt, bt):
        return weighted_sum(ad.conv3d_valid(xt, wt, bt), np.random.default_rng(5))

    check(fwd, [x, w, b], ["input", "filters", "bias"])


def test_prelu_gradients():
    rng = np.random.default_rng(43)
    x = rng.standard_normal((2, 3, 4, 4, 4))
    a = rng.uniform(0.1, 0.5, 3)

    def fwd(xt, at):
        return weighted_sum(ad.prelu(xt, at), np.random.default_rng(6))

    check(fwd, [x, a], ["input", "coefficients"])


def test_batch_norm_train_gradients():
    rng = np.random.default_rng(44)
    x = rng.normal(1.0, 2.0, (3, 2, 4, 4, 4))
    gamma = rng.uniform(0.5, 1.5, 2)
    beta = rng.standard_normal(2)

    def fwd(xt, gt, bt):
        state = ad.BatchNormState(2, dtype=np.float64)
        return weighted_sum(ad.batch_norm(xt, gt, bt, state, "train"), np.random.default_rng(7))

    check(fwd, [x, gamma, beta], ["input", "gamma", "beta"])


def test_softmax_cross_entropy_composite_gradients():
    rng = np.random.default_rng(45)
    logits = rng.normal(0, 2, (2, 4, 3, 3, 3))
    labels = rng.integers(0, 4, (2, 3, 3, 3))

    def fwd(lt):
        return ad.cross_entropy_loss(ad.softmax_channels(lt), labels)

    check(fwd, [logits], ["logits"])


def test_softmax_gradients_standalone():
    rng = np.random.default_rng(46)
    logits = rng.normal(0, 2, (1, 4, 3, 3, 3))

    def fwd(lt):
        return weighted_sum(ad.softmax_channels(lt), np.random.default_rng(8))

    check(fwd, [logits], ["logits"])


def test_crop_and_concat_gradients():
    rng = np.random.default_rng(47)
    a = rng.standard_normal((1, 2, 5, 5, 5))
    b = rng.standard_normal((1, 3, 3, 3, 3))

    def fwd(at, bt):
        merged = ad.concat_channels([ad.crop_center(at, (3, 3, 3)), bt])
        return weighted_sum(merged, np.random.default_rng(9))

    check(fwd, [a, b], ["cropped", "passthrough"])


def test_conv_chain_gradients():
    # two stacked convs exercise gradient flow through an intermediate tensor
    rng = np.random.default_rng(48)
    x = rng.standard_normal((1, 1, 5, 5, 5))
    w1 = rng.standard_normal((2, 1, 3, 3, 3)) * 0.5
    b1 = rng.standard_normal(2) * 0.1
    w2 = rng.standard_normal((2, 2, 3, 3, 3)) * 0.5
    b2 = rng.standard_normal(2) * 0.1

    def fwd(xt, w1t, b1t, w2t, b2t):
        h = ad.conv3d_valid(xt, w1t, b1t)
        h = ad.conv3d_valid(h, w2t, b2t)
        return weighted_sum(h, np.random.default_rng(10))

    check(fwd, [x, w1, b1, w2, b2], ["input", "w1", "b1", "w2", "b2"])
