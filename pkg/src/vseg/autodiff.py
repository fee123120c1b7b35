"""Minimal dense-tensor engine with reverse-mode differentiation.

Supplies exactly the operations the segmentation network needs: valid 3D
convolution, PReLU, batch normalization, channel softmax, cross-entropy,
plus the crop/concat/sum plumbing that wires them together. Gradients are
recorded on an explicit tape and replayed in exact reverse execution order.
"""

from __future__ import annotations

import numpy as np

FLOAT_DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    """Raised when tensor dimensions do not line up for an op."""


class GradientError(RuntimeError):
    """Raised on invalid backward calls or non-finite gradients."""


# ---------------------------------------------------------------------------
# Tape and tensors
# ---------------------------------------------------------------------------

_ACTIVE_TAPE = None


class Tape:
    """Ordered record of executed ops, replayed in reverse for gradients.

    Use as a context manager around a forward pass; ops executed while the
    tape is active append (output, backprop) records. Without an active tape
    ops run as plain numpy (inference mode).
    """

    def __init__(self):
        self._records = []
        self._consumed = False

    def __enter__(self):
        global _ACTIVE_TAPE
        self._prev = _ACTIVE_TAPE
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = self._prev
        return False

    def __len__(self):
        return len(self._records)


def active_tape():
    return _ACTIVE_TAPE


class Tensor:
    """Dense row-major float tensor. 32-bit by default, 64-bit for verification."""

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"


class Parameter(Tensor):
    """Trainable tensor with persistent gradient and optimizer caches."""

    def __init__(self, data, name="", trainable=True, dtype=None):
        super().__init__(data, requires_grad=trainable, dtype=dtype)
        self.name = name
        self.trainable = trainable
        self.grad = np.zeros_like(self.data)
        self.rms_cache = np.zeros_like(self.data)
        self.momentum_cache = np.zeros_like(self.data)

    def zero_grad(self):
        self.grad[...] = 0

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape})"


def _make_output(data, inputs, backprop):
    """Wrap an op result; record on the active tape when grads are wanted."""
    tape = _ACTIVE_TAPE
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs, dtype=data.dtype)
    if needs:
        out.tape = tape
        tape._records.append((out, backprop))
    return out


def backward(loss):
    """Populate gradients of everything reachable from a scalar loss.

    Visits tape records in exact reverse execution order. Gradients for a
    tensor read by several ops accumulate additively. Trainable Parameters
    accumulate into their persistent .grad; plain leaf tensors get .grad set.
    """
    if not isinstance(loss, Tensor):
        raise GradientError("backward expects a Tensor")
    if loss.data.size != 1:
        raise GradientError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    tape = loss.tape
    if tape is None:
        raise GradientError("loss was not recorded on a tape (no grad context active)")
    if tape._consumed:
        raise GradientError("tape already consumed by a previous backward call")

    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}

    def accum(t, g):
        k = id(t)
        if k in grads:
            grads[k] = grads[k] + g
        else:
            grads[k] = g
            leaves[k] = t

    for out, backprop in reversed(tape._records):
        g = grads.pop(id(out), None)
        leaves.pop(id(out), None)
        if g is None:
            continue  # not on a path to the loss
        backprop(g, accum)

    for k, t in leaves.items():
        if isinstance(t, Parameter):
            if t.trainable:
                t.grad += grads[k]
        else:
            t.grad = grads[k]

    # records are one-shot; dropping them releases cached patch matrices
    tape._records.clear()
    tape._consumed = True


def zero_grads(params):
    for p in params:
        p.zero_grad()


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------

def _im2col(x, kd, kh, kw):
    """(B,C,D,H,W) -> (B, C*kd*kh*kw, P) patch matrix for valid windows.

    Built from k^3 whole-slab copies (long contiguous runs) instead of a
    strided gather; the K axis ordering matches filters.reshape(O, -1).
    1^3 kernels return a reshaped view, no copy.
    """
    b, c, d, h, w = x.shape
    dp, hp, wp = d - kd + 1, h - kh + 1, w - kw + 1
    if kd == kh == kw == 1:
        return x.reshape(b, c, d * h * w), (dp, hp, wp)
    col = np.empty((b, c, kd * kh * kw, dp, hp, wp), x.dtype)
    m = 0
    for i in range(kd):
        for j in range(kh):
            for k in range(kw):
                col[:, :, m] = x[:, :, i:i + dp, j:j + hp, k:k + wp]
                m += 1
    return col.reshape(b, c * kd * kh * kw, dp * hp * wp), (dp, hp, wp)


def _col2im_add(t, xshape, ks, outs):
    """Scatter-add a (B, C*k^3, P) gradient matrix back onto input windows."""
    b, c = xshape[0], xshape[1]
    kd, kh, kw = ks
    dp, hp, wp = outs
    t6 = t.reshape(b, c, kd * kh * kw, dp, hp, wp)
    dx = np.zeros(xshape, t.dtype)
    m = 0
    for i in range(kd):
        for j in range(kh):
            for k in range(kw):
                dx[:, :, i:i + dp, j:j + hp, k:k + wp] += t6[:, :, m]
                m += 1
    return dx


def _corr3d(x, w):
    """Valid cross-correlation: x (B,C,D,H,W), w (O,C,kd,kh,kw) -> (B,O,D',H',W')."""
    col, (dp, hp, wp) = _im2col(x, *w.shape[2:])
    out = np.matmul(w.reshape(w.shape[0], -1)[None], col)
    return out.reshape(x.shape[0], w.shape[0], dp, hp, wp)


# forward patch matrices below this size are kept for the filter-gradient GEMM
_COL_CACHE_BYTES = 256 * 1024 * 1024


def conv3d_valid(x, filters, bias):
    """Valid (no padding, unit stride) 3D cross-correlation plus per-channel bias.

    x: (B, Cin, D, H, W); filters: (Cout, Cin, kd, kh, kw); bias: (Cout,).
    Output spatial side shrinks by kernel-1 per axis.
    """
    xd, wd, bd = x.data, filters.data, bias.data
    if xd.ndim != 5 or wd.ndim != 5:
        raise ShapeError(
            f"conv3d_valid: input must be (B,Cin,D,H,W) and filters (Cout,Cin,kd,kh,kw); "
            f"got input {xd.shape}, filters {wd.shape}")
    if xd.shape[1] != wd.shape[1]:
        raise ShapeError(
            f"conv3d_valid: input channels Cin={xd.shape[1]} != filter channels Cin={wd.shape[1]}")
    if bd.shape != (wd.shape[0],):
        raise ShapeError(
            f"conv3d_valid: bias shape {bd.shape} != (Cout,)=({wd.shape[0]},)")
    for axis, name in zip(range(2, 5), "DHW"):
        if wd.shape[axis] > xd.shape[axis]:
            raise ShapeError(
                f"conv3d_valid: kernel {name}={wd.shape[axis]} exceeds input {name}={xd.shape[axis]}")

    ks = wd.shape[2:]
    col, outs = _im2col(xd, *ks)
    out = np.matmul(wd.reshape(wd.shape[0], -1)[None], col).reshape(
        (xd.shape[0], wd.shape[0]) + outs) + bd.reshape(1, -1, 1, 1, 1)
    keep_col = col if (filters.requires_grad and _ACTIVE_TAPE is not None
                       and col.nbytes <= _COL_CACHE_BYTES) else None

    def backprop(g, accum):
        g3 = g.reshape(g.shape[0], g.shape[1], -1)
        if bias.requires_grad:
            accum(bias, g.sum(axis=(0, 2, 3, 4)))
        if filters.requires_grad:
            # dW[o, ck3] = sum_{b,p} g[b,o,p] * col[b, ck3, p]
            c2 = keep_col if keep_col is not None else _im2col(xd, *ks)[0]
            accum(filters, np.matmul(g3, c2.transpose(0, 2, 1)).sum(axis=0).reshape(wd.shape))
        if x.requires_grad:
            # dX[b,c,z+i,y+j,x+k] += sum_o w[o,c,i,j,k] g[b,o,z,y,x]
            wt = wd.transpose(1, 2, 3, 4, 0).reshape(-1, wd.shape[0])
            t = np.matmul(wt[None], g3)
            accum(x, _col2im_add(t, xd.shape, ks, outs))

    return _make_output(out, (x, filters, bias), backprop)


# ---------------------------------------------------------------------------
# Activations and normalization
# ---------------------------------------------------------------------------

def prelu(x, a):
    """f(x) = max(0,x) + a_c * min(0,x), one learnable coefficient per channel.

    Subgradient at exactly 0 takes the positive branch (slope 1).
    """
    xd, ad = x.data, a.data
    if xd.ndim < 2 or ad.shape != (xd.shape[1],):
        raise ShapeError(
            f"prelu: coefficients shape {ad.shape} must be (channels,)=({xd.shape[1] if xd.ndim > 1 else '?'},)")
    abr = ad.reshape((1, -1) + (1,) * (xd.ndim - 2))
    neg = np.minimum(xd, 0)
    out = np.maximum(xd, 0) + abr * neg

    def backprop(g, accum):
        if x.requires_grad:
            accum(x, g * np.where(xd >= 0, xd.dtype.type(1), abr))
        if a.requires_grad:
            axes = (0,) + tuple(range(2, xd.ndim))
            accum(a, (g * neg).sum(axis=axes))

    return _make_output(out, (x, a), backprop)


class BatchNormState:
    """Running statistics for one batch-norm layer (per channel)."""

    def __init__(self, channels, dtype=np.float32, eps=1e-5, momentum=0.9):
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.zeros(channels, dtype=dtype)
        self.initialized = False
        self.eps = eps
        self.momentum = momentum


def batch_norm(x, gamma, beta, state, mode):
    """Per-channel normalization over (batch, spatial) axes, scale + shift.

    Train mode uses batch statistics (biased variance) and blends them into
    the running stats: first batch copies, later batches use momentum 0.9.
    Infer mode applies running statistics as a fixed per-channel affine.
    """
    xd = x.data
    c = xd.shape[1]
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ShapeError(
            f"batch_norm: gamma/beta must be (channels,)=({c},), got {gamma.data.shape}/{beta.data.shape}")
    if mode not in ("train", "infer"):
        raise ValueError(f"batch_norm: unknown mode {mode!r}")
    axes = (0,) + tuple(range(2, xd.ndim))
    shp = (1, -1) + (1,) * (xd.ndim - 2)
    eps = xd.dtype.type(state.eps)

    if mode == "train":
        mu = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        if state.initialized:
            m = state.momentum
            state.running_mean = (m * state.running_mean + (1 - m) * mu).astype(xd.dtype)
            state.running_var = (m * state.running_var + (1 - m) * var).astype(xd.dtype)
        else:
            state.running_mean = mu.astype(xd.dtype)
            state.running_var = var.astype(xd.dtype)
            state.initialized = True
    else:
        if not state.initialized:
            raise GradientError("batch_norm: uninitialized statistics (infer before any training step)")
        mu, var = state.running_mean, state.running_var

    sigma = np.sqrt(var + eps)
    xhat = (xd - mu.reshape(shp)) / sigma.reshape(shp)
    out = gamma.data.reshape(shp) * xhat + beta.data.reshape(shp)

    n = 1
    for ax in axes:
        n *= xd.shape[ax]

    def backprop(g, accum):
        if gamma.requires_grad:
            accum(gamma, (g * xhat).sum(axis=axes))
        if beta.requires_grad:
            accum(beta, g.sum(axis=axes))
        if x.requires_grad:
            gs = gamma.data.reshape(shp) / sigma.reshape(shp)
            if mode == "train":
                gm = g.mean(axis=axes).reshape(shp)
                gxm = (g * xhat).mean(axis=axes).reshape(shp)
                accum(x, gs * (g - gm - xhat * gxm))
            else:
                accum(x, gs * g)

    return _make_output(out, (x, gamma, beta), backprop)


def softmax_channels(logits):
    """Per-voxel distribution over the channel axis, stabilized by max-subtraction."""
    ld = logits.data
    if ld.ndim < 2 or ld.shape[1] < 2:
        raise ShapeError(f"softmax_channels: need >=2 channels on axis 1, got shape {ld.shape}")
    e = np.exp(ld - ld.max(axis=1, keepdims=True))
    p = e / e.sum(axis=1, keepdims=True)

    def backprop(g, accum):
        if logits.requires_grad:
            accum(logits, p * (g - (g * p).sum(axis=1, keepdims=True)))

    return _make_output(p, (logits,), backprop)


PROB_FLOOR = 1e-12  # clamp before log keeps confident mistakes finite


def cross_entropy_loss(probs, labels):
    """Mean negative log-likelihood over segments and voxels.

    probs: (B, C, d, h, w) from softmax_channels; labels: int array (B, d, h, w)
    with class indices 0..C-1. Averages over B*d*h*w exactly (segments x voxels).
    """
    pd = probs.data
    lab = np.asarray(labels)
    if lab.shape != pd.shape[:1] + pd.shape[2:]:
        raise ShapeError(
            f"cross_entropy_loss: labels shape {lab.shape} must match probs batch+spatial "
            f"{pd.shape[:1] + pd.shape[2:]}")
    c = pd.shape[1]
    if lab.min() < 0 or lab.max() >= c:
        raise ShapeError(f"cross_entropy_loss: labels must lie in [0, {c}), got [{lab.min()}, {lab.max()}]")
    idx = np.expand_dims(lab, 1)
    p_true = np.take_along_axis(pd, idx, axis=1)
    clamped = np.maximum(p_true, pd.dtype.type(PROB_FLOOR))
    n = p_true.size
    # 64-bit reduction keeps the reported cost at oracle precision
    out = np.asarray(-np.log(clamped.astype(np.float64)).sum() / n, dtype=pd.dtype)

    def backprop(g, accum):
        if probs.requires_grad:
            dp_true = np.where(p_true > PROB_FLOOR, -1.0 / (n * clamped), 0.0) * g
            dp = np.zeros_like(pd)
            np.put_along_axis(dp, idx, dp_true.astype(pd.dtype), axis=1)
            accum(probs, dp)

    return _make_output(out, (probs,), backprop)


# ---------------------------------------------------------------------------
# Structural ops
# ---------------------------------------------------------------------------

def add(x, y):
    if x.data.shape != y.data.shape:
        raise ShapeError(f"add: shapes {x.data.shape} and {y.data.shape} differ")
    out = x.data + y.data

    def backprop(g, accum):
        if x.requires_grad:
            accum(x, g)
        if y.requires_grad:
            accum(y, g)

    return _make_output(out, (x, y), backprop)


def mul(x, y):
    if x.data.shape != y.data.shape:
        raise ShapeError(f"mul: shapes {x.data.shape} and {y.data.shape} differ")
    out = x.data * y.data

    def backprop(g, accum):
        if x.requires_grad:
            accum(x, g * y.data)
        if y.requires_grad:
            accum(y, g * x.data)

    return _make_output(out, (x, y), backprop)


def tensor_sum(x):
    """Sum of all elements, as a scalar tensor."""
    out = np.asarray(x.data.sum(), dtype=x.data.dtype)

    def backprop(g, accum):
        if x.requires_grad:
            accum(x, np.broadcast_to(g, x.data.shape).astype(x.data.dtype))

    return _make_output(out, (x,), backprop)


def crop_center(x, target_spatial):
    """Symmetric center crop of the spatial axes of a (B,C,D,H,W) tensor."""
    xd = x.data
    spatial = xd.shape[2:]
    if len(target_spatial) != len(spatial):
        raise ShapeError(f"crop_center: target rank {len(target_spatial)} != spatial rank {len(spatial)}")
    offs = []
    for s, t in zip(spatial, target_spatial):
        if t > s:
            raise ShapeError(f"crop_center: target side {t} exceeds source side {s}")
        if (s - t) % 2 != 0:
            raise ShapeError(f"crop_center: cannot center a side-{t} window in side {s} (parity mismatch)")
        offs.append((s - t) // 2)
    sl = (slice(None), slice(None)) + tuple(slice(o, o + t) for o, t in zip(offs, target_spatial))
    out = np.ascontiguousarray(xd[sl])

    def backprop(g, accum):
        if x.requires_grad:
            full = np.zeros_like(xd)
            full[sl] = g
            accum(x, full)

    return _make_output(out, (x,), backprop)


def concat_channels(tensors):
    """Concatenate along the channel axis; spatial and batch dims must agree."""
    shapes = [t.data.shape for t in tensors]
    ref = shapes[0]
    for s in shapes[1:]:
        if s[0] != ref[0] or s[2:] != ref[2:]:
            raise ShapeError(f"concat_channels: incompatible shapes {shapes}")
    out = np.concatenate([t.data for t in tensors], axis=1)
    splits = np.cumsum([s[1] for s in shapes])[:-1]

    def backprop(g, accum):
        parts = np.split(g, splits, axis=1)
        for t, part in zip(tensors, parts):
            if t.requires_grad:
                accum(t, np.ascontiguousarray(part))

    return _make_output(out, tuple(tensors), backprop)


# ---------------------------------------------------------------------------
# Initialization and optimization
# ---------------------------------------------------------------------------

def he_init(shape, fan_in, rng, dtype=np.float32):
    """Zero-mean Gaussian samples with std sqrt(2 / fan_in).

    fan_in is the number of connections into a unit of the layer
    (input channels x kernel volume for a conv layer).
    """
    if fan_in <= 0:
        raise ValueError(f"he_init: fan_in must be positive, got {fan_in}")
    std = np.sqrt(2.0 / fan_in)
    return rng.normal(0.0, std, size=shape).astype(dtype)


def rmsprop_step(params, lr, momentum=0.6, rho=0.9, eps=1e-6):
    """RMSprop with classical momentum applied to the preconditioned step.

    rms <- rho*rms + (1-rho)*g^2
    step <- momentum*step_prev + lr * g / sqrt(rms + eps)
    value <- value - step

    A non-finite gradient anywhere aborts the whole step before any
    parameter is touched.
    """
    live = [p for p in params if p.trainable]
    for p in live:
        if not np.all(np.isfinite(p.grad)):
            raise GradientError(f"rmsprop_step: non-finite gradient for parameter '{p.name}'")
    for p in live:
        g = p.grad
        p.rms_cache[...] = rho * p.rms_cache + (1.0 - rho) * g * g
        step = momentum * p.momentum_cache + lr * g / np.sqrt(p.rms_cache + eps)
        p.momentum_cache[...] = step
        p.data -= step
