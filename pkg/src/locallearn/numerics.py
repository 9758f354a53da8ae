"""Array kernels with hand-paired forward/backward passes.

There is no autodiff tape anywhere in this package: every forward op here has
a matching ``*_backward`` that consumes the upstream gradient plus whatever
the forward cached, and the training loop wires them together explicitly.

Conventions:
  * tensors are numpy ndarrays, C-order, float32 in training and float64 in
    the gradient-check oracles; ops preserve the input dtype
  * image batches are NCHW
  * backward functions return gradients in the same order as the forward
    arguments they correspond to
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, InputError, ShapeError


def _as_float(x, name: str) -> np.ndarray:
    x = np.asarray(x)
    if x.dtype not in (np.float32, np.float64):
        raise ShapeError(f"{name} must be float32 or float64, got {x.dtype}")
    return x


# ---------------------------------------------------------------------------
# dense / conv primitives
# ---------------------------------------------------------------------------


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """2-d matrix product a @ b with explicit shape validation."""
    a = _as_float(a, "a")
    b = _as_float(b, "b")
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} vs {b.shape}")
    return a @ b


def matmul_backward(a: np.ndarray, b: np.ndarray, g: np.ndarray):
    """Gradients of sum(g * (a@b)) w.r.t. a and b."""
    if g.shape != (a.shape[0], b.shape[1]):
        raise ShapeError(f"upstream grad shape {g.shape} does not match {(a.shape[0], b.shape[1])}")
    return g @ b.T, a.T @ g


def _conv_out_extent(size: int, k: int, stride: int, pad: int) -> int:
    out = (size + 2 * pad - k) // stride + 1
    if out < 1:
        raise ShapeError(f"conv kernel {k} (stride {stride}, pad {pad}) does not fit extent {size}")
    return out


def conv2d(x: np.ndarray, k: np.ndarray, stride: int = 1, pad: int = 1) -> np.ndarray:
    """Cross-correlation of an NCHW batch with OIHW kernels.

    Accumulates one matmul per kernel tap instead of materialising an im2col
    buffer; identical arithmetic, smaller peak memory.
    """
    x = _as_float(x, "x")
    k = _as_float(k, "k")
    if x.ndim != 4 or k.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d x and k, got {x.shape} and {k.shape}")
    if x.shape[1] != k.shape[1]:
        raise ShapeError(f"channel mismatch: input has {x.shape[1]}, kernel expects {k.shape[1]}")
    if stride < 1 or pad < 0:
        raise ConfigError(f"bad stride/pad: {stride}/{pad}")
    n, _, h, w = x.shape
    co, ci, kh, kw = k.shape
    ho = _conv_out_extent(h, kh, stride, pad)
    wo = _conv_out_extent(w, kw, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    out = np.zeros((n, co, ho, wo), dtype=x.dtype)
    for u in range(kh):
        for v in range(kw):
            patch = xp[:, :, u : u + (ho - 1) * stride + 1 : stride, v : v + (wo - 1) * stride + 1 : stride]
            # (n,ci,ho,wo) x (co,ci) -> (n,co,ho,wo)
            out += np.einsum("nchw,oc->nohw", patch, k[:, :, u, v], optimize=True)
    return out


def conv2d_backward(x: np.ndarray, k: np.ndarray, g: np.ndarray, stride: int = 1, pad: int = 1):
    """Gradients of sum(g * conv2d(x, k)) w.r.t. x and k."""
    n, ci, h, w = x.shape
    co, _, kh, kw = k.shape
    ho = _conv_out_extent(h, kh, stride, pad)
    wo = _conv_out_extent(w, kw, stride, pad)
    if g.shape != (n, co, ho, wo):
        raise ShapeError(f"upstream grad shape {g.shape} does not match {(n, co, ho, wo)}")
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    dxp = np.zeros_like(xp)
    dk = np.zeros_like(k)
    for u in range(kh):
        for v in range(kw):
            rows = slice(u, u + (ho - 1) * stride + 1, stride)
            cols = slice(v, v + (wo - 1) * stride + 1, stride)
            patch = xp[:, :, rows, cols]
            dk[:, :, u, v] = np.einsum("nohw,nchw->oc", g, patch, optimize=True)
            dxp[:, :, rows, cols] += np.einsum("nohw,oc->nchw", g, k[:, :, u, v], optimize=True)
    dx = dxp[:, :, pad : pad + h, pad : pad + w] if pad else dxp
    return dx, dk


# ---------------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------------


def maxpool2x2(x: np.ndarray):
    """2x2/stride-2 max pooling; returns (pooled, argmax_index).

    Ties go to the first maximum in row-major window order. Odd spatial
    extents are an error, halving must be exact.
    """
    x = _as_float(x, "x")
    if x.ndim != 4:
        raise ShapeError(f"maxpool2x2 expects NCHW, got {x.shape}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2x2 needs even extents, got {h}x{w}")
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = np.argmax(win, axis=-1)  # np.argmax picks the first max: the tie rule
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, idx


def maxpool2x2_backward(g: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """Scatter the upstream gradient back to the winning input positions."""
    if g.shape != idx.shape:
        raise ShapeError(f"grad shape {g.shape} does not match index shape {idx.shape}")
    n, c, ho, wo = g.shape
    dwin = np.zeros((n, c, ho, wo, 4), dtype=g.dtype)
    np.put_along_axis(dwin, idx[..., None], g[..., None], axis=-1)
    return dwin.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * ho, 2 * wo)


def avgpool(x: np.ndarray, k: int) -> np.ndarray:
    """k x k / stride-k average pooling; k must divide both spatial extents."""
    x = _as_float(x, "x")
    if x.ndim != 4:
        raise ShapeError(f"avgpool expects NCHW, got {x.shape}")
    if k < 1:
        raise ConfigError(f"avgpool kernel must be >= 1, got {k}")
    n, c, h, w = x.shape
    if h % k or w % k:
        raise ShapeError(f"avgpool kernel {k} does not divide extents {h}x{w}")
    return x.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))


def avgpool_backward(g: np.ndarray, k: int) -> np.ndarray:
    """Spread each pooled gradient uniformly over its k*k window."""
    if g.ndim != 4:
        raise ShapeError(f"avgpool_backward expects NCHW grad, got {g.shape}")
    scaled = g / (k * k)
    return np.repeat(np.repeat(scaled, k, axis=2), k, axis=3)


# ---------------------------------------------------------------------------
# normalization / activation / regularization
# ---------------------------------------------------------------------------


def _bn_axes(x: np.ndarray):
    if x.ndim == 2:
        return (0,)
    if x.ndim == 4:
        return (0, 2, 3)
    raise ShapeError(f"batchnorm expects 2-d or 4-d input, got {x.shape}")


def _bn_shape(x: np.ndarray, p: np.ndarray):
    c = x.shape[1]
    if p.shape != (c,):
        raise ShapeError(f"batchnorm parameter shape {p.shape} does not match {c} features")
    return p.reshape((1, c) + (1,) * (x.ndim - 2))


def batchnorm_train(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = 1e-5):
    """Train-mode batch normalization over the feature axis.

    Uses population (1/N) variance. Returns (y, xhat, inv_std, mean, var);
    mean/var are the batch statistics the caller folds into running stats.
    """
    x = _as_float(x, "x")
    if x.shape[0] < 2:
        raise InputError("batchnorm in train mode needs a batch of at least 2")
    axes = _bn_axes(x)
    mean = x.mean(axis=axes)
    var = x.var(axis=axes)  # population variance, matches the running-stat update
    inv_std = 1.0 / np.sqrt(var + eps)
    shape = (1, x.shape[1]) + (1,) * (x.ndim - 2)
    xhat = (x - mean.reshape(shape)) * inv_std.reshape(shape)
    y = _bn_shape(x, gamma) * xhat + _bn_shape(x, beta)
    return y, xhat, inv_std, mean, var


def batchnorm_eval(x, gamma, beta, running_mean, running_var, eps: float = 1e-5):
    """Eval-mode batch normalization using stored running statistics."""
    x = _as_float(x, "x")
    _bn_axes(x)
    shape = (1, x.shape[1]) + (1,) * (x.ndim - 2)
    inv_std = 1.0 / np.sqrt(running_var + eps)
    return _bn_shape(x, gamma) * ((x - running_mean.reshape(shape)) * inv_std.reshape(shape)) + _bn_shape(x, beta)


def batchnorm_backward(g: np.ndarray, gamma: np.ndarray, xhat: np.ndarray, inv_std: np.ndarray):
    """Full batch-coupled backward pass; returns (dx, dgamma, dbeta).

    dx includes the mean/variance coupling terms, so perturbing one example
    moves every other example's gradient, which the finite-difference checks
    rely on.
    """
    if g.shape != xhat.shape:
        raise ShapeError(f"grad shape {g.shape} does not match activations {xhat.shape}")
    axes = _bn_axes(g)
    count = g.size // g.shape[1]
    dgamma = (g * xhat).sum(axis=axes)
    dbeta = g.sum(axis=axes)
    shape = (1, g.shape[1]) + (1,) * (g.ndim - 2)
    dxhat = g * gamma.reshape(shape)
    dx = (
        inv_std.reshape(shape)
        / count
        * (count * dxhat - dxhat.sum(axis=axes).reshape(shape) - xhat * (dxhat * xhat).sum(axis=axes).reshape(shape))
    )
    return dx, dgamma, dbeta


def leaky_relu(x: np.ndarray, slope: float = 0.0) -> np.ndarray:
    """max(x, slope*x); slope 0 is plain relu."""
    x = _as_float(x, "x")
    return np.where(x >= 0, x, x * x.dtype.type(slope))


def leaky_relu_backward(x: np.ndarray, g: np.ndarray, slope: float = 0.0) -> np.ndarray:
    if g.shape != x.shape:
        raise ShapeError(f"grad shape {g.shape} does not match input {x.shape}")
    return np.where(x >= 0, g, g * g.dtype.type(slope))


def dropout(x: np.ndarray, rate: float, rng: np.random.Generator, train: bool = True):
    """Inverted dropout. Returns (y, mask); mask is None in eval mode.

    Keeping E[y] = x means surviving units are scaled by 1/(1-rate), so eval
    mode is the identity and consumes no randomness.
    """
    x = _as_float(x, "x")
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if not train:
        return x, None
    mask = rng.random(x.shape) >= rate  # mask depends on shape and rng only, never on values
    return x * mask / x.dtype.type(1.0 - rate), mask


def dropout_backward(g: np.ndarray, mask: np.ndarray, rate: float) -> np.ndarray:
    if g.shape != mask.shape:
        raise ShapeError(f"grad shape {g.shape} does not match mask {mask.shape}")
    return g * mask / g.dtype.type(1.0 - rate)


def std_per_feature_map(x: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    """Population std over each (H, W) feature map; (n,c,h,w) -> (n,c).

    The eps inside the sqrt keeps constant maps differentiable (their std
    reports as sqrt(eps) instead of 0).
    """
    x = _as_float(x, "x")
    if x.ndim != 4:
        raise ShapeError(f"std_per_feature_map expects NCHW, got {x.shape}")
    var = x.var(axis=(2, 3))
    return np.sqrt(var + x.dtype.type(eps))


def std_per_feature_map_backward(x: np.ndarray, g: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    """Gradient of sum(g * std_per_feature_map(x)) w.r.t. x."""
    if g.shape != x.shape[:2]:
        raise ShapeError(f"grad shape {g.shape} does not match {x.shape[:2]}")
    n, c, h, w = x.shape
    mu = x.mean(axis=(2, 3), keepdims=True)
    s = np.sqrt(x.var(axis=(2, 3)) + x.dtype.type(eps))
    # d std/dx_i = (x_i - mu) / (HW * s); the mean term cancels because sum(x - mu) = 0
    return g[:, :, None, None] * (x - mu) / (x.dtype.type(h * w) * s[:, :, None, None])


# ---------------------------------------------------------------------------
# classification losses
# ---------------------------------------------------------------------------


def one_hot(labels: np.ndarray, classes: int, dtype=np.float32) -> np.ndarray:
    """Integer labels (n,) -> one-hot rows (n, classes)."""
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise ShapeError(f"labels must be 1-d, got {labels.shape}")
    if labels.min(initial=0) < 0 or (labels.size and labels.max() >= classes):
        raise InputError(f"labels out of range for {classes} classes")
    out = np.zeros((labels.size, classes), dtype=dtype)
    out[np.arange(labels.size), labels] = 1
    return out


def _check_one_hot(targets: np.ndarray, logits_shape) -> None:
    if targets.shape != logits_shape:
        raise ShapeError(f"targets shape {targets.shape} does not match logits {logits_shape}")
    ones = targets == 1
    if not (np.all((targets == 0) | ones) and np.all(ones.sum(axis=1) == 1)):
        raise InputError("targets must be one-hot rows")


def cross_entropy_logits(logits: np.ndarray, targets: np.ndarray):
    """Mean cross-entropy from raw logits; returns (loss, dlogits).

    Stabilised with log-sum-exp, so a 1000-unit logit margin neither
    overflows nor underflows.
    """
    logits = _as_float(logits, "logits")
    if logits.ndim != 2:
        raise ShapeError(f"logits must be (n, classes), got {logits.shape}")
    _check_one_hot(np.asarray(targets), logits.shape)
    n = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = float(-(targets * logp).sum() / n)
    dlogits = (np.exp(logp) - targets) / logits.dtype.type(n)
    return loss, dlogits


def bce_logits(logits: np.ndarray, targets: np.ndarray):
    """Mean elementwise binary cross-entropy from logits; returns (loss, dlogits).

    Targets are 0/1 floats of the same shape. The loss averages over every
    element, and uses the max(z,0) - z*t + log1p(exp(-|z|)) form to stay
    finite for any logit magnitude.
    """
    logits = _as_float(logits, "logits")
    targets = np.asarray(targets)
    if targets.shape != logits.shape:
        raise ShapeError(f"targets shape {targets.shape} does not match logits {logits.shape}")
    if not np.all((targets == 0) | (targets == 1)):
        raise InputError("binary targets must be 0 or 1")
    z = logits
    loss = float((np.maximum(z, 0) - z * targets + np.log1p(np.exp(-np.abs(z)))).mean())
    sig = np.empty_like(z)
    pos = z >= 0
    sig[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    sig[~pos] = ez / (1.0 + ez)
    dlogits = (sig - targets) / z.dtype.type(z.size)
    return loss, dlogits
