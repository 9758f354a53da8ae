"""Local error signals: similarity matching, local classifiers, and the
backprop-free variants built from fixed random projections.

Every loss here returns the scalar, the gradient w.r.t. the hidden activation
it was attached to, and the gradients of its own head parameters. That is the
whole point: a layer can be trained from these outputs alone, without waiting
for anything downstream.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import numerics as nm
from .errors import ConfigError, InputError, ShapeError

MODES = ("glob", "pred", "sim", "predsim", "pred-bpf", "sim-bpf", "predsim-bpf", "glob+sim")

# modes whose hidden layers are trained purely from local signals
LOCAL_MODES = ("pred", "sim", "predsim", "pred-bpf", "sim-bpf", "predsim-bpf")


def default_beta(mode: str) -> float:
    """Mixing weight on the sim term when the mode combines two losses."""
    return {"predsim": 0.99, "predsim-bpf": 0.01}.get(mode, 1.0)


@dataclass
class LossConfig:
    """Which error signal trains the hidden layers."""

    mode: str = "predsim"
    beta: Optional[float] = None  # None = per-mode default
    projection_dim: int = 128  # width of the fixed random label projection (bpf modes)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown loss mode {self.mode!r}; valid: {', '.join(MODES)}")
        if self.beta is not None and not 0.0 <= self.beta <= 1.0:
            raise ConfigError(f"beta must be in [0, 1], got {self.beta}")
        if self.projection_dim < 1:
            raise ConfigError(f"projection_dim must be >= 1, got {self.projection_dim}")

    @property
    def resolved_beta(self) -> float:
        return default_beta(self.mode) if self.beta is None else self.beta


# ---------------------------------------------------------------------------
# similarity matching
# ---------------------------------------------------------------------------

_NORM_EPS = 1e-8


def similarity_matrix(x: np.ndarray) -> np.ndarray:
    """Adjusted cosine similarity between the columns of x.

    Each column is an example descriptor. Columns are mean-centered, then the
    matrix of pairwise cosines is formed, symmetrised, clipped to [-1, 1],
    and given an exact unit diagonal. Zero-norm columns are guarded with a
    small epsilon instead of dividing by zero.
    """
    x = np.asarray(x)
    if x.ndim != 2:
        raise ShapeError(f"similarity_matrix expects (features, n), got {x.shape}")
    if x.shape[1] < 2:
        raise InputError("similarity needs at least 2 examples")
    c = x - x.mean(axis=0)
    nu = np.maximum(np.sqrt((c * c).sum(axis=0)), x.dtype.type(_NORM_EPS))
    z = c / nu
    s = z.T @ z
    s = (s + s.T) * x.dtype.type(0.5)
    np.clip(s, -1.0, 1.0, out=s)
    np.fill_diagonal(s, 1.0)
    return s


def similarity_matrix_backward(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Gradient of sum(g * similarity_matrix(x)) w.r.t. x.

    The diagonal of g is ignored (those entries are pinned to 1), and the
    clip is treated as the identity since it only trims float fuzz.
    """
    x = np.asarray(x)
    if g.shape != (x.shape[1], x.shape[1]):
        raise ShapeError(f"grad shape {g.shape} does not match {(x.shape[1], x.shape[1])}")
    c = x - x.mean(axis=0)
    nrm = np.sqrt((c * c).sum(axis=0))
    nu = np.maximum(nrm, x.dtype.type(_NORM_EPS))
    z = c / nu
    g0 = g.copy()
    np.fill_diagonal(g0, 0.0)
    # through sym(Z^T Z): dL/dZ = Z (G0 + G0^T), the 1/2 of sym cancels
    dz = z @ (g0 + g0.T)
    # normalisation backward; columns at the epsilon floor have constant nu
    proj = (z * dz).sum(axis=0)
    active = (nrm > _NORM_EPS).astype(x.dtype)
    dc = dz / nu - active * proj / nu * z
    return dc - dc.mean(axis=0)


def label_similarity(targets_onehot: np.ndarray) -> np.ndarray:
    """Similarity matrix of one-hot label rows (n, C): 1 within a class,
    -1/(C-1) across classes."""
    t = np.asarray(targets_onehot)
    if t.ndim != 2:
        raise ShapeError(f"expected one-hot rows, got {t.shape}")
    return similarity_matrix(t.T)


def _sim_frobenius(desc_cols: np.ndarray, target_sim: np.ndarray):
    """Core sim loss: mean-squared gap between the two similarity matrices
    (sum of squares / n^2). Returns (loss, d_desc_cols)."""
    n = desc_cols.shape[1]
    s = similarity_matrix(desc_cols)
    diff = s - target_sim
    loss = float((diff * diff).sum() / (n * n))
    dsim = diff * desc_cols.dtype.type(2.0 / (n * n))
    return loss, similarity_matrix_backward(desc_cols, dsim)


@dataclass
class LocalLossResult:
    """What a local loss hands back: scalar, grad w.r.t. the tapped hidden
    activation, and grads for the loss's own head parameters (keyed by the
    block attribute names)."""

    loss: float
    dh: np.ndarray
    grads: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# sim loss (trainable head -> descriptor -> similarity match against labels)
# ---------------------------------------------------------------------------


def sim_loss(h: np.ndarray, targets_onehot: np.ndarray, head_w: np.ndarray, head_b=None) -> LocalLossResult:
    """Similarity-matching loss through the layer's sim head.

    Dense h (n, d): the head is a square linear map, the descriptor is its
    output. Conv h (n, c, hh, ww): the head is a 3x3 same-channel conv with
    no bias, and the descriptor is the per-feature-map std of its output.
    """
    target_sim = label_similarity(targets_onehot)
    if h.ndim == 2:
        feat = nm.matmul(h, head_w) + head_b
        loss, ddesc = _sim_frobenius(feat.T, target_sim)
        dfeat = ddesc.T
        dh, dw = nm.matmul_backward(h, head_w, dfeat)
        return LocalLossResult(loss, dh, {"sim_w": dw, "sim_b": dfeat.sum(axis=0)})
    if h.ndim == 4:
        feat = nm.conv2d(h, head_w, stride=1, pad=1)
        desc = nm.std_per_feature_map(feat)
        loss, ddesc = _sim_frobenius(desc.T, target_sim)
        dfeat = nm.std_per_feature_map_backward(feat, ddesc.T)
        dh, dw = nm.conv2d_backward(h, head_w, dfeat, stride=1, pad=1)
        return LocalLossResult(loss, dh, {"sim_w": dw})
    raise ShapeError(f"sim_loss expects 2-d or 4-d activations, got {h.shape}")


def sim_bpf_loss(h: np.ndarray, proj_targets: np.ndarray) -> LocalLossResult:
    """Backprop-free sim loss: no head, descriptors matched against the
    similarity matrix of randomly projected labels.

    proj_targets is (projection_dim, n), columns per example.
    """
    target_sim = similarity_matrix(proj_targets)
    if h.ndim == 2:
        loss, ddesc = _sim_frobenius(h.T, target_sim)
        return LocalLossResult(loss, ddesc.T)
    if h.ndim == 4:
        desc = nm.std_per_feature_map(h)
        loss, ddesc = _sim_frobenius(desc.T, target_sim)
        return LocalLossResult(loss, nm.std_per_feature_map_backward(h, ddesc.T))
    raise ShapeError(f"sim_bpf_loss expects 2-d or 4-d activations, got {h.shape}")


# ---------------------------------------------------------------------------
# pred loss (local linear classifier) and its feedback-alignment variant
# ---------------------------------------------------------------------------


def _pool_flatten(h: np.ndarray, pool_k: int):
    """Average-pool conv activations and flatten; dense activations pass
    through. Returns (flat, unflatten) where unflatten maps the flat gradient
    back to h's shape."""
    if h.ndim == 2:
        return h, lambda d: d
    if h.ndim == 4:
        pooled = nm.avgpool(h, pool_k) if pool_k > 1 else h
        shape = pooled.shape
        flat = pooled.reshape(h.shape[0], -1)

        def unflatten(d):
            d = d.reshape(shape)
            return nm.avgpool_backward(d, pool_k) if pool_k > 1 else d

        return flat, unflatten
    raise ShapeError(f"expected 2-d or 4-d activations, got {h.shape}")


def choose_pool_kernel(channels: int, spatial: int, target_dim: int) -> int:
    """Largest pooling kernel k dividing `spatial` with
    channels*(spatial/k)^2 >= target_dim; 1 when even that is too small."""
    if channels < 1 or spatial < 1 or target_dim < 1:
        raise ConfigError("channels, spatial and target_dim must be positive")
    best = 1
    for k in range(1, spatial + 1):
        if spatial % k == 0 and channels * (spatial // k) ** 2 >= target_dim:
            best = k
    return best


def pred_loss(h: np.ndarray, targets_onehot: np.ndarray, w: np.ndarray, b: np.ndarray, pool_k: int = 1) -> LocalLossResult:
    """Cross-entropy of a single local linear classifier on this layer's
    (pooled, flattened) activations."""
    flat, unflatten = _pool_flatten(h, pool_k)
    logits = nm.matmul(flat, w) + b
    loss, dlogits = nm.cross_entropy_logits(logits, targets_onehot)
    dflat, dw = nm.matmul_backward(flat, w, dlogits)
    return LocalLossResult(loss, unflatten(dflat), {"cls_w": dw, "cls_b": dlogits.sum(axis=0)})


def binarized_targets(proj: np.ndarray, targets_onehot: np.ndarray, dtype) -> np.ndarray:
    """Sign-binarised random label projection: t = 1[P y > 0], rows per example."""
    return ((proj @ targets_onehot.T) > 0).T.astype(dtype)


def pred_bpf_loss(
    h: np.ndarray,
    bin_targets: np.ndarray,
    w: np.ndarray,
    b: np.ndarray,
    feedback: np.ndarray,
    pool_k: int = 1,
) -> LocalLossResult:
    """Backprop-free pred loss: binary cross-entropy against binarised
    projected labels, with the activation gradient routed through a fixed
    random feedback matrix instead of the classifier's transpose.

    dh is therefore deliberately *not* the gradient of the loss; the
    classifier's own w/b gradients are.
    """
    if feedback.shape != w.shape:
        raise ShapeError(f"feedback shape {feedback.shape} must match classifier {w.shape}")
    flat, unflatten = _pool_flatten(h, pool_k)
    logits = nm.matmul(flat, w) + b
    loss, dlogits = nm.bce_logits(logits, bin_targets)
    _, dw = nm.matmul_backward(flat, w, dlogits)
    dflat = dlogits @ feedback.T  # feedback alignment: B replaces w^T on the way down
    return LocalLossResult(loss, unflatten(dflat), {"cls_w": dw, "cls_b": dlogits.sum(axis=0)})


# ---------------------------------------------------------------------------
# combination
# ---------------------------------------------------------------------------


def combine(pred_res: LocalLossResult, sim_res: LocalLossResult, beta: float) -> LocalLossResult:
    """Convex combination (1-beta)*pred + beta*sim.

    The weights scale everything, head gradients included, so the result is
    exactly the gradient of the combined scalar. The two heads stay
    independent: neither receives a contribution from the other's loss.
    """
    if not 0.0 <= beta <= 1.0:
        raise ConfigError(f"beta must be in [0, 1], got {beta}")
    wp, ws = 1.0 - beta, beta
    grads = {k: wp * v for k, v in pred_res.grads.items()}
    grads.update({k: ws * v for k, v in sim_res.grads.items()})
    return LocalLossResult(wp * pred_res.loss + ws * sim_res.loss, wp * pred_res.dh + ws * sim_res.dh, grads)


def local_block_loss(
    mode: str,
    beta: float,
    h: np.ndarray,
    targets_onehot: np.ndarray,
    *,
    cls_w=None,
    cls_b=None,
    sim_w=None,
    sim_b=None,
    feedback=None,
    proj=None,
    pool_k: int = 1,
) -> LocalLossResult:
    """Dispatch the configured local error signal for one hidden block."""
    if mode in ("sim", "glob+sim"):
        return sim_loss(h, targets_onehot, sim_w, sim_b)
    if mode == "pred":
        return pred_loss(h, targets_onehot, cls_w, cls_b, pool_k)
    if mode == "predsim":
        return combine(
            pred_loss(h, targets_onehot, cls_w, cls_b, pool_k),
            sim_loss(h, targets_onehot, sim_w, sim_b),
            beta,
        )
    if mode == "sim-bpf":
        return sim_bpf_loss(h, proj @ targets_onehot.T)
    if mode == "pred-bpf":
        t = binarized_targets(proj, targets_onehot, h.dtype)
        return pred_bpf_loss(h, t, cls_w, cls_b, feedback, pool_k)
    if mode == "predsim-bpf":
        t = binarized_targets(proj, targets_onehot, h.dtype)
        return combine(
            pred_bpf_loss(h, t, cls_w, cls_b, feedback, pool_k),
            sim_bpf_loss(h, proj @ targets_onehot.T),
            beta,
        )
    raise ConfigError(f"mode {mode!r} has no local loss")
