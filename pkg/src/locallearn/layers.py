"""Trainable blocks, their optimizer state, and checkpoint serialization.

A hidden block is affine (dense or conv) -> batchnorm -> leaky relu ->
dropout, plus whatever local-loss heads its training mode needs: a linear
classifier (cls), a similarity head (sim), a fixed random feedback matrix B
for feedback alignment, and a fixed random label projection P. B and P are
drawn once at init and never updated; everything else has Adam state.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import numerics as nm
from .errors import ConfigError, DataError, NonFiniteError, ShapeError
from .losses import choose_pool_kernel


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    """First/second moment accumulators and step counter for one parameter."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def for_param(cls, p: np.ndarray) -> "AdamState":
        return cls(np.zeros_like(p), np.zeros_like(p))


def adam_step(
    param: np.ndarray,
    grad: np.ndarray,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One Adam update, in place on both param and state."""
    if grad.shape != param.shape:
        raise ShapeError(f"grad shape {grad.shape} does not match param {param.shape}")
    if not np.all(np.isfinite(grad)):
        raise NonFiniteError("non-finite gradient reached the optimizer")
    state.t += 1
    state.m += (1.0 - beta1) * (grad - state.m)
    state.v += (1.0 - beta2) * (grad * grad - state.v)
    mhat = state.m / (1.0 - beta1**state.t)
    vhat = state.v / (1.0 - beta2**state.t)
    param -= lr * mhat / (np.sqrt(vhat) + eps)


# ---------------------------------------------------------------------------
# block definition / init
# ---------------------------------------------------------------------------


@dataclass
class LayerSpec:
    """Static description of one hidden block and its local-loss heads."""

    kind: str  # "dense" | "conv"
    in_shape: tuple  # (d,) for dense, (c, h, w) for conv
    units: int = 0  # dense output width
    channels: int = 0  # conv output channels
    kernel: int = 3
    stride: int = 1
    pad: int = 1
    slope: float = 0.0
    dropout: float = 0.0
    # heads; zeros/False mean "absent"
    cls_targets: int = 0  # width of the local classifier (classes, or projection_dim)
    sim_head: bool = False
    feedback: bool = False  # fixed random B paired with the classifier
    projection: int = 0  # rows of the fixed random label projection P
    classes: int = 0  # columns of P
    pred_target_dim: int = 1024  # pooled size the conv classifier input aims for

    def __post_init__(self):
        if self.kind not in ("dense", "conv"):
            raise ConfigError(f"unknown block kind {self.kind!r}")
        if self.kind == "dense" and self.units < 1:
            raise ConfigError("dense block needs units >= 1")
        if self.kind == "conv":
            if self.channels < 1:
                raise ConfigError("conv block needs channels >= 1")
            if len(self.in_shape) != 3:
                raise ConfigError(f"conv block needs a (c, h, w) input shape, got {self.in_shape}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.feedback and not self.cls_targets:
            raise ConfigError("feedback matrix is only meaningful with a classifier head")

    @property
    def fan_in(self) -> int:
        if self.kind == "dense":
            return int(np.prod(self.in_shape))
        return self.in_shape[0] * self.kernel * self.kernel

    @property
    def out_shape(self) -> tuple:
        if self.kind == "dense":
            return (self.units,)
        _, h, w = self.in_shape
        ho = (h + 2 * self.pad - self.kernel) // self.stride + 1
        wo = (w + 2 * self.pad - self.kernel) // self.stride + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"conv kernel does not fit input {self.in_shape}")
        return (self.channels, ho, wo)

    @property
    def width(self) -> int:
        """Feature count the batchnorm/bias act on."""
        return self.units if self.kind == "dense" else self.channels


@dataclass
class LayerBlock:
    """One hidden block's parameters and optimizer state."""

    spec: LayerSpec
    weight: np.ndarray
    bias: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray
    run_mean: np.ndarray
    run_var: np.ndarray
    cls_w: Optional[np.ndarray] = None
    cls_b: Optional[np.ndarray] = None
    sim_w: Optional[np.ndarray] = None
    sim_b: Optional[np.ndarray] = None
    feedback: Optional[np.ndarray] = None  # fixed, no Adam state
    proj: Optional[np.ndarray] = None  # fixed, no Adam state
    pool_k: int = 1
    adam: dict = field(default_factory=dict)

    def param_names(self):
        """Trainable parameters, in a stable order."""
        names = ["weight", "bias", "gamma", "beta"]
        for extra in ("cls_w", "cls_b", "sim_w", "sim_b"):
            if getattr(self, extra) is not None:
                names.append(extra)
        return names


def _uniform_fan_in(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    bound = float(np.sqrt(1.0 / fan_in))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def init_params(spec: LayerSpec, rng: np.random.Generator, dtype=np.float32) -> LayerBlock:
    """Materialise a block: fan-in uniform weights, zero biases, unit
    batchnorm scale; heads per the spec's flags. Draw order is fixed so equal
    seeds give bit-identical blocks."""
    if spec.kind == "dense":
        w = _uniform_fan_in(rng, (spec.fan_in, spec.units), spec.fan_in, dtype)
    else:
        c_in = spec.in_shape[0]
        w = _uniform_fan_in(rng, (spec.channels, c_in, spec.kernel, spec.kernel), spec.fan_in, dtype)
    width = spec.width
    block = LayerBlock(
        spec=spec,
        weight=w,
        bias=np.zeros(width, dtype=dtype),
        gamma=np.ones(width, dtype=dtype),
        beta=np.zeros(width, dtype=dtype),
        run_mean=np.zeros(width, dtype=dtype),
        run_var=np.ones(width, dtype=dtype),
    )

    if spec.cls_targets:
        cls_in = _classifier_input_dim(spec, block)
        block.cls_w = _uniform_fan_in(rng, (cls_in, spec.cls_targets), cls_in, dtype)
        block.cls_b = np.zeros(spec.cls_targets, dtype=dtype)
    if spec.sim_head:
        if spec.kind == "dense":
            block.sim_w = _uniform_fan_in(rng, (spec.units, spec.units), spec.units, dtype)
            block.sim_b = np.zeros(spec.units, dtype=dtype)
        else:
            c = spec.channels
            block.sim_w = _uniform_fan_in(rng, (c, c, 3, 3), c * 9, dtype)
    if spec.feedback:
        sd = 1.0 / np.sqrt(spec.cls_targets)
        block.feedback = (rng.normal(0.0, 1.0, size=block.cls_w.shape) * sd).astype(dtype)
    if spec.projection:
        sd = 1.0 / np.sqrt(spec.classes)
        block.proj = (rng.normal(0.0, 1.0, size=(spec.projection, spec.classes)) * sd).astype(dtype)

    block.adam = {name: AdamState.for_param(getattr(block, name)) for name in block.param_names()}
    return block


def _classifier_input_dim(spec: LayerSpec, block: LayerBlock) -> int:
    if spec.kind == "dense":
        return spec.units
    c, ho, wo = spec.out_shape
    if ho != wo:
        raise ConfigError(f"conv classifier head needs square activations, got {ho}x{wo}")
    block.pool_k = choose_pool_kernel(c, ho, spec.pred_target_dim)
    return c * (ho // block.pool_k) ** 2


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------


@dataclass
class BlockCache:
    """Everything the paired backward pass needs from one forward."""

    x: np.ndarray  # affine input (dense: already flattened)
    x_shape: tuple  # original input shape, for reshaping dx
    xhat: np.ndarray
    inv_std: np.ndarray
    bn_out: np.ndarray  # leaky relu input
    mask: Optional[np.ndarray]


def block_forward(block: LayerBlock, x: np.ndarray, train: bool, rng: Optional[np.random.Generator] = None):
    """Run one block; returns (out, cache). cache is None in eval mode.

    Train mode folds the batch statistics into the running batchnorm stats
    (population variance, momentum 0.1); eval mode never touches them and
    never consumes randomness.
    """
    spec = block.spec
    x_shape = x.shape
    if spec.kind == "dense":
        x2 = x.reshape(x.shape[0], -1)
        if x2.shape[1] != spec.fan_in:
            raise ShapeError(f"block expects {spec.fan_in} features, got {x2.shape[1]}")
        pre = nm.matmul(x2, block.weight) + block.bias
    else:
        x2 = x
        pre = nm.conv2d(x, block.weight, spec.stride, spec.pad) + block.bias[None, :, None, None]

    if train:
        bn_out, xhat, inv_std, mean, var = nm.batchnorm_train(pre, block.gamma, block.beta)
        momentum = pre.dtype.type(0.1)
        block.run_mean += momentum * (mean - block.run_mean)
        block.run_var += momentum * (var - block.run_var)
    else:
        bn_out = nm.batchnorm_eval(pre, block.gamma, block.beta, block.run_mean, block.run_var)

    act = nm.leaky_relu(bn_out, spec.slope)

    mask = None
    if train and spec.dropout > 0.0:
        if rng is None:
            raise ConfigError("dropout needs an rng in train mode")
        act, mask = nm.dropout(act, spec.dropout, rng)

    if not train:
        return act, None
    return act, BlockCache(x2, x_shape, xhat, inv_std, bn_out, mask)


def block_backward(block: LayerBlock, cache: BlockCache, d_out: np.ndarray):
    """Backward through one block; returns (grads dict, dx).

    dx comes back in the shape the block was fed, so it can cross a flatten
    boundary on the way down in the global modes.
    """
    spec = block.spec
    g = d_out
    if cache.mask is not None:
        g = nm.dropout_backward(g, cache.mask, spec.dropout)
    g = nm.leaky_relu_backward(cache.bn_out, g, spec.slope)
    g, dgamma, dbeta = nm.batchnorm_backward(g, block.gamma, cache.xhat, cache.inv_std)
    if spec.kind == "dense":
        dx2, dw = nm.matmul_backward(cache.x, block.weight, g)
        db = g.sum(axis=0)
        dx = dx2.reshape(cache.x_shape)
    else:
        dx, dw = nm.conv2d_backward(cache.x, block.weight, g, spec.stride, spec.pad)
        db = g.sum(axis=(0, 2, 3))
    return {"weight": dw, "bias": db, "gamma": dgamma, "beta": dbeta}, dx


def block_local_backward(block: LayerBlock, cache: BlockCache, d_out: np.ndarray) -> dict:
    """Backward for locally trained blocks: same math, the input gradient is
    dropped on the floor because nothing upstream will ever see it."""
    grads, _ = block_backward(block, cache, d_out)
    return grads


def update_params(owner, grads: dict, lr: float) -> None:
    """Adam-update every named gradient against the owner's matching
    parameter and state; works for blocks and the output layer alike."""
    for name, g in grads.items():
        try:
            adam_step(getattr(owner, name), g, owner.adam[name], lr)
        except NonFiniteError as e:
            raise NonFiniteError(f"{e} (parameter {name!r})") from None


# ---------------------------------------------------------------------------
# checkpoint format
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"LLRN"
CKPT_VERSION = 1


def save_checkpoint(path, tensors: dict, block_count: int) -> None:
    """Write named float32 tensors to a flat little-endian binary file.

    Layout: magic "LLRN", version u32, block count u32, then per tensor:
    name length u32, utf-8 name, rank u32, extents u64 each, row-major
    float32 payload. Rank 0 is legal (single scalar, no extents).
    """
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<II", CKPT_VERSION, block_count))
        for name, arr in tensors.items():
            # asarray, not ascontiguousarray: the latter promotes rank 0 to rank 1
            a = np.asarray(arr, dtype="<f4")
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", a.ndim))
            f.write(struct.pack(f"<{a.ndim}Q", *a.shape) if a.ndim else b"")
            f.write(a.tobytes())


def load_checkpoint(path):
    """Read a checkpoint back; returns (tensors dict, block_count).

    Bad magic, truncation mid-record, or absurd field values raise DataError
    with the failing offset.
    """
    try:
        with open(path, "rb") as f:
            buf = f.read()
    except OSError as e:
        raise DataError(f"cannot read checkpoint {path}: {e}") from e

    def take(n, what):
        nonlocal off
        if off + n > len(buf):
            raise DataError(f"checkpoint truncated at byte {off} while reading {what}")
        out = buf[off : off + n]
        off += n
        return out

    off = 0
    if take(4, "magic") != CKPT_MAGIC:
        raise DataError(f"bad checkpoint magic at byte 0 in {path}")
    version, block_count = struct.unpack("<II", take(8, "header"))
    if version != CKPT_VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    tensors = {}
    while off < len(buf):
        (name_len,) = struct.unpack("<I", take(4, "name length"))
        if name_len > 4096:
            raise DataError(f"implausible name length {name_len} at byte {off - 4}")
        name = take(name_len, "name").decode("utf-8")
        (rank,) = struct.unpack("<I", take(4, "rank"))
        if rank > 8:
            raise DataError(f"implausible rank {rank} for {name!r}")
        shape = struct.unpack(f"<{rank}Q", take(8 * rank, "extents")) if rank else ()
        count = int(np.prod(shape, dtype=np.int64)) if rank else 1
        data = np.frombuffer(take(4 * count, f"payload of {name!r}"), dtype="<f4")
        tensors[name] = data.reshape(shape).copy()
    return tensors, block_count
