"""The training engine: architecture parsing, the per-step update sweeps,
the epoch loop, and checkpoint/metrics plumbing.

The point of the local modes is the shape of the step: activations flow
forward once, and every hidden block computes its own loss, backpropagates
one layer deep, updates immediately, and drops its cache before the next
block runs. Nothing is retained for a global backward pass, so holding more
than one block's cache at a time would be a bug (and is instrumented).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import numerics as nm
from . import rng as rngmod
from .data import AugmentConfig, Dataset, augment_batch
from .errors import ConfigError, DataError, NonFiniteError, ShapeError
from .layers import (
    AdamState,
    LayerBlock,
    LayerSpec,
    block_backward,
    block_forward,
    block_local_backward,
    init_params,
    load_checkpoint,
    save_checkpoint,
    update_params,
)
from .losses import LOCAL_MODES, LossConfig, local_block_loss

ARCH_PRESETS = {
    "vgg8b": "conv128-conv256-pool-conv256-conv512-pool-conv512-pool-conv512-pool-fc1024-fc",
    "vgg11b": "conv128-conv128-conv128-conv256-pool-conv256-conv512-pool-conv512-conv512-pool-conv512-pool-fc1024-fc",
    "mlp3x1024": "fc1024-fc1024-fc1024-fc",
}

LR_DROP_FRACTIONS = (0.50, 0.75, 0.89, 0.94)


# ---------------------------------------------------------------------------
# architecture grammar
# ---------------------------------------------------------------------------


@dataclass
class NetworkSpec:
    """Parsed architecture: hidden elements plus the output layer's fan-in."""

    arch: str  # resolved token string
    input_shape: tuple  # (c, h, w)
    classes: int
    width_mult: int
    elements: list  # ("conv", in_c, out_c, h, w) | ("pool",) | ("fc", in_dim, units)
    out_in_dim: int

    @property
    def n_weight_layers(self) -> int:
        return sum(1 for e in self.elements if e[0] != "pool") + 1

    @property
    def n_hidden_blocks(self) -> int:
        return self.n_weight_layers - 1


def _int_suffix(token: str, prefix: str) -> int:
    try:
        value = int(token[len(prefix) :])
    except ValueError:
        raise ConfigError(f"malformed architecture token {token!r}") from None
    if value < 1:
        raise ConfigError(f"token {token!r} must carry a positive width")
    return value


def parse_arch(arch: str, input_shape, classes: int, width_mult: int = 1) -> NetworkSpec:
    """Turn an architecture string (or preset name) into a NetworkSpec.

    Tokens: convN (3x3, stride 1, pad 1), pool (2x2 max), fcN (hidden dense),
    and a final fc or fcN output layer. Shapes are tracked through the string
    so impossible networks fail here, not mid-epoch: pooling an odd extent,
    conv after flatten, pool first, or a non-fc final token all raise.
    """
    if width_mult < 1:
        raise ConfigError(f"width multiplier must be >= 1, got {width_mult}")
    if classes < 2:
        raise ConfigError(f"need at least 2 classes, got {classes}")
    if len(input_shape) != 3:
        raise ConfigError(f"input shape must be (c, h, w), got {input_shape}")
    resolved = ARCH_PRESETS.get(arch, arch)
    tokens = resolved.split("-")
    shape: tuple = tuple(input_shape)
    elements: list = []
    flattened = False
    out_in_dim = 0
    for i, tok in enumerate(tokens):
        last = i == len(tokens) - 1
        if tok == "pool":
            if i == 0:
                raise ConfigError("pool cannot be the first layer")
            if last:
                raise ConfigError("the final token must be a fc output layer")
            if flattened:
                raise ConfigError("pool after a dense layer")
            c, h, w = shape
            if h % 2 or w % 2:
                raise ShapeError(f"pool needs even extents, got {h}x{w} (arch {resolved!r})")
            elements.append(("pool",))
            shape = (c, h // 2, w // 2)
        elif tok.startswith("conv"):
            if last:
                raise ConfigError("the final token must be a fc output layer")
            if flattened:
                raise ConfigError("conv after a dense layer")
            ch = _int_suffix(tok, "conv") * width_mult
            c, h, w = shape
            elements.append(("conv", c, ch, h, w))
            shape = (ch, h, w)  # 3x3 stride 1 pad 1 keeps the extent
        elif tok == "fc" or tok.startswith("fc"):
            units = classes if tok == "fc" else _int_suffix(tok, "fc")
            in_dim = int(np.prod(shape))
            if last:
                if units != classes:
                    raise ConfigError(f"output width {units} does not match {classes} classes")
                out_in_dim = in_dim
            else:
                if tok == "fc":
                    raise ConfigError("bare fc denotes the output layer and must be last")
                elements.append(("fc", in_dim, units))
                shape = (units,)
                flattened = True
        else:
            raise ConfigError(f"unknown architecture token {tok!r}")
    if not out_in_dim:
        raise ConfigError(f"architecture {resolved!r} has no output layer")
    return NetworkSpec(resolved, tuple(input_shape), classes, width_mult, elements, out_in_dim)


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    """Everything about a run except the loss mode (see LossConfig)."""

    arch: str = "mlp3x1024"
    epochs: int = 1
    lr: float = 5e-4
    batch_size: int = 128
    dropout: float = 0.0
    slope: Optional[float] = None  # None = 0.01 for sim-bearing modes, else 0
    seed: int = 0
    classes_per_batch: int = 0  # 0 = unrestricted; active until the first lr drop
    width_mult: int = 1
    pred_target_dim: int = 1024  # pooled input size for conv classifier heads
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    clean_train_error: bool = False  # extra eval-mode pass over the train split

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.batch_size < 2:
            raise ConfigError(f"batch size must be >= 2 (batchnorm), got {self.batch_size}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.classes_per_batch < 0:
            raise ConfigError("classes_per_batch must be >= 0")
        if self.pred_target_dim < 1:
            raise ConfigError("pred_target_dim must be >= 1")


def resolved_slope(slope: Optional[float], mode: str) -> float:
    if slope is not None:
        return slope
    return 0.01 if "sim" in mode else 0.0


def lr_breakpoints(total_epochs: int):
    """0-based epochs at which the learning rate is quartered."""
    return [math.ceil(f * total_epochs) for f in LR_DROP_FRACTIONS]


def lr_at(epoch: int, total_epochs: int, base_lr: float) -> float:
    """Piecewise-constant schedule: base times 0.25 per passed breakpoint.

    Powers of 0.25 scale the float exponent only, so the result is exact.
    """
    if not 0 <= epoch < total_epochs:
        raise ConfigError(f"epoch {epoch} outside 0..{total_epochs - 1}")
    drops = sum(epoch >= bp for bp in lr_breakpoints(total_epochs))
    return base_lr * 0.25**drops


# ---------------------------------------------------------------------------
# network assembly
# ---------------------------------------------------------------------------


@dataclass
class OutputLayer:
    weight: np.ndarray
    bias: np.ndarray
    adam: dict


@dataclass
class Network:
    spec: NetworkSpec
    mode: str
    beta: float
    elements: list  # LayerBlock | "pool", forward order
    out: OutputLayer

    @property
    def blocks(self):
        return [e for e in self.elements if isinstance(e, LayerBlock)]


def build_network(
    spec: NetworkSpec,
    loss: LossConfig,
    dropout: float = 0.0,
    slope: Optional[float] = None,
    pred_target_dim: int = 1024,
    seed: int = 0,
    dtype=np.float32,
) -> Network:
    """Materialise blocks (with the heads the mode needs) and the output
    layer. Each weight layer draws from its own seeded stream, so nets with
    equal seeds match bit for bit regardless of mode-dependent head counts."""
    mode = loss.mode
    slope_val = resolved_slope(slope, mode)
    use_cls = mode in ("pred", "predsim")
    use_bpf_cls = mode in ("pred-bpf", "predsim-bpf")
    use_sim = mode in ("sim", "predsim", "glob+sim")
    use_proj = mode in ("pred-bpf", "sim-bpf", "predsim-bpf")

    elements: list = []
    index = 0
    for e in spec.elements:
        if e[0] == "pool":
            elements.append("pool")
            continue
        if e[0] == "conv":
            _, c_in, c_out, h, w = e
            lspec = LayerSpec(kind="conv", in_shape=(c_in, h, w), channels=c_out)
        else:
            _, in_dim, units = e
            lspec = LayerSpec(kind="dense", in_shape=(in_dim,), units=units)
        lspec.slope = slope_val
        lspec.dropout = dropout
        lspec.pred_target_dim = pred_target_dim
        lspec.classes = spec.classes
        if use_cls:
            lspec.cls_targets = spec.classes
        elif use_bpf_cls:
            lspec.cls_targets = loss.projection_dim
            lspec.feedback = True
        lspec.sim_head = use_sim
        lspec.projection = loss.projection_dim if use_proj else 0
        elements.append(init_params(lspec, rngmod.make_rng(seed, rngmod.INIT, index), dtype))
        index += 1

    orng = rngmod.make_rng(seed, rngmod.INIT, index)
    bound = float(np.sqrt(1.0 / spec.out_in_dim))
    weight = orng.uniform(-bound, bound, size=(spec.out_in_dim, spec.classes)).astype(dtype)
    bias = np.zeros(spec.classes, dtype=dtype)
    out = OutputLayer(weight, bias, {"weight": AdamState.for_param(weight), "bias": AdamState.for_param(bias)})
    return Network(spec, mode, loss.resolved_beta, elements, out)


# ---------------------------------------------------------------------------
# single training step
# ---------------------------------------------------------------------------


@dataclass
class StepResult:
    """Per-layer losses (hidden blocks then the output cross-entropy), the
    raw gradients, the batch predictions, and how many block caches were
    alive at once (the locality instrumentation)."""

    losses: list
    grads: list
    predictions: np.ndarray
    peak_caches: int


def _output_forward(net: Network, a: np.ndarray):
    flat = a.reshape(a.shape[0], -1)
    return flat, nm.matmul(flat, net.out.weight) + net.out.bias


def _check_finite(loss: float, what: str) -> None:
    if not np.isfinite(loss):
        raise NonFiniteError(f"non-finite loss at {what}")


def _head_kwargs(block: LayerBlock) -> dict:
    return dict(
        cls_w=block.cls_w,
        cls_b=block.cls_b,
        sim_w=block.sim_w,
        sim_b=block.sim_b,
        feedback=block.feedback,
        proj=block.proj,
        pool_k=block.pool_k,
    )


def _step_local(net: Network, x, targets, lr: float, rng, apply: bool) -> StepResult:
    a = x
    losses: list = []
    grads_list: list = []
    live = peak = 0
    layer = 0
    for e in net.elements:
        if e == "pool":
            a, _ = nm.maxpool2x2(a)  # the stream is already detached, no indices kept
            continue
        h, cache = block_forward(e, a, train=True, rng=rng)
        live += 1
        peak = max(peak, live)
        res = local_block_loss(net.mode, net.beta, h, targets, **_head_kwargs(e))
        _check_finite(res.loss, f"layer {layer} ({net.mode})")
        grads = block_local_backward(e, cache, res.dh)
        grads.update(res.grads)
        cache = None  # the cache dies here, before the next block runs
        live -= 1
        if apply:
            update_params(e, grads, lr)
        losses.append(res.loss)
        grads_list.append(grads)
        a = h
        layer += 1

    flat, logits = _output_forward(net, a)
    loss, dlogits = nm.cross_entropy_logits(logits, targets)
    _check_finite(loss, "output layer")
    _, dw = nm.matmul_backward(flat, net.out.weight, dlogits)
    ograds = {"weight": dw, "bias": dlogits.sum(axis=0)}
    if apply:
        update_params(net.out, ograds, lr)
    losses.append(loss)
    grads_list.append(ograds)
    return StepResult(losses, grads_list, logits.argmax(axis=1), peak)


def _step_global(net: Network, x, targets, lr: float, rng, apply: bool) -> StepResult:
    with_sim = net.mode == "glob+sim"
    a = x
    trace: list = []  # (element, cache-or-indices, sim result or None)
    live = peak = 0
    layer = 0
    for e in net.elements:
        if e == "pool":
            a, idx = nm.maxpool2x2(a)
            trace.append(("pool", idx, None))
            continue
        h, cache = block_forward(e, a, train=True, rng=rng)
        live += 1
        peak = max(peak, live)
        sim_res = None
        if with_sim:
            sim_res = local_block_loss("glob+sim", 1.0, h, targets, **_head_kwargs(e))
            _check_finite(sim_res.loss, f"layer {layer} (sim)")
        trace.append((e, cache, sim_res))
        a = h
        layer += 1

    flat, logits = _output_forward(net, a)
    out_loss, dlogits = nm.cross_entropy_logits(logits, targets)
    _check_finite(out_loss, "output layer")
    dflat, dw = nm.matmul_backward(flat, net.out.weight, dlogits)
    ograds = {"weight": dw, "bias": dlogits.sum(axis=0)}
    d = dflat.reshape(a.shape)

    block_grads: list = []
    sim_losses: list = []
    for e, cache, sim_res in reversed(trace):
        if e == "pool":
            d = nm.maxpool2x2_backward(d, cache)
            continue
        if sim_res is not None:
            d = d + sim_res.dh  # sim terms join the global gradient, unit weight
            sim_losses.append(sim_res.loss)
        grads, d = block_backward(e, cache, d)
        if sim_res is not None:
            grads.update(sim_res.grads)
        live -= 1
        block_grads.append((e, grads))
    block_grads.reverse()
    sim_losses.reverse()

    if apply:
        for e, grads in block_grads:
            update_params(e, grads, lr)
        update_params(net.out, ograds, lr)

    hidden_losses = sim_losses if with_sim else [0.0] * len(block_grads)
    losses = hidden_losses + [out_loss]
    grads_list = [g for _, g in block_grads] + [ograds]
    return StepResult(losses, grads_list, logits.argmax(axis=1), peak)


def train_step(net: Network, x: np.ndarray, targets_onehot: np.ndarray, lr: float, rng, apply: bool = True) -> StepResult:
    """One optimisation step in the network's mode.

    Local modes update each block during the forward sweep; global modes
    accumulate a full backward pass first and update at the end. With
    apply=False the gradients are computed and returned but nothing moves,
    which the gradient checks build on.
    """
    if net.mode in LOCAL_MODES:
        return _step_local(net, x, targets_onehot, lr, rng, apply)
    return _step_global(net, x, targets_onehot, lr, rng, apply)


# ---------------------------------------------------------------------------
# sampling / evaluation / epoch loop
# ---------------------------------------------------------------------------


def sample_batches(labels: np.ndarray, batch_size: int, rng, classes_per_batch: int = 0):
    """Partition the epoch into batches of index arrays.

    With classes_per_batch > 0, each batch is drawn from at most that many
    randomly chosen classes (per-class pools are pre-shuffled and drained, so
    every example still appears exactly once per epoch).
    """
    labels = np.asarray(labels)
    n = labels.shape[0]
    if batch_size < 1:
        raise ConfigError(f"batch size must be >= 1, got {batch_size}")
    if batch_size > n:
        raise ConfigError(f"batch size {batch_size} exceeds dataset size {n}")
    if not classes_per_batch:
        perm = rng.permutation(n)
        return [perm[i : i + batch_size] for i in range(0, n, batch_size)]

    classes = np.unique(labels)
    queues = {int(c): list(rng.permutation(np.flatnonzero(labels == c))) for c in classes}
    batches = []
    while True:
        nonempty = np.array([c for c in queues if queues[c]])
        if nonempty.size == 0:
            break
        chosen = rng.choice(nonempty, size=min(classes_per_batch, nonempty.size), replace=False)
        tags = np.concatenate([np.full(len(queues[int(c)]), c) for c in chosen])
        rng.shuffle(tags)
        tags = tags[:batch_size]
        batch = []
        for c in chosen:
            m = int((tags == c).sum())
            if m:
                batch.extend(queues[int(c)][:m])
                del queues[int(c)][:m]
        batch = np.array(batch, dtype=np.int64)
        rng.shuffle(batch)
        batches.append(batch)
    return batches


def forward_eval(net: Network, x: np.ndarray) -> np.ndarray:
    """Inference logits: eval-mode blocks, no dropout, running batchnorm stats."""
    a = x
    for e in net.elements:
        if e == "pool":
            a, _ = nm.maxpool2x2(a)
        else:
            a, _ = block_forward(e, a, train=False)
    _, logits = _output_forward(net, a)
    return logits


def evaluate(net: Network, ds: Dataset, batch_size: int = 512) -> float:
    """Classification error fraction on a dataset."""
    wrong = 0
    for i in range(0, len(ds), batch_size):
        logits = forward_eval(net, ds.images[i : i + batch_size])
        wrong += int((logits.argmax(axis=1) != ds.labels[i : i + batch_size]).sum())
    return wrong / len(ds)


@dataclass
class EpochStats:
    epoch: int
    lr: float
    train_error: float
    test_error: float
    layer_losses: list
    peak_caches: int


def train(cfg: TrainConfig, loss: LossConfig, train_ds: Dataset, test_ds: Optional[Dataset] = None):
    """Run the full protocol; returns (net, history).

    Derived rng streams are keyed by (seed, purpose, epoch), so two calls
    with identical configs and data produce bit-identical parameters and
    metrics. Train error is counted on the step predictions (augmented
    batches, parameters moving), unless clean_train_error asks for an extra
    eval pass. The class-per-batch restriction, when set, lifts at the first
    learning-rate drop.
    """
    spec = parse_arch(cfg.arch, train_ds.images.shape[1:], train_ds.num_classes, cfg.width_mult)
    net = build_network(
        spec,
        loss,
        dropout=cfg.dropout,
        slope=cfg.slope,
        pred_target_dim=cfg.pred_target_dim,
        seed=cfg.seed,
    )
    history = train_network(net, cfg, train_ds, test_ds)
    return net, history


def train_network(net: Network, cfg: TrainConfig, train_ds: Dataset, test_ds: Optional[Dataset] = None):
    first_drop = lr_breakpoints(cfg.epochs)[0]
    history = []
    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg.epochs, cfg.lr)
        limit = cfg.classes_per_batch if epoch < first_drop else 0
        sampler_rng = rngmod.make_rng(cfg.seed, rngmod.SAMPLER, epoch)
        augment_rng = rngmod.make_rng(cfg.seed, rngmod.AUGMENT, epoch)
        dropout_rng = rngmod.make_rng(cfg.seed, rngmod.DROPOUT, epoch)

        correct = 0
        seen = 0
        loss_sums = np.zeros(net.spec.n_weight_layers)
        steps = 0
        peak = 0
        for idx in sample_batches(train_ds.labels, cfg.batch_size, sampler_rng, limit):
            xb = augment_batch(train_ds.images[idx], cfg.augment, augment_rng)
            yb = nm.one_hot(train_ds.labels[idx], train_ds.num_classes, xb.dtype)
            result = train_step(net, xb, yb, lr, dropout_rng, apply=True)
            correct += int((result.predictions == train_ds.labels[idx]).sum())
            seen += len(idx)
            loss_sums += result.losses
            steps += 1
            peak = max(peak, result.peak_caches)

        train_error = 1.0 - correct / seen
        if cfg.clean_train_error:
            train_error = evaluate(net, train_ds)
        test_error = evaluate(net, test_ds) if test_ds is not None else float("nan")
        history.append(EpochStats(epoch, lr, train_error, test_error, list(loss_sums / steps), peak))
    return history


def metrics_csv(history) -> str:
    """Render epoch stats in the fixed CSV schema (stable bytes for stable
    runs; errors as 6-decimal fractions)."""
    k = len(history[0].layer_losses)
    lines = ["epoch,lr,train_error,test_error," + ",".join(f"loss_layer_{i}" for i in range(k))]
    for h in history:
        lines.append(
            f"{h.epoch},{h.lr:.8g},{h.train_error:.6f},{h.test_error:.6f},"
            + ",".join(f"{v:.6f}" for v in h.layer_losses)
        )
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# checkpoint plumbing
# ---------------------------------------------------------------------------

_BLOCK_TENSORS = ("weight", "bias", "gamma", "beta", "run_mean", "run_var")
_HEAD_TENSORS = ("cls_w", "cls_b", "sim_w", "sim_b", "feedback", "proj")


def state_tensors(net: Network) -> dict:
    """Flat name -> array view of everything a run produced, including the
    fixed random matrices and a rank-0 slope per block (so a checkpoint alone
    can rebuild an inference net)."""
    out = {}
    for i, b in enumerate(net.blocks):
        prefix = f"block{i}."
        for name in _BLOCK_TENSORS:
            out[prefix + name] = getattr(b, name)
        out[prefix + "slope"] = np.float32(b.spec.slope)
        for name in _HEAD_TENSORS:
            value = getattr(b, name)
            if value is not None:
                out[prefix + name] = value
    out["out.weight"] = net.out.weight
    out["out.bias"] = net.out.bias
    return out


def save_network(net: Network, path) -> None:
    save_checkpoint(path, state_tensors(net), block_count=len(net.blocks) + 1)


def load_network_state(net: Network, path) -> None:
    """Load a checkpoint into a compatible net.

    Every tensor the net owns must be present with the right shape; tensors
    in the file the net does not own (another mode's heads) are ignored, so
    an inference net can consume any mode's checkpoint. Slope scalars are
    applied to the blocks.
    """
    tensors, block_count = load_checkpoint(path)
    if block_count != len(net.blocks) + 1:
        raise DataError(f"checkpoint has {block_count} weight layers, net has {len(net.blocks) + 1}")
    wanted = state_tensors(net)
    for name, param in wanted.items():
        if name.endswith(".slope"):
            continue
        if name not in tensors:
            raise DataError(f"checkpoint is missing tensor {name!r}")
        src = tensors[name]
        if src.shape != param.shape:
            raise DataError(f"tensor {name!r} has shape {src.shape}, net expects {param.shape}")
        param[...] = src.astype(param.dtype)
    for i, b in enumerate(net.blocks):
        key = f"block{i}.slope"
        if key in tensors:
            b.spec.slope = float(tensors[key])
