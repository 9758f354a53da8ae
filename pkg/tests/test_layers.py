"""Blocks, initialization, Adam, and the checkpoint container."""

import numpy as np
import pytest

import locallearn.layers as ly
import locallearn.numerics as nm
from locallearn.errors import ConfigError, DataError, InputError, NonFiniteError, ShapeError
from locallearn.losses import local_block_loss
from locallearn.numerics import one_hot
from locallearn.rng import make_rng

from conftest import rand


# ---------------------------------------------------------------------------
# adam
# ---------------------------------------------------------------------------

def test_adam_first_step_magnitude():
    p = np.zeros(1)
    st = ly.AdamState.for_param(p)
    ly.adam_step(p, np.ones(1), st, lr=1e-3)
    # bias correction makes the first step almost exactly -lr
    assert p[0] == pytest.approx(-1e-3, rel=1e-6)
    assert st.t == 1


def test_adam_zero_grad_no_move():
    p = np.full(3, 0.5)
    ly.adam_step(p, np.zeros(3), ly.AdamState.for_param(p), lr=1e-3)
    assert np.array_equal(p, np.full(3, 0.5))


def test_adam_fixed_gradient_limit():
    p = np.zeros(1)
    st = ly.AdamState.for_param(p)
    prev = p.copy()
    for _ in range(500):
        prev = p.copy()
        ly.adam_step(p, np.ones(1), st, lr=1e-3)
    assert abs(prev[0] - p[0]) == pytest.approx(1e-3, rel=0.05)


def test_adam_rejects_non_finite_grad():
    p = np.zeros(2)
    with pytest.raises(NonFiniteError):
        ly.adam_step(p, np.array([1.0, np.nan]), ly.AdamState.for_param(p), lr=1e-3)


def test_adam_rejects_shape_mismatch():
    p = np.zeros(2)
    with pytest.raises(ShapeError):
        ly.adam_step(p, np.zeros(3), ly.AdamState.for_param(p), lr=1e-3)


def test_update_params_names_offending_tensor():
    spec = ly.LayerSpec("dense", (4,), units=3)
    block = ly.init_params(spec, make_rng(0))
    bad = {"weight": np.full_like(block.weight, np.inf)}
    with pytest.raises(NonFiniteError, match="weight"):
        ly.update_params(block, bad, 1e-3)


# ---------------------------------------------------------------------------
# init
# ---------------------------------------------------------------------------

def test_init_dense_bounds_and_zero_bias():
    spec = ly.LayerSpec("dense", (784,), units=1024)
    block = ly.init_params(spec, make_rng(1))
    assert block.weight.shape == (784, 1024)
    assert np.max(np.abs(block.weight)) < np.sqrt(1.0 / 784)
    assert np.all(block.bias == 0.0)
    assert np.all(block.gamma == 1.0) and np.all(block.beta == 0.0)
    assert np.all(block.run_mean == 0.0) and np.all(block.run_var == 1.0)


def test_init_is_seed_deterministic():
    spec = ly.LayerSpec("dense", (32,), units=16, cls_targets=10, sim_head=True, classes=10)
    b1 = ly.init_params(spec, make_rng(7))
    b2 = ly.init_params(spec, make_rng(7))
    for name in ("weight", "cls_w", "cls_b", "sim_w", "sim_b"):
        assert np.array_equal(getattr(b1, name), getattr(b2, name)), name


def test_init_conv_shapes_and_heads():
    spec = ly.LayerSpec("conv", (3, 8, 8), channels=5, cls_targets=4, sim_head=True,
                        feedback=True, projection=6, classes=4, pred_target_dim=16)
    block = ly.init_params(spec, make_rng(2))
    assert block.weight.shape == (5, 3, 3, 3)
    assert block.sim_w.shape == (5, 5, 3, 3)    # same-channel head, no bias
    assert block.sim_b is None
    assert block.feedback.shape == block.cls_w.shape
    assert block.proj.shape == (6, 4)
    assert block.pool_k >= 1
    # fixed tensors carry no optimizer state
    assert "feedback" not in block.adam and "proj" not in block.adam


def test_init_rejects_bad_spec():
    with pytest.raises(ConfigError):
        ly.LayerSpec("dense", (4,), units=0)
    with pytest.raises(ConfigError):
        ly.LayerSpec("what", (4,), units=3)
    with pytest.raises(ConfigError):
        ly.LayerSpec("dense", (4,), units=3, feedback=True)  # feedback needs a classifier


# ---------------------------------------------------------------------------
# block forward / backward
# ---------------------------------------------------------------------------

def _dense_block(din=4, units=4, dropout=0.0, slope=0.0, seed=3):
    spec = ly.LayerSpec("dense", (din,), units=units, dropout=dropout, slope=slope)
    return ly.init_params(spec, make_rng(seed))


def test_block_forward_eval_ignores_rng():
    block = _dense_block(dropout=0.2)
    x = rand((6, 4), seed=62, dtype=np.float32)
    y1, _ = ly.block_forward(block, x, train=False)
    y2, _ = ly.block_forward(block, x, train=False)
    assert np.array_equal(y1, y2)


def test_block_forward_train_same_seed_identical():
    block = _dense_block(dropout=0.3)
    x = rand((6, 4), seed=63, dtype=np.float32)
    run1 = ly.block_forward(block, x, train=True, rng=make_rng(9))[0]
    block.run_mean[:] = 0.0
    block.run_var[:] = 1.0
    run2 = ly.block_forward(block, x, train=True, rng=make_rng(9))[0]
    assert np.array_equal(run1, run2)


def test_block_forward_identity_weight_is_relu():
    # identity weight + already-normalized input: batchnorm is a near no-op
    block = _dense_block()
    block.weight = np.eye(4)
    x = rand((64, 4), seed=64)
    x = (x - x.mean(axis=0)) / x.std(axis=0)
    y, _ = ly.block_forward(block, x, train=True, rng=make_rng(0))
    assert np.max(np.abs(y - np.maximum(x, 0.0))) < 1e-3


def test_block_forward_shape_mismatch():
    block = _dense_block()
    with pytest.raises(ShapeError):
        ly.block_forward(block, np.ones((2, 5)), train=False)


def test_block_forward_train_needs_rng_when_dropping():
    block = _dense_block(dropout=0.5)
    with pytest.raises(ConfigError):
        ly.block_forward(block, np.ones((4, 4), dtype=np.float32), train=True)


def test_running_stats_move_only_in_train():
    block = _dense_block()
    x = rand((16, 4), seed=65, dtype=np.float32) + 3.0
    before = block.run_mean.copy()
    ly.block_forward(block, x, train=False)
    assert np.array_equal(block.run_mean, before)
    ly.block_forward(block, x, train=True, rng=make_rng(0))
    assert not np.array_equal(block.run_mean, before)


def test_batch_of_one_rejected_in_train():
    block = _dense_block()
    with pytest.raises(InputError):
        ly.block_forward(block, np.ones((1, 4), dtype=np.float32), train=True, rng=make_rng(0))


def test_block_local_backward_zero_grad_gives_zero():
    block = _dense_block()
    x = rand((5, 4), seed=66)
    h, cache = ly.block_forward(block, x, train=True, rng=make_rng(0))
    grads = ly.block_local_backward(block, cache, np.zeros_like(h))
    for name, g in grads.items():
        assert np.all(g == 0.0), name


def test_one_step_decreases_local_loss_statistically():
    """One Adam step on a repeated batch lowers that batch's loss, 19/20 seeds."""
    y = one_hot(np.arange(8) % 4, 4, np.float64)
    wins = 0
    for seed in range(20):
        spec = ly.LayerSpec("dense", (6,), units=16, cls_targets=4, sim_head=True, classes=4)
        block = ly.init_params(spec, make_rng(1000 + seed), dtype=np.float64)
        x = make_rng(2000 + seed).standard_normal((8, 6))

        def batch_loss(apply):
            h, cache = ly.block_forward(block, x, train=True)
            res = local_block_loss("predsim", 0.99, h, y, cls_w=block.cls_w,
                                   cls_b=block.cls_b, sim_w=block.sim_w, sim_b=block.sim_b)
            if apply:
                grads = ly.block_local_backward(block, cache, res.dh)
                grads.update(res.grads)
                ly.update_params(block, grads, 1e-3)
            return res.loss

        before = batch_loss(apply=True)
        after = batch_loss(apply=False)
        wins += after < before
    assert wins >= 19


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------

def test_checkpoint_round_trip_bitwise(tmp_path):
    path = tmp_path / "net.ckpt"
    tensors = {
        "block0.weight": rand((3, 4), seed=67, dtype=np.float32),
        "block0.slope": np.float32(0.01),
        "out.bias": rand((4,), seed=68, dtype=np.float32),
    }
    ly.save_checkpoint(path, tensors, block_count=2)
    loaded, count = ly.load_checkpoint(path)
    assert count == 2
    assert list(loaded) == list(tensors)
    for name in tensors:
        assert np.array_equal(np.asarray(loaded[name]), np.asarray(tensors[name])), name
    assert loaded["block0.slope"].shape == ()

    twice = tmp_path / "again.ckpt"
    ly.save_checkpoint(twice, loaded, block_count=2)
    assert path.read_bytes() == twice.read_bytes()


def test_checkpoint_magic_and_version(tmp_path):
    path = tmp_path / "net.ckpt"
    ly.save_checkpoint(path, {"a": np.zeros(2, np.float32)}, block_count=1)
    raw = path.read_bytes()
    assert raw[:4] == b"LLRN"

    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(DataError, match="magic"):
        ly.load_checkpoint(bad)


def test_checkpoint_truncation_names_offset(tmp_path):
    path = tmp_path / "net.ckpt"
    ly.save_checkpoint(path, {"a": np.zeros(64, np.float32)}, block_count=1)
    cut = tmp_path / "cut.ckpt"
    cut.write_bytes(path.read_bytes()[:40])
    with pytest.raises(DataError, match="truncated at byte"):
        ly.load_checkpoint(cut)
