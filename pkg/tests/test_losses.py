"""Local loss functions: similarity matching, local classifiers, the
backprop-free variants, and their combination."""

import math

import numpy as np
import pytest

import locallearn.losses as ls
from locallearn.errors import ConfigError, InputError, ShapeError
from locallearn.numerics import one_hot
from locallearn.rng import make_rng

from conftest import rand


# ---------------------------------------------------------------------------
# similarity matrix
# ---------------------------------------------------------------------------

def test_similarity_hand_case():
    # columns (1,0) and (0,1); centering gives +-(0.5,-0.5), cosine -1
    x = np.array([[1.0, 0.0], [0.0, 1.0]])
    s = ls.similarity_matrix(x)
    assert np.allclose(s, [[1.0, -1.0], [-1.0, 1.0]])


def test_similarity_self_is_one():
    x = rand((7, 5), seed=30)
    assert np.array_equal(np.diag(ls.similarity_matrix(x)), np.ones(5))


def test_similarity_one_hot_law():
    labels = np.array([0, 1, 2, 0])
    s = ls.similarity_matrix(one_hot(labels, 3, np.float64).T)
    assert s[0, 3] == pytest.approx(1.0)
    assert s[0, 1] == pytest.approx(-0.5)  # -1/(C-1) at C=3
    assert s[1, 2] == pytest.approx(-0.5)


def test_similarity_single_column_rejected():
    with pytest.raises(InputError):
        ls.similarity_matrix(np.ones((4, 1)))


def test_similarity_properties_random():
    for trial in range(50):
        x = rand((6, 9), seed=31 + trial, scale=3.0)
        s = ls.similarity_matrix(x)
        assert np.array_equal(s, s.T)
        assert np.array_equal(np.diag(s), np.ones(9))
        assert s.min() >= -1.0 and s.max() <= 1.0


def test_similarity_affine_invariance():
    rng = make_rng(32)
    x = rng.standard_normal((8, 6))
    a = rng.uniform(0.2, 5.0, size=6)
    b = rng.standard_normal(6)
    assert np.allclose(ls.similarity_matrix(x * a + b), ls.similarity_matrix(x), atol=1e-6)


def test_label_similarity_matches_one_hot_matrix():
    y = one_hot(np.array([2, 0, 1, 2]), 4, np.float64)
    assert np.allclose(ls.label_similarity(y), ls.similarity_matrix(y.T))


# ---------------------------------------------------------------------------
# sim loss
# ---------------------------------------------------------------------------

def test_sim_loss_zero_when_descriptor_matches_labels():
    labels = np.array([0, 2, 1, 0, 2])
    y = one_hot(labels, 3, np.float64)
    # identity head reproduces h; h rows equal to the one-hot labels make
    # the two similarity matrices coincide
    res = ls.sim_loss(y.copy(), y, np.eye(3), np.zeros(3))
    assert res.loss == pytest.approx(0.0, abs=1e-12)
    assert np.allclose(res.dh, 0.0, atol=1e-9)


def test_sim_loss_zero_when_single_class_and_identical_rows():
    y = one_hot(np.zeros(4, dtype=np.int64), 3, np.float64)
    h = np.tile(rand((1, 5), seed=33), (4, 1))
    res = ls.sim_loss(h, y, np.eye(5), np.zeros(5))
    assert res.loss == pytest.approx(0.0, abs=1e-10)


def test_sim_loss_nonnegative_and_returns_head_grads():
    h = rand((6, 4), seed=34)
    y = one_hot(np.array([0, 1, 2, 0, 1, 2]), 3, np.float64)
    res = ls.sim_loss(h, y, rand((4, 4), seed=35), np.zeros(4))
    assert res.loss >= 0.0
    assert set(res.grads) == {"sim_w", "sim_b"}
    assert res.dh.shape == h.shape


def test_sim_loss_conv_uses_std_descriptor():
    h = rand((4, 3, 6, 6), seed=36)
    y = one_hot(np.array([0, 1, 0, 1]), 2, np.float64)
    res = ls.sim_loss(h, y, rand((3, 3, 3, 3), seed=37, scale=0.3))
    assert set(res.grads) == {"sim_w"}  # conv head has no bias
    assert res.dh.shape == h.shape


# ---------------------------------------------------------------------------
# pred loss and pooling policy
# ---------------------------------------------------------------------------

def test_pred_loss_zero_weights_gives_log_c():
    h = rand((5, 7), seed=38)
    y = one_hot(np.array([0, 1, 2, 3, 4]), 10, np.float64)
    res = ls.pred_loss(h, y, np.zeros((7, 10)), np.zeros(10))
    assert res.loss == pytest.approx(math.log(10), rel=1e-12)


def test_pred_loss_conv_pools_then_flattens():
    h = rand((3, 4, 4, 4), seed=39)
    y = one_hot(np.array([0, 1, 2]), 3, np.float64)
    res = ls.pred_loss(h, y, np.zeros((16, 3)), np.zeros(3), pool_k=2)
    assert res.loss == pytest.approx(math.log(3), rel=1e-12)
    assert res.dh.shape == h.shape


def test_choose_pool_kernel_cases():
    assert ls.choose_pool_kernel(128, 16, 2048) == 4   # 128*4*4 exact
    assert ls.choose_pool_kernel(1024, 1, 1024) == 1
    assert ls.choose_pool_kernel(512, 8, 1024) == 4    # k=8 would leave 512
    assert ls.choose_pool_kernel(8, 4, 1024) == 1      # nothing reaches the target
    with pytest.raises(ConfigError):
        ls.choose_pool_kernel(0, 4, 16)


# ---------------------------------------------------------------------------
# backprop-free variants
# ---------------------------------------------------------------------------

def test_sim_bpf_dense_uses_activations_directly():
    h = rand((5, 6), seed=40)
    proj_targets = rand((6, 5), seed=41)
    res = ls.sim_bpf_loss(h, proj_targets)
    assert res.grads == {}  # nothing trainable in this loss
    assert res.dh.shape == h.shape


def test_sim_bpf_same_label_target_similarity_is_one():
    y = one_hot(np.array([2, 2, 0]), 4, np.float64)
    proj = rand((6, 4), seed=42)
    t = ls.similarity_matrix(proj @ y.T)
    assert t[0, 1] == pytest.approx(1.0)


def test_sim_bpf_zero_when_descriptors_match_targets():
    proj_targets = rand((6, 4), seed=43)
    res = ls.sim_bpf_loss(proj_targets.T.copy(), proj_targets)
    assert res.loss == pytest.approx(0.0, abs=1e-12)


def test_binarized_targets_sign_law():
    y = one_hot(np.array([1, 0]), 3, np.float64)
    proj = rand((8, 3), seed=44)
    t = ls.binarized_targets(proj, y, np.float64)
    assert t.shape == (2, 8)
    assert np.array_equal(t, (proj[:, [1, 0]] > 0).T.astype(np.float64))


def test_pred_bpf_zero_weights_gives_log_two():
    h = rand((4, 6), seed=45)
    t = make_rng(46).integers(0, 2, (4, 8)).astype(np.float64)
    res = ls.pred_bpf_loss(h, t, np.zeros((6, 8)), np.zeros(8), rand((6, 8), seed=47))
    assert res.loss == pytest.approx(math.log(2), rel=1e-12)


def test_pred_bpf_saturated_logits_zero_grads():
    h = rand((3, 5), seed=48)
    t = make_rng(49).integers(0, 2, (3, 7)).astype(np.float64)
    b = np.where(t[0] > 0, 50.0, -50.0)  # drive every sigmoid onto its target
    res = ls.pred_bpf_loss(h, np.tile(t[0], (3, 1)), np.zeros((5, 7)), b, rand((5, 7), seed=50))
    assert res.loss < 1e-12
    assert np.max(np.abs(res.dh)) < 1e-12
    assert np.max(np.abs(res.grads["cls_w"])) < 1e-12


def test_pred_bpf_feedback_swap_changes_dh_not_dw():
    h = rand((4, 6), seed=51)
    t = make_rng(52).integers(0, 2, (4, 8)).astype(np.float64)
    w, b = rand((6, 8), seed=53), rand((8,), seed=54)
    r1 = ls.pred_bpf_loss(h, t, w, b, rand((6, 8), seed=55))
    r2 = ls.pred_bpf_loss(h, t, w, b, rand((6, 8), seed=56))
    assert np.array_equal(r1.grads["cls_w"], r2.grads["cls_w"])
    assert np.array_equal(r1.grads["cls_b"], r2.grads["cls_b"])
    assert not np.array_equal(r1.dh, r2.dh)


def test_pred_bpf_feedback_shape_enforced():
    with pytest.raises(ShapeError):
        ls.pred_bpf_loss(np.ones((2, 4)), np.ones((2, 3)), np.zeros((4, 3)),
                         np.zeros(3), np.zeros((4, 5)))


# ---------------------------------------------------------------------------
# combination and config
# ---------------------------------------------------------------------------

def test_combine_arithmetic():
    a = ls.LocalLossResult(1.0, np.ones((2, 2)), {"cls_w": np.ones(3)})
    b = ls.LocalLossResult(2.0, np.full((2, 2), 3.0), {"sim_w": np.ones(3)})
    out = ls.combine(a, b, 0.99)
    assert out.loss == pytest.approx(1.99)
    assert np.allclose(out.dh, 0.01 * 1.0 + 0.99 * 3.0)
    assert np.allclose(out.grads["cls_w"], 0.01)
    assert np.allclose(out.grads["sim_w"], 0.99)


def test_combine_endpoints():
    a = ls.LocalLossResult(1.0, np.ones(2))
    b = ls.LocalLossResult(2.0, np.full(2, 3.0))
    assert ls.combine(a, b, 0.0).loss == 1.0
    assert ls.combine(a, b, 1.0).loss == 2.0


def test_combine_beta_out_of_range():
    a = ls.LocalLossResult(1.0, np.ones(2))
    with pytest.raises(ConfigError):
        ls.combine(a, a, 1.5)


def test_mode_lists():
    assert ls.MODES == ("glob", "pred", "sim", "predsim", "pred-bpf",
                        "sim-bpf", "predsim-bpf", "glob+sim")
    assert set(ls.LOCAL_MODES) == set(ls.MODES) - {"glob", "glob+sim"}


def test_loss_config_beta_defaults():
    assert ls.LossConfig("predsim").resolved_beta == 0.99
    assert ls.LossConfig("predsim-bpf").resolved_beta == 0.01
    assert ls.LossConfig("sim").resolved_beta == 1.0
    assert ls.LossConfig("predsim", beta=0.3).resolved_beta == 0.3


def test_loss_config_validation():
    with pytest.raises(ConfigError):
        ls.LossConfig("nonsense")
    with pytest.raises(ConfigError):
        ls.LossConfig("predsim", beta=1.5)
    with pytest.raises(ConfigError):
        ls.LossConfig("predsim", projection_dim=0)


def test_local_block_loss_dispatch():
    h = rand((4, 5), seed=57)
    y = one_hot(np.array([0, 1, 2, 0]), 3, np.float64)
    kw = dict(cls_w=rand((5, 3), seed=58), cls_b=np.zeros(3),
              sim_w=rand((5, 5), seed=59), sim_b=np.zeros(5),
              feedback=rand((5, 6), seed=60), proj=rand((6, 3), seed=61))
    pred = ls.local_block_loss("pred", 1.0, h, y, **kw)
    sim = ls.local_block_loss("sim", 1.0, h, y, **kw)
    both = ls.local_block_loss("predsim", 0.99, h, y, **kw)
    assert both.loss == pytest.approx(0.01 * pred.loss + 0.99 * sim.loss)
    with pytest.raises(ConfigError):
        ls.local_block_loss("glob", 1.0, h, y, **kw)
