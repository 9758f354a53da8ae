"""The finite-difference harness itself, plus its coverage guarantees."""

import numpy as np
import pytest

import locallearn.gradcheck as gc
from locallearn.losses import MODES


def test_fd_grad_quadratic():
    x = np.array([1.0, -2.0, 3.0])
    fd = gc.fd_grad(lambda: float((x ** 2).sum()), x)
    assert np.allclose(fd, 2 * x, atol=1e-8)


def test_fd_grad_requires_f64():
    with pytest.raises(TypeError):
        gc.fd_grad(lambda: 0.0, np.zeros(2, dtype=np.float32))


def test_max_rel_err_floor():
    a = np.array([1e-9])  # below the floor: absolute comparison kicks in
    assert gc.max_rel_err(a, np.array([0.0])) < 1e-2
    # normalized by the larger magnitude
    assert gc.max_rel_err(np.array([2.0]), np.array([1.0])) == pytest.approx(0.5)


@pytest.fixture(scope="module")
def results():
    return gc.run_all()


def test_all_checks_pass(results):
    bad = [r for r in results if not r.ok]
    assert bad == [], f"failing checks: {[r.name for r in bad]}"
    # none of the checks may be vacuous (comparing zero against zero)
    assert all(r.max_err > 0.0 for r in results)


def test_corrupt_hook_flags_named_check():
    corrupted = gc.run_all(corrupt="matmul")
    by_name = {r.name: r for r in corrupted}
    assert not by_name["matmul"].ok
    assert by_name["conv2d_3x3"].ok


def test_every_loss_mode_is_covered(results):
    names = {r.name for r in results}
    for mode in MODES:
        assert f"mode_{mode}" in names, mode


def test_every_backward_op_is_covered(results):
    names = {r.name for r in results}
    for op in ("matmul", "conv2d_3x3", "maxpool2x2", "avgpool", "batchnorm_dense",
               "batchnorm_conv", "leaky_relu", "dropout", "std_per_feature_map",
               "cross_entropy", "binary_cross_entropy", "similarity_matrix",
               "sim_loss_dense", "sim_loss_conv", "pred_loss_dense", "pred_loss_conv"):
        assert op in names, op
