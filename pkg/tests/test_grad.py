import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coopnet.errors import NonFiniteLoss
from coopnet.geometry import CameraIntrinsics, PoseSE3, pixel_grid
from coopnet.grad import (
    FDConfig,
    chain_rigid_flow_grads,
    grad_check,
    gradient_cases,
    random_inputs,
    relative_error,
    run_gradient_suite,
)

K = CameraIntrinsics(30.0, 25.0, 4.5, 3.5)


def test_fd_config_validation():
    with pytest.raises(ValueError):
        FDConfig(step=0.0)
    with pytest.raises(ValueError):
        FDConfig(samples=0)


def test_relative_error_floor():
    assert relative_error(0.0, 0.0) == 0.0
    assert relative_error(1e-9, 0.0) == pytest.approx(0.1)


def test_quadratic_is_exact():
    x = np.random.default_rng(0).normal(size=20)
    rep = grad_check(lambda p: (float(p @ p), 2 * p), x, FDConfig(samples=20), rng=1)
    assert rep.passed and rep.max_rel_error < 1e-8


def test_wrong_gradient_fails():
    x = np.random.default_rng(0).normal(size=20)
    rep = grad_check(lambda p: (float(p @ p), 4 * p), x, FDConfig(samples=20), rng=1)
    assert not rep.passed and rep.failures


def test_kink_probes_are_rejected_not_failed():
    # 3e-5 lies within one step of the kink of |x| at the origin; that probe must be rejected
    x = np.array([3e-5, 1.0, -2.0])
    rep = grad_check(lambda p: (float(np.abs(p).sum()), np.sign(p)), x, FDConfig(samples=30), rng=2)
    assert rep.passed and rep.rejected > 0


def test_non_finite_loss():
    with pytest.raises(NonFiniteLoss):
        grad_check(lambda p: (float("nan"), p), np.ones(3))


def test_zero_upstream_gives_zero_gradients():
    depth = np.random.default_rng(3).uniform(2, 5, (6, 7))
    pose = PoseSE3([0.01, 0.02, -0.01], [0.1, 0.2, 0.3])
    g_depth, g_pose = chain_rigid_flow_grads(depth, pose, K, np.zeros((6, 7, 2)))
    assert g_depth.name == "depth" and g_pose.name == "pose"
    assert not g_depth.grad.any() and not g_pose.grad.any()
    assert g_pose.grad.shape == (6,)


def test_planar_forward_translation_closed_form():
    # flow_u = -fx xn tz / (d + tz), so d flow_u / d d = fx xn tz / (d + tz)^2
    d, tz = 4.0, 0.5
    depth = np.full((6, 7), d)
    grid = pixel_grid(6, 7)
    xn = (grid[..., 0] - K.cx) / K.fx
    yn = (grid[..., 1] - K.cy) / K.fy
    upstream = np.random.default_rng(4).normal(size=(6, 7, 2))
    g_depth, _ = chain_rigid_flow_grads(depth, PoseSE3(np.zeros(3), [0.0, 0.0, tz]), K, upstream)
    scale = tz / (d + tz) ** 2
    expected = upstream[..., 0] * K.fx * xn * scale + upstream[..., 1] * K.fy * yn * scale
    assert np.max(np.abs(g_depth.grad - expected)) <= 1e-10


@settings(max_examples=20, deadline=None)
@given(st.floats(-5, 5), st.floats(-5, 5))
def test_chain_is_linear_in_upstream(a, b):
    rng = np.random.default_rng(5)
    depth = rng.uniform(2, 5, (5, 6))
    pose = PoseSE3(rng.normal(0, 0.05, 3), rng.normal(0, 0.3, 3))
    u1, u2 = rng.normal(size=(2, 5, 6, 2))
    gd1, gp1 = chain_rigid_flow_grads(depth, pose, K, u1)
    gd2, gp2 = chain_rigid_flow_grads(depth, pose, K, u2)
    gd, gp = chain_rigid_flow_grads(depth, pose, K, a * u1 + b * u2)
    assert np.allclose(gd.grad, a * gd1.grad + b * gd2.grad, atol=1e-9)
    assert np.allclose(gp.grad, a * gp1.grad + b * gp2.grad, atol=1e-9)


def test_case_list_covers_every_loss():
    names = {c[0] for c in gradient_cases(random_inputs(np.random.default_rng(6)))}
    for loss in (
        "loss_flow",
        "loss_depth_pose",
        "loss_glnet",
        "loss_geometry_consistency",
        "loss_fwd_bwd",
        "loss_smoothness",
        "loss_epipolar",
        "loss_depth_variance",
        "loss_final[coopnet]",
        "loss_final[glnet]",
        "loss_final[baseline]",
        "chain_rigid_flow_grads",
    ):
        assert any(n.startswith(loss) for n in names), loss


@pytest.mark.parametrize("name", ["loss_flow/flow", "loss_depth_pose/pose", "loss_epipolar/pose", "loss_geometry_consistency/depth"])
def test_single_case_passes_and_control_fails(name):
    cfg = FDConfig(samples=16)
    good = run_gradient_suite(cfg, n_inputs=1, seed=7, only=name)
    bad = run_gradient_suite(cfg, n_inputs=1, seed=7, only=name, negative_control=True)
    assert good and all(r.passed for r in good)
    assert bad and not any(r.passed for r in bad)
