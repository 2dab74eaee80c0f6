import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coopnet.errors import NonPositiveDepth
from coopnet.geometry import (
    CameraIntrinsics,
    PoseSE3,
    backproject,
    pixel_grid,
    project,
    rigid_flow,
    rigid_flow_jacobians,
    rodrigues,
)

UNIT_K = CameraIntrinsics(1.0, 1.0, 0.0, 0.0)
K_100 = CameraIntrinsics(100.0, 50.0, 10.0, 20.0)

small = st.floats(-0.5, 0.5, allow_nan=False)
vec3 = st.tuples(small, small, small)


def test_project_on_optical_axis():
    pix, z = project([0.0, 0.0, 1.0], UNIT_K)
    assert np.array_equal(pix, [0.0, 0.0]) and z == 1.0


def test_project_similar_triangles():
    pix, z = project([2.0, 0.0, 2.0], UNIT_K)
    assert np.allclose(pix, [1.0, 0.0]) and z == 2.0


def test_project_hand_evaluated():
    # 100 * 1/4 + 10 = 35, 50 * 2/4 + 20 = 45
    pix, z = project([1.0, 2.0, 4.0], K_100)
    assert np.allclose(pix, [35.0, 45.0], atol=1e-12) and z == 4.0


def test_backproject_examples():
    assert np.allclose(backproject([0.0, 0.0], 1.0, UNIT_K), [0.0, 0.0, 1.0])
    assert np.allclose(backproject([35.0, 45.0], 4.0, K_100), [1.0, 2.0, 4.0], atol=1e-12)


@pytest.mark.parametrize("z", [0.0, -1.0])
def test_project_rejects_non_positive_depth(z):
    with pytest.raises(NonPositiveDepth):
        project([1.0, 1.0, z], UNIT_K)
    with pytest.raises(NonPositiveDepth):
        backproject([1.0, 1.0], z, UNIT_K)


def test_round_trip_on_random_pixels():
    rng = np.random.default_rng(0)
    pix = rng.uniform(-50, 150, (100, 2))
    depth = rng.uniform(0.1, 100, 100)
    back, z = project(backproject(pix, depth, K_100), K_100)
    assert np.max(np.abs(back - pix)) <= 1e-10
    assert np.max(np.abs(z - depth)) <= 1e-10


def test_pixel_grid_orientation():
    g = pixel_grid(2, 3)
    assert g.shape == (2, 3, 2)
    assert np.array_equal(g[1, 2], [2.0, 1.0])


def test_identity_pose_gives_exactly_zero_flow():
    depth = np.random.default_rng(1).uniform(1, 5, (6, 7))
    flow, valid = rigid_flow(depth, PoseSE3.identity(), K_100)
    assert np.array_equal(flow, np.zeros_like(flow))
    assert valid.all()


def test_forward_translation_expands_radially():
    K = CameraIntrinsics(10.0, 10.0, 3.0, 3.0)
    flow, _ = rigid_flow(np.full((7, 7), 5.0), PoseSE3(np.zeros(3), [0.0, 0.0, -1.0]), K)
    assert np.allclose(flow[3, 3], 0.0)
    grid = pixel_grid(7, 7) - [3.0, 3.0]
    # flow points away from the principal point wherever it is nonzero
    assert np.all(np.sum(flow * grid, -1)[grid.any(-1)] > 0)


def test_rigid_flow_matches_per_pixel_chain():
    rng = np.random.default_rng(2)
    depth = rng.uniform(2, 8, (5, 6))
    pose = PoseSE3(rng.normal(0, 0.1, 3), rng.normal(0, 0.3, 3))
    flow, valid = rigid_flow(depth, pose, K_100)
    for y in range(5):
        for x in range(6):
            p = backproject(np.array([x, y], float), depth[y, x], K_100)
            q, _ = project(pose.apply(p), K_100)
            assert np.allclose(flow[y, x], q - [x, y], atol=1e-10)
    assert valid.all()


def test_points_behind_camera_are_flagged():
    flow, valid = rigid_flow(np.full((3, 3), 1.0), PoseSE3(np.zeros(3), [0.0, 0.0, -5.0]), UNIT_K)
    assert not valid.any()
    assert np.array_equal(flow, np.zeros_like(flow))


def test_jacobians_match_finite_differences():
    rng = np.random.default_rng(3)
    depth = rng.uniform(2, 8, (4, 5))
    xi = np.concatenate([rng.normal(0, 0.1, 3), rng.normal(0, 0.3, 3)])
    d_depth, d_pose, _ = rigid_flow_jacobians(depth, PoseSE3.from_vector(xi), K_100)
    h = 1e-6
    for k in range(6):
        e = np.zeros(6)
        e[k] = h
        fp, _ = rigid_flow(depth, PoseSE3.from_vector(xi + e), K_100)
        fm, _ = rigid_flow(depth, PoseSE3.from_vector(xi - e), K_100)
        assert np.allclose(d_pose[..., k], (fp - fm) / (2 * h), rtol=1e-5, atol=1e-5)
    fp, _ = rigid_flow(depth + h, PoseSE3.from_vector(xi), K_100)
    fm, _ = rigid_flow(depth - h, PoseSE3.from_vector(xi), K_100)
    assert np.allclose(d_depth, (fp - fm) / (2 * h), rtol=1e-5, atol=1e-7)


@settings(max_examples=40, deadline=None)
@given(vec3, vec3)
def test_compose_with_inverse_is_identity(rot, trans):
    pose = PoseSE3(np.array(rot) * 4, np.array(trans) * 10)
    ident = pose.compose(pose.inverse())
    assert np.allclose(ident.R, np.eye(3), atol=1e-10)
    assert np.allclose(ident.translation, 0.0, atol=1e-10)


@settings(max_examples=40, deadline=None)
@given(vec3, vec3, vec3, vec3, vec3, vec3)
def test_compose_is_associative(r1, t1, r2, t2, r3, t3):
    a, b, c = PoseSE3(r1, t1), PoseSE3(r2, t2), PoseSE3(r3, t3)
    left = a.compose(b).compose(c).as_matrix()
    right = a.compose(b.compose(c)).as_matrix()
    assert np.allclose(left, right, atol=1e-10)


@settings(max_examples=30, deadline=None)
@given(vec3)
def test_rodrigues_is_a_rotation(rot):
    R = rodrigues(np.array(rot) * 5)
    assert np.allclose(R @ R.T, np.eye(3), atol=1e-12)
    assert np.isclose(np.linalg.det(R), 1.0)


@settings(max_examples=30, deadline=None)
@given(vec3, vec3, st.floats(0.1, 10.0))
def test_flow_invariant_to_joint_depth_translation_scaling(rot, trans, scale):
    depth = np.linspace(2.0, 6.0, 20).reshape(4, 5)
    pose = PoseSE3(np.array(rot) * 0.2, trans)
    scaled = PoseSE3(pose.rotation, pose.translation * scale)
    f1, v1 = rigid_flow(depth, pose, K_100)
    f2, v2 = rigid_flow(depth * scale, scaled, K_100)
    assert np.array_equal(v1, v2)
    assert np.allclose(f1[v1], f2[v1], atol=1e-8)


def test_downscaled_intrinsics_follow_pixel_centres():
    K = CameraIntrinsics(40.0, 40.0, 23.5, 15.5)
    K1 = K.downscaled(1)
    # fine pixel 23.5 is the centre between coarse pixels 11 and 12
    assert K1.fx == 20.0 and np.isclose(K1.cx, 11.5) and np.isclose(K1.cy, 7.5)
    assert K.downscaled(0) == K


def test_intrinsics_validate_focal_length():
    with pytest.raises(ValueError):
        CameraIntrinsics(0.0, 1.0, 0.0, 0.0)
