"""Scalar losses with analytic gradients.

Every loss returns a :class:`LossTerm` whose ``grads`` dict maps parameter
names (``"depth"``, ``"pose"``, ``"flow"``, ...) to arrays shaped like the
parameter. Masks and quantile bounds are constants: no gradient flows
through them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DimensionMismatch, EmptyMask, EmptyValidSet
from .geometry import (
    CameraIntrinsics,
    PoseSE3,
    MIN_DEPTH,
    pixel_grid,
    rigid_flow,
    rigid_flow_jacobians,
    rotate_jacobian,
    skew,
)
from .warp import (
    DEFAULT_ALPHA,
    BilinearSampler,
    as_image,
    flow_sampler,
    PhotometricTerm,
)

VAR_EPS = 1e-12


@dataclass
class LossTerm:
    value: float
    grads: dict = field(default_factory=dict)
    count: int = 0


@dataclass
class LossWeights:
    """Multipliers of the auxiliary terms in the final objective."""

    lambda_gc: float = 1e-3
    lambda_fwd_bwd: float = 1e-3
    lambda_s: float = 1e-2
    lambda_ep: float = 1e-3
    lambda_var: float = 1e-6

    def __post_init__(self):
        for name, value in self.as_dict().items():
            if not value >= 0:
                raise ValueError(f"{name} must be >= 0, got {value}")

    def as_dict(self) -> dict:
        return {
            "gc": self.lambda_gc,
            "fwd_bwd": self.lambda_fwd_bwd,
            "s": self.lambda_s,
            "ep": self.lambda_ep,
            "var": self.lambda_var,
        }


class FlowWarp:
    """Flow-based view synthesis that can push gradients back onto the flow."""

    def __init__(self, source, flow):
        self.source = as_image(source)
        self.flow = np.asarray(flow, dtype=float)
        if self.flow.shape != self.source.shape[:2] + (2,):
            raise DimensionMismatch(f"flow {self.flow.shape} vs image {self.source.shape}")
        self.sampler = flow_sampler(self.flow)
        self.image = self.sampler.sample(self.source)
        self.valid = self.sampler.valid
        self._photo = None

    def photometric(self, target, alpha: float = DEFAULT_ALPHA) -> PhotometricTerm:
        """Photometric term against ``target``, cached for repeated use."""
        cached = self._photo
        if cached is None or cached[0] is not target or cached[1] != alpha:
            self._photo = (target, alpha, PhotometricTerm(target, self.image, alpha))
        return self._photo[2]

    def flow_grad(self, grad_image) -> np.ndarray:
        dx, dy = self.sampler.coordinate_grads(self.source)
        return np.stack([(grad_image * dx).sum(-1), (grad_image * dy).sum(-1)], -1)


class RigidWarp:
    """Depth + pose reprojection, chaining image gradients to depth and pose."""

    def __init__(self, source, depth, pose: PoseSE3, K: CameraIntrinsics):
        self.depth = np.asarray(depth, dtype=float)
        self.pose = pose
        self.K = K
        self.flow, geo_valid = rigid_flow(self.depth, pose, K)
        self.inner = FlowWarp(source, self.flow)
        self.image = self.inner.image
        self.valid = self.inner.valid & geo_valid

    def photometric(self, target, alpha: float = DEFAULT_ALPHA) -> PhotometricTerm:
        return self.inner.photometric(target, alpha)

    def param_grads(self, grad_image):
        return chain_flow_grads(self.depth, self.pose, self.K, self.inner.flow_grad(grad_image))


def chain_flow_grads(depth, pose: PoseSE3, K: CameraIntrinsics, upstream):
    """Push a gradient on the rigid flow back to depth (H, W) and pose (6,)."""
    d_depth, d_pose, _ = rigid_flow_jacobians(depth, pose, K)
    upstream = np.asarray(upstream, dtype=float)
    g_depth = (upstream * d_depth).sum(-1)
    g_pose = np.einsum("hwk,hwkj->j", upstream, d_pose)
    return g_depth, g_pose


def _count_or_raise(mask, what="mask") -> int:
    n = int(np.count_nonzero(mask))
    if n == 0:
        raise EmptyMask(f"empty {what}")
    return n


def loss_flow(target, source, flow, weights=None, occlusion=None, alpha: float = DEFAULT_ALPHA) -> LossTerm:
    """Weighted mean photometric error of the flow warp.

    Averaged over valid, non-occluded pixels; ``weights`` defaults to 1.
    """
    target = as_image(target)
    warp = FlowWarp(source, flow)
    mask = warp.valid.copy()
    if occlusion is not None:
        mask &= ~np.asarray(occlusion, dtype=bool)
    n = _count_or_raise(mask, "flow loss mask")
    w = np.ones(mask.shape) if weights is None else np.asarray(weights, dtype=float)
    term = warp.photometric(target, alpha)
    upstream = np.where(mask, w, 0.0) / n
    value = float((upstream * term.error).sum())
    grad_img = term.vjp(upstream)
    return LossTerm(value, {"flow": warp.flow_grad(grad_img)}, n)


def _as_mask_list(masks, count, shape):
    if masks is None:
        return [np.ones(shape, dtype=bool)] * count
    masks = np.asarray(masks, dtype=bool) if not isinstance(masks, (list, tuple)) else masks
    if isinstance(masks, np.ndarray) and masks.ndim == 2:
        return [masks] * count
    return [np.asarray(m, dtype=bool) for m in masks]


def loss_depth_pose(
    target,
    sources: Sequence,
    depth,
    poses: Sequence[PoseSE3],
    K: CameraIntrinsics,
    rigid=None,
    alpha: float = DEFAULT_ALPHA,
) -> LossTerm:
    """Mean minimum-reprojection error over the rigid pixels.

    Args:
        sources, poses: one pose (target -> source) per source view.
        rigid: one mask for all sources, a list of per-source masks, or None
            for every pixel.

    Returns:
        LossTerm with grads ``depth`` (H, W) and ``pose`` (S, 6).
    """
    if isinstance(poses, PoseSE3):
        poses, sources = [poses], [sources]
    target = as_image(target)
    masks = _as_mask_list(rigid, len(sources), target.shape[:2])
    warps = [RigidWarp(s, depth, p, K) for s, p in zip(sources, poses)]
    phis = np.stack([w.photometric(target, alpha).error for w in warps])
    valid = np.stack([w.valid & m for w, m in zip(warps, masks)])
    return _min_reprojection_term(target, warps, phis, valid, alpha)


def _min_reprojection_term(target, warps, phis, valid, alpha) -> LossTerm:
    masked = np.where(valid, phis, np.inf)
    choice = np.argmin(masked, axis=0)
    any_valid = valid.any(axis=0)
    n = _count_or_raise(any_valid, "rigid mask")
    best = np.take_along_axis(masked, choice[None], 0)[0]
    value = float(best[any_valid].sum() / n)
    g_depth = np.zeros(target.shape[:2])
    g_pose = np.zeros((len(warps), 6))
    for s, warp in enumerate(warps):
        upstream = (any_valid & (choice == s)) / n
        if not upstream.any():
            continue
        grad_img = warp.photometric(target, alpha).vjp(upstream)
        gd, gp = warp.param_grads(grad_img)
        g_depth += gd
        g_pose[s] = gp
    return LossTerm(value, {"depth": g_depth, "pose": g_pose}, n)


@dataclass
class GLNetResult:
    value: float
    assignment: np.ndarray
    grad_depth_pose: np.ndarray
    grad_flow: np.ndarray
    count: int


def loss_glnet(target, warped_dp, warped_fl, mask_dp=None, mask_fl=None, alpha: float = DEFAULT_ALPHA) -> GLNetResult:
    """Adaptive loss: per pixel, the smaller of the two photometric errors.

    ``assignment`` is 0 where depth-pose wins (ties included), 1 where the
    flow wins and -1 where neither warp is valid. Each pixel's gradient goes
    only to its winner.
    """
    target = as_image(target)
    warped_dp = as_image(warped_dp)
    warped_fl = as_image(warped_fl)
    if not (target.shape == warped_dp.shape == warped_fl.shape):
        raise DimensionMismatch("target and warps must share a shape")
    shape = target.shape[:2]
    m_dp = np.ones(shape, bool) if mask_dp is None else np.asarray(mask_dp, bool)
    m_fl = np.ones(shape, bool) if mask_fl is None else np.asarray(mask_fl, bool)
    return _glnet_from_terms(PhotometricTerm(target, warped_dp, alpha), PhotometricTerm(target, warped_fl, alpha), m_dp, m_fl)


def _glnet_from_terms(term_dp: PhotometricTerm, term_fl: PhotometricTerm, m_dp, m_fl) -> GLNetResult:
    phi_dp, phi_fl = term_dp.error, term_fl.error
    dp_wins = m_dp & (~m_fl | (phi_dp <= phi_fl))
    fl_wins = m_fl & ~dp_wins
    any_valid = dp_wins | fl_wins
    n = _count_or_raise(any_valid, "valid set")
    assignment = np.where(dp_wins, 0, np.where(fl_wins, 1, -1))
    value = float((np.where(dp_wins, phi_dp, 0.0) + np.where(fl_wins, phi_fl, 0.0)).sum() / n)
    g_dp = term_dp.vjp(dp_wins / n)
    g_fl = term_fl.vjp(fl_wins / n)
    return GLNetResult(value, assignment, g_dp, g_fl, n)


def loss_geometry_consistency(depth_t, depth_s, pose: PoseSE3, K: CameraIntrinsics) -> LossTerm:
    """Mean ``|D_proj - D_warp| / (D_proj + D_warp)`` between two depth maps.

    ``D_proj`` is the depth of each target point after moving it into the
    source frame, ``D_warp`` the source depth sampled where it projects.
    """
    depth_t = np.asarray(depth_t, dtype=float)
    depth_s = np.asarray(depth_s, dtype=float)
    if depth_t.shape != depth_s.shape:
        raise DimensionMismatch(f"{depth_t.shape} != {depth_s.shape}")
    h, w = depth_t.shape
    grid = pixel_grid(h, w)
    rays = np.stack([(grid[..., 0] - K.cx) / K.fx, (grid[..., 1] - K.cy) / K.fy, np.ones((h, w))], -1)
    R = pose.R
    points = rays * depth_t[..., None]
    moved = points @ R.T + pose.translation
    z = moved[..., 2]
    flow, geo_valid = rigid_flow(depth_t, pose, K)
    sampler = BilinearSampler(h, w, grid[..., 0] + flow[..., 0], grid[..., 1] + flow[..., 1])
    d_warp = sampler.sample(depth_s)[..., 0]
    valid = geo_valid & sampler.valid & (d_warp > 0)
    n = int(np.count_nonzero(valid))
    if n == 0:
        raise EmptyValidSet("no pixel projects inside the source depth map")
    a = np.where(valid, z, 1.0)
    b = np.where(valid, d_warp, 1.0)
    diff = np.abs(a - b) / (a + b)
    value = float(diff[valid].sum() / n)

    sgn = np.sign(a - b)
    dr_da = (sgn / (a + b) - np.abs(a - b) / (a + b) ** 2) * valid / n
    dr_db = (-sgn / (a + b) - np.abs(a - b) / (a + b) ** 2) * valid / n

    g_depth_s = sampler.scatter(dr_db)
    ddx, ddy = sampler.coordinate_grads(depth_s)
    g_uv = np.stack([dr_db * ddx[..., 0], dr_db * ddy[..., 0]], -1)
    g_depth_t, g_pose = chain_flow_grads(depth_t, pose, K, g_uv)
    # direct path through the transformed depth z
    dz_ddepth = (rays @ R.T)[..., 2]
    g_depth_t += dr_da * dz_ddepth
    dz_drot = rotate_jacobian(pose.rotation, points)[..., 2, :]
    g_pose[:3] += np.einsum("hw,hwk->k", dr_da, dz_drot)
    g_pose[5] += dr_da.sum()
    return LossTerm(value, {"depth": g_depth_t, "depth_s": g_depth_s, "pose": g_pose}, n)


def loss_fwd_bwd(flow_fwd, flow_bwd, occlusion=None) -> LossTerm:
    """Mean norm of ``F_fwd(p) + F_bwd(p + F_fwd(p))`` on non-occluded pixels."""
    flow_fwd = np.asarray(flow_fwd, dtype=float)
    flow_bwd = np.asarray(flow_bwd, dtype=float)
    if flow_fwd.shape != flow_bwd.shape:
        raise DimensionMismatch(f"{flow_fwd.shape} != {flow_bwd.shape}")
    sampler = flow_sampler(flow_fwd)
    back = sampler.sample(flow_bwd)
    r = flow_fwd + back
    norm = np.linalg.norm(r, axis=-1)
    mask = sampler.valid.copy()
    if occlusion is not None:
        mask &= ~np.asarray(occlusion, dtype=bool)
    n = _count_or_raise(mask, "fwd-bwd mask")
    value = float(norm[mask].sum() / n)
    safe = np.where(norm > 0, norm, 1.0)
    g_r = np.where((mask & (norm > 0))[..., None], r / safe[..., None], 0.0) / n
    dx, dy = sampler.coordinate_grads(flow_bwd)
    g_fwd = g_r + np.stack([(g_r * dx).sum(-1), (g_r * dy).sum(-1)], -1)
    g_bwd = sampler.scatter(g_r)
    return LossTerm(value, {"flow": g_fwd, "flow_bwd": g_bwd}, n)


def _edge_weights(image):
    image = as_image(image)
    wx = np.exp(-np.abs(np.diff(image, axis=1)).mean(-1))
    wy = np.exp(-np.abs(np.diff(image, axis=0)).mean(-1))
    return wx, wy


def loss_smoothness(values, image) -> LossTerm:
    """Edge-aware first-order smoothness of a depth map or a flow field.

    A 2-D input is a depth map: it is turned into disparity and divided by
    its mean, which makes the loss invariant to the depth scale. A 3-D input
    is a flow field and is used as is.
    """
    values = np.asarray(values, dtype=float)
    is_depth = values.ndim == 2
    if is_depth:
        disp = 1.0 / values
        mean = disp.mean()
        m = (disp / mean)[..., None]
    else:
        m = values
    if m.shape[:2] != as_image(image).shape[:2]:
        raise DimensionMismatch(f"{m.shape[:2]} vs image {as_image(image).shape[:2]}")
    wx, wy = _edge_weights(image)
    dx = np.diff(m, axis=1)
    dy = np.diff(m, axis=0)
    value = 0.0
    g = np.zeros_like(m)
    if dx.size:
        value += float((np.abs(dx) * wx[..., None]).mean())
        gx = np.sign(dx) * wx[..., None] / dx.size
        g[:, 1:] += gx
        g[:, :-1] -= gx
    if dy.size:
        value += float((np.abs(dy) * wy[..., None]).mean())
        gy = np.sign(dy) * wy[..., None] / dy.size
        g[1:] += gy
        g[:-1] -= gy
    if is_depth:
        g = g[..., 0]
        g_disp = g / mean - (g * disp).sum() / (mean**2 * disp.size)
        return LossTerm(value, {"depth": -g_disp / values**2}, values.size)
    return LossTerm(value, {"flow": g}, values.shape[0] * values.shape[1])


def fundamental_matrix(pose: PoseSE3, K: CameraIntrinsics) -> np.ndarray:
    Kinv = K.inverse
    return Kinv.T @ skew(pose.translation) @ pose.R @ Kinv


def epipolar_residuals(flow, pose: PoseSE3, K: CameraIntrinsics):
    """Distance of ``p + flow(p)`` to the epipolar line of ``p``, in pixels.

    Returns:
        ``(residual, valid)``; invalid where the line is undefined.
    """
    flow = np.asarray(flow, dtype=float)
    h, w = flow.shape[:2]
    F = fundamental_matrix(pose, K)
    grid = pixel_grid(h, w)
    p = np.concatenate([grid, np.ones((h, w, 1))], -1)
    pd = p.copy()
    pd[..., :2] += flow
    line = p @ F.T
    e = (pd * line).sum(-1)
    n = np.hypot(line[..., 0], line[..., 1])
    valid = n > 1e-12
    return np.abs(e) / np.where(valid, n, 1.0) * valid, valid


def loss_epipolar(flow, pose: PoseSE3, K: CameraIntrinsics) -> LossTerm:
    """Mean point-to-epipolar-line distance of the flow targets.

    Zero, with zero gradient, when the translation vanishes (no epipolar
    geometry exists then).
    """
    flow = np.asarray(flow, dtype=float)
    h, w = flow.shape[:2]
    zero = LossTerm(0.0, {"flow": np.zeros_like(flow), "pose": np.zeros(6)}, 0)
    if np.linalg.norm(pose.translation) < 1e-12:
        return zero
    Kinv = K.inverse
    R = pose.R
    F = Kinv.T @ skew(pose.translation) @ R @ Kinv
    grid = pixel_grid(h, w)
    p = np.concatenate([grid, np.ones((h, w, 1))], -1)
    pd = p.copy()
    pd[..., :2] += flow
    line = p @ F.T
    e = (pd * line).sum(-1)
    n = np.hypot(line[..., 0], line[..., 1])
    valid = n > 1e-12
    count = int(valid.sum())
    if count == 0:
        return zero
    ns = np.where(valid, n, 1.0)
    value = float((np.abs(e) / ns)[valid].sum() / count)

    coef = np.sign(e) / ns * valid / count
    g_flow = coef[..., None] * line[..., :2]
    # d r / d F_ij = sign(e)/n pd_i p_j - |e|/n^3 (a d_i0 + b d_i1) p_j
    left = coef[..., None] * pd
    corr = (np.abs(e) / ns**3 * valid / count)[..., None] * np.concatenate([line[..., :2], np.zeros((h, w, 1))], -1)
    G_F = np.einsum("hwi,hwj->ij", left - corr, p)
    G_E = Kinv @ G_F @ Kinv.T
    g_pose = np.zeros(6)
    for k in range(3):
        ek = np.zeros(3)
        ek[k] = 1.0
        g_pose[3 + k] = np.sum(G_E * (skew(ek) @ R))
    dR = rotate_jacobian(pose.rotation, np.eye(3))  # [j, i, k] = dR_ij / dw_k
    tx = skew(pose.translation)
    for k in range(3):
        g_pose[k] = np.sum(G_E * (tx @ dR[:, :, k].T))
    return LossTerm(value, {"flow": g_flow, "pose": g_pose}, count)


def loss_depth_variance(depth, eps: float = VAR_EPS) -> LossTerm:
    """``1 / (Var(depth) + eps)``: penalises collapsing to a flat map."""
    depth = np.asarray(depth, dtype=float)
    mean = depth.mean()
    var = float(((depth - mean) ** 2).mean())
    value = 1.0 / (var + eps)
    grad = -(2.0 / depth.size) * (depth - mean) / (var + eps) ** 2
    return LossTerm(value, {"depth": grad}, depth.size)
