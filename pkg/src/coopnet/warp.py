"""View synthesis by bilinear inverse warping, SSIM and the photometric error.

Images are ``(H, W, C)`` float arrays in [0, 1]; 2-D inputs are treated as
single-channel. Samples that fall outside the image are clamped to the border
for their value, and the pixel is reported invalid in the returned mask.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np
from scipy.ndimage import uniform_filter

from .errors import DimensionMismatch, EmptyCandidateList
from .geometry import CameraIntrinsics, PoseSE3, pixel_grid, rigid_flow

SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
DEFAULT_ALPHA = 0.85
DEFAULT_OCCLUSION_THRESHOLD = 0.2


def as_image(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 2:
        x = x[..., None]
    if x.ndim != 3:
        raise DimensionMismatch(f"expected an (H, W, C) image, got shape {x.shape}")
    return x


def _check_same(*arrays, ndim=None):
    shapes = {a.shape[:2] for a in arrays}
    if len(shapes) != 1:
        raise DimensionMismatch(f"spatial shapes differ: {sorted(shapes)}")
    if ndim is not None:
        for a in arrays:
            if a.shape[2:] != ndim:
                raise DimensionMismatch(f"unexpected trailing shape {a.shape[2:]}")


class BilinearSampler:
    """Precomputed bilinear footprint for a set of sample coordinates.

    One sampler can read several images of the same size, compute the
    derivative of the samples w.r.t. the coordinates, and scatter an upstream
    gradient back onto the sampled image (the adjoint of :meth:`sample`).
    """

    def __init__(self, height: int, width: int, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        self.height, self.width = height, width
        self.shape = x.shape
        finite = np.isfinite(x) & np.isfinite(y)
        xs = np.where(finite, x, 0.0)
        ys = np.where(finite, y, 0.0)
        self.inside_x = (xs >= 0) & (xs <= width - 1)
        self.inside_y = (ys >= 0) & (ys <= height - 1)
        self.valid = finite & self.inside_x & self.inside_y
        xc = np.clip(xs, 0, width - 1)
        yc = np.clip(ys, 0, height - 1)
        x0 = np.clip(np.floor(xc), 0, max(width - 2, 0)).astype(np.intp)
        y0 = np.clip(np.floor(yc), 0, max(height - 2, 0)).astype(np.intp)
        self.ax = xc - x0
        self.ay = yc - y0
        x1 = np.minimum(x0 + 1, width - 1)
        y1 = np.minimum(y0 + 1, height - 1)
        self.idx = (y0 * width + x0, y0 * width + x1, y1 * width + x0, y1 * width + x1)

    def _corners(self, image):
        flat = image.reshape(-1, image.shape[-1])
        return [flat[i] for i in self.idx]

    def sample(self, image) -> np.ndarray:
        image = as_image(image)
        v00, v01, v10, v11 = self._corners(image)
        ax = self.ax[..., None]
        ay = self.ay[..., None]
        return (1 - ay) * ((1 - ax) * v00 + ax * v01) + ay * ((1 - ax) * v10 + ax * v11)

    def coordinate_grads(self, image):
        """Derivatives of the samples w.r.t. x and y, each (..., C).

        Zero along an axis where the coordinate was clamped.
        """
        image = as_image(image)
        v00, v01, v10, v11 = self._corners(image)
        ax = self.ax[..., None]
        ay = self.ay[..., None]
        dx = (1 - ay) * (v01 - v00) + ay * (v11 - v10)
        dy = (1 - ax) * (v10 - v00) + ax * (v11 - v01)
        dx = dx * self.inside_x[..., None]
        dy = dy * self.inside_y[..., None]
        return dx, dy

    def scatter(self, upstream) -> np.ndarray:
        """Adjoint of :meth:`sample`: gradient on the sampled image."""
        upstream = np.asarray(upstream, dtype=float)
        squeeze = upstream.ndim == len(self.shape)
        if squeeze:
            upstream = upstream[..., None]
        channels = upstream.shape[-1]
        ax = self.ax.ravel()
        ay = self.ay.ravel()
        weights = ((1 - ax) * (1 - ay), ax * (1 - ay), (1 - ax) * ay, ax * ay)
        n = self.height * self.width
        out = np.zeros((n, channels))
        g = upstream.reshape(-1, channels)
        for idx, w in zip(self.idx, weights):
            idx = idx.ravel()
            for c in range(channels):
                out[:, c] += np.bincount(idx, weights=w * g[:, c], minlength=n)
        out = out.reshape(self.height, self.width, channels)
        return out[..., 0] if squeeze else out


def flow_sampler(flow, height=None, width=None) -> BilinearSampler:
    flow = np.asarray(flow, dtype=float)
    h, w = flow.shape[:2]
    grid = pixel_grid(h, w)
    return BilinearSampler(height or h, width or w, grid[..., 0] + flow[..., 0], grid[..., 1] + flow[..., 1])


def warp_by_flow(source, flow):
    """Inverse-warp ``source`` so that ``out(p) = source(p + flow(p))``.

    Returns:
        ``(warped, mask)``; the mask is false where the sample leaves the image.
    """
    source = as_image(source)
    flow = np.asarray(flow, dtype=float)
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise DimensionMismatch("flow must have shape (H, W, 2)")
    _check_same(source, flow)
    sampler = flow_sampler(flow)
    return sampler.sample(source), sampler.valid.copy()


def warp_by_depth_pose(source, depth, pose: PoseSE3, K: CameraIntrinsics):
    """Reproject ``source`` into the target view using depth and camera motion."""
    source = as_image(source)
    depth = np.asarray(depth, dtype=float)
    _check_same(source, depth)
    flow, geo_valid = rigid_flow(depth, pose, K)
    warped, mask = warp_by_flow(source, flow)
    return warped, mask & geo_valid


def box3(x) -> np.ndarray:
    """3x3 mean filter over the first two axes with reflect padding."""
    # scipy's "mirror" is numpy's "reflect": the edge sample is not repeated
    return uniform_filter(np.asarray(x, dtype=float), size=3, mode="mirror", axes=(0, 1))


def box3_adjoint(g) -> np.ndarray:
    h, w = g.shape[:2]
    pad_shape = (h + 2, w + 2) + g.shape[2:]
    p = np.zeros(pad_shape)
    for dy in range(3):
        for dx in range(3):
            p[dy : dy + h, dx : dx + w] += g
    p /= 9.0
    # fold reflect padding back: padded[0] mirrors row 1, padded[-1] mirrors row -2
    p[2] += p[0]
    p[-3] += p[-1]
    p = p[1:-1]
    p[:, 2] += p[:, 0]
    p[:, -3] += p[:, -1]
    return p[:, 1:-1]


def _ssim_terms(x, y):
    mu_x, mu_y, m_xx, m_yy, m_xy = np.split(box3(np.concatenate([x, y, x * x, y * y, x * y], -1)), 5, axis=-1)
    s_xx = m_xx - mu_x**2
    s_yy = m_yy - mu_y**2
    s_xy = m_xy - mu_x * mu_y
    a1 = 2 * mu_x * mu_y + SSIM_C1
    a2 = 2 * s_xy + SSIM_C2
    b1 = mu_x**2 + mu_y**2 + SSIM_C1
    b2 = s_xx + s_yy + SSIM_C2
    return mu_x, mu_y, a1, a2, b1, b2


def ssim_channels(x, y) -> np.ndarray:
    """Per-channel SSIM map, shape (H, W, C)."""
    x = as_image(x)
    y = as_image(y)
    if x.shape != y.shape:
        raise DimensionMismatch(f"{x.shape} != {y.shape}")
    _, _, a1, a2, b1, b2 = _ssim_terms(x, y)
    return (a1 * a2) / (b1 * b2)


def ssim(x, y) -> np.ndarray:
    """Channel-averaged SSIM over 3x3 windows, shape (H, W)."""
    return ssim_channels(x, y).mean(axis=2)


def ssim_vjp(x, y, upstream) -> np.ndarray:
    """Gradient of ``sum(upstream * ssim_channels(x, y))`` w.r.t. ``y``."""
    x = as_image(x)
    y = as_image(y)
    terms = _ssim_terms(x, y)
    _, _, a1, a2, b1, b2 = terms
    return _ssim_vjp_from_terms(x, y, upstream, terms, a1 * a2 / (b1 * b2))


def _ssim_vjp_from_terms(x, y, upstream, terms, s):
    mu_x, mu_y, a1, a2, b1, b2 = terms
    den = b1 * b2
    d_mu_y = (2 * mu_x * a2 - 2 * mu_x * a1) / den - s * (2 * mu_y / b1 - 2 * mu_y / b2)
    d_m_xy = 2 * a1 / den
    d_m_yy = -s / b2
    g_mu, g_xy, g_yy = np.split(box3_adjoint(np.concatenate([d_mu_y, d_m_xy, d_m_yy], -1) * np.tile(upstream, 3)), 3, -1)
    return g_mu + x * g_xy + 2 * y * g_yy


class PhotometricTerm:
    """Photometric error of ``y`` against ``x`` with its vector-Jacobian product.

    The SSIM window statistics are computed once and shared by
    :attr:`error` and :meth:`vjp`.
    """

    def __init__(self, x, y, alpha: float = DEFAULT_ALPHA):
        x = as_image(x)
        y = as_image(y)
        if x.shape != y.shape:
            raise DimensionMismatch(f"{x.shape} != {y.shape}")
        self.x, self.y, self.alpha = x, y, alpha
        self._terms = _ssim_terms(x, y)
        _, _, a1, a2, b1, b2 = self._terms
        self.ssim = (a1 * a2) / (b1 * b2)
        per_channel = alpha * (1 - self.ssim) / 2 + (1 - alpha) * np.abs(x - y)
        self.error = per_channel.mean(axis=2)

    def vjp(self, upstream) -> np.ndarray:
        """Gradient of ``sum(upstream * error)`` w.r.t. ``y``, shape (H, W, C)."""
        x, y, alpha = self.x, self.y, self.alpha
        g = np.broadcast_to(np.asarray(upstream, dtype=float)[..., None], x.shape) / x.shape[2]
        return -alpha / 2 * _ssim_vjp_from_terms(x, y, g, self._terms, self.ssim) + (1 - alpha) * np.sign(y - x) * g


def photometric_error(x, y, alpha: float = DEFAULT_ALPHA) -> np.ndarray:
    """``alpha (1 - SSIM) / 2 + (1 - alpha) |x - y|``, channel-averaged."""
    return PhotometricTerm(x, y, alpha).error


def photometric_error_vjp(x, y, upstream, alpha: float = DEFAULT_ALPHA) -> np.ndarray:
    """Gradient of ``sum(upstream * photometric_error(x, y))`` w.r.t. ``y``."""
    return PhotometricTerm(x, y, alpha).vjp(upstream)


def occlusion_residual(flow_fwd, flow_bwd) -> np.ndarray:
    """``|F_fwd(p) + F_bwd(p + F_fwd(p))|`` in pixels, bilinear lookup."""
    flow_fwd = np.asarray(flow_fwd, dtype=float)
    flow_bwd = np.asarray(flow_bwd, dtype=float)
    if flow_fwd.shape != flow_bwd.shape:
        raise DimensionMismatch(f"{flow_fwd.shape} != {flow_bwd.shape}")
    back = flow_sampler(flow_fwd).sample(flow_bwd)
    return np.linalg.norm(flow_fwd + back, axis=-1)


def occlusion_mask_fwd_bwd(flow_fwd, flow_bwd, threshold: float = DEFAULT_OCCLUSION_THRESHOLD) -> np.ndarray:
    """True where the forward-backward residual exceeds ``threshold``."""
    return occlusion_residual(flow_fwd, flow_bwd) > threshold


def min_reprojection_error(target, candidates: Sequence, alpha: float = DEFAULT_ALPHA):
    """Per-pixel minimum photometric error over the valid candidates.

    Args:
        target: target image.
        candidates: sequence of ``(warped_image, mask)`` pairs.

    Returns:
        ``(error, valid, choice)``: error is 0 where no candidate is valid,
        ``choice`` is the winning candidate index (-1 if none).
    """
    if len(candidates) == 0:
        raise EmptyCandidateList("need at least one warped candidate")
    target = as_image(target)
    errors = []
    masks = []
    for warped, mask in candidates:
        errors.append(photometric_error(target, warped, alpha))
        masks.append(np.asarray(mask, dtype=bool))
    errors = np.stack(errors)
    masks = np.stack(masks)
    masked = np.where(masks, errors, np.inf)
    choice = np.argmin(masked, axis=0)
    valid = masks.any(axis=0)
    error = np.take_along_axis(masked, choice[None], 0)[0]
    error = np.where(valid, error, 0.0)
    choice = np.where(valid, choice, -1)
    return error, valid, choice


def downsample2(x) -> np.ndarray:
    """2x2 average pooling on the first two axes, ceil-sized for odd inputs."""
    x = np.asarray(x, dtype=float)
    h, w = x.shape[:2]
    h2, w2 = math.ceil(h / 2), math.ceil(w / 2)
    if h % 2 == 0 and w % 2 == 0:
        return x.reshape((h2, 2, w2, 2) + x.shape[2:]).mean(axis=(1, 3))
    pad = [(0, 2 * h2 - h), (0, 2 * w2 - w)] + [(0, 0)] * (x.ndim - 2)
    total = np.pad(x, pad).reshape((h2, 2, w2, 2) + x.shape[2:]).sum(axis=(1, 3))
    count = np.pad(np.ones((h, w)), pad[:2]).reshape(h2, 2, w2, 2).sum(axis=(1, 3))
    return total / count.reshape(count.shape + (1,) * (x.ndim - 2))


def downsample2_adjoint(g, shape) -> np.ndarray:
    """Adjoint of :func:`downsample2` for an input of the given shape."""
    h, w = shape[:2]
    h2, w2 = math.ceil(h / 2), math.ceil(w / 2)
    g = np.asarray(g, dtype=float)
    if h % 2 == 0 and w % 2 == 0:
        g = g / 4.0
    else:
        count = np.pad(np.ones((h, w)), [(0, 2 * h2 - h), (0, 2 * w2 - w)]).reshape(h2, 2, w2, 2).sum(axis=(1, 3))
        g = g / count.reshape(count.shape + (1,) * (g.ndim - 2))
    up = np.repeat(np.repeat(g, 2, axis=0), 2, axis=1)
    return up[:h, :w]


def build_pyramid(image, levels: int) -> list:
    """Image pyramid; level ``s`` is downscaled by ``1 / 2**s``."""
    image = as_image(image)
    if levels < 1:
        raise ValueError("levels must be >= 1")
    max_levels = max(1, int(math.floor(math.log2(min(image.shape[:2])))))
    if levels > max_levels:
        raise ValueError(f"at most {max_levels} levels for an image of shape {image.shape[:2]}")
    out = [image]
    for _ in range(levels - 1):
        out.append(downsample2(out[-1]))
    return out
