"""Ray-cast synthetic scenes with exact depth, flow, motion and occlusion truth.

The scene is a textured background plane plus fronto-parallel rectangles
("boxes") that may move on their own. World coordinates are those of the
middle camera ``t``; the camera moves with a constant velocity, so the pose
to frame ``t+1`` is ``camera_motion`` and the pose to ``t-1`` its inverse.
Textures are functions of the surface coordinates, so every frame is an
exact rendering and all truth channels agree by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import EmptyFrustum
from .geometry import CameraIntrinsics, PoseSE3, pixel_grid, rigid_flow

MAX_SPEED = 2.0  # world units per frame
PLANE_ID = 0
MIN_BOX_PIXELS = 9


def _quintic(t):
    return t * t * t * (t * (6 * t - 15) + 10)


class ValueNoise:
    """Multi-octave lattice value noise with C2 quintic interpolation."""

    def __init__(self, seed: int, octaves: int = 3, frequency: float = 0.7, persistence: float = 0.5):
        rng = np.random.default_rng(seed)
        self.perm = rng.permutation(256)
        self.values = rng.random((octaves, 256))
        self.frequency = frequency
        self.persistence = persistence
        self.offsets = rng.uniform(0, 256, (octaves, 2))

    def _lattice(self, octave, i, j):
        return self.values[octave, self.perm[(self.perm[i & 255] + j) & 255]]

    def __call__(self, u, v) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        v = np.asarray(v, dtype=float)
        out = np.zeros(np.broadcast(u, v).shape)
        amp, total, freq = 1.0, 0.0, self.frequency
        for o in range(len(self.values)):
            x = u * freq + self.offsets[o, 0]
            y = v * freq + self.offsets[o, 1]
            i0 = np.floor(x).astype(np.int64)
            j0 = np.floor(y).astype(np.int64)
            sx = _quintic(x - i0)
            sy = _quintic(y - j0)
            a = self._lattice(o, i0, j0)
            b = self._lattice(o, i0 + 1, j0)
            c = self._lattice(o, i0, j0 + 1)
            d = self._lattice(o, i0 + 1, j0 + 1)
            out += amp * ((a + (b - a) * sx) * (1 - sy) + (c + (d - c) * sx) * sy)
            total += amp
            amp *= self.persistence
            freq *= 2.0
        return out / total


@dataclass(frozen=True)
class Box:
    """Fronto-parallel textured rectangle.

    Attributes:
        center: (X, Y, Z) of the rectangle centre at frame ``t``.
        extent: half-widths (X, Y) in world units.
        velocity: own motion (X, Y, Z) per frame, in world coordinates.
        texture_seed: seed of its texture.
    """

    center: tuple
    extent: tuple
    velocity: tuple = (0.0, 0.0, 0.0)
    texture_seed: int = 0

    @property
    def moving(self) -> bool:
        return bool(np.any(np.asarray(self.velocity) != 0))

    def at(self, k: int) -> np.ndarray:
        return np.asarray(self.center, float) + k * np.asarray(self.velocity, float)


@dataclass(frozen=True)
class SceneSpec:
    """Everything needed to render one three-frame scene.

    The background plane is ``Z = plane_depth + plane_slope[0] X + plane_slope[1] Y``.
    """

    height: int
    width: int
    K: CameraIntrinsics
    plane_depth: float = 10.0
    plane_slope: tuple = (0.0, 0.0)
    texture_seed: int = 0
    boxes: tuple = ()
    camera_motion: PoseSE3 = field(default_factory=PoseSE3.identity)
    noise: float = 0.0
    homogeneous: bool = False
    seed: int = 0
    texture_frequency: float = 0.15

    def __post_init__(self):
        if self.height < 2 or self.width < 2:
            raise ValueError("image must be at least 2x2")
        if not self.plane_depth > 0:
            raise ValueError("plane depth must be positive")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")
        for b in self.boxes:
            if not b.center[2] > 0 or min(b.extent) <= 0:
                raise ValueError(f"invalid box {b}")
            if np.linalg.norm(b.velocity) > MAX_SPEED:
                raise ValueError(f"box speed above {MAX_SPEED}")

    @property
    def moving_count(self) -> int:
        return sum(b.moving for b in self.boxes)


@dataclass
class SceneTruth:
    """Rendered frames and truth for the middle frame ``t``.

    ``poses``, ``rigid_flows``, ``flows``, ``occlusion`` are ordered
    ``(t -> t-1, t -> t+1)``; ``frames`` is ``(I_{t-1}, I_t, I_{t+1})``.
    ``flows_bwd`` maps each source frame back to ``t`` (total motion).
    """

    spec: SceneSpec
    frames: tuple
    depth: np.ndarray
    poses: tuple
    rigid_flows: tuple
    flows: tuple
    flows_bwd: tuple
    moving: np.ndarray
    occlusion: tuple
    object_ids: np.ndarray

    @property
    def target(self):
        return self.frames[1]

    @property
    def sources(self):
        return (self.frames[0], self.frames[2])

    @property
    def K(self):
        return self.spec.K


def _texture(seed: int, homogeneous: bool, frequency: float = 0.7):
    noises = [ValueNoise(seed * 3 + c + 1, frequency=frequency) for c in range(3)]
    if homogeneous:
        color = np.random.default_rng(seed).uniform(0.2, 0.8, 3)
        return lambda u, v: np.broadcast_to(color, np.shape(u) + (3,)).copy()

    def tex(u, v):
        return 0.1 + 0.8 * np.stack([n(u, v) for n in noises], -1)

    return tex


def _camera(pose_to_k: PoseSE3):
    """World-frame centre and ray rotation of the camera with the given pose."""
    R = pose_to_k.R
    return -R.T @ pose_to_k.translation, R.T


def _cast(spec: SceneSpec, k: int, pose_to_k: PoseSE3, pixels):
    """Intersect rays of frame ``k`` through ``pixels`` (..., 2) with the scene.

    Returns:
        ``(points, ids, hit)``: world hit points, object id (0 plane,
        1 + box index) and whether anything was hit in front of the camera.
    """
    K = spec.K
    centre, rot = _camera(pose_to_k)
    cam_dirs = np.stack(
        [(pixels[..., 0] - K.cx) / K.fx, (pixels[..., 1] - K.cy) / K.fy, np.ones(pixels.shape[:-1])], -1
    )
    dirs = cam_dirs @ rot.T
    gx, gy = spec.plane_slope
    denom = dirs[..., 2] - gx * dirs[..., 0] - gy * dirs[..., 1]
    num = spec.plane_depth + gx * centre[0] + gy * centre[1] - centre[2]
    with np.errstate(divide="ignore", invalid="ignore"):
        s_plane = np.where(np.abs(denom) > 1e-12, num / denom, np.inf)
    best = np.where(s_plane > 1e-9, s_plane, np.inf)
    ids = np.full(best.shape, PLANE_ID)
    for b_idx, box in enumerate(spec.boxes):
        c = box.at(k)
        with np.errstate(divide="ignore", invalid="ignore"):
            s = (c[2] - centre[2]) / dirs[..., 2]
        px = centre[0] + s * dirs[..., 0]
        py = centre[1] + s * dirs[..., 1]
        inside = (np.abs(px - c[0]) <= box.extent[0]) & (np.abs(py - c[1]) <= box.extent[1]) & (s > 1e-9)
        closer = inside & (s < best)
        best = np.where(closer, s, best)
        ids = np.where(closer, b_idx + 1, ids)
    hit = np.isfinite(best)
    points = centre + np.where(hit, best, 0.0)[..., None] * dirs
    return points, ids, hit


def _shade(spec: SceneSpec, k: int, points, ids):
    out = np.zeros(points.shape[:-1] + (3,))
    plane_tex = _texture(spec.texture_seed, False, spec.texture_frequency)
    sel = ids == PLANE_ID
    out[sel] = plane_tex(points[sel][:, 0], points[sel][:, 1])
    for b_idx, box in enumerate(spec.boxes):
        sel = ids == b_idx + 1
        if not sel.any():
            continue
        c = box.at(k)
        tex = _texture(box.texture_seed, spec.homogeneous, spec.texture_frequency)
        out[sel] = tex(points[sel][:, 0] - c[0], points[sel][:, 1] - c[1])
    return out


def _pose_to(spec: SceneSpec, k: int) -> PoseSE3:
    if k == 0:
        return PoseSE3.identity()
    return spec.camera_motion if k == 1 else spec.camera_motion.inverse()


def _project(points_cam, K):
    z = points_cam[..., 2]
    safe = np.where(z > 0, z, 1.0)
    return np.stack([K.fx * points_cam[..., 0] / safe + K.cx, K.fy * points_cam[..., 1] / safe + K.cy], -1), z


def render(spec: SceneSpec) -> SceneTruth:
    """Render frames ``t-1, t, t+1`` and all truth channels for frame ``t``.

    Raises:
        EmptyFrustum: a ray of frame ``t`` hits nothing, or a box is not
            visible in frame ``t``.
    """
    h, w, K = spec.height, spec.width, spec.K
    grid = pixel_grid(h, w)
    points, ids, hit = _cast(spec, 0, PoseSE3.identity(), grid)
    if not hit.all():
        raise EmptyFrustum("background plane does not fill the view")
    for b_idx in range(len(spec.boxes)):
        if not (ids == b_idx + 1).any():
            raise EmptyFrustum(f"box {b_idx} is not visible in the target frame")
    depth = points[..., 2]
    if not np.all(depth > 0):
        raise EmptyFrustum("scene point behind the target camera")

    frames = []
    for k in (-1, 0, 1):
        if k == 0:
            p, i = points, ids
        else:
            p, i, hk = _cast(spec, k, _pose_to(spec, k), grid)
            if not hk.all():
                raise EmptyFrustum(f"background plane does not fill frame {k:+d}")
        frames.append(_shade(spec, k, p, i))

    moving_boxes = np.array([False] + [b.moving for b in spec.boxes])
    moving = moving_boxes[ids]
    poses, rigid, total, occ = [], [], [], []
    for k in (-1, 1):
        pose = _pose_to(spec, k)
        r_flow, _ = rigid_flow(depth, pose, K)
        moved = points.copy()
        for b_idx, box in enumerate(spec.boxes):
            sel = ids == b_idx + 1
            moved[sel] += k * np.asarray(box.velocity, float)
        uv, z = _project(pose.apply(moved), K)
        t_flow = np.where(moving[..., None], uv - grid, r_flow)
        # a point is occluded in frame k if it leaves the view, goes behind
        # the camera, or something else is hit first along its new ray
        inside = (z > 0) & (uv[..., 0] >= 0) & (uv[..., 0] <= w - 1) & (uv[..., 1] >= 0) & (uv[..., 1] <= h - 1)
        _, ids_k, _ = _cast(spec, k, pose, uv)
        visible = inside & (ids_k == ids)
        poses.append(pose)
        rigid.append(r_flow)
        total.append(t_flow)
        occ.append(~visible)

    frames = [f.copy() for f in frames]
    if spec.noise > 0:
        rng = np.random.default_rng(spec.seed)
        frames = [np.clip(f + rng.normal(0, spec.noise, f.shape), 0.0, 1.0) for f in frames]

    flows_bwd = tuple(_backward_flow(spec, k) for k in (-1, 1))
    return SceneTruth(
        spec, tuple(frames), depth, tuple(poses), tuple(rigid), tuple(total), flows_bwd, moving, tuple(occ), ids
    )


def _backward_flow(spec: SceneSpec, k: int) -> np.ndarray:
    """Total flow from frame ``k`` back to frame ``t``."""
    h, w, K = spec.height, spec.width, spec.K
    grid = pixel_grid(h, w)
    pose = _pose_to(spec, k)
    points, ids, _ = _cast(spec, k, pose, grid)
    moved = points.copy()
    for b_idx, box in enumerate(spec.boxes):
        sel = ids == b_idx + 1
        moved[sel] -= k * np.asarray(box.velocity, float)
    uv, _ = _project(moved, K)
    # reproject rather than reuse the grid so a still camera gives exact zeros
    uv_k, _ = _project(pose.apply(points), K)
    return uv - uv_k


def default_intrinsics(height: int, width: int) -> CameraIntrinsics:
    f = 0.85 * width
    return CameraIntrinsics(f, f, (width - 1) / 2, (height - 1) / 2)


def random_scene(
    rng: np.random.Generator,
    height: int = 32,
    width: int = 48,
    difficulty: float = 1.0,
    homogeneous: bool = False,
    noise: float = 0.0,
    seed: int = 0,
) -> SceneSpec:
    """Draw one scene; ``difficulty`` in [0, 1] scales moving objects.

    Every scene has one or two static boxes in front of a tilted plane.
    Difficulty 0 adds no moving boxes; higher difficulty adds more, larger
    and faster ones.
    """
    if not 0 <= difficulty <= 1:
        raise ValueError("difficulty must be in [0, 1]")
    K = default_intrinsics(height, width)
    plane_depth = rng.uniform(7.0, 11.0)
    # a tilted ground and static boxes separate translation from rotation
    slope = (rng.uniform(-0.1, 0.1), rng.uniform(-0.7, -0.4))
    # sideways motion gives the parallax that makes depth observable
    shift_px = rng.uniform(2.0, 3.5) * rng.choice([-1.0, 1.0])
    motion = PoseSE3(
        rng.normal(0.0, 0.004, 3),
        np.array([shift_px * plane_depth / K.fx, rng.uniform(-0.05, 0.05), rng.uniform(0.1, 0.3)]),
    )
    n_static = 1 + int(rng.random() < 0.5)
    n_moving = 0 if difficulty == 0 else 1 + int(rng.random() < difficulty)
    while True:
        boxes = _draw_boxes(rng, n_static, n_moving, difficulty, plane_depth, K, height, width)
        # redraw when one box hides another completely
        _, ids, _ = _cast(SceneSpec(height, width, K, plane_depth, slope, 0, boxes), 0, PoseSE3.identity(), pixel_grid(height, width))
        if all(np.count_nonzero(ids == b + 1) >= MIN_BOX_PIXELS for b in range(len(boxes))):
            break
    return SceneSpec(
        height,
        width,
        K,
        plane_depth,
        slope,
        int(rng.integers(1 << 30)),
        boxes,
        motion,
        noise,
        homogeneous,
        seed,
    )


def _draw_boxes(rng, n_static, n_moving, difficulty, plane_depth, K, height, width) -> tuple:
    boxes = []
    for b in range(n_static + n_moving):
        moving = b >= n_static
        scale = (0.6 + 0.6 * difficulty) if moving else 1.0
        z = rng.uniform(0.55, 0.8) * plane_depth
        half_px = rng.uniform(4.0, 6.0) * scale
        ex = half_px * z / K.fx
        ey = half_px * z / K.fy
        # keep the footprint inside the view with a small margin
        mx = max((width / 2 - half_px - 2) * z / K.fx, 0.0)
        my = max((height / 2 - half_px - 2) * z / K.fy, 0.0)
        cx = rng.uniform(-mx, mx)
        cy = rng.uniform(-my, my)
        v = np.zeros(3)
        if moving:
            speed_px = rng.uniform(1.0, 2.5) * (0.5 + 0.5 * difficulty)
            angle = rng.uniform(0, 2 * np.pi)
            v = np.array([np.cos(angle), np.sin(angle), 0.0]) * speed_px * z / K.fx
        boxes.append(Box((cx, cy, z), (ex, ey), tuple(v), int(rng.integers(1 << 30))))
    return tuple(boxes)


def scene_batch(
    seed: int,
    count: int,
    difficulty: float = 1.0,
    homogeneous: bool = False,
    height: int = 32,
    width: int = 48,
    noise: float = 0.0,
) -> list:
    """Deterministic list of scene specs; scene ``i`` uses subseed ``seed ^ i``."""
    if count < 1:
        raise ValueError("count must be >= 1")
    specs = []
    for i in range(count):
        sub = int(seed) ^ i
        specs.append(random_scene(np.random.default_rng(sub), height, width, difficulty, homogeneous, noise, sub))
    return specs


def integer_flow_scene(
    height: int = 24,
    width: int = 32,
    shift_px: int = 2,
    box_shift_px: Sequence[int] = (),
    seed: int = 0,
) -> SceneSpec:
    """Fronto-parallel scene whose flows are whole pixels everywhere.

    The camera translates sideways so the background moves ``shift_px``
    pixels; each box ``i`` sits at half the plane depth (so it moves twice
    as far from camera motion) plus its own ``box_shift_px[i]`` pixels.
    Bilinear warping is then exact, which makes reconstruction identities
    testable to round-off.
    """
    K = default_intrinsics(height, width)
    depth = 10.0
    tx = -shift_px * depth / K.fx
    boxes = []
    for i, extra in enumerate(box_shift_px):
        z = depth / 2
        v = (extra * z / K.fx, 0.0, 0.0)
        offset = (i - (len(box_shift_px) - 1) / 2) * 2.0
        boxes.append(Box((offset, 0.0, z), (0.6, 0.6), v, seed + i + 1))
    return SceneSpec(height, width, K, depth, (0.0, 0.0), seed, tuple(boxes), PoseSE3(np.zeros(3), np.array([tx, 0.0, 0.0])))


def with_boxes_static(spec: SceneSpec) -> SceneSpec:
    """Same scene with every box frozen in place."""
    return replace(spec, boxes=tuple(replace(b, velocity=(0.0, 0.0, 0.0)) for b in spec.boxes))
