"""Central finite-difference checks of the analytic gradients.

A check perturbs randomly chosen coordinates of one parameter block and
compares ``(L(x + h e_i) - L(x - h e_i)) / 2h`` with the analytic partial.

The losses are only piecewise smooth (bilinear cells, ``|.|``, argmin,
masks). A probe whose interval straddles a kink measures a blend of two
slopes, so it is rejected and redrawn. Kinks are detected by comparing the
difference quotient at step ``h`` with the one at ``h / 2``: on a smooth
stretch they agree to ``O(h^2)``, across a kink they do not. The extra pair
of evaluations is only spent on probes that disagree with the analytic
value, so a wrong gradient still fails (its two quotients agree). A case may also
pass an explicit ``regime`` function; probes whose two sides map to
different regimes are rejected too.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import NonFiniteLoss
from .geometry import CameraIntrinsics, PoseSE3, rigid_flow
from .losses import (
    FlowWarp,
    LossWeights,
    RigidWarp,
    chain_flow_grads,
    loss_depth_pose,
    loss_depth_variance,
    loss_epipolar,
    loss_flow,
    loss_fwd_bwd,
    loss_geometry_consistency,
    loss_glnet,
    loss_smoothness,
)
from .objective import FrameBundle, loss_final
from .quantile import NeighbourhoodSpec

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class FDConfig:
    step: float = 1e-4
    tolerance: float = 1e-4
    samples: int = 64

    def __post_init__(self):
        if not (self.step > 0 and self.tolerance > 0 and self.samples >= 1):
            raise ValueError("step and tolerance must be > 0, samples >= 1")


@dataclass
class GradSlot:
    name: str
    grad: np.ndarray


@dataclass
class GradCheckReport:
    max_rel_error: float
    checked: int
    rejected: int
    failures: list = field(default_factory=list)
    tolerance: float = 1e-4

    @property
    def passed(self) -> bool:
        return self.checked > 0 and not self.failures


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)


def grad_check(
    loss_fn: Callable,
    point,
    cfg: FDConfig = FDConfig(),
    regime: Optional[Callable] = None,
    rng=None,
    max_attempts: int = 20,
    kink_tolerance: Optional[float] = None,
    strata: Optional[Sequence[slice]] = None,
) -> GradCheckReport:
    """Compare the gradient returned by ``loss_fn`` with central differences.

    Args:
        loss_fn: maps a parameter array to ``(value, gradient)``.
        point: parameter array at which to check.
        regime: optional map from parameters to a discrete state array.
        kink_tolerance: relative disagreement between the ``h`` and ``h/2``
            quotients above which a probe counts as crossing a kink.
            Defaults to ``cfg.tolerance / 4``; ``0`` disables the test.
        strata: optional slices of the flattened parameters; probes cycle
            through them so small blocks (a pose) are not drowned out by
            large ones (a flow grid).

    Raises:
        NonFiniteLoss: a loss or gradient evaluates to nan or inf.
    """
    rng = np.random.default_rng(rng)
    kink_tol = cfg.tolerance / 4 if kink_tolerance is None else kink_tolerance
    point = np.array(point, dtype=float)
    value, grad = loss_fn(point)
    grad = np.asarray(grad, dtype=float)
    if not np.isfinite(value) or not np.all(np.isfinite(grad)):
        raise NonFiniteLoss("loss or gradient is not finite at the check point")
    if grad.shape != point.shape:
        raise ValueError(f"gradient shape {grad.shape} != parameter shape {point.shape}")
    flat = point.ravel()
    flat_grad = grad.ravel()

    def evaluate(i, h):
        x = flat.copy()
        x[i] += h
        v = loss_fn(x.reshape(point.shape))[0]
        if not np.isfinite(v):
            raise NonFiniteLoss(f"non-finite loss while probing coordinate {i}")
        return v

    budget = cfg.samples * max_attempts
    checked = rejected = 0
    worst = 0.0
    failures = []
    while checked < cfg.samples and checked + rejected < budget:
        if strata:
            part = strata[(checked + rejected) % len(strata)]
            i = int(rng.integers(part.start, part.stop))
        else:
            i = int(rng.integers(flat.size))
        h = cfg.step
        if regime is not None:
            x_p, x_m = flat.copy(), flat.copy()
            x_p[i] += h
            x_m[i] -= h
            if not np.array_equal(regime(x_p.reshape(point.shape)), regime(x_m.reshape(point.shape))):
                rejected += 1
                continue
        fd = (evaluate(i, h) - evaluate(i, -h)) / (2 * h)
        err = relative_error(flat_grad[i], fd)
        if err > cfg.tolerance and kink_tol > 0 and _crosses_kink(evaluate, i, h, value, kink_tol):
            rejected += 1
            continue
        worst = max(worst, err)
        if err > cfg.tolerance:
            failures.append((np.unravel_index(i, point.shape), float(flat_grad[i]), float(fd), err))
        checked += 1
    return GradCheckReport(worst, checked, rejected, failures, cfg.tolerance)


def _crosses_kink(evaluate, i, h, base, tol) -> bool:
    """True when the samples around coordinate ``i`` are not locally smooth.

    Two scale tests, each blind where the other is sharp: central quotients
    at ``h`` and ``h/2`` drift apart when a kink sits far from the centre,
    and second differences stop scaling as ``h^2`` when it sits close.
    """
    lp, lm = evaluate(i, h), evaluate(i, -h)
    hp, hm = evaluate(i, h / 2), evaluate(i, -h / 2)
    fd, fd_half = (lp - lm) / (2 * h), (hp - hm) / h
    scale = max(abs(fd), abs(fd_half), 1e-8)
    if abs(fd - fd_half) / scale > tol:
        return True
    curvature_drift = (lp - 2 * base + lm) - 4 * (hp - 2 * base + hm)
    return abs(curvature_drift) / (2 * h) / scale > tol


def chain_rigid_flow_grads(depth, pose: PoseSE3, K: CameraIntrinsics, upstream):
    """Push a flow-field gradient back onto depth and pose."""
    g_depth, g_pose = chain_flow_grads(depth, pose, K, upstream)
    return GradSlot("depth", g_depth), GradSlot("pose", g_pose)


# ----------------------------------------------------------------- test inputs


def smooth_image(rng, height, width, channels=3, octaves=2):
    """Random smooth image in [0.1, 0.9] made of a few low-frequency waves."""
    ys, xs = np.mgrid[0:height, 0:width].astype(float)
    img = np.zeros((height, width, channels))
    for c in range(channels):
        for _ in range(3 * octaves):
            kx, ky = rng.uniform(-0.9, 0.9, 2)
            img[..., c] += rng.uniform(0.5, 1.0) * np.sin(kx * xs + ky * ys + rng.uniform(0, 2 * np.pi))
    img -= img.min()
    img /= img.max()
    return 0.1 + 0.8 * img


@dataclass
class GradInputs:
    target: np.ndarray
    sources: list
    depth: np.ndarray
    poses: list
    flows: list
    flows_bwd: list
    source_depths: list
    K: CameraIntrinsics


def random_inputs(rng, height=8, width=10) -> GradInputs:
    """Small random scene: smooth images, depth in [3, 6], moderate motion."""
    K = CameraIntrinsics(12.0, 12.0, (width - 1) / 2 + 0.3, (height - 1) / 2 - 0.2)
    target = smooth_image(rng, height, width)
    sources = [smooth_image(rng, height, width) for _ in range(2)]
    depth = 3.0 + 3.0 * smooth_image(rng, height, width, 1)[..., 0]
    poses = [PoseSE3(rng.normal(0, 0.03, 3), rng.normal(0, 0.15, 3)) for _ in range(2)]
    flows = [rng.uniform(-1.5, 1.5, (height, width, 2)) for _ in range(2)]
    flows_bwd = [-f + rng.normal(0, 0.3, f.shape) for f in flows]
    source_depths = [d * rng.uniform(0.9, 1.1, depth.shape) for d in (depth, depth)]
    return GradInputs(target, sources, depth, poses, flows, flows_bwd, source_depths, K)


def _pose_blocks(poses):
    return np.stack([p.as_vector() for p in poses])


def _poses(block):
    return [PoseSE3.from_vector(v) for v in block]


def gradient_cases(inp: GradInputs, scale_grad: float = 1.0) -> list:
    """Named ``(loss_fn, point, strata)`` cases covering every loss and parameter.

    ``scale_grad`` multiplies every analytic gradient; 2.0 gives the
    negative control that must fail.
    """
    t, srcs, K = inp.target, inp.sources, inp.K
    d0, p0, f0, fb0, ds0 = inp.depth, inp.poses[0], inp.flows[0], inp.flows_bwd[0], inp.source_depths[0]
    cases = []

    def add(name, fn, point, strata=None):
        def inner(x):
            v, g = fn(x)
            return v, scale_grad * np.asarray(g)

        cases.append((name, inner, point, strata))

    occ = np.zeros(d0.shape, bool)
    occ[0, :3] = True
    w = 1.0 + (np.arange(d0.size).reshape(d0.shape) % 3)
    add("loss_flow/flow", lambda x: _vg(loss_flow(t, srcs[0], x, w, occ), "flow"), f0)

    rigid = np.ones(d0.shape, bool)
    rigid[-1, -4:] = False
    add("loss_depth_pose/depth", lambda x: _vg(loss_depth_pose(t, srcs, x, inp.poses, K, rigid), "depth"), d0)
    add(
        "loss_depth_pose/pose",
        lambda x: _vg(loss_depth_pose(t, srcs, d0, _poses(x), K, rigid), "pose"),
        _pose_blocks(inp.poses),
    )

    def glnet(depth, pose, flow, which):
        rw = RigidWarp(srcs[0], depth, pose, K)
        fw = FlowWarp(srcs[0], flow)
        res = loss_glnet(t, rw.image, fw.image, rw.valid, fw.valid)
        if which == "flow":
            return res.value, fw.flow_grad(res.grad_flow)
        gd, gp = rw.param_grads(res.grad_depth_pose)
        return res.value, gd if which == "depth" else gp

    add("loss_glnet/flow", lambda x: glnet(d0, p0, x, "flow"), f0)
    add("loss_glnet/depth", lambda x: glnet(x, p0, f0, "depth"), d0)
    add("loss_glnet/pose", lambda x: glnet(d0, PoseSE3.from_vector(x), f0, "pose"), p0.as_vector())

    add("loss_geometry_consistency/depth", lambda x: _vg(loss_geometry_consistency(x, ds0, p0, K), "depth"), d0)
    add("loss_geometry_consistency/depth_s", lambda x: _vg(loss_geometry_consistency(d0, x, p0, K), "depth_s"), ds0)
    add(
        "loss_geometry_consistency/pose",
        lambda x: _vg(loss_geometry_consistency(d0, ds0, PoseSE3.from_vector(x), K), "pose"),
        p0.as_vector(),
    )

    fb_occ = np.zeros(d0.shape, bool)
    fb_occ[2, 2] = True
    add("loss_fwd_bwd/flow", lambda x: _vg(loss_fwd_bwd(x, fb0, fb_occ), "flow"), f0)
    add("loss_fwd_bwd/flow_bwd", lambda x: _vg(loss_fwd_bwd(f0, x, fb_occ), "flow_bwd"), fb0)

    add("loss_smoothness/depth", lambda x: _vg(loss_smoothness(x, t), "depth"), d0)
    add("loss_smoothness/flow", lambda x: _vg(loss_smoothness(x, t), "flow"), f0)

    add("loss_epipolar/flow", lambda x: _vg(loss_epipolar(x, p0, K), "flow"), f0)
    add("loss_epipolar/pose", lambda x: _vg(loss_epipolar(f0, PoseSE3.from_vector(x), K), "pose"), p0.as_vector())

    add("loss_depth_variance/depth", lambda x: _vg(loss_depth_variance(x), "depth"), d0)

    spec = NeighbourhoodSpec(0.15, 0.25, -0.05, 0.05, (-0.3, 0.3), (-0.3, 0.3))
    lam = LossWeights(0.1, 0.1, 0.1, 0.1, 0.1)

    # every parameter block at once: depth | poses | flows | backward flows
    sizes = [d0.size, 6 * len(inp.poses), sum(f.size for f in inp.flows), sum(f.size for f in inp.flows_bwd)]
    bounds = np.cumsum([0] + sizes)
    strata = [slice(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:])]
    packed = np.concatenate([d0.ravel(), _pose_blocks(inp.poses).ravel(),
                             np.ravel(inp.flows), np.ravel(inp.flows_bwd)])

    def final(x, mode):
        depth, pose, flow, flow_bwd = (x[s] for s in strata)
        b = FrameBundle(
            t, srcs, depth.reshape(d0.shape), _poses(pose.reshape(-1, 6)),
            list(flow.reshape((-1,) + f0.shape)), K, list(flow_bwd.reshape((-1,) + f0.shape)), inp.source_depths,
        )
        out = loss_final(b, lam, spec, scales=2, mode=mode)
        g = out.grads
        return out.total, np.concatenate([g["depth"].ravel(), g["pose"].ravel(), g["flow"].ravel(), g["flow_bwd"].ravel()])

    for mode in ("coopnet", "glnet", "baseline"):
        add(f"loss_final[{mode}]", lambda x, m=mode: final(x, m), packed, strata)

    upstream = np.random.default_rng(0).normal(size=d0.shape + (2,))

    def chained(depth, pose, which):
        flow, _ = rigid_flow(depth, pose, K)
        slots = chain_rigid_flow_grads(depth, pose, K, upstream)
        return float((flow * upstream).sum()), slots[which].grad

    add("chain_rigid_flow_grads/depth", lambda x: chained(x, p0, 0), d0)
    add("chain_rigid_flow_grads/pose", lambda x: chained(d0, PoseSE3.from_vector(x), 1), p0.as_vector())
    return cases


def _vg(term, key):
    return term.value, term.grads[key]


@dataclass
class SuiteRow:
    name: str
    max_rel_error: float
    checked: int
    rejected: int
    passed: bool


def run_gradient_suite(
    cfg: FDConfig = FDConfig(),
    n_inputs: int = 10,
    seed: int = 0,
    negative_control: bool = False,
    only: Optional[str] = None,
) -> list:
    """Check every case on ``n_inputs`` random inputs; one row per case."""
    rng = np.random.default_rng(seed)
    results: dict = {}
    for _ in range(n_inputs):
        inp = random_inputs(rng)
        for name, fn, point, strata in gradient_cases(inp, 2.0 if negative_control else 1.0):
            if only and only not in name:
                continue
            rep = grad_check(fn, point, cfg, rng=rng, strata=strata)
            acc = results.setdefault(name, [0.0, 0, 0, True])
            acc[0] = max(acc[0], rep.max_rel_error)
            acc[1] += rep.checked
            acc[2] += rep.rejected
            acc[3] = acc[3] and rep.passed
    return [SuiteRow(k, v[0], v[1], v[2], v[3]) for k, v in results.items()]
