"""The full training objective over a pyramid of scales.

Three photometric regimes are supported:

``coopnet``
    depth and pose train on the pixels inside the quantile neighbourhood
    (minimum reprojection over source views); the flow trains on every pixel
    with tail-weighted errors.
``glnet``
    per pixel, whichever warp reconstructs the target better takes that
    pixel's error and gradient.
``baseline``
    both predictors train on every pixel. ``coopnet`` without a
    neighbourhood snapshot (the burn-in) behaves the same way.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import EmptyMask
from .geometry import CameraIntrinsics, PoseSE3
from .losses import (
    FlowWarp,
    LossWeights,
    RigidWarp,
    _glnet_from_terms,
    _min_reprojection_term,
    loss_depth_variance,
    loss_epipolar,
    loss_fwd_bwd,
    loss_geometry_consistency,
    loss_smoothness,
)
from .quantile import DeltaMap, NeighbourhoodSpec, compute_delta_flow, rigid_mask, tail_weights
from .warp import (
    DEFAULT_ALPHA,
    DEFAULT_OCCLUSION_THRESHOLD,
    as_image,
    downsample2,
    downsample2_adjoint,
    occlusion_mask_fwd_bwd,
)

logger = logging.getLogger(__name__)

MODES = ("coopnet", "glnet", "baseline")
DEFAULT_SCALES = 4
AUX_TERMS = ("gc", "fwd_bwd", "s", "ep", "var")


@dataclass
class FrameBundle:
    """Everything the objective reads for one target frame.

    ``poses[s]`` and ``flows[s]`` map the target to source ``s``;
    ``flows_bwd[s]`` maps source ``s`` back to the target.
    """

    target: np.ndarray
    sources: Sequence[np.ndarray]
    depth: np.ndarray
    poses: Sequence[PoseSE3]
    flows: Sequence[np.ndarray]
    K: CameraIntrinsics
    flows_bwd: Optional[Sequence[np.ndarray]] = None
    source_depths: Optional[Sequence[np.ndarray]] = None


@dataclass
class LossBreakdown:
    terms: dict
    weighted: dict
    counts: dict
    per_scale: list
    total: float
    grads: dict
    diagnostics: dict = field(default_factory=dict)

    @property
    def photometric(self) -> float:
        return self.weighted["photo"]

    def row(self) -> dict:
        """Flat dict for CSV export."""
        out = {f"L_{k}": v for k, v in self.terms.items()}
        out.update({f"n_{k}": v for k, v in self.counts.items()})
        out["total"] = self.total
        return out


def _pool(x, times):
    for _ in range(times):
        x = downsample2(x)
    return x


def _unpool(g, shapes):
    for shape in reversed(shapes):
        g = downsample2_adjoint(g, shape)
    return g


def _pool_mask(mask, times):
    m = mask.astype(float)
    return _pool(m, times) >= 0.5


def _scale_shapes(shape, times):
    shapes = []
    for _ in range(times):
        shapes.append(shape)
        shape = ((shape[0] + 1) // 2, (shape[1] + 1) // 2) + tuple(shape[2:])
    return shapes


def _weighted_flow_term(target, warp: FlowWarp, weights, mask, alpha):
    n = int(np.count_nonzero(mask))
    if n == 0:
        return 0.0, np.zeros(warp.flow.shape), 0
    term = warp.photometric(target, alpha)
    upstream = np.where(mask, weights, 0.0) / n
    value = float((upstream * term.error).sum())
    grad_img = term.vjp(upstream)
    return value, warp.flow_grad(grad_img), n


def loss_final(
    bundle: FrameBundle,
    weights: LossWeights | None = None,
    spec: NeighbourhoodSpec | None = None,
    scales: int = DEFAULT_SCALES,
    mode: str = "coopnet",
    alpha: float = DEFAULT_ALPHA,
    use_flow_band: bool = True,
    occlusion_threshold: float = DEFAULT_OCCLUSION_THRESHOLD,
) -> LossBreakdown:
    """Evaluate the weighted objective and its gradients for one frame bundle."""
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    weights = weights or LossWeights()
    target = as_image(bundle.target)
    sources = [as_image(s) for s in bundle.sources]
    depth = np.asarray(bundle.depth, dtype=float)
    flows = [np.asarray(f, dtype=float) for f in bundle.flows]
    flows_bwd = None if bundle.flows_bwd is None else [np.asarray(f, dtype=float) for f in bundle.flows_bwd]
    poses = list(bundle.poses)
    K = bundle.K
    n_src = len(sources)
    shape = depth.shape

    grads = {
        "depth": np.zeros(shape),
        "pose": np.zeros((n_src, 6)),
        "flow": np.zeros((n_src,) + shape + (2,)),
    }
    if flows_bwd is not None:
        grads["flow_bwd"] = np.zeros((n_src,) + shape + (2,))
    if bundle.source_depths is not None:
        grads["source_depths"] = np.zeros((n_src,) + shape)

    # scale-0 statistics that drive the masks at every scale
    rw0 = [RigidWarp(s, depth, p, K) for s, p in zip(sources, poses)]
    fw0 = [FlowWarp(s, f) for s, f in zip(sources, flows)]
    phi_dp0 = [w.photometric(target, alpha).error for w in rw0]
    phi_fl0 = [w.photometric(target, alpha).error for w in fw0]
    deltas, delta_flows = [], []
    for r, f, pd, pf, flow in zip(rw0, fw0, phi_dp0, phi_fl0, flows):
        valid = r.valid & f.valid
        deltas.append(DeltaMap(np.where(valid, pd - pf, 0.0), valid))
        delta_flows.append(compute_delta_flow(r.flow, flow, validity=valid))
    if flows_bwd is not None:
        occ = [occlusion_mask_fwd_bwd(f, b, occlusion_threshold) for f, b in zip(flows, flows_bwd)]
        occ_bwd = [occlusion_mask_fwd_bwd(b, f, occlusion_threshold) for f, b in zip(flows, flows_bwd)]
    else:
        occ = [np.zeros(shape, bool) for _ in range(n_src)]
        occ_bwd = None

    masked = mode == "coopnet" and spec is not None
    if masked:
        rigid0 = [rigid_mask(d, df, spec, use_flow_band) & r.valid for d, df, r in zip(deltas, delta_flows, rw0)]
        wts0 = [np.where(d.validity, tail_weights(d, spec), 1.0) for d in deltas]
    else:
        rigid0 = [np.ones(shape, bool)] * n_src
        wts0 = [np.ones(shape)] * n_src

    terms = {"theta_alpha": 0.0, "delta": 0.0, "glnet": 0.0}
    counts = {"rigid": int(sum(m.sum() for m in rigid0)) if masked else 0, "fallback": 0}
    per_scale = []
    shapes = _scale_shapes(shape, scales - 1)
    pyramid_t = target
    pyramid_s = list(sources)
    for sigma in range(scales):
        if sigma > 0:
            pyramid_t = downsample2(pyramid_t)
            pyramid_s = [downsample2(s) for s in pyramid_s]
            d_sig = _pool(depth, sigma)
            f_sig = [_pool(f, sigma) / 2**sigma for f in flows]
            K_sig = K.downscaled(sigma)
            rws = [RigidWarp(s, d_sig, p, K_sig) for s, p in zip(pyramid_s, poses)]
            fws = [FlowWarp(s, f) for s, f in zip(pyramid_s, f_sig)]
            phi_dp = [w.photometric(pyramid_t, alpha).error for w in rws]
            rigid = [_pool_mask(m, sigma) for m in rigid0]
            wts = [_pool(w, sigma) for w in wts0]
            occ_s = [_pool_mask(o, sigma) for o in occ]
        else:
            rws, fws, phi_dp = rw0, fw0, phi_dp0
            rigid, wts, occ_s = rigid0, wts0, occ
        scale_total = 0.0
        g_depth_sig = np.zeros(pyramid_t.shape[:2])
        g_flow_sig = [np.zeros(pyramid_t.shape[:2] + (2,)) for _ in range(n_src)]

        if mode == "glnet":
            for s in range(n_src):
                res = _glnet_from_terms(
                    rws[s].photometric(pyramid_t, alpha), fws[s].photometric(pyramid_t, alpha), rws[s].valid, fws[s].valid
                )
                gd, gp = rws[s].param_grads(res.grad_depth_pose)
                g_depth_sig += gd
                grads["pose"][s] += gp
                g_flow_sig[s] += fws[s].flow_grad(res.grad_flow)
                terms["glnet"] += res.value
                scale_total += res.value
                if sigma == 0:
                    counts[f"dp_assigned_{s}"] = int((res.assignment == 0).sum())
        else:
            valid = np.stack([w.valid & m for w, m in zip(rws, rigid)])
            try:
                term = _min_reprojection_term(pyramid_t, rws, np.stack(phi_dp), valid, alpha)
            except EmptyMask:
                # degenerate neighbourhood: fall back to the unmasked loss
                logger.info("empty rigid mask at scale %d; unmasked fallback", sigma)
                counts["fallback"] += 1
                valid = np.stack([w.valid for w in rws])
                term = _min_reprojection_term(pyramid_t, rws, np.stack(phi_dp), valid, alpha)
            g_depth_sig += term.grads["depth"]
            grads["pose"] += term.grads["pose"]
            terms["theta_alpha"] += term.value
            scale_total += term.value
            for s in range(n_src):
                mask = fws[s].valid & ~occ_s[s]
                value, g, _ = _weighted_flow_term(pyramid_t, fws[s], wts[s], mask, alpha)
                g_flow_sig[s] += g
                terms["delta"] += value
                scale_total += value

        if flows_bwd is not None:
            fb_sig = [_pool(f, sigma) / 2**sigma for f in flows_bwd]
            for s in range(n_src):
                warp = FlowWarp(pyramid_t, fb_sig[s])
                mask = warp.valid & ~_pool_mask(occ_bwd[s], sigma)
                value, g, _ = _weighted_flow_term(pyramid_s[s], warp, np.ones(mask.shape), mask, alpha)
                grads["flow_bwd"][s] += _unpool(g / 2**sigma, _scale_shapes(shape + (2,), sigma))
                key = "glnet" if mode == "glnet" else "delta"
                terms[key] += value
                scale_total += value

        grads["depth"] += _unpool(g_depth_sig, _scale_shapes(shape, sigma))
        for s in range(n_src):
            grads["flow"][s] += _unpool(g_flow_sig[s] / 2**sigma, _scale_shapes(shape + (2,), sigma))
        per_scale.append(scale_total)

    photo = terms["glnet"] if mode == "glnet" else terms["theta_alpha"] + terms["delta"]

    aux = {k: 0.0 for k in AUX_TERMS}
    lam = weights.as_dict()

    def add(name, term, key_map):
        aux[name] += term.value
        for k, target_key in key_map.items():
            if k in term.grads:
                idx, arr = target_key
                if idx is None:
                    grads[arr] += lam[name] * term.grads[k]
                else:
                    grads[arr][idx] += lam[name] * term.grads[k]

    if bundle.source_depths is not None:
        for s in range(n_src):
            t = loss_geometry_consistency(depth, bundle.source_depths[s], poses[s], K)
            t.value /= n_src
            t.grads = {k: v / n_src for k, v in t.grads.items()}
            add("gc", t, {"depth": (None, "depth"), "depth_s": (s, "source_depths"), "pose": (s, "pose")})
    if flows_bwd is not None:
        for s in range(n_src):
            for fwd, bwd, o, swap in ((flows[s], flows_bwd[s], occ[s], False), (flows_bwd[s], flows[s], occ_bwd[s], True)):
                try:
                    t = loss_fwd_bwd(fwd, bwd, o)
                except EmptyMask:
                    continue
                t.value /= n_src
                t.grads = {k: v / n_src for k, v in t.grads.items()}
                if swap:
                    add("fwd_bwd", t, {"flow": (s, "flow_bwd"), "flow_bwd": (s, "flow")})
                else:
                    add("fwd_bwd", t, {"flow": (s, "flow"), "flow_bwd": (s, "flow_bwd")})

    add("s", loss_smoothness(depth, target), {"depth": (None, "depth")})
    for s in range(n_src):
        t = loss_smoothness(flows[s], target)
        t.value /= n_src
        t.grads = {k: v / n_src for k, v in t.grads.items()}
        add("s", t, {"flow": (s, "flow")})
        if flows_bwd is not None:
            t = loss_smoothness(flows_bwd[s], sources[s])
            t.value /= n_src
            t.grads = {k: v / n_src for k, v in t.grads.items()}
            add("s", t, {"flow": (s, "flow_bwd")})
        t = loss_epipolar(flows[s], poses[s], K)
        t.value /= n_src
        t.grads = {k: v / n_src for k, v in t.grads.items()}
        add("ep", t, {"flow": (s, "flow"), "pose": (s, "pose")})
    add("var", loss_depth_variance(depth), {"depth": (None, "depth")})

    all_terms = {"photo": photo, **terms, **aux}
    weighted = {"photo": photo}
    weighted.update({k: lam[k] * aux[k] for k in AUX_TERMS})
    total = float(sum(weighted.values()))
    counts["valid"] = int(sum(d.validity.sum() for d in deltas))
    counts["occluded"] = int(sum(o.sum() for o in occ))
    diagnostics = {
        "deltas": deltas,
        "delta_flows": delta_flows,
        "rigid": rigid0 if masked else None,
        "weights": wts0 if masked else None,
        "occlusion": occ,
        "rigid_flows": [r.flow for r in rw0],
        "phi_dp": phi_dp0,
        "phi_fl": phi_fl0,
    }
    return LossBreakdown(all_terms, weighted, counts, per_scale, total, grads, diagnostics)
