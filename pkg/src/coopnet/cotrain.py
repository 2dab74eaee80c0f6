"""Desk-scale co-training of directly parameterised predictors.

The "networks" are free parameters: a log-depth grid for the target frame,
one 6-vector pose per source view and one flow grid per direction and
source. They are fitted to a single rendered scene by first-order updates on
:func:`coopnet.objective.loss_final`, following the epoch protocol:

* quantile estimators are fed every step and frozen into a neighbourhood
  snapshot at each epoch boundary; the snapshot drives the masks of the
  following epoch;
* during the burn-in epochs every mode trains unmasked.

:func:`stability_sim` is a two-scalar model of the same competition used to
study the reciprocal probability ``theta_n = 1 / P(delta_n < 0)``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.stats import norm

from .errors import DivergedLoss, InsufficientObservations
from .geometry import PoseSE3
from .losses import LossWeights
from .objective import MODES, FrameBundle, LossBreakdown, loss_final
from .quantile import (
    DEFAULT_ETA,
    DEFAULT_ZETA,
    NeighbourhoodSpec,
    QuantileTracker,
    rigid_mask,
)
from .synth import SceneTruth

logger = logging.getLogger(__name__)


@dataclass
class ToyPredictors:
    """Free parameters standing in for the depth, pose and flow networks."""

    log_depth: np.ndarray
    poses: np.ndarray
    flows: np.ndarray
    flows_bwd: np.ndarray

    @property
    def depth(self) -> np.ndarray:
        return np.exp(self.log_depth)

    @property
    def pose_list(self) -> list:
        return [PoseSE3.from_vector(p) for p in self.poses]

    def copy(self) -> "ToyPredictors":
        return ToyPredictors(self.log_depth.copy(), self.poses.copy(), self.flows.copy(), self.flows_bwd.copy())

    @classmethod
    def initial(
        cls, height: int, width: int, sources: int = 2, depth: float = 10.0, jitter: float = 0.05, rng=None
    ) -> "ToyPredictors":
        """Near-constant depth, identity poses, zero flows.

        The log-depth gets a little seeded noise: a perfectly flat map makes
        the inverse-variance term blow up on the first step.
        """
        rng = np.random.default_rng(rng)
        return cls(
            math.log(depth) + jitter * rng.standard_normal((height, width)),
            np.zeros((sources, 6)),
            np.zeros((sources, height, width, 2)),
            np.zeros((sources, height, width, 2)),
        )

    @classmethod
    def from_truth(cls, truth: SceneTruth) -> "ToyPredictors":
        return cls(
            np.log(truth.depth),
            np.stack([p.as_vector() for p in truth.poses]),
            np.stack(truth.flows),
            np.stack(truth.flows_bwd),
        )


@dataclass
class TrainConfig:
    """Optimisation settings.

    The rates are step sizes of :class:`BlockAdam`: roughly the RMS
    per-step change of a log-depth, a pose coordinate, or a flow component
    in pixels. ``lr_pose`` drives the translation; ``lr_rotation``
    defaults to a tenth of it, which moves pixels about as fast as the
    translation rate does at the scene depths used here.
    """

    steps: int = 400
    lr_depth: float = 1e-2
    lr_pose: float = 5e-3
    lr_rotation: Optional[float] = None
    lr_flow: float = 0.1
    mode: str = "coopnet"
    burn_in_epochs: int = 5
    epoch_len: int = 20
    eta: float = DEFAULT_ETA
    zeta: float = DEFAULT_ZETA
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    scales: int = 4
    stride: int = 8
    use_flow_band: bool = True
    init_depth: float = 10.0
    smoothing: tuple = (1.0, 2.0, 4.0, 8.0)

    def __post_init__(self):
        if self.steps < 1 or self.epoch_len < 1:
            raise ValueError("steps and epoch_len must be >= 1")
        if min(self.lr_depth, self.lr_pose, self.lr_flow, self.rotation_rate) <= 0:
            raise ValueError("learning rates must be positive")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.burn_in_epochs < 0:
            raise ValueError("burn_in_epochs must be >= 0")
        if not (0 < self.eta < 0.5 and 0 < self.zeta < 0.5):
            raise ValueError("eta and zeta must lie in (0, 0.5)")

    @property
    def rotation_rate(self) -> float:
        return self.lr_pose / 10 if self.lr_rotation is None else self.lr_rotation

    def pose_rates(self) -> np.ndarray:
        return np.array([self.rotation_rate] * 3 + [self.lr_pose] * 3)


@dataclass
class StabilityState:
    """Trace of ``theta_n = 1 / P(delta_n < 0)``; nan marks an undefined step."""

    theta: list = field(default_factory=list)
    mu: list = field(default_factory=list)

    def record(self, prob_negative: float, mu: float) -> None:
        self.theta.append(1.0 / prob_negative if prob_negative > 0 else math.nan)
        self.mu.append(mu)

    @property
    def step(self) -> int:
        return len(self.theta)


def spatial_precondition(grad, sigmas) -> np.ndarray:
    """Add Gaussian-blurred copies of a gridded gradient to itself.

    ``grad`` is (H, W), or (S, H, W[, 2]) with the image on axes 1 and 2.
    The operator is symmetric positive definite, so the result is still a
    descent direction. It lets a pixel's error inform its neighbours, the
    way a convolutional network shares what it learns across the image,
    which free per-pixel parameters otherwise cannot.
    """
    g = np.asarray(grad, dtype=float)
    axes = (0, 1) if g.ndim == 2 else (1, 2)
    out = g.copy()
    for s in sigmas:
        # the s**2 weight gives each blur a similar peak response to an impulse
        # half-sample reflection keeps the blur a symmetric matrix; "nearest" does not
        out += s * s * gaussian_filter(g, [s if a in axes else 0.0 for a in range(g.ndim)], mode="reflect")
    return out


class BlockAdam:
    """Adam with one second-moment estimate per parameter block.

    Per-element Adam gives every pixel a unit-size step however weak its
    gradient, so pixels the photometric loss cannot see (textureless
    patches, the focus of expansion) random-walk. Sharing the normaliser
    across a block keeps the relative step sizes of plain gradient descent
    while making the rate of each block scale-free.

    Blocks named in ``elementwise`` keep per-element moments instead. The
    pose needs this: a unit of rotation moves pixels far more than a unit
    of translation, and with a shared normaliser rotation soaks up
    sideways motion before translation can.
    """

    def __init__(self, rates: dict, beta1=0.9, beta2=0.999, eps=1e-12, max_step=5.0, elementwise=()):
        self.rates = rates
        self.elementwise = set(elementwise)
        self.b1, self.b2, self.eps = beta1, beta2, eps
        self.max_step = max_step
        self.m: dict = {}
        self.v: dict = {}
        self.t = 0

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        for k, g in grads.items():
            m = self.m.setdefault(k, np.zeros_like(g))
            m *= self.b1
            m += (1 - self.b1) * g
            sq = g * g if k in self.elementwise else float(np.mean(g * g))
            self.v[k] = self.b2 * self.v.get(k, 0.0) + (1 - self.b2) * sq
            m_hat = m / (1 - self.b1**self.t)
            v_hat = self.v[k] / (1 - self.b2**self.t)
            step = np.clip(m_hat / (np.sqrt(v_hat) + self.eps), -self.max_step, self.max_step)
            params[k] -= self.rates[k] * step


@dataclass
class TrainResult:
    predictors: ToyPredictors
    trace: list
    stability: StabilityState
    spec: Optional[NeighbourhoodSpec]
    final: LossBreakdown


def _bundle(truth: SceneTruth, pred: ToyPredictors) -> FrameBundle:
    return FrameBundle(
        truth.target, list(truth.sources), pred.depth, pred.pose_list, list(pred.flows), truth.K, list(pred.flows_bwd)
    )


def _trace_row(step, epoch, phase, out: LossBreakdown, theta, mu, spec, moving, masks) -> dict:
    row = {"step": step, "epoch": epoch, "phase": phase, "total": out.total}
    row.update({f"L_{k}": v for k, v in out.terms.items()})
    row["theta"] = theta
    row["mu"] = mu
    row["q_minus_eta"] = spec.q_minus_eta if spec else math.nan
    row["q_eta"] = spec.q_eta if spec else math.nan
    if masks is not None:
        in_v = np.stack(masks)
        row["n_rigid"] = int(in_v.sum())
        row["moving_in_V"] = int((in_v & moving).sum())
    else:
        row["n_rigid"] = -1
        row["moving_in_V"] = -1
    row["n_valid"] = out.counts.get("valid", 0)
    return row


TRACE_FIELDS = (
    "step", "epoch", "phase", "total", "L_photo", "L_theta_alpha", "L_delta", "L_glnet",
    "L_gc", "L_fwd_bwd", "L_s", "L_ep", "L_var", "theta", "mu", "q_minus_eta", "q_eta",
    "n_rigid", "moving_in_V", "n_valid",
)


def train(truth: SceneTruth, cfg: TrainConfig = TrainConfig(), init: Optional[ToyPredictors] = None) -> TrainResult:
    """Fit toy predictors to one scene under the configured loss mode.

    Raises:
        DivergedLoss: the loss or a gradient became non-finite; carries the
            trace so far.
    """
    h, w = truth.depth.shape
    n_src = len(truth.sources)
    if init is not None:
        pred = init.copy()
    else:
        pred = ToyPredictors.initial(h, w, n_src, cfg.init_depth, rng=cfg.seed)
    params = {"log_depth": pred.log_depth, "poses": pred.poses, "flows": pred.flows, "flows_bwd": pred.flows_bwd}
    opt = BlockAdam(
        {"log_depth": cfg.lr_depth, "poses": cfg.pose_rates(), "flows": cfg.lr_flow, "flows_bwd": cfg.lr_flow},
        elementwise=("poses",),
    )
    tracker = QuantileTracker(cfg.eta, cfg.zeta)
    stability = StabilityState()
    spec: Optional[NeighbourhoodSpec] = None
    trace: list = []
    out = None
    for step in range(cfg.steps):
        epoch = step // cfg.epoch_len
        burn = epoch < cfg.burn_in_epochs
        mode = "baseline" if burn else cfg.mode
        active = spec if (mode == "coopnet") else None
        out = loss_final(_bundle(truth, pred), cfg.weights, active, cfg.scales, mode, use_flow_band=cfg.use_flow_band)
        grads = out.grads
        if not np.isfinite(out.total) or not all(np.all(np.isfinite(g)) for g in grads.values()):
            raise DivergedLoss(f"non-finite loss at step {step}", trace)

        for d, df in zip(out.diagnostics["deltas"], out.diagnostics["delta_flows"]):
            tracker.observe(d, df, cfg.stride)
        valid_delta = np.concatenate([d.values[d.validity] for d in out.diagnostics["deltas"]])
        p_neg = float((valid_delta < 0).mean()) if valid_delta.size else 0.0
        stability.record(p_neg, float(valid_delta.mean()) if valid_delta.size else math.nan)
        masks = out.diagnostics["rigid"]
        trace.append(
            _trace_row(step, epoch, "burn_in" if burn else mode, out, stability.theta[-1], stability.mu[-1], active,
                       truth.moving, masks)
        )

        opt.step(
            params,
            {
                "log_depth": spatial_precondition(grads["depth"] * pred.depth, cfg.smoothing),
                "poses": grads["pose"],
                "flows": spatial_precondition(grads["flow"], cfg.smoothing),
                "flows_bwd": spatial_precondition(grads["flow_bwd"], cfg.smoothing),
            },
        )
        if (step + 1) % cfg.epoch_len == 0:
            try:
                spec = tracker.snapshot()
            except InsufficientObservations:
                logger.warning("epoch %d: too few observations for a snapshot", epoch)
            tracker.reset()
    final = loss_final(_bundle(truth, pred), cfg.weights, spec, cfg.scales, "coopnet", use_flow_band=cfg.use_flow_band)
    return TrainResult(pred, trace, stability, spec, final)


# ------------------------------------------------------------------- analysis


@dataclass
class DeltaAnalysis:
    """Per-source delta maps of a predictor set, with the truth masks."""

    deltas: list
    delta_flows: list
    phi_dp: list
    moving: np.ndarray
    valid: list


def analyse(truth: SceneTruth, pred: ToyPredictors) -> DeltaAnalysis:
    """Delta, normalised flow difference and depth-pose error for each source."""
    out = loss_final(_bundle(truth, pred), LossWeights(), None, 1, "baseline")
    d = out.diagnostics
    return DeltaAnalysis(d["deltas"], d["delta_flows"], d["phi_dp"], truth.moving, [x.validity for x in d["deltas"]])


def neighbourhood_of(analysis: DeltaAnalysis, eta=DEFAULT_ETA, zeta=DEFAULT_ZETA) -> NeighbourhoodSpec:
    """Exact-quantile neighbourhood over all sources' valid pixels."""
    valid = [v for v in analysis.valid]
    delta = np.concatenate([d.values[v] for d, v in zip(analysis.deltas, valid)])
    fx = np.concatenate([f.x[v] for f, v in zip(analysis.delta_flows, valid)])
    fy = np.concatenate([f.y[v] for f, v in zip(analysis.delta_flows, valid)])

    def band(x, half):
        lo, hi = np.quantile(x, [0.5 - half, 0.5 + half], method="inverted_cdf")
        return float(lo), float(hi)

    lo, hi = band(delta, eta)
    return NeighbourhoodSpec(eta, zeta, lo, hi, band(fx, zeta), band(fy, zeta))


def rigid_masks(analysis: DeltaAnalysis, spec: NeighbourhoodSpec, use_flow: bool = True) -> list:
    return [
        rigid_mask(d, f, spec, use_flow) & v for d, f, v in zip(analysis.deltas, analysis.delta_flows, analysis.valid)
    ]


def moving_exclusion(analysis: DeltaAnalysis, spec: NeighbourhoodSpec, use_flow: bool = True) -> float:
    """Fraction of moving pixels that no source admits into the rigid set."""
    masks = rigid_masks(analysis, spec, use_flow)
    admitted = np.any(np.stack(masks), axis=0)
    moving = analysis.moving
    if not moving.any():
        return 1.0
    return float((moving & ~admitted).sum() / moving.sum())


def moving_leakage(analysis: DeltaAnalysis, spec: NeighbourhoodSpec, use_flow: bool = True) -> int:
    """Number of (pixel, source) pairs that are moving yet admitted."""
    return int(sum((m & analysis.moving).sum() for m in rigid_masks(analysis, spec, use_flow)))


def expected_errors(analysis: DeltaAnalysis, spec: NeighbourhoodSpec) -> tuple:
    """Mean depth-pose error inside the delta band and where delta < 0.

    Pixels of all sources are pooled. Returns ``(inside_band, negative)``.
    """
    band, neg = [], []
    for d, phi, v in zip(analysis.deltas, analysis.phi_dp, analysis.valid):
        inside = v & (d.values >= spec.q_minus_eta) & (d.values <= spec.q_eta)
        band.append(phi[inside])
        neg.append(phi[v & (d.values < 0)])
    band = np.concatenate(band)
    neg = np.concatenate(neg)
    return (float(band.mean()) if band.size else math.nan, float(neg.mean()) if neg.size else math.nan)


# ------------------------------------------------------------------ evaluation


def median_scale(pred_depth, true_depth, mask) -> float:
    return float(np.median(true_depth[mask]) / np.median(pred_depth[mask]))


def evaluate(pred: ToyPredictors, truth: SceneTruth, median_scaling: bool = False) -> dict:
    """Depth errors on static pixels, flow end-point error and pose errors.

    With ``median_scaling`` the predicted depth (and pose translation) is
    first multiplied by ``median(true) / median(pred)`` over static pixels,
    removing the global scale that monocular training cannot observe.
    """
    static = ~truth.moving
    if not static.any():
        static = np.ones_like(truth.moving)
    d_true = truth.depth[static]
    scale = median_scale(pred.depth, truth.depth, static) if median_scaling else 1.0
    d_pred = pred.depth[static] * scale
    abs_rel = float(np.mean(np.abs(d_pred - d_true) / d_true))
    sq_rel = float(np.mean((d_pred - d_true) ** 2 / d_true))
    rmse = float(np.sqrt(np.mean((d_pred - d_true) ** 2)))
    epe = float(np.mean([np.linalg.norm(f - t, axis=-1).mean() for f, t in zip(pred.flows, truth.flows)]))
    t_err, r_err = [], []
    for p, t in zip(pred.pose_list, truth.poses):
        t_err.append(float(np.linalg.norm(p.translation * scale - t.translation)))
        rel = t.R.T @ p.R
        r_err.append(float(np.arccos(np.clip((np.trace(rel) - 1) / 2, -1.0, 1.0))))
    return {
        "abs_rel": abs_rel,
        "sq_rel": sq_rel,
        "rmse": rmse,
        "epe": epe,
        "pose_t_err": float(np.mean(t_err)),
        "pose_r_err": float(np.mean(r_err)),
        "scale": scale,
    }


# ------------------------------------------------------------------ stability


@dataclass(frozen=True)
class StabilityParams:
    """Two error processes decaying toward ``floor``.

    ``delta`` is modelled as normal with mean ``e_dp - e_fl`` and spread
    ``spread0 + spread_gain * mean error``.
    """

    rate: float = 1e-3
    init_error: float = 1.0
    floor: float = 0.1
    spread0: float = 0.05
    spread_gain: float = 0.5


def stability_sim(advantage: float, mode: str = "glnet", steps: int = 10_000, params: StabilityParams = StabilityParams()):
    """Scalar co-training model; returns the ``StabilityState`` trace.

    Each learner's error shrinks at a rate proportional to the pixel mass it
    is trained on. Under ``glnet`` that mass is ``P(delta < 0)`` for depth
    and pose and the rest for the flow. Under ``coopnet`` both train on a
    fixed share (the neighbourhood and all pixels) with normalised losses,
    so their masses do not depend on who is ahead. The flow's rate is
    multiplied by ``advantage``.
    """
    if advantage < 1:
        raise ValueError("advantage must be >= 1")
    if mode not in ("glnet", "coopnet"):
        raise ValueError("mode must be glnet or coopnet")
    e_dp = e_fl = params.init_error
    state = StabilityState()
    for _ in range(steps):
        mu = e_dp - e_fl
        sigma = params.spread0 + params.spread_gain * 0.5 * (e_dp + e_fl)
        p_neg = float(norm.cdf(-mu / sigma))
        state.record(p_neg, mu)
        share_dp, share_fl = (p_neg, 1.0 - p_neg) if mode == "glnet" else (1.0, 1.0)
        e_dp -= params.rate * share_dp * (e_dp - params.floor)
        e_fl -= params.rate * advantage * share_fl * (e_fl - params.floor)
    return state
