"""Disagreement statistics, streaming quantiles and the rigid-pixel split.

``delta = phi(target, depth-pose warp) - phi(target, flow warp)`` measures, per
pixel, how much better the flow explains the target than depth and pose do.
Pixels whose delta (and normalised flow difference) lie in a central quantile
band are treated as rigid; the rest are the tails.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import DegenerateSplit, DimensionMismatch, InsufficientObservations, NonFiniteSample
from .warp import photometric_error, DEFAULT_ALPHA

logger = logging.getLogger(__name__)

DEFAULT_ETA = 0.15
DEFAULT_ZETA = 0.25
DELTA_FLOW_EPS = 1e-6


@dataclass
class DeltaMap:
    values: np.ndarray
    validity: np.ndarray


@dataclass
class DeltaFlowMap:
    x: np.ndarray
    y: np.ndarray
    validity: np.ndarray


def compute_delta(target, warped_depth_pose, warped_flow, validity=None, alpha: float = DEFAULT_ALPHA) -> DeltaMap:
    phi_dp = photometric_error(target, warped_depth_pose, alpha)
    phi_fl = photometric_error(target, warped_flow, alpha)
    if validity is None:
        validity = np.ones(phi_dp.shape, dtype=bool)
    validity = np.asarray(validity, dtype=bool)
    if validity.shape != phi_dp.shape:
        raise DimensionMismatch(f"validity {validity.shape} vs image {phi_dp.shape}")
    values = np.where(validity, phi_dp - phi_fl, 0.0)
    return DeltaMap(values, validity.copy())


def compute_delta_flow(flow_rigid, flow_optical, epsilon: float = DELTA_FLOW_EPS, validity=None) -> DeltaFlowMap:
    """Flow difference normalised by the sum of both flow magnitudes."""
    flow_rigid = np.asarray(flow_rigid, dtype=float)
    flow_optical = np.asarray(flow_optical, dtype=float)
    if flow_rigid.shape != flow_optical.shape:
        raise DimensionMismatch(f"{flow_rigid.shape} != {flow_optical.shape}")
    norm = np.linalg.norm(flow_rigid, axis=-1) + np.linalg.norm(flow_optical, axis=-1) + epsilon
    diff = (flow_rigid - flow_optical) / norm[..., None]
    if validity is None:
        validity = np.ones(norm.shape, dtype=bool)
    return DeltaFlowMap(diff[..., 0], diff[..., 1], np.asarray(validity, dtype=bool).copy())


class P2Quantile:
    """Constant-memory estimate of one quantile of a scalar stream (P-square).

    Five markers track the minimum, the target quantile, two intermediate
    quantiles and the maximum. Interior markers move by piecewise-parabolic
    interpolation, falling back to linear interpolation whenever the
    parabolic step would break marker ordering.
    """

    def __init__(self, prob: float):
        if not 0.0 < prob < 1.0:
            raise ValueError("prob must be in (0, 1)")
        self.prob = prob
        self.count = 0
        self.heights: list = []
        self.positions = [1, 2, 3, 4, 5]
        self.desired = [1.0, 1.0 + 2 * prob, 1.0 + 4 * prob, 3.0 + 2 * prob, 5.0]
        self.increments = [0.0, prob / 2, prob, (1 + prob) / 2, 1.0]

    def update(self, sample: float) -> "P2Quantile":
        x = float(sample)
        if not math.isfinite(x):
            raise NonFiniteSample(f"non-finite sample {sample!r}")
        self.count += 1
        q = self.heights
        if self.count <= 5:
            q.append(x)
            if self.count == 5:
                q.sort()
            return self

        n = self.positions
        if x < q[0]:
            q[0] = x
            k = 0
        elif x >= q[4]:
            q[4] = x
            k = 3
        else:
            k = 0
            while x >= q[k + 1]:
                k += 1
        for i in range(k + 1, 5):
            n[i] += 1
        nd = self.desired
        for i in range(5):
            nd[i] += self.increments[i]

        for i in (1, 2, 3):
            d = nd[i] - n[i]
            if (d >= 1 and n[i + 1] - n[i] > 1) or (d <= -1 and n[i - 1] - n[i] < -1):
                s = 1 if d > 0 else -1
                qp = q[i] + s / (n[i + 1] - n[i - 1]) * (
                    (n[i] - n[i - 1] + s) * (q[i + 1] - q[i]) / (n[i + 1] - n[i])
                    + (n[i + 1] - n[i] - s) * (q[i] - q[i - 1]) / (n[i] - n[i - 1])
                )
                if q[i - 1] < qp < q[i + 1]:
                    q[i] = qp
                else:
                    q[i] = q[i] + s * (q[i + s] - q[i]) / (n[i + s] - n[i])
                n[i] += s
        return self

    def extend(self, samples: Iterable[float]) -> "P2Quantile":
        update = self.update
        for s in samples:
            update(s)
        return self

    @property
    def estimate(self) -> float:
        if self.count == 0:
            return math.nan
        if self.count < 5:
            # exact order statistic of the buffered samples
            return float(np.quantile(self.heights, self.prob, method="inverted_cdf"))
        return self.heights[2]

    def __repr__(self):
        return f"P2Quantile(prob={self.prob}, count={self.count}, estimate={self.estimate:.6g})"


def quantile_update(est: P2Quantile, sample: float) -> P2Quantile:
    return est.update(sample)


@dataclass(frozen=True)
class NeighbourhoodSpec:
    """Quantile bounds frozen at the end of an epoch.

    ``q_minus_eta``/``q_eta`` bound the central band of delta;
    ``flow_x``/``flow_y`` hold the (low, high) bounds for each component of
    the normalised flow difference.
    """

    eta: float = DEFAULT_ETA
    zeta: float = DEFAULT_ZETA
    q_minus_eta: float = -math.inf
    q_eta: float = math.inf
    flow_x: tuple = (-math.inf, math.inf)
    flow_y: tuple = (-math.inf, math.inf)

    def __post_init__(self):
        if self.q_minus_eta > self.q_eta:
            raise ValueError("q_minus_eta must not exceed q_eta")

    @classmethod
    def unbounded(cls, eta=DEFAULT_ETA, zeta=DEFAULT_ZETA) -> "NeighbourhoodSpec":
        return cls(eta, zeta)

    def contains(self, other: "NeighbourhoodSpec") -> bool:
        def inside(a, b):
            return b[0] <= a[0] and a[1] <= b[1]

        return (
            inside((other.q_minus_eta, other.q_eta), (self.q_minus_eta, self.q_eta))
            and inside(other.flow_x, self.flow_x)
            and inside(other.flow_y, self.flow_y)
        )


@dataclass
class QuantileTracker:
    """The six P-square estimators behind one neighbourhood snapshot."""

    eta: float = DEFAULT_ETA
    zeta: float = DEFAULT_ZETA
    delta_low: P2Quantile = field(init=False)
    delta_high: P2Quantile = field(init=False)
    flow_low: list = field(init=False)
    flow_high: list = field(init=False)

    def __post_init__(self):
        self.reset()

    def reset(self):
        self.delta_low = P2Quantile(0.5 - self.eta)
        self.delta_high = P2Quantile(0.5 + self.eta)
        self.flow_low = [P2Quantile(0.5 - self.zeta), P2Quantile(0.5 - self.zeta)]
        self.flow_high = [P2Quantile(0.5 + self.zeta), P2Quantile(0.5 + self.zeta)]

    def observe(self, delta: DeltaMap, delta_flow: DeltaFlowMap | None = None, stride: int = 4):
        """Feed every ``stride``-th valid pixel in row-major order."""
        valid = delta.validity
        if delta_flow is not None:
            valid = valid & delta_flow.validity
        samples = delta.values[valid][::stride].tolist()
        self.delta_low.extend(samples)
        self.delta_high.extend(samples)
        if delta_flow is not None:
            for c, plane in enumerate((delta_flow.x, delta_flow.y)):
                s = plane[valid][::stride].tolist()
                self.flow_low[c].extend(s)
                self.flow_high[c].extend(s)

    @property
    def count(self) -> int:
        return self.delta_low.count

    def snapshot(self) -> NeighbourhoodSpec:
        return build_neighbourhood(
            (self.delta_low, self.delta_high),
            (self.flow_low[0], self.flow_high[0], self.flow_low[1], self.flow_high[1])
            if self.flow_low[0].count
            else None,
            self.eta,
            self.zeta,
        )


def build_neighbourhood(
    delta_est_pair: Sequence[P2Quantile],
    flow_est_quad: Sequence[P2Quantile] | None,
    eta: float = DEFAULT_ETA,
    zeta: float = DEFAULT_ZETA,
) -> NeighbourhoodSpec:
    """Freeze the current estimates into a spec for the next epoch.

    Args:
        delta_est_pair: estimators for the (0.5 - eta) and (0.5 + eta) quantiles.
        flow_est_quad: (x low, x high, y low, y high) estimators, or None to
            leave the flow band unbounded.
    """
    ests = list(delta_est_pair) + list(flow_est_quad or [])
    for e in ests:
        if e.count < 5:
            raise InsufficientObservations(f"estimator for p={e.prob} has {e.count} < 5 observations")
    lo, hi = (e.estimate for e in delta_est_pair)
    fx = fy = (-math.inf, math.inf)
    if flow_est_quad is not None:
        xl, xh, yl, yh = (e.estimate for e in flow_est_quad)
        fx, fy = (xl, max(xl, xh)), (yl, max(yl, yh))
    return NeighbourhoodSpec(eta, zeta, lo, max(lo, hi), fx, fy)


def rigid_mask(delta: DeltaMap, delta_flow: DeltaFlowMap | None, spec: NeighbourhoodSpec, use_flow: bool = True):
    """Pixels inside the delta band and (optionally) both flow bands."""
    v = delta.values
    mask = delta.validity & (v >= spec.q_minus_eta) & (v <= spec.q_eta)
    if use_flow and delta_flow is not None:
        if delta_flow.x.shape != v.shape:
            raise DimensionMismatch(f"{delta_flow.x.shape} != {v.shape}")
        mask &= delta_flow.validity
        mask &= (delta_flow.x >= spec.flow_x[0]) & (delta_flow.x <= spec.flow_x[1])
        mask &= (delta_flow.y >= spec.flow_y[0]) & (delta_flow.y <= spec.flow_y[1])
    return mask


def tail_weights(delta: DeltaMap, spec: NeighbourhoodSpec, strict: bool = False) -> np.ndarray:
    """Per-pixel weights that give the tails and the body equal total mass.

    Tail pixels get ``|P| / |tails|``, body pixels ``|P| / |body|``; invalid
    pixels get 0. If either set is empty the weights fall back to 1 on valid
    pixels (or :class:`DegenerateSplit` is raised when ``strict``).
    """
    valid = delta.validity
    v = delta.values
    tail = valid & ((v < spec.q_minus_eta) | (v > spec.q_eta))
    body = valid & ~tail
    n_all, n_tail, n_body = int(valid.sum()), int(tail.sum()), int(body.sum())
    if n_tail == 0 or n_body == 0:
        if strict:
            raise DegenerateSplit(f"tail={n_tail}, body={n_body}")
        logger.info("degenerate tail split (tail=%d, body=%d); uniform weights", n_tail, n_body)
        return valid.astype(float)
    w = np.zeros(v.shape)
    w[tail] = n_all / n_tail
    w[body] = n_all / n_body
    return w


DELTA_CSV_FIELDS = ("step", "q_minus_eta", "q_eta", "mean", "std", "frac_in_V")


def delta_stats_row(step: int, delta: DeltaMap, spec: NeighbourhoodSpec) -> dict:
    vals = delta.values[delta.validity]
    inside = (vals >= spec.q_minus_eta) & (vals <= spec.q_eta)
    return {
        "step": step,
        "q_minus_eta": spec.q_minus_eta,
        "q_eta": spec.q_eta,
        "mean": float(vals.mean()) if vals.size else math.nan,
        "std": float(vals.std()) if vals.size else math.nan,
        "frac_in_V": float(inside.mean()) if vals.size else math.nan,
    }


def write_delta_csv(path, rows: Iterable[dict]):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=DELTA_CSV_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in DELTA_CSV_FIELDS})


def delta_histogram(delta: DeltaMap, moving=None, bins: int = 64, value_range=None):
    """Histogram of valid delta values, optionally split by a moving mask.

    Returns:
        ``(edges, counts_all, counts_rigid, counts_moving)``; the split counts
        are None without a mask.
    """
    vals = delta.values[delta.validity]
    if value_range is None:
        value_range = (float(vals.min()), float(vals.max())) if vals.size else (0.0, 1.0)
        if value_range[0] == value_range[1]:
            value_range = (value_range[0] - 0.5, value_range[1] + 0.5)
    counts, edges = np.histogram(vals, bins=bins, range=value_range)
    if moving is None:
        return edges, counts, None, None
    mv = np.asarray(moving, dtype=bool)[delta.validity]
    c_rigid, _ = np.histogram(vals[~mv], bins=edges)
    c_moving, _ = np.histogram(vals[mv], bins=edges)
    return edges, counts, c_rigid, c_moving


BENCH_PROBS = (0.35, 0.5, 0.65, 0.75)
BENCH_DISTRIBUTIONS = ("uniform", "normal", "trimodal")
BENCH_FIELDS = ("distribution", "prob", "samples", "p2", "exact", "abs_error", "iqr", "rel_to_iqr")


def sample_distribution(name: str, n: int, rng) -> np.ndarray:
    """Benchmark streams; ``trimodal`` mimics delta on a scene with motion.

    A narrow central mode (rigid pixels, both warps agree) sits between a
    wider negative mode and a wider positive mode.
    """
    rng = np.random.default_rng(rng)
    if name == "uniform":
        return rng.uniform(-1.0, 1.0, n)
    if name == "normal":
        return rng.standard_normal(n)
    if name == "trimodal":
        comp = rng.choice(3, size=n, p=[0.15, 0.7, 0.15])
        mean = np.array([-0.3, 0.0, 0.4])[comp]
        std = np.array([0.08, 0.03, 0.1])[comp]
        return mean + std * rng.standard_normal(n)
    raise ValueError(f"unknown distribution {name!r}")


def quantile_benchmark(n: int = 100_000, seed: int = 0, probs=BENCH_PROBS, distributions=BENCH_DISTRIBUTIONS) -> list:
    """P-square estimates against exact order statistics; one row per (distribution, prob)."""
    if n < 5:
        raise ValueError("need at least 5 samples")
    rows = []
    for i, name in enumerate(distributions):
        x = sample_distribution(name, n, np.random.default_rng([seed, i]))
        q25, q75 = np.quantile(x, [0.25, 0.75], method="inverted_cdf")
        iqr = float(q75 - q25)
        for p in probs:
            est = P2Quantile(p).extend(x.tolist()).estimate
            exact = float(np.quantile(x, p, method="inverted_cdf"))
            err = abs(est - exact)
            rows.append(
                {
                    "distribution": name,
                    "prob": p,
                    "samples": n,
                    "p2": est,
                    "exact": exact,
                    "abs_error": err,
                    "iqr": iqr,
                    "rel_to_iqr": err / iqr if iqr > 0 else math.nan,
                }
            )
    return rows
