"""Acceptance suite: one test and one printed pass/fail line per criterion.

Training runs are shared between criteria through module fixtures. Seeds
are fixed up front and never tuned to the outcome.
"""

import time

import numpy as np
import pytest

from acceptance_log import record
from coopnet.cotrain import (
    TrainConfig,
    analyse,
    evaluate,
    expected_errors,
    moving_exclusion,
    moving_leakage,
    neighbourhood_of,
    stability_sim,
    train,
)
from coopnet.geometry import CameraIntrinsics, PoseSE3, backproject, pixel_grid, project, rigid_flow
from coopnet.grad import FDConfig, run_gradient_suite, smooth_image
from coopnet.losses import LossWeights
from coopnet.objective import AUX_TERMS, FrameBundle, loss_final
from coopnet.quantile import (
    BENCH_DISTRIBUTIONS,
    DeltaMap,
    NeighbourhoodSpec,
    QuantileTracker,
    quantile_benchmark,
    sample_distribution,
    tail_weights,
)
from coopnet.synth import render, scene_batch
from coopnet.warp import photometric_error, ssim, warp_by_depth_pose, warp_by_flow

pytestmark = pytest.mark.acceptance

ETA = 0.15
# 100 smaller scenes for the distribution criteria, 20 full-size pairs for the comparison
SHAPE_SEED, SHAPE_SCENES, SHAPE_SIZE = 500, 100, (24, 32)
SHAPE_CFG = dict(steps=200, scales=3)
PAIR_SEED, PAIR_SCENES = 2024, 20
HOMOG_SEED, HOMOG_SCENES = 77, 10


def _pooled(an):
    delta = np.concatenate([d.values[v] for d, v in zip(an.deltas, an.valid)])
    moving = np.concatenate([an.moving[v] for v in an.valid])
    return delta, moving


@pytest.fixture(scope="module")
def shape_runs():
    out = []
    for spec in scene_batch(SHAPE_SEED, SHAPE_SCENES, 1.0, height=SHAPE_SIZE[0], width=SHAPE_SIZE[1]):
        truth = render(spec)
        res = train(truth, TrainConfig(mode="coopnet", **SHAPE_CFG))
        out.append(analyse(truth, res.predictors))
    return out


@pytest.fixture(scope="module")
def paired_runs():
    start = time.perf_counter()
    rows = []
    for spec in scene_batch(PAIR_SEED, PAIR_SCENES, 1.0):
        truth = render(spec)
        row = {}
        for mode in ("coopnet", "glnet"):
            res = train(truth, TrainConfig(mode=mode))
            row[mode] = evaluate(res.predictors, truth, median_scaling=True)["abs_rel"]
            if mode == "coopnet":
                row["analysis"] = analyse(truth, res.predictors)
        rows.append(row)
    return rows, time.perf_counter() - start


def test_criterion_01_gradient_suite():
    cfg = FDConfig(step=1e-4, tolerance=1e-4, samples=64)
    start = time.perf_counter()
    rows = run_gradient_suite(cfg, n_inputs=10, seed=0)
    elapsed = time.perf_counter() - start
    control = run_gradient_suite(cfg, n_inputs=1, seed=1, negative_control=True)
    worst = max(r.max_rel_error for r in rows)
    ok = all(r.passed for r in rows) and not any(r.passed for r in control) and elapsed < 120
    record(1, ok, f"{len(rows)} cases, max rel err {worst:.2e}, control failures {sum(not r.passed for r in control)}/{len(control)}, {elapsed:.0f} s")
    assert ok


def test_criterion_02_exactness():
    rng = np.random.default_rng(0)
    K = CameraIntrinsics(40.0, 38.0, 11.5, 8.5)
    worst = {"phi": 0.0, "ssim": 0.0, "rigid": 0.0, "warp": 0.0, "round": 0.0}
    for _ in range(10):
        x = smooth_image(rng, 18, 24, 3)
        depth = rng.uniform(1.0, 20.0, (18, 24))
        worst["phi"] = max(worst["phi"], float(np.abs(photometric_error(x, x)).max()))
        worst["ssim"] = max(worst["ssim"], float(np.abs(ssim(x, x) - 1).max()))
        flow, _ = rigid_flow(depth, PoseSE3.identity(), K)
        worst["rigid"] = max(worst["rigid"], float(np.abs(flow).max()))
        a, _ = warp_by_flow(x, np.zeros((18, 24, 2)))
        b, _ = warp_by_depth_pose(x, depth, PoseSE3.identity(), K)
        worst["warp"] = max(worst["warp"], float(np.abs(a - x).max()), float(np.abs(b - x).max()))
        pix = pixel_grid(18, 24) + rng.uniform(-0.5, 0.5, (18, 24, 2))
        back, _ = project(backproject(pix, depth, K), K)
        worst["round"] = max(worst["round"], float(np.abs(back - pix).max()))
    ok = (
        worst["phi"] <= 1e-9
        and worst["ssim"] <= 1e-9
        and worst["rigid"] == 0.0
        and worst["warp"] <= 1e-12
        and worst["round"] <= 1e-10
    )
    record(2, ok, "worst " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items()))
    assert ok


def test_criterion_03_quantile_oracle():
    start = time.perf_counter()
    rows = quantile_benchmark(100_000, seed=0)
    elapsed = time.perf_counter() - start
    worst = max(r["rel_to_iqr"] for r in rows)
    ok = {r["distribution"] for r in rows} == set(BENCH_DISTRIBUTIONS) and worst < 0.02 and elapsed < 30
    record(3, ok, f"worst error {worst:.4f} IQR over {len(rows)} (distribution, quantile) pairs, {elapsed:.1f} s")
    assert ok


def test_criterion_04_neighbourhood_mass():
    masses = {}
    for i, name in enumerate(BENCH_DISTRIBUTIONS):
        x = sample_distribution(name, 100_000, np.random.default_rng([4, i]))
        tracker = QuantileTracker(ETA)
        tracker.observe(DeltaMap(x, np.ones(x.shape, bool)), stride=1)
        spec = tracker.snapshot()
        masses[name] = float(np.mean((x >= spec.q_minus_eta) & (x <= spec.q_eta)))
    ok = all(abs(m - 2 * ETA) <= 0.02 for m in masses.values())
    record(4, ok, "band mass " + ", ".join(f"{k} {v:.4f}" for k, v in masses.items()) + f" (target {2 * ETA})")
    assert ok


def test_criterion_05_delta_shape(shape_runs):
    narrower = enriched = 0
    for an in shape_runs:
        delta, moving = _pooled(an)
        narrower += int(np.std(delta[~moving]) < np.std(delta))
        lo, hi = np.quantile(delta, [ETA, 1 - ETA])
        tail = (delta < lo) | (delta > hi)
        enriched += int(moving[tail].mean() > moving.mean())
    ok = narrower >= 95 and enriched >= 95
    record(5, ok, f"rigid spread below overall in {narrower}/100, tails enriched in moving pixels in {enriched}/100")
    assert ok


def test_criterion_06_band_error_below_negative_side(shape_runs):
    wins = 0
    for an in shape_runs:
        inside, negative = expected_errors(an, neighbourhood_of(an, ETA))
        wins += int(inside < negative)
    ok = wins >= 95
    record(6, ok, f"band mean error below the delta < 0 mean in {wins}/100 scenes")
    assert ok


@pytest.fixture(scope="module")
def homogeneous_runs():
    out = []
    for spec in scene_batch(HOMOG_SEED, HOMOG_SCENES, 1.0, homogeneous=True, height=SHAPE_SIZE[0], width=SHAPE_SIZE[1]):
        truth = render(spec)
        out.append(analyse(truth, train(truth, TrainConfig(mode="coopnet", **SHAPE_CFG)).predictors))
    return out


def test_criterion_07_masking(paired_runs, homogeneous_runs):
    rows, _ = paired_runs
    moving = excluded = 0
    for row in rows:
        an = row["analysis"]
        n = int(an.moving.sum())
        moving += n
        excluded += moving_exclusion(an, neighbourhood_of(an)) * n
    exclusion = excluded / moving
    band_only = sum(moving_leakage(an, neighbourhood_of(an), use_flow=False) for an in homogeneous_runs)
    both = sum(moving_leakage(an, neighbourhood_of(an), use_flow=True) for an in homogeneous_runs)
    ok = exclusion >= 0.9 and band_only > both
    record(7, ok, f"moving pixels excluded {exclusion:.3f}; homogeneous leakage delta band {band_only} > both bands {both}")
    assert ok


def test_criterion_08_mechanism_comparison(paired_runs):
    rows, elapsed = paired_runs
    coop = np.array([r["coopnet"] for r in rows])
    gl = np.array([r["glnet"] for r in rows])
    wins = int(np.sum(coop < gl))
    improvement = float(np.median((gl - coop) / gl))
    ok = wins >= 16 and improvement >= 0.10 and elapsed < 900
    record(8, ok, f"coopnet better in {wins}/{len(rows)}, median relative improvement {improvement:.3f}, {elapsed:.0f} s")
    assert ok


def test_criterion_09_stability():
    def peak(adv, mode):
        theta = np.array(stability_sim(adv, mode, 10_000).theta)
        return float(np.nanmax(theta) / theta[0])

    g2, c2, g1, c1 = peak(2, "glnet"), peak(2, "coopnet"), peak(1, "glnet"), peak(1, "coopnet")
    ok = g2 > 10 and c2 < 10 and g1 < 2 and c1 < 2
    record(9, ok, f"peak ratio advantage 2: glnet {g2:.1f}, coopnet {c2:.2f}; advantage 1: glnet {g1:.2f}, coopnet {c1:.2f}")
    assert ok


def test_criterion_10_bookkeeping():
    rng = np.random.default_rng(10)
    worst_w = 0.0
    for _ in range(200):
        h, w = rng.integers(2, 20, 2)
        d = DeltaMap(rng.normal(size=(h, w)), rng.random((h, w)) < 0.8)
        lo, hi = np.sort(rng.normal(0, 0.7, 2))
        spec = NeighbourhoodSpec(q_minus_eta=float(lo), q_eta=float(hi))
        vals = d.values[d.validity]
        tails = np.count_nonzero((vals < lo) | (vals > hi))
        if tails == 0 or tails == vals.size:
            continue
        worst_w = max(worst_w, abs(tail_weights(d, spec).sum() / (2 * vals.size) - 1))
    truth = render(scene_batch(10, 1)[0])
    bundle = FrameBundle(truth.target, truth.sources, truth.depth * 1.1, list(truth.poses), list(truth.flows), truth.K, list(truth.flows_bwd))
    spec = NeighbourhoodSpec(q_minus_eta=-0.01, q_eta=0.01)
    lam = LossWeights().as_dict()
    worst_t = 0.0
    for mode in ("coopnet", "glnet", "baseline"):
        out = loss_final(bundle, LossWeights(), spec, mode=mode)
        expected = out.terms["photo"] + sum(lam[k] * out.terms[k] for k in AUX_TERMS)
        worst_t = max(worst_t, abs(out.total - expected))
    ok = worst_w <= 1e-12 and worst_t <= 1e-12
    record(10, ok, f"weights sum relative error {worst_w:.1e}, total vs weighted sum {worst_t:.1e}")
    assert ok
