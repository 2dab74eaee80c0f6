import math

import numpy as np
import pytest

from coopnet.errors import DivergedLoss
from coopnet.cotrain import (
    TRACE_FIELDS,
    BlockAdam,
    StabilityState,
    ToyPredictors,
    TrainConfig,
    analyse,
    evaluate,
    expected_errors,
    moving_exclusion,
    neighbourhood_of,
    rigid_masks,
    spatial_precondition,
    stability_sim,
    train,
)
from coopnet.synth import integer_flow_scene, render, with_boxes_static, scene_batch

QUICK = dict(steps=30, epoch_len=5, burn_in_epochs=2, scales=2)


@pytest.fixture(scope="module")
def truth():
    return render(integer_flow_scene(box_shift_px=(0, 3), seed=2))


def test_evaluate_at_truth_is_zero(truth):
    m = evaluate(ToyPredictors.from_truth(truth), truth)
    for k in ("abs_rel", "sq_rel", "rmse", "epe", "pose_t_err"):
        assert m[k] <= 1e-12
    assert m["pose_r_err"] <= 1e-7
    assert m["scale"] == 1.0


def test_evaluate_scaled_depth(truth):
    pred = ToyPredictors.from_truth(truth)
    pred.log_depth = pred.log_depth + math.log(1.1)
    assert evaluate(pred, truth)["abs_rel"] == pytest.approx(0.1, abs=1e-12)
    scaled = evaluate(pred, truth, median_scaling=True)
    assert scaled["abs_rel"] <= 1e-12
    assert scaled["scale"] == pytest.approx(1 / 1.1)


def test_evaluate_unit_flow_offset(truth):
    pred = ToyPredictors.from_truth(truth)
    pred.flows[..., 0] += 1.0
    assert evaluate(pred, truth)["epe"] == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize(
    "kwargs", [dict(steps=0), dict(lr_depth=0.0), dict(mode="other"), dict(burn_in_epochs=-1), dict(eta=0.5)]
)
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        TrainConfig(**kwargs)


def test_rotation_rate_defaults_to_tenth_of_pose_rate():
    cfg = TrainConfig(lr_pose=2e-3)
    assert cfg.rotation_rate == pytest.approx(2e-4)
    assert np.allclose(cfg.pose_rates(), [2e-4] * 3 + [2e-3] * 3)


def test_block_adam_first_step():
    g = np.array([3.0, -4.0, 0.0, 1.0])
    params = {"a": np.zeros(4), "b": np.zeros(4)}
    BlockAdam({"a": 0.1, "b": 0.1}, elementwise=("b",)).step(params, {"a": g, "b": g})
    # shared normaliser: step is g / rms(g); per element: sign(g)
    assert np.allclose(params["a"], -0.1 * g / np.sqrt(np.mean(g * g)))
    assert np.allclose(params["b"], -0.1 * np.sign(g))


def test_block_adam_caps_the_step():
    g = np.zeros(100)
    g[0] = 1.0
    params = {"a": np.zeros_like(g)}
    BlockAdam({"a": 1.0}, max_step=5.0).step(params, {"a": g})
    # rms is 0.1, so the raw step of 10 is clipped
    assert params["a"][0] == -5.0


def test_preconditioner_is_symmetric_and_expanding():
    rng = np.random.default_rng(0)
    x, y = rng.normal(size=(2, 12, 15))
    sig = (1.0, 2.0, 4.0)
    px, py = spatial_precondition(x, sig), spatial_precondition(y, sig)
    assert abs(np.vdot(px, y) - np.vdot(x, py)) <= 1e-9 * np.abs(px).sum()
    assert np.vdot(px, x) >= np.vdot(x, x)


def test_preconditioner_blurs_image_axes_only():
    g = np.zeros((2, 9, 9, 2))
    g[0, 4, 4, 1] = 1.0
    out = spatial_precondition(g, (1.0,))
    assert not out[1].any() and not out[..., 0].any()
    assert np.count_nonzero(out[0, ..., 1]) > 1
    assert np.array_equal(spatial_precondition(g, ()), g)


def test_initial_predictors():
    p = ToyPredictors.initial(6, 8, sources=3, depth=5.0, jitter=0.0)
    assert p.log_depth.shape == (6, 8) and p.flows.shape == (3, 6, 8, 2)
    assert np.allclose(p.depth, 5.0)
    assert all(np.array_equal(q.as_matrix(), np.eye(4)) for q in p.pose_list)
    c = p.copy()
    c.flows += 1
    assert not p.flows.any()


@pytest.fixture(scope="module")
def coop_run(truth):
    return train(truth, TrainConfig(mode="coopnet", **QUICK))


def test_trace_rows_and_phases(coop_run):
    trace = coop_run.trace
    assert len(trace) == QUICK["steps"]
    assert set(TRACE_FIELDS) <= set(trace[0])
    burn = QUICK["epoch_len"] * QUICK["burn_in_epochs"]
    assert all(r["phase"] == "burn_in" and r["n_rigid"] == -1 for r in trace[:burn])
    assert all(r["phase"] == "coopnet" and r["n_rigid"] > 0 for r in trace[burn:])


def test_snapshot_is_frozen_within_an_epoch(coop_run):
    by_epoch = {}
    for r in coop_run.trace:
        if r["phase"] == "coopnet":
            by_epoch.setdefault(r["epoch"], set()).add((r["q_minus_eta"], r["q_eta"]))
    assert len(by_epoch) >= 2
    assert all(len(v) == 1 for v in by_epoch.values())
    assert len(set().union(*by_epoch.values())) > 1


def test_glnet_trace_has_no_mask(truth):
    res = train(truth, TrainConfig(mode="glnet", **QUICK))
    assert all(r["n_rigid"] == -1 for r in res.trace)
    assert all(r["L_glnet"] > 0 and r["L_theta_alpha"] == 0 for r in res.trace[10:])
    assert all(t >= 1 for t in res.stability.theta if not math.isnan(t))


def test_training_reduces_the_loss(coop_run):
    assert coop_run.trace[-1]["L_photo"] < coop_run.trace[0]["L_photo"]


def test_init_is_not_modified(truth):
    init = ToyPredictors.initial(*truth.depth.shape)
    before = init.copy()
    train(truth, TrainConfig(steps=2, scales=2), init)
    assert np.array_equal(init.log_depth, before.log_depth)


def test_non_finite_flow_diverges_with_trace(truth):
    init = ToyPredictors.initial(*truth.depth.shape)
    init.flows[0, 3, 3] = np.nan
    with pytest.raises(DivergedLoss) as err:
        train(truth, TrainConfig(steps=3, scales=2), init)
    assert err.value.trace == []


def test_stability_state_marks_undefined_steps():
    s = StabilityState()
    s.record(0.5, 0.1)
    s.record(0.0, 0.2)
    assert s.theta[0] == 2.0 and math.isnan(s.theta[1]) and s.step == 2


def test_stability_sim_validation():
    with pytest.raises(ValueError):
        stability_sim(0.5)
    with pytest.raises(ValueError):
        stability_sim(2.0, mode="baseline")


def test_stability_sim_starts_at_even_odds():
    for mode in ("glnet", "coopnet"):
        assert stability_sim(2.0, mode, steps=5).theta[0] == pytest.approx(2.0)


def test_truth_on_static_scene_agrees_but_band_keeps_its_mass():
    # both warps are exact up to rounding, yet a quantile band is relative:
    # it still holds about 2 eta of the pixels per source
    truth = render(integer_flow_scene(seed=5))
    an = analyse(truth, ToyPredictors.from_truth(truth))
    assert max(np.abs(d.values[v]).max() for d, v in zip(an.deltas, an.valid)) <= 1e-12
    spec = neighbourhood_of(an)
    for m, v in zip(rigid_masks(an, spec, use_flow=False), an.valid):
        assert 0.2 <= m.sum() / v.sum() <= 0.4


def test_truth_on_moving_scene_excludes_moving_pixels(truth):
    an = analyse(truth, ToyPredictors.from_truth(truth))
    assert moving_exclusion(an, neighbourhood_of(an)) >= 0.9


def test_expected_errors_pool_sources(truth):
    pred = ToyPredictors.from_truth(truth)
    pred.log_depth = pred.log_depth + np.random.default_rng(1).normal(0, 0.2, pred.log_depth.shape)
    an = analyse(truth, pred)
    spec = neighbourhood_of(an)
    inside, negative = expected_errors(an, spec)
    band, neg = [], []
    for d, phi, v in zip(an.deltas, an.phi_dp, an.valid):
        for y, x in zip(*np.nonzero(v)):
            if spec.q_minus_eta <= d.values[y, x] <= spec.q_eta:
                band.append(phi[y, x])
            if d.values[y, x] < 0:
                neg.append(phi[y, x])
    assert inside == pytest.approx(np.mean(band), rel=1e-12)
    assert negative == pytest.approx(np.mean(neg), rel=1e-12)


def test_static_scene_coopnet_tracks_baseline():
    truth = render(with_boxes_static(scene_batch(21, 1)[0]))
    cfg = dict(steps=120, epoch_len=10, burn_in_epochs=3)
    coop = evaluate(train(truth, TrainConfig(mode="coopnet", **cfg)).predictors, truth, True)
    base = evaluate(train(truth, TrainConfig(mode="baseline", **cfg)).predictors, truth, True)
    assert abs(coop["abs_rel"] - base["abs_rel"]) <= 0.1 * base["abs_rel"] + 0.01
