"""The ``coopnet`` command.

Subcommands::

    synth           render a seeded scene bundle
    train           fit toy predictors to a bundle, write trace and metrics
    gradcheck       finite-difference check of every analytic gradient
    quantile-bench  P-square estimates against exact sorting
    report          aggregate training runs into tables, histograms and figures

Exit codes: 0 success, 1 gradient check failed, 2 bad input, 3 I/O
failure, 4 numerical divergence (the partial trace is still written).

Options may also come from a ``--config`` file of ``key = value`` lines
(keys spelled like the flags, without the leading dashes); flags given on
the command line win.
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import io
from .cotrain import TRACE_FIELDS, TrainConfig, analyse, evaluate, train
from .errors import CoopNetError, DivergedLoss
from .grad import FDConfig, run_gradient_suite
from .losses import LossWeights
from .quantile import BENCH_FIELDS, DeltaMap, delta_histogram, quantile_benchmark
from .synth import random_scene, render

logger = logging.getLogger("coopnet")

EXIT_OK, EXIT_FAIL, EXIT_INPUT, EXIT_IO, EXIT_DIVERGED = 0, 1, 2, 3, 4

METRICS_FILE = "metrics.txt"
TRACE_FILE = "trace.csv"
DELTA_FILE = "delta_samples.csv"
DELTA_FIELDS = ("source", "row", "col", "delta", "moving")


class BadInput(Exception):
    pass


# --------------------------------------------------------------------- options

# option name -> (type, default); None defaults are filled from dataclasses
TRAIN_OPTIONS = {
    "seed": (int, 0),
    "mode": (str, "coopnet"),
    "eta": (float, TrainConfig.eta),
    "zeta": (float, TrainConfig.zeta),
    "steps": (int, TrainConfig.steps),
    "epoch_len": (int, TrainConfig.epoch_len),
    "burn_in": (int, TrainConfig.burn_in_epochs),
    "scales": (int, TrainConfig.scales),
    "lr_depth": (float, TrainConfig.lr_depth),
    "lr_pose": (float, TrainConfig.lr_pose),
    "lr_flow": (float, TrainConfig.lr_flow),
    "lambda_gc": (float, LossWeights.lambda_gc),
    "lambda_fwdbwd": (float, LossWeights.lambda_fwd_bwd),
    "lambda_s": (float, LossWeights.lambda_s),
    "lambda_ep": (float, LossWeights.lambda_ep),
    "lambda_var": (float, LossWeights.lambda_var),
}

SYNTH_OPTIONS = {
    "seed": (int, 0),
    "difficulty": (float, 1.0),
    "height": (int, 32),
    "width": (int, 48),
    "noise": (float, 0.0),
    "count": (int, 1),
}


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _add_options(p: argparse.ArgumentParser, options: dict):
    for name, (typ, default) in options.items():
        p.add_argument(_flag(name), type=typ, default=None, help=f"default {default}")


def resolve(args: argparse.Namespace, options: dict) -> dict:
    """Merge defaults, then the config file, then explicit flags."""
    values = {k: d for k, (_, d) in options.items()}
    if getattr(args, "config", None):
        try:
            raw = io.read_manifest(args.config)
        except OSError as e:
            raise BadInput(f"cannot read config {args.config}: {e}") from e
        except ValueError as e:
            raise BadInput(str(e)) from e
        for key, text in raw.items():
            name = key.lstrip("-").replace("-", "_")
            if name not in options:
                raise BadInput(f"unknown config key {key!r}")
            try:
                values[name] = options[name][0](text)
            except ValueError as e:
                raise BadInput(f"config key {key!r}: {e}") from e
    for name in options:
        v = getattr(args, name, None)
        if v is not None:
            values[name] = v
    return values


def train_config(values: dict) -> TrainConfig:
    try:
        weights = LossWeights(
            values["lambda_gc"], values["lambda_fwdbwd"], values["lambda_s"], values["lambda_ep"], values["lambda_var"]
        )
        return TrainConfig(
            steps=values["steps"],
            lr_depth=values["lr_depth"],
            lr_pose=values["lr_pose"],
            lr_flow=values["lr_flow"],
            mode=values["mode"],
            burn_in_epochs=values["burn_in"],
            epoch_len=values["epoch_len"],
            eta=values["eta"],
            zeta=values["zeta"],
            weights=weights,
            seed=values["seed"],
            scales=values["scales"],
        )
    except ValueError as e:
        raise BadInput(str(e)) from e


def _out_dir(path) -> Path:
    if path is None:
        raise BadInput("--out is required")
    p = Path(path)
    try:
        p.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create {p}: {e}") from e
    return p


# -------------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    v = resolve(args, SYNTH_OPTIONS)
    out = _out_dir(args.out)
    if v["count"] < 1:
        raise BadInput("--count must be >= 1")
    for i in range(v["count"]):
        sub = v["seed"] ^ i
        try:
            spec = random_scene(
                np.random.default_rng(sub), v["height"], v["width"], v["difficulty"], args.homogeneous, v["noise"], sub
            )
            truth = render(spec)
        except (ValueError, CoopNetError) as e:
            raise BadInput(f"invalid scene: {e}") from e
        target = out if v["count"] == 1 else out / f"scene_{i:03d}"
        io.save_truth(target, truth)
        print(f"{target}\tmoving_objects={spec.moving_count}\tmoving_fraction={truth.moving.mean():.4f}")
    return EXIT_OK


def _load_scene(path):
    if path is None:
        raise BadInput("--scene is required")
    p = Path(path)
    if not (p / io.MANIFEST).is_file():
        raise BadInput(f"{p} is not a scene bundle (no {io.MANIFEST})")
    try:
        return io.load_truth(p)
    except (KeyError, ValueError) as e:
        raise BadInput(f"malformed bundle {p}: {e}") from e


def _trace_header(cfg: TrainConfig, scene) -> list:
    w = cfg.weights.as_dict()
    return [
        f"mode = {cfg.mode}",
        f"eta = {cfg.eta}",
        f"zeta = {cfg.zeta}",
        f"seed = {cfg.seed}",
        f"steps = {cfg.steps}",
        f"epoch_len = {cfg.epoch_len}",
        f"burn_in = {cfg.burn_in_epochs}",
        f"scales = {cfg.scales}",
        "lambda = " + " ".join(f"{k} {v}" for k, v in w.items()),
        f"scene = {scene}",
    ]


def _write_delta_samples(path, truth, pred):
    a = analyse(truth, pred)
    rows = []
    for s, d in enumerate(a.deltas):
        rr, cc = np.nonzero(d.validity)
        for r, c in zip(rr.tolist(), cc.tolist()):
            rows.append({"source": s, "row": r, "col": c, "delta": repr(float(d.values[r, c])), "moving": int(truth.moving[r, c])})
    io.write_csv(path, rows, DELTA_FIELDS)


def cmd_train(args) -> int:
    v = resolve(args, TRAIN_OPTIONS)
    cfg = train_config(v)
    truth = _load_scene(args.scene)
    out = _out_dir(args.out)
    header = _trace_header(cfg, args.scene)
    try:
        res = train(truth, cfg)
    except DivergedLoss as e:
        io.write_csv(out / TRACE_FILE, e.trace, TRACE_FIELDS, header + ["status = diverged"])
        print(f"diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    io.write_csv(out / TRACE_FILE, res.trace, TRACE_FIELDS, header)
    raw = evaluate(res.predictors, truth)
    scaled = evaluate(res.predictors, truth, median_scaling=True)
    metrics = {"mode": cfg.mode, "seed": cfg.seed, "scene": str(args.scene)}
    metrics.update({k: repr(val) for k, val in raw.items() if k != "scale"})
    metrics.update({f"scaled_{k}": repr(val) for k, val in scaled.items() if k != "scale"})
    metrics["median_scale"] = repr(scaled["scale"])
    metrics["final_total"] = repr(res.final.total)
    io.write_manifest(out / METRICS_FILE, metrics)
    pred = res.predictors
    io.write_pfm(out / "depth.pfm", pred.depth)
    for name, i in (("prev", 0), ("next", 1)):
        io.write_pfm(out / f"flow_{name}.pfm", pred.flows[i])
    io.write_manifest(out / "poses.txt", {f"pose_{n}": " ".join(repr(float(x)) for x in p) for n, p in zip(("prev", "next"), pred.poses)})
    _write_delta_samples(out / DELTA_FILE, truth, pred)
    print(
        f"{cfg.mode}\tabs_rel={raw['abs_rel']:.4f}\tscaled_abs_rel={scaled['abs_rel']:.4f}"
        f"\tepe={raw['epe']:.4f}\tpose_t={raw['pose_t_err']:.4f}\tpose_r={raw['pose_r_err']:.5f}"
    )
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    samples = args.samples if args.samples is not None else FDConfig.samples
    try:
        cfg = FDConfig(samples=samples)
    except ValueError as e:
        raise BadInput(str(e)) from e
    rows = run_gradient_suite(cfg, n_inputs=args.inputs, seed=args.seed or 0, negative_control=args.negative_control)
    print("case\tmax_rel_error\tchecked\trejected\tresult")
    for r in rows:
        print(f"{r.name}\t{r.max_rel_error:.3e}\t{r.checked}\t{r.rejected}\t{'pass' if r.passed else 'FAIL'}")
    if args.out:
        p = Path(args.out)
        p.parent.mkdir(parents=True, exist_ok=True)
        io.write_csv(p, [vars(r) for r in rows], ("name", "max_rel_error", "checked", "rejected", "passed"))
    return EXIT_OK if all(r.passed for r in rows) else EXIT_FAIL


def cmd_quantile_bench(args) -> int:
    n = args.samples if args.samples is not None else 100_000
    try:
        rows = quantile_benchmark(n, args.seed or 0)
    except ValueError as e:
        raise BadInput(str(e)) from e
    print("\t".join(BENCH_FIELDS))
    for r in rows:
        print("\t".join(f"{r[k]:.6g}" if isinstance(r[k], float) else str(r[k]) for k in BENCH_FIELDS))
    if args.out:
        p = Path(args.out)
        p.parent.mkdir(parents=True, exist_ok=True)
        io.write_csv(p, rows, BENCH_FIELDS)
    return EXIT_OK


# ---------------------------------------------------------------------- report


def find_runs(root) -> list:
    """Run directories (holding a trace and metrics) under ``root``, sorted."""
    root = Path(root)
    return sorted(p.parent for p in root.rglob(METRICS_FILE) if (p.parent / TRACE_FILE).is_file())


def load_run(path) -> dict:
    path = Path(path)
    metrics = io.read_manifest(path / METRICS_FILE)
    _, trace = io.read_csv(path / TRACE_FILE)
    run = {"run": path.name, "path": path, "trace": trace}
    for k, v in metrics.items():
        try:
            run[k] = float(v)
        except ValueError:
            run[k] = v
    return run


SUMMARY_FIELDS = ("run", "mode", "seed", "scene", "abs_rel", "scaled_abs_rel", "epe", "pose_t_err", "pose_r_err", "final_total", "steps")


def summarise(runs: list) -> list:
    rows = []
    for r in runs:
        row = {k: r.get(k, "") for k in SUMMARY_FIELDS}
        row["steps"] = len(r["trace"])
        rows.append(row)
    return rows


PAIR_FIELDS = ("scene", "seed", "metric", "coopnet", "glnet", "paired_difference", "relative_improvement")


def paired_rows(runs: list, metric: str = "scaled_abs_rel", a: str = "coopnet", b: str = "glnet") -> list:
    """Match runs of modes ``a`` and ``b`` on (scene, seed).

    ``paired_difference`` is ``a - b`` (negative means ``a`` is better) and
    ``relative_improvement`` is ``(b - a) / b``.
    """
    by_key: dict = {}
    for r in runs:
        by_key.setdefault((str(r.get("scene")), r.get("seed")), {})[r.get("mode")] = r
    rows = []
    for (scene, seed), modes in sorted(by_key.items(), key=lambda kv: (kv[0][0], str(kv[0][1]))):
        if a in modes and b in modes:
            va, vb = float(modes[a][metric]), float(modes[b][metric])
            rows.append(
                {
                    "scene": scene,
                    "seed": seed,
                    "metric": metric,
                    a: va,
                    b: vb,
                    "paired_difference": va - vb,
                    "relative_improvement": (vb - va) / vb if vb else math.nan,
                }
            )
    return rows


HIST_FIELDS = ("mode", "bin_low", "bin_high", "rigid", "moving", "all")


def pooled_histogram(runs: list, bins: int = 60) -> tuple:
    """Delta histograms per mode over every run's sampled pixels.

    Returns ``(rows, totals)`` where ``totals[mode]`` is the number of
    sampled (pixel, source) pairs; each mode's ``all`` column sums to it.
    """
    samples: dict = {}
    for r in runs:
        path = r["path"] / DELTA_FILE
        if not path.is_file():
            continue
        _, rows = io.read_csv(path)
        vals = np.array([row["delta"] for row in rows], float)
        mov = np.array([row["moving"] for row in rows], float) > 0.5
        d, m = samples.setdefault(r["mode"], ([], []))
        d.append(vals)
        m.append(mov)
    out, totals = [], {}
    for mode in sorted(samples):
        vals = np.concatenate(samples[mode][0])
        mov = np.concatenate(samples[mode][1])
        totals[mode] = int(vals.size)
        if not vals.size:
            continue
        lo, hi = np.quantile(vals, [0.005, 0.995])
        lo, hi = min(lo, float(vals.min())), max(hi, float(vals.max()))
        if lo == hi:
            lo, hi = lo - 0.5, hi + 0.5
        edges, c_all, c_rigid, c_moving = delta_histogram(DeltaMap(vals, np.ones(vals.shape, bool)), mov, bins, (lo, hi))
        for i in range(bins):
            out.append(
                {
                    "mode": mode,
                    "bin_low": repr(float(edges[i])),
                    "bin_high": repr(float(edges[i + 1])),
                    "rigid": int(c_rigid[i]),
                    "moving": int(c_moving[i]),
                    "all": int(c_all[i]),
                }
            )
    return out, totals


def render_figures(out: Path, runs: list, pairs: list, hist: list) -> list:
    """Write PNG figures; returns the file names."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    files = []
    fig, ax = plt.subplots(figsize=(7, 4))
    for r in runs:
        steps = [row["step"] for row in r["trace"]]
        total = [row["total"] for row in r["trace"]]
        ax.plot(steps, total, lw=0.8, label=f"{r['run']} ({r.get('mode')})")
    ax.set_xlabel("step")
    ax.set_ylabel("total loss")
    ax.set_yscale("log")
    if len(runs) <= 10:
        ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out / "loss_curves.png", dpi=120)
    plt.close(fig)
    files.append("loss_curves.png")

    fig, ax = plt.subplots(figsize=(7, 4))
    for r in runs:
        theta = [row["theta"] for row in r["trace"]]
        ax.plot([row["step"] for row in r["trace"]], theta, lw=0.8, label=f"{r['run']} ({r.get('mode')})")
    ax.set_xlabel("step")
    ax.set_ylabel("1 / P(delta < 0)")
    if len(runs) <= 10:
        ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out / "theta.png", dpi=120)
    plt.close(fig)
    files.append("theta.png")

    modes = sorted({h["mode"] for h in hist})
    if modes:
        fig, axes = plt.subplots(1, len(modes), figsize=(5 * len(modes), 3.5), squeeze=False)
        for ax, mode in zip(axes[0], modes):
            rows = [h for h in hist if h["mode"] == mode]
            left = np.array([float(h["bin_low"]) for h in rows])
            width = np.array([float(h["bin_high"]) for h in rows]) - left
            rigid = np.array([h["rigid"] for h in rows])
            moving = np.array([h["moving"] for h in rows])
            ax.bar(left, rigid, width, align="edge", label="rigid", color="tab:blue")
            ax.bar(left, moving, width, bottom=rigid, align="edge", label="moving", color="tab:red")
            ax.set_title(mode)
            ax.set_xlabel("delta")
            ax.legend(fontsize=7)
        fig.tight_layout()
        fig.savefig(out / "delta_histogram.png", dpi=120)
        plt.close(fig)
        files.append("delta_histogram.png")

    if pairs:
        fig, ax = plt.subplots(figsize=(5, 5))
        a = np.array([p["coopnet"] for p in pairs])
        b = np.array([p["glnet"] for p in pairs])
        ax.scatter(b, a, s=14)
        top = float(max(a.max(), b.max())) * 1.05
        ax.plot([0, top], [0, top], "k--", lw=0.8)
        ax.set_xlabel(f"glnet {pairs[0]['metric']}")
        ax.set_ylabel(f"coopnet {pairs[0]['metric']}")
        fig.tight_layout()
        fig.savefig(out / "paired_comparison.png", dpi=120)
        plt.close(fig)
        files.append("paired_comparison.png")
    return files


def cmd_report(args) -> int:
    if args.input is None:
        raise BadInput("--in is required")
    root = Path(args.input)
    if not root.is_dir():
        raise BadInput(f"{root} is not a directory")
    paths = find_runs(root)
    if not paths:
        raise BadInput(f"no training runs ({METRICS_FILE} + {TRACE_FILE}) under {root}")
    out = _out_dir(args.out)
    runs = [load_run(p) for p in paths]
    summary = summarise(runs)
    io.write_csv(out / "summary.csv", summary, SUMMARY_FIELDS)
    pairs = paired_rows(runs, args.metric)
    io.write_csv(out / "paired.csv", pairs, PAIR_FIELDS)
    hist, totals = pooled_histogram(runs, args.bins)
    io.write_csv(out / "delta_histogram.csv", hist, HIST_FIELDS, [f"sampled_{m} = {n}" for m, n in totals.items()])
    figures = render_figures(out, runs, pairs, hist)

    print("--- runs")
    print("\t".join(SUMMARY_FIELDS))
    for row in summary:
        print("\t".join(f"{row[k]:.4g}" if isinstance(row[k], float) else str(row[k]) for k in SUMMARY_FIELDS))
    if pairs:
        print("--- paired")
        print("\t".join(PAIR_FIELDS))
        for row in pairs:
            print("\t".join(f"{row[k]:.4g}" if isinstance(row[k], float) else str(row[k]) for k in PAIR_FIELDS))
        wins = sum(p["paired_difference"] < 0 for p in pairs)
        med = float(np.median([p["relative_improvement"] for p in pairs]))
        print(f"coopnet_better = {wins}/{len(pairs)}\tmedian_relative_improvement = {med:.4f}")
    print("--- files")
    for f in ["summary.csv", "paired.csv", "delta_histogram.csv"] + figures:
        print(out / f)
    return EXIT_OK


# ------------------------------------------------------------------------ main


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="coopnet", description="Scene synthesis, toy co-training and diagnostics.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render a seeded scene bundle")
    _add_options(p, SYNTH_OPTIONS)
    p.add_argument("--homogeneous", action="store_true", help="moving boxes take the background texture")
    p.add_argument("--out", help="output directory")
    p.add_argument("--config", help="key = value option file")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="fit toy predictors to a scene bundle")
    _add_options(p, TRAIN_OPTIONS)
    p.add_argument("--scene", help="scene bundle directory")
    p.add_argument("--out", help="output directory")
    p.add_argument("--config", help="key = value option file")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--samples", type=int, help="coordinates probed per case and input (default 64)")
    p.add_argument("--inputs", type=int, default=10, help="random inputs per case")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--negative-control", action="store_true", help="double every analytic gradient")
    p.add_argument("--out", help="CSV file for the table")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("quantile-bench", help="P-square against exact quantiles")
    p.add_argument("--samples", type=int, help="stream length (default 100000)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="CSV file for the table")
    p.set_defaults(func=cmd_quantile_bench)

    p = sub.add_parser("report", help="aggregate training runs")
    p.add_argument("--in", dest="input", help="directory searched for run directories")
    p.add_argument("--out", help="output directory")
    p.add_argument("--metric", default="scaled_abs_rel", help="metric for the paired comparison")
    p.add_argument("--bins", type=int, default=60, help="delta histogram bins")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except BadInput as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except OSError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
