"""File formats: PPM (P6), little-endian PFM, key=value manifests and CSV.

A scene bundle is a directory holding the three frames (PPM for viewing,
PFM for exact values), depth, flows and masks as PFM, and ``manifest.txt``
describing the scene.
"""

from __future__ import annotations

import csv
import os
from pathlib import Path

import numpy as np

from .geometry import CameraIntrinsics, PoseSE3
from .synth import Box, SceneSpec, SceneTruth

MANIFEST = "manifest.txt"


def write_ppm(path, image) -> None:
    """Write an (H, W, 3) or (H, W) image in [0, 1] as binary 8-bit PPM."""
    img = np.asarray(image, dtype=float)
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, -1)
    data = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    h, w = data.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end : end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end].decode("ascii"))
        pos = end
    if tokens[0] != "P6":
        raise ValueError(f"{path}: not a binary PPM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    pos += 1
    data = np.frombuffer(raw, np.uint8, count=w * h * 3, offset=pos)
    return data.reshape(h, w, 3).astype(float) / maxval


def write_pfm(path, array) -> None:
    """Little-endian PFM; (H, W) -> ``Pf``, (H, W, 2|3) -> ``PF``.

    Two-channel arrays (flow) get a zero third plane, the usual convention.
    """
    a = np.asarray(array, dtype=np.float32)
    if a.ndim == 3 and a.shape[2] == 2:
        a = np.concatenate([a, np.zeros(a.shape[:2] + (1,), np.float32)], -1)
    if a.ndim == 2:
        header = "Pf"
    elif a.ndim == 3 and a.shape[2] == 3:
        header = "PF"
    else:
        raise ValueError(f"cannot store shape {a.shape} as PFM")
    h, w = a.shape[:2]
    with open(path, "wb") as f:
        f.write(f"{header}\n{w} {h}\n-1.0\n".encode("ascii"))
        # rows are stored bottom to top
        f.write(np.ascontiguousarray(a[::-1]).astype("<f4").tobytes())


def read_pfm(path, channels: int | None = None) -> np.ndarray:
    """Read a PFM; ``channels=2`` drops the padding plane of a flow file."""
    with open(path, "rb") as f:
        header = f.readline().strip()
        dims = f.readline().split()
        scale = float(f.readline())
        data = f.read()
    if header not in (b"PF", b"Pf"):
        raise ValueError(f"{path}: not a PFM file")
    w, h = int(dims[0]), int(dims[1])
    c = 3 if header == b"PF" else 1
    dtype = "<f4" if scale < 0 else ">f4"
    a = np.frombuffer(data, dtype, count=w * h * c).astype(float)
    a = a.reshape((h, w, c) if c == 3 else (h, w))[::-1].copy()
    if channels is not None and a.ndim == 3:
        a = a[..., :channels]
    return a


def write_manifest(path, values: dict) -> None:
    with open(path, "w") as f:
        for k, v in values.items():
            f.write(f"{k} = {v}\n")


def read_manifest(path) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    with open(path) as f:
        for n, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{n}: expected key = value")
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


def _fmt(values) -> str:
    return " ".join(repr(float(v)) for v in values)


def _floats(text) -> list:
    return [float(t) for t in text.split()]


def spec_to_manifest(spec: SceneSpec) -> dict:
    m = {
        "height": spec.height,
        "width": spec.width,
        "intrinsics": _fmt([spec.K.fx, spec.K.fy, spec.K.cx, spec.K.cy]),
        "plane_depth": repr(float(spec.plane_depth)),
        "plane_slope": _fmt(spec.plane_slope),
        "texture_seed": spec.texture_seed,
        "texture_frequency": repr(float(spec.texture_frequency)),
        "camera_motion": _fmt(spec.camera_motion.as_vector()),
        "noise": repr(float(spec.noise)),
        "homogeneous": int(spec.homogeneous),
        "seed": spec.seed,
        "boxes": len(spec.boxes),
        "moving_objects": spec.moving_count,
    }
    for i, b in enumerate(spec.boxes):
        m[f"box{i}"] = _fmt(list(b.center) + list(b.extent) + list(b.velocity) + [b.texture_seed])
    return m


def manifest_to_spec(m: dict) -> SceneSpec:
    boxes = []
    for i in range(int(m["boxes"])):
        v = _floats(m[f"box{i}"])
        boxes.append(Box(tuple(v[0:3]), tuple(v[3:5]), tuple(v[5:8]), int(v[8])))
    return SceneSpec(
        int(m["height"]),
        int(m["width"]),
        CameraIntrinsics(*_floats(m["intrinsics"])),
        float(m["plane_depth"]),
        tuple(_floats(m["plane_slope"])),
        int(m["texture_seed"]),
        tuple(boxes),
        PoseSE3.from_vector(_floats(m["camera_motion"])),
        float(m["noise"]),
        bool(int(m["homogeneous"])),
        int(m["seed"]),
        float(m.get("texture_frequency", 0.15)),
    )


def save_truth(directory, truth: SceneTruth) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for name, frame in zip(("prev", "target", "next"), truth.frames):
        write_ppm(d / f"frame_{name}.ppm", frame)
        write_pfm(d / f"frame_{name}.pfm", frame)
    write_pfm(d / "depth.pfm", truth.depth)
    write_pfm(d / "moving.pfm", truth.moving.astype(float))
    write_pfm(d / "object_ids.pfm", truth.object_ids.astype(float))
    for name, i in (("prev", 0), ("next", 1)):
        write_pfm(d / f"flow_{name}.pfm", truth.flows[i])
        write_pfm(d / f"flow_bwd_{name}.pfm", truth.flows_bwd[i])
        write_pfm(d / f"rigid_flow_{name}.pfm", truth.rigid_flows[i])
        write_pfm(d / f"occlusion_{name}.pfm", truth.occlusion[i].astype(float))
    m = spec_to_manifest(truth.spec)
    m["moving_fraction"] = repr(float(truth.moving.mean()))
    write_manifest(d / MANIFEST, m)


def load_truth(directory) -> SceneTruth:
    """Load a bundle written by :func:`save_truth` (float32 precision)."""
    d = Path(directory)
    spec = manifest_to_spec(read_manifest(d / MANIFEST))
    frames = tuple(read_pfm(d / f"frame_{n}.pfm") for n in ("prev", "target", "next"))
    poses = (spec.camera_motion.inverse(), spec.camera_motion)
    return SceneTruth(
        spec,
        frames,
        read_pfm(d / "depth.pfm"),
        poses,
        tuple(read_pfm(d / f"rigid_flow_{n}.pfm", 2) for n in ("prev", "next")),
        tuple(read_pfm(d / f"flow_{n}.pfm", 2) for n in ("prev", "next")),
        tuple(read_pfm(d / f"flow_bwd_{n}.pfm", 2) for n in ("prev", "next")),
        read_pfm(d / "moving.pfm") > 0.5,
        tuple(read_pfm(d / f"occlusion_{n}.pfm") > 0.5 for n in ("prev", "next")),
        np.rint(read_pfm(d / "object_ids.pfm")).astype(int),
    )


def write_csv(path, rows, fields=None, header_comments=()) -> None:
    """Write dict rows with a header; ``header_comments`` become ``# `` lines."""
    rows = list(rows)
    if fields is None:
        fields = list(rows[0].keys()) if rows else []
    with open(path, "w", newline="") as f:
        for c in header_comments:
            f.write(f"# {c}\n")
        w = csv.DictWriter(f, fieldnames=fields, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow(r)


def read_csv(path) -> tuple:
    """Return ``(comments, rows)``; numeric fields are converted to float."""
    comments = []
    with open(path, newline="") as f:
        lines = []
        for line in f:
            if line.startswith("#"):
                comments.append(line[1:].strip())
            else:
                lines.append(line)
    rows = []
    for r in csv.DictReader(lines):
        rows.append({k: _maybe_float(v) for k, v in r.items()})
    return comments, rows


def _maybe_float(v):
    try:
        return float(v)
    except (TypeError, ValueError):
        return v


def is_writable_dir(path) -> bool:
    p = Path(path)
    target = p if p.exists() else p.parent
    return target.exists() and os.access(target, os.W_OK)
