import numpy as np
import pytest

from coopnet.io import (
    load_truth,
    manifest_to_spec,
    read_csv,
    read_manifest,
    read_pfm,
    read_ppm,
    save_truth,
    spec_to_manifest,
    write_csv,
    write_manifest,
    write_pfm,
    write_ppm,
)
from coopnet.synth import render, scene_batch


def test_ppm_round_trip_is_8_bit(tmp_path):
    img = np.random.default_rng(0).random((5, 7, 3))
    write_ppm(tmp_path / "a.ppm", img)
    back = read_ppm(tmp_path / "a.ppm")
    assert back.shape == (5, 7, 3)
    assert np.max(np.abs(back - img)) <= 0.5 / 255 + 1e-12


def test_ppm_skips_comments(tmp_path):
    p = tmp_path / "c.ppm"
    p.write_bytes(b"P6\n# made by hand\n2 1\n255\n" + bytes([255, 0, 0, 0, 0, 255]))
    assert np.array_equal(read_ppm(p), [[[1, 0, 0], [0, 0, 1]]])


@pytest.mark.parametrize("shape", [(4, 6), (4, 6, 3), (4, 6, 2)])
def test_pfm_round_trip(tmp_path, shape):
    a = np.random.default_rng(1).normal(size=shape).astype(np.float32).astype(float)
    write_pfm(tmp_path / "a.pfm", a)
    back = read_pfm(tmp_path / "a.pfm", channels=shape[2] if len(shape) == 3 else None)
    assert np.array_equal(back, a)


def test_pfm_rejects_other_files(tmp_path):
    p = tmp_path / "x.pfm"
    p.write_bytes(b"P6\n1 1\n255\n\x00\x00\x00")
    with pytest.raises(ValueError):
        read_pfm(p)


def test_manifest_comments_and_errors(tmp_path):
    p = tmp_path / "m.txt"
    p.write_text("a = 1  # one\n\n# skip\nb=two words\n")
    assert read_manifest(p) == {"a": "1", "b": "two words"}
    p.write_text("novalue\n")
    with pytest.raises(ValueError):
        read_manifest(p)


def test_spec_manifest_round_trip(tmp_path):
    spec = scene_batch(9, 1, 0.7, noise=0.01)[0]
    write_manifest(tmp_path / "m.txt", spec_to_manifest(spec))
    back = manifest_to_spec(read_manifest(tmp_path / "m.txt"))
    assert spec_to_manifest(back) == spec_to_manifest(spec)
    assert np.array_equal(render(back).target, render(spec).target)


def test_truth_bundle_round_trip(tmp_path):
    truth = render(scene_batch(4, 1)[0])
    save_truth(tmp_path, truth)
    back = load_truth(tmp_path)
    assert np.allclose(back.depth, truth.depth, rtol=1e-6)
    assert np.array_equal(back.moving, truth.moving)
    assert np.array_equal(back.object_ids, truth.object_ids)
    for a, b in zip(back.flows, truth.flows):
        assert np.allclose(a, b, atol=1e-5)
    for a, b in zip(back.poses, truth.poses):
        assert np.allclose(a.as_matrix(), b.as_matrix())
    assert (tmp_path / "frame_target.ppm").exists()


def test_csv_round_trip(tmp_path):
    rows = [{"a": 1, "b": "x"}, {"a": 2.5, "b": "y"}]
    write_csv(tmp_path / "r.csv", rows, header_comments=["mode = coopnet"])
    comments, back = read_csv(tmp_path / "r.csv")
    assert comments == ["mode = coopnet"]
    assert back == [{"a": 1.0, "b": "x"}, {"a": 2.5, "b": "y"}]
