import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from rmsdf.imaging import (Camera, PfmError, SceneConfig, View, load_mask, load_pfm, load_scene,
                           log_radiance, look_at, read_pfm, save_mask, save_pfm, save_scene)


def _reference_pfm(values, width, height, channels, little=True):
    # Independent writer: header by hand, rows bottom-to-top, struct packing.
    tag = b"PF" if channels == 3 else b"Pf"
    scale = b"-1.0" if little else b"1.0"
    fmt = "<" if little else ">"
    body = b""
    for row in reversed(range(height)):
        for col in range(width):
            for c in range(channels):
                body += struct.pack(fmt + "f", values[row][col][c])
    return tag + b"\n" + f"{width} {height}".encode() + b"\n" + scale + b"\n" + body


def test_single_pixel_grey(tmp_path):
    p = tmp_path / "a.pfm"
    p.write_bytes(b"Pf\n1 1\n-1.0\n" + struct.pack("<f", 3.5))
    assert load_pfm(p).shape == (1, 1, 1)
    assert load_pfm(p)[0, 0, 0] == 3.5


@pytest.mark.parametrize("little", [True, False])
def test_reference_writer_cross_check(tmp_path, little):
    vals = [[[0.5, 1.0, 2.0], [3.0, 4.25, 5.0]], [[6.0, 7.0, 8.0], [9.0, 1e-3, 1e6]]]
    p = tmp_path / "ref.pfm"
    p.write_bytes(_reference_pfm(vals, 2, 2, 3, little))
    got = load_pfm(p)
    np.testing.assert_array_equal(got, np.array(vals, dtype=np.float32))
    out = tmp_path / "out.pfm"
    save_pfm(read_pfm(p), out)
    assert out.read_bytes() == p.read_bytes()


@pytest.mark.parametrize("header", [b"PF\n2 2\n-1.0\n", b"P7\n1 1\n-1.0\n", b"Pf\n-1 1\n-1.0\n",
                                    b"Pf\n1 1\nabc\n", b"Pf\n1"])
def test_malformed_files_report_offset(tmp_path, header):
    p = tmp_path / "bad.pfm"
    p.write_bytes(header)
    with pytest.raises(PfmError) as err:
        load_pfm(p)
    assert err.value.offset >= 0
    assert "offset" in str(err.value)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 5), st.integers(1, 5), st.sampled_from([1, 3])),
              elements=st.floats(0, 2.0 ** 100, width=32)),
       st.booleans())
def test_round_trip_bit_exact(tmp_path_factory, data, little):
    d = tmp_path_factory.mktemp("pfm")
    from rmsdf.imaging import ImageF
    first = d / "a.pfm"
    save_pfm(ImageF(data, little_endian=little), first)
    second = d / "b.pfm"
    save_pfm(read_pfm(first), second)
    assert first.read_bytes() == second.read_bytes()
    np.testing.assert_array_equal(load_pfm(second), data)


def test_foreign_header_preserved(tmp_path):
    p = tmp_path / "odd.pfm"
    p.write_bytes(b"Pf\n2   1\n-0.5\n" + struct.pack("<2f", 1.0, 2.0))
    out = tmp_path / "copy.pfm"
    save_pfm(read_pfm(p), out)
    assert out.read_bytes() == p.read_bytes()


def test_mask_threshold(tmp_path):
    from PIL import Image
    p = tmp_path / "m.png"
    Image.fromarray(np.array([[0, 127, 128, 255]], dtype=np.uint8)).save(p)
    np.testing.assert_array_equal(load_mask(p), [[False, False, True, True]])
    m = np.random.default_rng(0).random((7, 5)) > 0.5
    save_mask(m, tmp_path / "r.png")
    np.testing.assert_array_equal(load_mask(tmp_path / "r.png"), m)


def test_log_radiance():
    assert log_radiance(np.array([1.0]))[0] == 0.0
    assert log_radiance(np.array([0.0]), 1e-6)[0] == np.log(1e-6)
    x = np.random.default_rng(1).uniform(1e-6, 100, 1000)
    np.testing.assert_allclose(np.exp(log_radiance(x)), x, rtol=1e-14)
    with pytest.raises(ValueError):
        log_radiance(x, 0.0)


@given(st.lists(st.floats(0, 1e30), min_size=2, max_size=20))
def test_log_radiance_monotone_finite(xs):
    xs = np.sort(np.array(xs))
    out = log_radiance(xs)
    assert np.all(np.isfinite(out))
    assert np.all(np.diff(out) >= 0)


def _identity_camera(f=100.0):
    return Camera(f, f, 32.0, 24.0, np.eye(3), np.zeros(3), 64, 48)


def test_project_pinhole_definition():
    cam = _identity_camera()
    uv, depth = cam.project(np.array([[0.0, 0.0, 5.0], [0.3, -0.2, 2.0]]))
    np.testing.assert_allclose(uv[0], [32.0, 24.0])
    assert depth[0] == 5.0
    np.testing.assert_allclose(uv[1], [100 * 0.15 + 32, 100 * -0.1 + 24])


def test_project_behind_camera_is_flagged():
    _, depth = _identity_camera().project(np.array([[0.0, 0.0, -1.0]]))
    assert depth[0] <= 0
    with pytest.raises(ValueError):
        _identity_camera().project(np.zeros(3))


def test_unproject_round_trip():
    rng = np.random.default_rng(2)
    cam = look_at([3.0, 1.0, 2.0], [0, 0, 0], [0, 0, 1], 120.0, 64, 64)
    pts = rng.uniform(-1, 1, (1000, 3))
    uv, depth = cam.project(pts)
    back = cam.unproject(uv, depth)
    rel = np.linalg.norm(back - pts, axis=1) / np.linalg.norm(pts, axis=1)
    assert rel.max() < 1e-9


def test_camera_rejects_bad_rotation():
    with pytest.raises(ValueError):
        Camera(1, 1, 0, 0, np.diag([1.0, 1.0, -1.0]), np.zeros(3), 4, 4)
    with pytest.raises(ValueError):
        Camera(1, 1, 0, 0, np.eye(3) * 1.001, np.zeros(3), 4, 4)


def test_normal_frame_faces_viewer():
    cam = look_at([0.0, -3.0, 0.0], [0, 0, 0], [0, 0, 1], 50.0, 32, 32)
    toward_cam = np.array([0.0, -1.0, 0.0])
    np.testing.assert_allclose(cam.normal_frame @ toward_cam, [0, 0, 1], atol=1e-12)
    np.testing.assert_allclose(cam.normal_frame @ np.array([0, 0, 1.0]), [0, 1, 0], atol=1e-12)


def test_scene_round_trip(tmp_path):
    views = []
    for k in range(2):
        cam = look_at([3 * np.cos(k), 3 * np.sin(k), 0.5], [0, 0, 0], [0, 0, 1], 40.0, 8, 6)
        img = np.full((6, 8, 3), k + 1.0, dtype=np.float32)
        save_pfm(img, tmp_path / f"i{k}.pfm")
        save_mask(np.ones((6, 8)), tmp_path / f"m{k}.png")
        views.append(View(cam, str(tmp_path / f"i{k}.pfm"), str(tmp_path / f"m{k}.png")))
    scene = SceneConfig(views, [-1, -1, -1], [1, 1, 1], 32)
    save_scene(scene, tmp_path / "scene.json")
    doc = json.loads((tmp_path / "scene.json").read_text())
    assert len(doc["views"][0]["R"]) == 9
    back = load_scene(tmp_path / "scene.json")
    assert back.grid_res == 32
    np.testing.assert_array_equal(back.views[1].camera.R, scene.views[1].camera.R)
    assert back.views[1].image[0, 0, 0] == 2.0
    assert back.views[0].mask.all()
    np.testing.assert_allclose(back.viewing_direction(0) @ back.viewing_direction(0), 1.0)


def test_scene_invariants():
    cam = _identity_camera()
    with pytest.raises(ValueError):
        SceneConfig([View(cam)], [0, 0, 0], [1, 1, 1])
    with pytest.raises(ValueError):
        SceneConfig([View(cam), View(cam)], [0, 0, 0], [1, 0, 1])
