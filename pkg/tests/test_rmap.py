import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rmsdf.imaging import log_radiance
from rmsdf.rmap import (BlinnPhong, EmptyObservationError, HemisphereError, Lambertian,
                        LatLongEnvMap, LobeEnvMap, MapKernelParams, ReflectanceMap,
                        confidence_update, estimate_rm, fisheye_project, fisheye_unproject,
                        halton_cosine_directions, load_envmap, load_rm, render_from_rm,
                        rm_from_scene, rm_losses, rm_pixel_normals, save_envmap, save_rm,
                        weighted_map)


def _hemisphere(n, rng, min_z=1e-3):
    v = rng.normal(size=(n, 3))
    v[:, 2] = np.abs(v[:, 2])
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return v[v[:, 2] > min_z]


# -- fisheye ----------------------------------------------------------------

def test_fisheye_pole_and_rim():
    np.testing.assert_allclose(fisheye_project(np.array([0.0, 0.0, 1.0])), [0.5, 0.5])
    rim = fisheye_project(np.array([1.0, 0.0, 1e-12]))
    np.testing.assert_allclose(rim, [1.0, 0.5], atol=1e-9)
    np.testing.assert_allclose(fisheye_project(np.array([0.0, 1.0, 1e-12])), [0.5, 1.0], atol=1e-9)


def test_fisheye_round_trip(rng):
    n = _hemisphere(10_000, rng)
    back = fisheye_unproject(fisheye_project(n))
    assert np.abs(back - n).max() < 1e-12


def test_fisheye_domain_errors():
    with pytest.raises(HemisphereError):
        fisheye_project(np.array([1.0, 0.0, 0.0]))
    with pytest.raises(HemisphereError):
        fisheye_unproject(np.array([1.0, 0.5]))


def test_valid_mask_is_inscribed_disc():
    for m in (1, 2, 7, 16, 33):
        normals, valid = rm_pixel_normals(m)
        c = (np.arange(m) + 0.5) / m
        u, v = np.meshgrid(c, c)
        np.testing.assert_array_equal(valid, (2 * u - 1) ** 2 + (2 * v - 1) ** 2 < 1)
        np.testing.assert_allclose(np.linalg.norm(normals[valid], axis=1), 1.0)


def test_raster_orientation():
    normals, valid = rm_pixel_normals(16)
    # Row 0 holds normals pointing up (+y), the last column normals pointing right.
    assert normals[1, 8, 1] > 0.9
    assert normals[8, 14, 0] > 0.9


# -- quadrature oracle ------------------------------------------------------

def test_constant_lambertian_is_constant():
    rm = rm_from_scene(LobeEnvMap.constant(2.0), Lambertian((0.5, 0.8, 0.25)), [0, 0, 1],
                       resolution=16, n_samples=2 ** 16)
    expected = 2.0 * np.array([0.5, 0.8, 0.25])
    np.testing.assert_allclose(rm.data[rm.valid], np.broadcast_to(expected, (rm.valid.sum(), 3)),
                               rtol=1e-6)
    assert np.all(rm.data[~rm.valid] == 0)


def test_cosine_directions_are_unit_upper():
    d = halton_cosine_directions(1000)
    np.testing.assert_allclose(np.linalg.norm(d, axis=1), 1.0)
    assert d[:, 2].min() >= 0
    # Mean of cos over the cosine-weighted hemisphere is 2/3.
    assert d[:, 2].mean() == pytest.approx(2 / 3, abs=2e-3)


def test_quadrature_self_convergence():
    env = LobeEnvMap([[0.3, 0.2, 1.0], [-1, 0.4, 0.2]], [[2.0, 1.0, 0.5], [0.2, 0.4, 1.0]], [4.0, 2.0],
                     0.05)
    wo = np.array([0.1, 0.2, 1.0])
    a = rm_from_scene(env, Lambertian(), wo, resolution=12, n_samples=2 ** 16)
    b = rm_from_scene(env, Lambertian(), wo, resolution=12, n_samples=2 ** 17)
    v = a.valid
    assert np.max(np.abs(a.data[v] - b.data[v]) / b.data[v]) < 1e-3


def test_compact_lobe_argmax():
    d = np.array([0.3, -0.4, 0.866])
    d /= np.linalg.norm(d)
    env = LobeEnvMap([d], [[5.0, 5.0, 5.0]], [200.0], 0.0)
    rm = rm_from_scene(env, Lambertian(), [0, 0, 1], resolution=32, n_samples=2 ** 14)
    normals, valid = rm_pixel_normals(32)
    lum = np.where(valid, rm.data.sum(-1), -1)
    best = normals[np.unravel_index(np.argmax(lum), lum.shape)]
    assert np.degrees(np.arccos(np.clip(best @ d, -1, 1))) < 2 * 90 / 16


def test_blinn_phong_against_uniform_monte_carlo():
    # Independent estimator: uniform sphere directions, explicit clamped cosine.
    env = LobeEnvMap([[0.0, 0.3, 1.0]], [[1.0, 0.8, 0.6]], [3.0], 0.1)
    brdf = BlinnPhong((0.4, 0.4, 0.4), (0.5, 0.5, 0.5), 10.0)
    wo = np.array([0.0, 0.0, 1.0])
    rm = rm_from_scene(env, brdf, wo, resolution=8, n_samples=2 ** 16)
    normals, valid = rm_pixel_normals(8)
    rng = np.random.default_rng(0)
    w = rng.normal(size=(400_000, 3))
    w /= np.linalg.norm(w, axis=1, keepdims=True)
    L = env.radiance(w)
    for idx in np.argwhere(valid)[::5]:
        n = normals[tuple(idx)]
        cos = np.maximum(w @ n, 0)
        hv = w + wo
        hv /= np.linalg.norm(hv, axis=1, keepdims=True)
        spec = 0.5 * (10 + 8) / (8 * np.pi) * np.maximum(hv @ n, 0) ** 10
        f = 0.4 / np.pi + spec
        est = 4 * np.pi * np.mean(L * (f * cos)[:, None], axis=0)
        np.testing.assert_allclose(rm.data[tuple(idx)], est, rtol=2e-2)


def test_latlong_env_matches_lobes():
    env = LobeEnvMap([[0.2, 0.1, 1.0]], [[1.0, 0.5, 0.2]], [2.0], 0.1)
    ll = env.to_latlong(256)
    a = rm_from_scene(env, Lambertian(), [0, 0, 1], resolution=8, n_samples=2 ** 13)
    b = rm_from_scene(ll, Lambertian(), [0, 0, 1], resolution=8, n_samples=2 ** 13)
    np.testing.assert_allclose(a.data[a.valid], b.data[b.valid], rtol=5e-3)


def test_brdf_validation():
    with pytest.raises(ValueError):
        Lambertian(1.5)
    with pytest.raises(ValueError):
        BlinnPhong(specular=-0.1)
    with pytest.raises(ValueError):
        rm_from_scene(LobeEnvMap.constant(1.0), Lambertian(), [0, 0, 1], n_samples=0)


# -- weighted mapping -------------------------------------------------------

def brute_force_map(features, normals, conf, wo, s, m):
    queries, valid = rm_pixel_normals(m)
    out = np.zeros((m, m, features.shape[1]))
    for i in range(m):
        for j in range(m):
            if not valid[i, j]:
                continue
            num = np.zeros(features.shape[1])
            den = 0.0
            for f, n, w in zip(features, normals, conf):
                wp = w * max(float(n @ wo), 0.0) * np.exp(s * float(n @ queries[i, j]))
                num += wp * f
                den += wp
            out[i, j] = num / den
    return out


def test_single_and_pair_cases():
    wo = np.array([0.0, 0.0, 1.0])
    out, _ = weighted_map(np.array([[0.7, 1.5, 2.0]]), np.array([wo]), np.array([1.0]), wo,
                          resolution=9)
    center = rm_pixel_normals(9)[1]
    np.testing.assert_allclose(out[4, 4], [0.7, 1.5, 2.0], rtol=1e-14)
    np.testing.assert_allclose(out[center], np.broadcast_to([0.7, 1.5, 2.0], out[center].shape),
                               rtol=1e-12)
    pair, _ = weighted_map(np.array([[1.0], [3.0]]), np.array([wo, wo]), np.ones(2), wo,
                           resolution=9)
    assert pair[4, 4, 0] == pytest.approx(2.0, rel=1e-14)


def test_brute_force_oracle(rng):
    for _ in range(3):
        n = _hemisphere(400, rng)[:256]
        feat = rng.uniform(0.1, 5.0, (len(n), 3))
        conf = rng.uniform(0.0, 1.0, len(n))
        wo = np.array([0.1, -0.2, 1.0])
        wo /= np.linalg.norm(wo)
        out, _ = weighted_map(feat, n, conf, wo, MapKernelParams(sharpness=20.0), resolution=12)
        ref = brute_force_map(feat, n, conf, wo, 20.0, 12)
        valid = rm_pixel_normals(12)[1]
        np.testing.assert_allclose(out[valid], ref[valid], rtol=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.floats(0.01, 100.0))
def test_convexity_and_confidence_scaling(seed, scale):
    rng = np.random.default_rng(seed)
    n = _hemisphere(60, rng, min_z=0.05)
    feat = rng.uniform(0.0, 10.0, (len(n), 2))
    conf = rng.uniform(0.05, 1.0, len(n))
    wo = np.array([0.0, 0.0, 1.0])
    out, _ = weighted_map(feat, n, conf, wo, resolution=10)
    valid = rm_pixel_normals(10)[1]
    assert np.all(out[valid] >= feat.min(axis=0) - 1e-12)
    assert np.all(out[valid] <= feat.max(axis=0) + 1e-12)
    scaled, _ = weighted_map(feat, n, conf * scale, wo, resolution=10)
    np.testing.assert_allclose(scaled, out, rtol=1e-10, atol=1e-12)


def test_fill_pass_uses_wide_kernel(rng):
    # Observations clustered near the pole; rim pixels fall below the floor
    # and must equal the brute-force blend at the fill sharpness.
    n = np.array([[0.05, 0.0, 1.0], [0.0, 0.05, 1.0], [-0.03, -0.02, 1.0]])
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    feat = np.array([[1.0], [2.0], [4.0]])
    wo = np.array([0.0, 0.0, 1.0])
    params = MapKernelParams(sharpness=50.0, den_floor=1e-6, fill_sharpness=8.0)
    out, wsum = weighted_map(feat, n, np.ones(3), wo, params, resolution=16)
    valid = rm_pixel_normals(16)[1]
    low = valid & (wsum < 1e-6)
    assert low.any() and (valid & ~low).any()
    wide = brute_force_map(feat, n, np.ones(3), wo, 8.0, 16)
    sharp = brute_force_map(feat, n, np.ones(3), wo, 50.0, 16)
    np.testing.assert_allclose(out[low], wide[low], rtol=1e-12)
    np.testing.assert_allclose(out[valid & ~low], sharp[valid & ~low], rtol=1e-12)


def test_weighted_map_errors():
    wo = np.array([0.0, 0.0, 1.0])
    with pytest.raises(EmptyObservationError):
        weighted_map(np.ones((2, 3)), np.array([wo, wo]), np.zeros(2), wo)
    with pytest.raises(EmptyObservationError):
        weighted_map(np.ones((1, 3)), np.array([[0.0, 0.0, -1.0]]), np.ones(1), wo)
    with pytest.raises(ValueError):
        weighted_map(np.ones((2, 3)), np.array([wo]), np.ones(2), wo)
    with pytest.raises(ValueError):
        MapKernelParams(sharpness=5.0, fill_sharpness=8.0)


# -- rendering, confidence, estimation ------------------------------------

def test_render_constant_and_nodes():
    rm = ReflectanceMap(np.full((8, 8, 3), 0.25))
    normals, valid = rm_pixel_normals(8)
    img = render_from_rm(rm, normals, valid)
    np.testing.assert_allclose(img[valid], 0.25)
    assert np.all(img[~valid] == 0)
    data = np.random.default_rng(0).uniform(0.1, 1.0, (8, 8, 3))
    rm = ReflectanceMap(data)
    img = render_from_rm(rm, normals, valid)
    np.testing.assert_allclose(img[valid], data[valid], rtol=1e-12)


def test_render_counts_back_facing():
    rm = ReflectanceMap(np.ones((4, 4, 3)))
    normals = np.array([[[0.0, 0.0, 1.0], [0.0, 0.6, -0.8]]])
    img, bad = render_from_rm(rm, normals, np.ones((1, 2), dtype=bool), return_invalid=True)
    assert bad == 1
    np.testing.assert_array_equal(img[0, 1], 0.0)


def test_render_matches_synthesis(small_sphere):
    for k in (0, 3):
        img = render_from_rm(small_sphere.rms[k], small_sphere.normals[k], small_sphere.coverage[k])
        np.testing.assert_allclose(img, small_sphere.scene.views[k].image, rtol=1e-6)


def test_confidence_update():
    img = np.random.default_rng(0).uniform(0.1, 2.0, (4, 5, 3))
    np.testing.assert_array_equal(confidence_update(img, img), 1.0)
    shifted = img * np.exp(np.array([0.05, 0.03, 0.02]))
    np.testing.assert_allclose(confidence_update(img, shifted, k=10.0), np.exp(-1.0), rtol=1e-12)
    gaps = np.exp(np.linspace(0, 2, 10))[None, :, None] * np.ones((1, 1, 3))
    w = confidence_update(np.ones((1, 10, 3)), gaps)
    assert np.all(np.diff(w[0]) < 0)
    with pytest.raises(ValueError):
        confidence_update(img, img[:2])


def test_estimate_rm_self_consistency(small_sphere):
    k = 0
    sc = small_sphere.scene
    omega = sc.views[k].camera.normal_frame @ sc.viewing_direction(k)
    rm, conf = estimate_rm(sc.views[k].image, small_sphere.normals[k], small_sphere.coverage[k],
                           omega, resolution=32)
    truth = small_sphere.rms[k]
    # Pixels whose normal lies within a few degrees of an observation.
    seen = small_sphere.normals[k][small_sphere.coverage[k]]
    q, valid = rm_pixel_normals(32)
    near = valid & ((q @ seen.T).max(axis=-1) > np.cos(np.radians(3)))
    err = np.abs(log_radiance(rm.data) - log_radiance(truth.data))[near].mean()
    assert err < 0.05
    used = small_sphere.coverage[k] & (small_sphere.normals[k][..., 2] > 0)
    assert np.all(conf[used] > 0) and np.all(conf <= 1) and np.all(conf[~used] == 0)
    rm2, conf2 = estimate_rm(sc.views[k].image, small_sphere.normals[k], small_sphere.coverage[k],
                             omega, resolution=32)
    assert np.array_equal(rm.data, rm2.data) and np.array_equal(conf, conf2)


def test_estimate_rm_requires_observations():
    with pytest.raises(EmptyObservationError):
        estimate_rm(np.ones((2, 2, 3)), np.zeros((2, 2, 3)), np.zeros((2, 2), dtype=bool),
                    [0, 0, 1])


# -- losses and I/O --------------------------------------------------------

def test_losses_identities():
    rng = np.random.default_rng(1)
    data = rng.uniform(0.1, 2.0, (16, 16, 3))
    out = rm_losses(ReflectanceMap(data), ReflectanceMap(data))
    assert out["log_L1"] == 0 and out["log_gradient"] == 0
    assert np.isnan(out["image_recon"])
    out = rm_losses(ReflectanceMap(np.e * data), ReflectanceMap(data))
    assert out["log_L1"] == pytest.approx(1.0, rel=1e-12)
    assert out["log_gradient"] == pytest.approx(0.0, abs=1e-12)
    assert out["total"] == pytest.approx(1.0, rel=1e-12)
    with pytest.raises(ValueError):
        rm_losses(data, data[:8, :8])


def test_image_reconstruction_loss(small_sphere):
    k = 1
    rm = small_sphere.rms[k]
    img = small_sphere.scene.views[k].image
    out = rm_losses(rm, rm, img, small_sphere.normals[k], small_sphere.coverage[k])
    assert out["image_recon"] == pytest.approx(0.0, abs=1e-6)
    off = rm_losses(ReflectanceMap(rm.data * np.exp(0.2)), rm, img, small_sphere.normals[k],
                    small_sphere.coverage[k])
    assert off["image_recon"] == pytest.approx(0.6, abs=1e-5)


def test_rm_file_round_trip(tmp_path):
    rm = ReflectanceMap(np.random.default_rng(2).uniform(0, 1, (8, 8, 3)).astype(np.float32),
                        np.diag([1.0, -1.0, -1.0]))
    save_rm(rm, tmp_path / "rm.pfm")
    side = json.loads((tmp_path / "rm.json").read_text())
    assert side["convention"] == "angular-fisheye-v1" and side["resolution"] == 8
    back = load_rm(tmp_path / "rm.pfm")
    np.testing.assert_array_equal(back.data, rm.data)
    np.testing.assert_array_equal(back.view_R, rm.view_R)
    side["convention"] = "other"
    (tmp_path / "rm.json").write_text(json.dumps(side))
    with pytest.raises(ValueError):
        load_rm(tmp_path / "rm.pfm")


def test_envmap_round_trip(tmp_path):
    env = LobeEnvMap([[0, 0, 1.0]], [[1.0, 2.0, 3.0]], [5.0], 0.1)
    save_envmap(env, tmp_path / "env.pfm", height=16)
    back = load_envmap(tmp_path / "env.pfm")
    assert isinstance(back, LatLongEnvMap)
    np.testing.assert_allclose(back.data, env.to_latlong(16).data, rtol=1e-6)
