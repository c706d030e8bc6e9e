import numpy as np
import pytest

from rmsdf.imaging import Camera, look_at
from rmsdf.pipeline import icosphere
from rmsdf.rasterizer import GBufferError, backward_normals, render_gbuffer
from rmsdf.sdfgrid import TriMesh


def _front_camera(size=16, f=20.0):
    # Camera at z = -5 looking along +z; identity rotation.
    return Camera(f, f, size / 2, size / 2, np.eye(3), np.array([0.0, 0.0, 5.0]), size, size)


def _big_triangle(z=0.0):
    # Counter-clockwise as seen from the camera (normal toward -z, the viewer).
    v = np.array([[-50.0, -50.0, z], [-50.0, 150.0, z], [150.0, -50.0, z]])
    return TriMesh(v, np.array([[0, 1, 2]]))


def test_full_frame_triangle():
    mesh = _big_triangle()
    cam = _front_camera()
    gb = render_gbuffer(mesh, cam)
    assert gb.coverage.all()
    assert np.all(gb.face == 0)
    np.testing.assert_allclose(gb.normal, np.broadcast_to(cam.normal_frame @ mesh.face_normals()[0],
                                                          gb.normal.shape), atol=1e-12)
    np.testing.assert_allclose(gb.normal[..., 2], 1.0)
    np.testing.assert_allclose(gb.depth, 5.0)
    np.testing.assert_allclose(gb.bary.sum(-1), 1.0)
    assert np.all((gb.bary >= 0) & (gb.bary <= 1))
    np.testing.assert_allclose(np.linalg.norm(gb.view_dir, axis=-1), 1.0)


def test_back_faces_are_culled():
    mesh = _big_triangle()
    flipped = TriMesh(mesh.vertices, mesh.faces[:, ::-1])
    assert not render_gbuffer(flipped, _front_camera()).coverage.any()


def test_nearer_face_wins():
    a = _big_triangle(z=1.0)
    b = _big_triangle(z=0.0)
    both = TriMesh(np.vstack([a.vertices, b.vertices]), np.array([[0, 1, 2], [3, 4, 5]]))
    gb = render_gbuffer(both, _front_camera())
    assert np.all(gb.face == 1)
    np.testing.assert_allclose(gb.depth, 5.0)


def test_depth_tie_goes_to_lower_face():
    a = _big_triangle()
    both = TriMesh(np.vstack([a.vertices, a.vertices]), np.array([[3, 4, 5], [0, 1, 2]]))
    assert np.all(render_gbuffer(both, _front_camera()).face == 0)


def test_empty_mesh_has_no_coverage():
    mesh = TriMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=int))
    assert not render_gbuffer(mesh, _front_camera()).coverage.any()


def test_sphere_silhouette_matches_disc():
    size, d, r = 256, 3.0, 0.5
    cam = look_at([0.0, -d, 0.0], [0, 0, 0], [0, 0, 1], 300.0, size, size)
    gb = render_gbuffer(icosphere(r, subdivisions=6), cam)
    j, i = np.meshgrid(np.arange(size) + 0.5, np.arange(size) + 0.5)
    rad = np.hypot(j - size / 2, i - size / 2)
    r_img = 300.0 * r / np.sqrt(d * d - r * r)
    disagree = gb.coverage != (rad < r_img)
    assert np.all(np.abs(rad[disagree] - r_img) <= 1.0)


def test_render_is_deterministic():
    mesh = icosphere(0.5, subdivisions=3)
    cam = look_at([2.0, 1.0, 0.5], [0, 0, 0], [0, 0, 1], 60.0, 40, 32)
    a = render_gbuffer(mesh, cam)
    b = render_gbuffer(mesh, cam)
    for name in ("coverage", "face", "bary", "normal", "position", "depth"):
        assert np.array_equal(getattr(a, name), getattr(b, name))


def test_resolution_override_scales_intrinsics():
    mesh = icosphere(0.5, subdivisions=3)
    cam = look_at([0.0, -3.0, 0.0], [0, 0, 0], [0, 0, 1], 60.0, 32, 32)
    gb = render_gbuffer(mesh, cam, width=64, height=64)
    assert gb.shape == (64, 64)
    assert gb.coverage.sum() == pytest.approx(4 * render_gbuffer(mesh, cam).coverage.sum(), rel=0.1)


def _scene(seed=0):
    rng = np.random.default_rng(seed)
    base = icosphere(0.5, subdivisions=2)
    mesh = TriMesh(base.vertices * rng.uniform(0.9, 1.1, (len(base.vertices), 1)), base.faces)
    cam = look_at([2.5, 0.8, 0.6], [0, 0, 0], [0, 0, 1], 40.0, 32, 32)
    return mesh, cam, rng


def _normal_loss(vertices, faces, gb, a):
    m = TriMesh(vertices, faces)
    n = m.face_normals()[gb.face[gb.coverage]] @ gb.frame.T
    return float(np.sum(a[gb.coverage] * n))


def test_backward_matches_finite_differences():
    mesh, cam, rng = _scene()
    gb = render_gbuffer(mesh, cam)
    a = np.where(gb.coverage[..., None], rng.normal(size=gb.normal.shape), 0.0)
    grad = backward_normals(gb, mesh, a)
    eps = 1e-5
    verts = np.unique(mesh.faces[np.unique(gb.face[gb.coverage])])
    fd = np.zeros_like(grad)
    for v in verts:
        for k in range(3):
            p = mesh.vertices.copy()
            m = mesh.vertices.copy()
            p[v, k] += eps
            m[v, k] -= eps
            fd[v, k] = (_normal_loss(p, mesh.faces, gb, a) - _normal_loss(m, mesh.faces, gb, a)) / (2 * eps)
    assert np.linalg.norm(grad - fd) <= 1e-3 * np.linalg.norm(fd)
    np.testing.assert_allclose(grad, fd, rtol=1e-3, atol=1e-6 * np.abs(fd).max())


def test_backward_zero_and_translation_invariance():
    mesh, cam, rng = _scene(1)
    gb = render_gbuffer(mesh, cam)
    assert not backward_normals(gb, mesh, np.zeros(gb.normal.shape)).any()
    a = np.where(gb.coverage[..., None], rng.normal(size=gb.normal.shape), 0.0)
    grad = backward_normals(gb, mesh, a)
    np.testing.assert_allclose(grad.sum(axis=0), 0.0, atol=1e-10)


def test_backward_conservation():
    mesh, cam, _ = _scene(2)
    gb = render_gbuffer(mesh, cam)
    ij = np.argwhere(gb.coverage)[len(np.argwhere(gb.coverage)) // 2]
    g = np.zeros(gb.normal.shape)
    g[tuple(ij)] = [0.3, -0.7, 0.2]
    grad = backward_normals(gb, mesh, g)
    touched = set(np.flatnonzero(np.abs(grad).sum(axis=1)))
    assert touched <= set(mesh.faces[gb.face[tuple(ij)]].tolist())
    assert touched


def test_backward_errors():
    mesh, cam, _ = _scene(3)
    gb = render_gbuffer(mesh, cam)
    g = np.zeros(gb.normal.shape)
    g[~gb.coverage] = 1.0
    with pytest.raises(GBufferError):
        backward_normals(gb, mesh, g)
    small = TriMesh(mesh.vertices, mesh.faces[:1])
    with pytest.raises(GBufferError):
        backward_normals(gb, small, np.zeros(gb.normal.shape))
    with pytest.raises(ValueError):
        backward_normals(gb, mesh, np.zeros(gb.shape + (1,)))
