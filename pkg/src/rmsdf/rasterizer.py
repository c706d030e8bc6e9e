"""Per-view G-buffer rendering by ray casting, and the backward pass from
per-pixel normal gradients to mesh vertices."""

from dataclasses import dataclass, replace

import numpy as np

from rmsdf._bvh import BVH

__all__ = ["GBuffer", "render_gbuffer", "backward_normals", "GBufferError"]


class GBufferError(RuntimeError):
    """The G-buffer and the mesh it is used with disagree."""


@dataclass(frozen=True)
class GBuffer:
    """Per-pixel geometry for one view.

    ``normal`` and ``view_dir`` are in the camera's view frame (see
    :attr:`rmsdf.imaging.Camera.normal_frame`), ``position`` in world
    coordinates and ``depth`` along the optical axis. ``bary`` holds the
    weights of the face's three vertices.
    """

    coverage: np.ndarray
    face: np.ndarray
    bary: np.ndarray
    normal: np.ndarray
    position: np.ndarray
    depth: np.ndarray
    view_dir: np.ndarray
    frame: np.ndarray

    @property
    def shape(self):
        return self.coverage.shape


def _scaled(camera, width, height):
    if width is None and height is None:
        return camera
    width = camera.width if width is None else width
    height = camera.height if height is None else height
    sx, sy = width / camera.width, height / camera.height
    return replace(camera, fx=camera.fx * sx, fy=camera.fy * sy, cx=camera.cx * sx,
                   cy=camera.cy * sy, width=width, height=height)


def render_gbuffer(mesh, camera, width=None, height=None, bvh=None) -> GBuffer:
    """Cast one ray per pixel center; keep the nearest front-facing hit.

    Flat face normals are used. Back faces (normal along the ray) are
    skipped and exact depth ties go to the lower face index.
    """
    cam = _scaled(camera, width, height)
    h, w = cam.height, cam.width
    origin, dirs = cam.pixel_rays()
    dirs = dirs.reshape(-1, 3)
    frame = cam.normal_frame
    if bvh is None:
        bvh = BVH(mesh.vertices, mesh.faces)
    t, face, b1, b2 = bvh.intersect(origin[None, :], dirs)
    cov = face >= 0
    normal = np.zeros((h * w, 3))
    position = np.zeros((h * w, 3))
    depth = np.zeros(h * w)
    bary = np.zeros((h * w, 3))
    if cov.any():
        fn = mesh.face_normals()[face[cov]]
        normal[cov] = fn @ frame.T
        position[cov] = origin + t[cov, None] * dirs[cov]
        depth[cov] = (position[cov] - origin) @ cam.R[2]
        bary[cov] = np.stack([1.0 - b1[cov] - b2[cov], b1[cov], b2[cov]], axis=1)
        bary[cov] = np.clip(bary[cov], 0.0, 1.0)
        bary[cov] /= bary[cov].sum(axis=1, keepdims=True)
    view_dir = -(dirs @ frame.T)
    return GBuffer(cov.reshape(h, w), face.reshape(h, w), bary.reshape(h, w, 3),
                   normal.reshape(h, w, 3), position.reshape(h, w, 3), depth.reshape(h, w),
                   view_dir.reshape(h, w, 3), frame)


def backward_normals(gbuffer, mesh, grad_normal) -> np.ndarray:
    """Chain per-pixel ``dL/dn`` (view frame) to per-vertex ``dL/dv``.

    Visibility is held fixed: each covered pixel contributes only through
    the flat normal of the face it sees.
    """
    g = np.asarray(grad_normal, dtype=np.float64)
    cov = gbuffer.coverage
    if g.shape != cov.shape + (3,):
        raise ValueError(f"gradient shape {g.shape} does not match G-buffer {cov.shape}")
    if np.any(g[~cov] != 0):
        raise GBufferError("normal gradient given on uncovered pixels")
    face = gbuffer.face[cov]
    if np.any(face < 0) or np.any(face >= mesh.n_faces):
        raise GBufferError("covered pixel references a missing face")
    out = np.zeros_like(mesh.vertices)
    if face.size == 0:
        return out
    # Sum per face first; the Jacobian depends only on the face.
    g_world = g[cov] @ gbuffer.frame
    used, inv = np.unique(face, return_inverse=True)
    gf = np.zeros((len(used), 3))
    np.add.at(gf, inv, g_world)
    tri = mesh.vertices[mesh.faces[used]]
    e1 = tri[:, 1] - tri[:, 0]
    e2 = tri[:, 2] - tri[:, 0]
    c = np.cross(e1, e2)
    norm = np.linalg.norm(c, axis=1, keepdims=True)
    n = c / norm
    dc = (gf - n * np.einsum("ij,ij->i", n, gf)[:, None]) / norm
    de1 = np.cross(e2, dc)
    de2 = np.cross(dc, e1)
    f = mesh.faces[used]
    np.add.at(out, f[:, 0], -(de1 + de2))
    np.add.at(out, f[:, 1], de1)
    np.add.at(out, f[:, 2], de2)
    return out
