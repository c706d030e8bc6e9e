"""Signed-distance grids blended by cubic B-splines, mesh extraction and
visual-hull initialization."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage
from skimage import measure

__all__ = [
    "DomainError",
    "EmptyHullError",
    "SdfGrid",
    "TriMesh",
    "bspline_weights",
    "eval_field",
    "eval_gradient",
    "basis_weights",
    "sample_lattice",
    "marching_cubes",
    "visual_hull",
    "save_obj",
    "load_obj",
    "save_grid",
    "load_grid",
]

# Slack (in node units) tolerated when a query sits on the edge of the
# valid interior, e.g. marching-cubes vertices on the sampling boundary.
_EDGE_TOL = 1e-6
HULL_MARGIN = 3


class DomainError(ValueError):
    """A query point lies outside the grid's valid interior."""


class EmptyHullError(RuntimeError):
    pass


@dataclass(frozen=True)
class SdfGrid:
    """Coefficients ``coeffs[i, j, k]`` at nodes ``origin + h * (i, j, k)``."""

    origin: np.ndarray
    spacing: float
    coeffs: np.ndarray

    def __post_init__(self):
        origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        coeffs = np.asarray(self.coeffs, dtype=np.float64)
        if coeffs.ndim != 3 or min(coeffs.shape) < 4:
            raise ValueError(f"grid needs at least 4 nodes per axis, got {coeffs.shape}")
        if not self.spacing > 0:
            raise ValueError("grid spacing must be positive")
        if not np.all(np.isfinite(coeffs)):
            raise ValueError("grid coefficients must be finite")
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "coeffs", coeffs)
        object.__setattr__(self, "spacing", float(self.spacing))

    @property
    def dims(self):
        return self.coeffs.shape

    @property
    def interior(self):
        """``(lo, hi)`` world corners of the region where the field is defined."""
        h = self.spacing
        lo = self.origin + h
        hi = self.origin + h * (np.array(self.dims) - 2)
        return lo, hi

    def node_positions(self):
        axes = [self.origin[a] + self.spacing * np.arange(n) for a, n in enumerate(self.dims)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def with_coeffs(self, coeffs):
        coeffs = np.asarray(coeffs, dtype=np.float64)
        if coeffs.shape != self.dims:
            raise ValueError(f"coefficient shape {coeffs.shape} does not match grid {self.dims}")
        return SdfGrid(self.origin, self.spacing, coeffs)

    @classmethod
    def from_function(cls, fn, origin, spacing, dims):
        """Set every coefficient to ``fn(node_position)``."""
        axes = [origin[a] + spacing * np.arange(n) for a, n in enumerate(dims)]
        pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
        return cls(origin, spacing, fn(pts))


def bspline_weights(frac):
    """Cubic B-spline weights (and derivatives) for nodes ``i-1 .. i+2``.

    ``frac`` is the offset of the query from node ``i`` in node units.
    Returns two ``(..., 4)`` arrays.
    """
    f = np.asarray(frac, dtype=np.float64)
    f2 = f * f
    f3 = f2 * f
    g = 1.0 - f
    w = np.stack([g * g * g / 6.0,
                  (3.0 * f3 - 6.0 * f2 + 4.0) / 6.0,
                  (-3.0 * f3 + 3.0 * f2 + 3.0 * f + 1.0) / 6.0,
                  f3 / 6.0], axis=-1)
    dw = np.stack([-0.5 * g * g,
                   1.5 * f2 - 2.0 * f,
                   -1.5 * f2 + f + 0.5,
                   0.5 * f2], axis=-1)
    return w, dw


def _locate(grid, x):
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    s = (x - grid.origin) / grid.spacing
    upper = np.array(grid.dims, dtype=np.float64) - 2.0
    bad = np.any((s < 1.0 - _EDGE_TOL) | (s > upper + _EDGE_TOL) | ~np.isfinite(s), axis=1)
    if np.any(bad):
        idx = int(np.flatnonzero(bad)[0])
        raise DomainError(f"point {idx} at {x[idx].tolist()} is outside the grid interior "
                          f"{[lo.tolist() for lo in grid.interior]}")
    s = np.clip(s, 1.0, upper)
    base = np.minimum(np.floor(s).astype(np.int64), np.array(grid.dims) - 3)
    return x, base, s - base


def _tensor(grid, x, derivative):
    x, base, frac = _locate(grid, x)
    w, dw = bspline_weights(frac)  # (N, 3, 4)
    offs = np.arange(-1, 3)
    ix = base[:, 0, None] + offs
    iy = base[:, 1, None] + offs
    iz = base[:, 2, None] + offs
    c = grid.coeffs[ix[:, :, None, None], iy[:, None, :, None], iz[:, None, None, :]]
    wx, wy, wz = w[:, 0], w[:, 1], w[:, 2]
    val = np.einsum("na,nb,nc,nabc->n", wx, wy, wz, c)
    if not derivative:
        return val
    dx, dy, dz = dw[:, 0], dw[:, 1], dw[:, 2]
    grad = np.stack([np.einsum("na,nb,nc,nabc->n", dx, wy, wz, c),
                     np.einsum("na,nb,nc,nabc->n", wx, dy, wz, c),
                     np.einsum("na,nb,nc,nabc->n", wx, wy, dz, c)], axis=-1)
    return val, grad / grid.spacing


def eval_field(grid, x):
    """Field value at world points ``x`` (shape ``(3,)`` or ``(N, 3)``)."""
    val = _tensor(grid, x, False)
    return val[0] if np.ndim(x) == 1 else val


def eval_gradient(grid, x):
    """Analytic spatial gradient of the field at ``x``."""
    _, grad = _tensor(grid, x, True)
    return grad[0] if np.ndim(x) == 1 else grad


def basis_weights(grid, x):
    """Sensitivities of the field at each point to its 64 support nodes.

    Returns ``(flat_index, weight)``, both ``(N, 64)``; ``flat_index`` is
    into ``grid.coeffs.ravel()``. Weights sum to one per point.
    """
    x, base, frac = _locate(grid, x)
    w, _ = bspline_weights(frac)
    offs = np.arange(-1, 3)
    ix = base[:, 0, None] + offs
    iy = base[:, 1, None] + offs
    iz = base[:, 2, None] + offs
    nx, ny, nz = grid.dims
    flat = (ix[:, :, None, None] * ny + iy[:, None, :, None]) * nz + iz[:, None, None, :]
    wt = w[:, 0, :, None, None] * w[:, 1, None, :, None] * w[:, 2, None, None, :]
    n = len(x)
    return flat.reshape(n, 64), wt.reshape(n, 64)


def _axis_matrix(n_nodes, n_samples):
    # Dense (n_samples, n_nodes) blending matrix for samples spread evenly
    # over node coordinates [1, n_nodes - 2].
    s = np.linspace(1.0, n_nodes - 2.0, n_samples)
    base = np.minimum(np.floor(s).astype(np.int64), n_nodes - 3)
    w, _ = bspline_weights(s - base)
    m = np.zeros((n_samples, n_nodes))
    rows = np.arange(n_samples)
    for k in range(4):
        m[rows, base - 1 + k] = w[:, k]
    return m, s


def sample_lattice(grid, sample_res=None):
    """Evaluate the field on a regular lattice spanning the valid interior.

    Returns ``(values, lattice_origin, lattice_spacing)``. Uses the
    separable structure of the tensor-product basis.
    """
    dims = grid.dims
    if sample_res is None:
        sample_res = tuple(2 * n for n in dims)
    elif np.isscalar(sample_res):
        sample_res = (int(sample_res),) * 3
    vals = grid.coeffs
    spacing = []
    for axis, (n, m) in enumerate(zip(dims, sample_res)):
        if m < 2:
            raise ValueError("sample_res must be at least 2 per axis")
        mat, s = _axis_matrix(n, m)
        vals = np.moveaxis(np.tensordot(mat, vals, axes=([1], [axis])), 0, axis)
        spacing.append((s[1] - s[0]) * grid.spacing)
    lo, _ = grid.interior
    return vals, lo, np.array(spacing)


def sample_lattice_adjoint(grid, lattice_grad):
    """Transpose of :func:`sample_lattice`: pull lattice gradients back to coefficients."""
    out = np.asarray(lattice_grad, dtype=np.float64)
    for axis, n in enumerate(grid.dims):
        mat, _ = _axis_matrix(n, out.shape[axis])
        out = np.moveaxis(np.tensordot(mat.T, out, axes=([1], [axis])), 0, axis)
    return out


@dataclass(frozen=True)
class TriMesh:
    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if len(f) and (f.min() < 0 or f.max() >= len(v)):
            raise ValueError("face index out of range")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)

    @property
    def n_faces(self):
        return len(self.faces)

    def is_empty(self):
        return len(self.faces) == 0

    def face_cross(self):
        v = self.vertices
        f = self.faces
        return np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])

    def face_areas(self):
        return 0.5 * np.linalg.norm(self.face_cross(), axis=1)

    def face_normals(self):
        c = self.face_cross()
        return c / np.linalg.norm(c, axis=1, keepdims=True)

    def signed_volume(self):
        v = self.vertices[self.faces]
        return np.einsum("ij,ij->i", v[:, 0], np.cross(v[:, 1], v[:, 2])).sum() / 6.0

    def edge_face_counts(self):
        """Counts of faces sharing each undirected edge."""
        e = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]])
        e = np.sort(e, axis=1)
        _, counts = np.unique(e, axis=0, return_counts=True)
        return counts

    def is_watertight(self):
        if self.is_empty():
            return False
        # Closed and consistently oriented: every directed edge appears once
        # and its reverse appears once.
        e = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]])
        directed = set(map(tuple, e.tolist()))
        if len(directed) != len(e):
            return False
        return all((b, a) in directed for a, b in directed)

    def bbox_diagonal(self):
        return float(np.linalg.norm(self.vertices.max(axis=0) - self.vertices.min(axis=0)))


def _drop_degenerate(vertices, faces, min_area=1e-12):
    # Collapse degenerate faces by merging their vertices, repeat until clean.
    while len(faces):
        cross = np.cross(vertices[faces[:, 1]] - vertices[faces[:, 0]],
                         vertices[faces[:, 2]] - vertices[faces[:, 0]])
        bad = 0.5 * np.linalg.norm(cross, axis=1) < min_area
        if not bad.any():
            break
        parent = np.arange(len(vertices))

        def find(a):
            while parent[a] != a:
                parent[a] = parent[parent[a]]
                a = parent[a]
            return a

        for tri in faces[bad]:
            roots = sorted({find(int(i)) for i in tri})
            for r in roots[1:]:
                parent[r] = roots[0]
        root = np.array([find(i) for i in range(len(vertices))])
        faces = root[faces]
        keep = (faces[:, 0] != faces[:, 1]) & (faces[:, 1] != faces[:, 2]) & (faces[:, 0] != faces[:, 2])
        faces = faces[keep]
    used = np.unique(faces)
    remap = np.full(len(vertices), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    return vertices[used], remap[faces]


# Lattice-unit tolerance for "integral" coordinates. Extracted vertices come
# from float32 arithmetic, so anything closer than this to a node is ambiguous.
_LATTICE_TOL = 1e-4


def lattice_edges(vertices, vals, lo, step):
    """Locate each extracted vertex on its lattice edge.

    Returns ``(ia, ib, axis, on_edge)``: integer lattice indices of the two
    edge ends, the edge axis, and a mask of vertices that lie strictly inside
    an edge whose end values change sign. Others (vertices on a node or
    outside the lattice) have no unique edge.
    """
    u = (np.asarray(vertices, dtype=np.float64) - lo) / step
    near = np.round(u)
    off = np.abs(u - near)
    axis = np.argmax(off, axis=1)
    rows = np.arange(len(u))
    ia = near.astype(np.int64)
    ia[rows, axis] = np.floor(u[rows, axis]).astype(np.int64)
    ib = ia.copy()
    ib[rows, axis] += 1
    hi = np.array(vals.shape) - 1
    inside = np.all((ia >= 0) & (ib <= hi), axis=1)
    ia = np.clip(ia, 0, hi)
    ib = np.clip(ib, 0, hi)
    fa = vals[tuple(ia.T)]
    fb = vals[tuple(ib.T)]
    other = np.sort(off, axis=1)[:, 1]
    on_edge = inside & (off[rows, axis] > _LATTICE_TOL) & (other < _LATTICE_TOL) & (fa * fb < 0)
    return ia, ib, axis, on_edge


def extraction_lattice(grid, sample_res=None):
    """Lattice values as seen by :func:`marching_cubes`.

    Negative values on the outermost lattice layer are replaced by the
    largest magnitude on the lattice, which caps the surface half a step
    inside the boundary instead of leaving it open. Returns
    ``(values, lattice_origin, lattice_spacing, forced)`` where ``forced``
    marks the replaced entries (constants with respect to the coefficients).
    """
    vals, lo, step = sample_lattice(grid, sample_res)
    border = np.ones(vals.shape, dtype=bool)
    border[1:-1, 1:-1, 1:-1] = False
    forced = border & (vals <= 0)
    if forced.any():
        vals = vals.copy()
        vals[forced] = max(float(np.abs(vals).max()), grid.spacing)
    return vals, lo, step, forced


def marching_cubes(grid, sample_res=None) -> TriMesh:
    """Extract the zero level set; faces wind so normals point to f > 0.

    Where the surface would cross the lattice boundary it is closed off just
    inside it (see :func:`extraction_lattice`), so the mesh is always closed.
    """
    raw, _, _ = sample_lattice(grid, sample_res)
    if raw.min() > 0 or raw.max() < 0:
        return TriMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    vals, lo, step, _ = extraction_lattice(grid, sample_res)
    verts, faces, _, _ = measure.marching_cubes(vals, level=0.0, spacing=tuple(step),
                                                allow_degenerate=True)
    verts = np.clip(verts.astype(np.float64) + lo, lo, grid.interior[1])
    # The extractor works in float32; redo the edge interpolation in float64
    # so vertices follow the field exactly.
    ia, ib, axis, on_edge = lattice_edges(verts, vals, lo, step)
    fa = vals[tuple(ia[on_edge].T)]
    fb = vals[tuple(ib[on_edge].T)]
    rows = np.flatnonzero(on_edge)
    ax = axis[on_edge]
    verts[rows, ax] = lo[ax] + step[ax] * (ia[on_edge, ax] + fa / (fa - fb))
    verts, faces = _drop_degenerate(verts, faces.astype(np.int64))
    mesh = TriMesh(verts, faces)
    if len(faces) and mesh.signed_volume() < 0:
        mesh = TriMesh(verts, faces[:, ::-1])
    return mesh


def visual_hull(scene, grid_res=None, dilate=1) -> SdfGrid:
    """Carve nodes against every silhouette and convert to a signed distance.

    A node is occupied when it projects in front of each camera, inside the
    image and onto a mask pixel. Masks are dilated by ``dilate`` pixels first
    so that pixel-center sampling of the silhouettes cannot carve away parts
    of the object. Nodes within a few layers of the volume border are never
    occupied so that the field stays positive there.
    """
    res = int(grid_res or scene.grid_res)
    extent = scene.volume_max - scene.volume_min
    h = float(extent.max()) / (res - 1)
    dims = tuple(int(np.ceil(e / h - 1e-9)) + 1 for e in extent)
    axes = [scene.volume_min[a] + h * np.arange(n) for a, n in enumerate(dims)]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    occ = np.ones(len(pts), dtype=bool)
    for view in scene.views:
        cam = view.camera
        mask = view.mask
        if dilate > 0:
            mask = ndimage.binary_dilation(mask, np.ones((3, 3), dtype=bool), iterations=dilate)
        uv, depth = cam.project(pts)
        with np.errstate(invalid="ignore"):
            col = np.floor(uv[:, 0])
            row = np.floor(uv[:, 1])
        inside = (depth > 0) & (col >= 0) & (col < cam.width) & (row >= 0) & (row < cam.height)
        hit = np.zeros(len(pts), dtype=bool)
        hit[inside] = mask[row[inside].astype(np.int64), col[inside].astype(np.int64)]
        occ &= hit
    occ = occ.reshape(dims)
    m = HULL_MARGIN
    border = np.ones(dims, dtype=bool)
    border[m:-m, m:-m, m:-m] = False
    occ[border] = False
    if not occ.any():
        raise EmptyHullError("visual hull is empty: no grid node projects inside every mask")
    d_out = ndimage.distance_transform_edt(~occ) * h
    d_in = ndimage.distance_transform_edt(occ) * h
    coeffs = np.where(occ, -(d_in - 0.5 * h), d_out - 0.5 * h)
    return SdfGrid(scene.volume_min, h, coeffs)


def save_obj(mesh, path) -> None:
    lines = [f"v {x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.tolist()]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces.tolist()]
    Path(path).write_text("\n".join(lines) + "\n")


def load_obj(path) -> TriMesh:
    verts, faces = [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(p) for p in parts[1:4]])
        elif parts[0] == "f":
            idx = [int(p.split("/")[0]) for p in parts[1:]]
            idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
            for k in range(1, len(idx) - 1):
                faces.append([idx[0], idx[k], idx[k + 1]])
    return TriMesh(np.array(verts).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3))


def save_grid(grid, path) -> None:
    """Write ``<path>.json`` header and ``<path>.raw`` little-endian float64."""
    path = Path(path)
    header = {"origin": grid.origin.tolist(), "spacing": grid.spacing,
              "dims": list(grid.dims), "dtype": "<f8", "order": "C"}
    path.with_suffix(".json").write_text(json.dumps(header, indent=2))
    path.with_suffix(".raw").write_bytes(grid.coeffs.astype("<f8").tobytes())


def load_grid(path) -> SdfGrid:
    path = Path(path)
    header = json.loads(path.with_suffix(".json").read_text())
    data = np.frombuffer(path.with_suffix(".raw").read_bytes(), dtype=header["dtype"])
    return SdfGrid(header["origin"], header["spacing"], data.reshape(header["dims"]))
