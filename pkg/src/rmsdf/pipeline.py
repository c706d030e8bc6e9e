"""Synthetic scenes, the alternating reconstruction loop, and metrics."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from rmsdf._bvh import BVH
from rmsdf.imaging import SceneConfig, View, look_at, save_mask, save_pfm, save_scene
from rmsdf.levelset import AdamState, adam_step, chain_to_theta, hull_clamp, sfs_loss_and_vertex_grads
from rmsdf.rasterizer import render_gbuffer
from rmsdf.rmap import (BlinnPhong, Lambertian, LobeEnvMap, MapKernelParams, estimate_rm,
                        load_envmap, rm_from_scene, rm_losses, render_from_rm, save_envmap, save_rm)
from rmsdf.sdfgrid import (SdfGrid, TriMesh, eval_field, load_obj, marching_cubes, save_grid,
                           save_obj, visual_hull)
from rmsdf.sfs import SfSParams, estimate_normals

__all__ = [
    "ReconstructionError",
    "SynthSpec",
    "SyntheticScene",
    "icosphere",
    "superquadric_mesh",
    "default_lobes",
    "synthesize",
    "ReconOptions",
    "ReconReport",
    "ReconResult",
    "reconstruct",
    "sample_surface",
    "visible_samples",
    "eval_geometry",
    "eval_rm",
    "save_normal_map",
    "write_outputs",
]

logger = logging.getLogger(__name__)

# Adam step size in units of the grid spacing.
DEFAULT_LR_FRACTION = 0.1


class ReconstructionError(RuntimeError):
    pass


# -- shapes -----------------------------------------------------------------

def icosphere(radius=1.0, center=(0.0, 0.0, 0.0), subdivisions=5) -> TriMesh:
    t = (1.0 + 5 ** 0.5) / 2.0
    verts = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0), (0, -1, t), (0, 1, t),
             (0, -1, -t), (0, 1, -t), (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9), (5, 11, 4),
             (11, 10, 2), (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8),
             (3, 8, 9), (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    v = [np.array(p, dtype=np.float64) / np.linalg.norm(p) for p in verts]
    f = faces
    for _ in range(subdivisions):
        cache = {}

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = v[a] + v[b]
                v.append(m / np.linalg.norm(m))
                cache[key] = len(v) - 1
            return cache[key]

        nf = []
        for a, b, c in f:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            nf += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        f = nf
    return TriMesh(np.array(v) * radius + np.asarray(center), np.array(f))


def superquadric_mesh(e1, e2, scale=(1.0, 1.0, 1.0), n_lat=64, n_lon=128) -> TriMesh:
    def spow(x, e):
        return np.sign(x) * np.abs(x) ** e

    eta = np.linspace(-np.pi / 2, np.pi / 2, n_lat + 1)[1:-1]
    omega = np.linspace(-np.pi, np.pi, n_lon, endpoint=False)
    E, W = np.meshgrid(eta, omega, indexing="ij")
    sx, sy, sz = scale
    ring = np.stack([sx * spow(np.cos(E), e1) * spow(np.cos(W), e2),
                     sy * spow(np.cos(E), e1) * spow(np.sin(W), e2),
                     sz * spow(np.sin(E), e1)], axis=-1).reshape(-1, 3)
    verts = np.vstack([ring, [[0, 0, -sz], [0, 0, sz]]])
    south, north = len(ring), len(ring) + 1
    faces = []
    for i in range(n_lat - 2):
        for j in range(n_lon):
            a = i * n_lon + j
            b = i * n_lon + (j + 1) % n_lon
            c = (i + 1) * n_lon + j
            d = (i + 1) * n_lon + (j + 1) % n_lon
            faces += [(a, b, d), (a, d, c)]
    top = (n_lat - 2) * n_lon
    for j in range(n_lon):
        faces.append((south, (j + 1) % n_lon, j))
        faces.append((north, top + j, top + (j + 1) % n_lon))
    mesh = TriMesh(verts, np.array(faces))
    if mesh.signed_volume() < 0:
        mesh = TriMesh(verts, mesh.faces[:, ::-1])
    return mesh


def default_lobes():
    """Three broad colored lobes, 120 degrees apart, ~27 degrees above the horizon.

    Lambertian reflectance maps under this light are injective over the
    visible hemisphere.
    """
    dirs = [[1.0, 0.0, 0.5], [-0.5, 0.866, 0.5], [-0.5, -0.866, 0.5]]
    cols = [[3.0, 0.3, 0.3], [0.3, 3.0, 0.3], [0.3, 0.3, 3.0]]
    return LobeEnvMap(dirs, cols, [1.0, 1.0, 1.0], 0.02)


# -- synthesis --------------------------------------------------------------

@dataclass
class SynthSpec:
    shape: dict = field(default_factory=lambda: {"type": "sphere", "radius": 0.5})
    brdf: dict = field(default_factory=lambda: {"type": "lambertian", "albedo": [0.8, 0.8, 0.8]})
    env: dict = field(default_factory=lambda: {"type": "lobes"})
    n_views: int = 10
    image_size: int = 128
    orbit_radius: float = 3.0
    elevation_deg: float = 25.0
    rm_res: int = 128
    n_samples: int = 2 ** 16
    grid_res: int = 128
    seed: int = 0

    def __post_init__(self):
        if self.n_views < 2:
            raise ValueError("n_views must be at least 2")
        if self.image_size <= 0 or self.orbit_radius <= 0 or self.rm_res <= 0:
            raise ValueError("image size, orbit radius and rm_res must be positive")

    @classmethod
    def from_json(cls, path):
        return cls(**json.loads(Path(path).read_text()))

    def build_shape(self, base_dir=None):
        s = self.shape
        kind = s["type"]
        if kind == "sphere":
            r = float(s.get("radius", 0.5))
            if r <= 0:
                raise ValueError("degenerate shape: sphere radius must be positive")
            return icosphere(r, s.get("center", (0, 0, 0)), int(s.get("subdivisions", 5)))
        if kind == "superquadric":
            scale = s.get("scale", [0.5, 0.5, 0.5])
            if np.prod(scale) <= 0:
                raise ValueError("degenerate shape: superquadric scale must be positive")
            return superquadric_mesh(s["e1"], s["e2"], scale)
        if kind == "mesh":
            path = Path(s["path"])
            mesh = load_obj(path if path.is_absolute() or base_dir is None else Path(base_dir) / path)
            if abs(mesh.signed_volume()) < 1e-12:
                raise ValueError("degenerate shape: mesh encloses no volume")
            return mesh
        raise ValueError(f"unknown shape type {kind!r}")

    def build_brdf(self):
        b = self.brdf
        if b["type"] == "lambertian":
            return Lambertian(tuple(np.broadcast_to(b.get("albedo", 0.8), 3)))
        if b["type"] == "blinn_phong":
            return BlinnPhong(tuple(np.broadcast_to(b.get("diffuse", 0.5), 3)),
                              tuple(np.broadcast_to(b.get("specular", 0.3), 3)),
                              float(b.get("exponent", 50.0)))
        raise ValueError(f"unknown brdf type {b['type']!r}")

    def build_env(self, base_dir=None):
        e = self.env
        if e["type"] == "constant":
            return LobeEnvMap.constant(e.get("value", 1.0))
        if e["type"] == "lobes":
            if "lobes" not in e:
                return default_lobes()
            lobes = e["lobes"]
            return LobeEnvMap([l["direction"] for l in lobes], [l["intensity"] for l in lobes],
                              [l["sharpness"] for l in lobes], e.get("ambient", 0.0))
        if e["type"] == "file":
            path = Path(e["path"])
            return load_envmap(path if path.is_absolute() or base_dir is None else Path(base_dir) / path)
        raise ValueError(f"unknown env type {e['type']!r}")


@dataclass
class SyntheticScene:
    scene: SceneConfig
    mesh: TriMesh
    rms: list
    normals: list
    coverage: list


def _ring_cameras(spec, center, radius):
    rng = np.random.default_rng(spec.seed)
    phase = rng.uniform(0, 2 * np.pi)
    d = spec.orbit_radius
    size = spec.image_size
    focal = 0.38 * size * np.sqrt(max(d * d - radius * radius, 1e-12)) / radius
    cams = []
    for k in range(spec.n_views):
        az = phase + 2 * np.pi * k / spec.n_views
        el = np.radians(spec.elevation_deg) * (1 if k % 2 == 0 else -1)
        eye = center + d * np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
        cams.append(look_at(eye, center, [0.0, 0.0, 1.0], focal, size, size))
    return cams


def synthesize(spec, out_dir=None, base_dir=None) -> SyntheticScene:
    """Render a ring of views of a known shape under a known reflectance.

    Every image is the per-view reflectance map looked up at the ground-truth
    normals, so the shading model holds exactly. Cameras alternate between
    ``+elevation`` and ``-elevation`` around the ring. With ``out_dir`` set,
    images, masks, ground truth and ``scene.json`` are written there.
    """
    mesh = spec.build_shape(base_dir)
    brdf = spec.build_brdf()
    env = spec.build_env(base_dir)
    lo_b, hi_b = mesh.vertices.min(axis=0), mesh.vertices.max(axis=0)
    center = 0.5 * (lo_b + hi_b)
    radius = float(np.linalg.norm(mesh.vertices - center, axis=1).max())
    half = 1.3 * radius
    cams = _ring_cameras(spec, center, radius)
    bvh = BVH(mesh.vertices, mesh.faces)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        for sub in ("images", "masks", "gt"):
            (out / sub).mkdir(parents=True, exist_ok=True)
    views, rms, normals, coverage = [], [], [], []
    for k, cam in enumerate(cams):
        gb = render_gbuffer(mesh, cam, bvh=bvh)
        omega = cam.center - center
        rm = rm_from_scene(env, brdf, omega / np.linalg.norm(omega), cam.normal_frame,
                           spec.rm_res, spec.n_samples)
        image = render_from_rm(rm, gb.normal, gb.coverage)
        view = View(cam, _image=image, _mask=gb.coverage.copy())
        if out is not None:
            view.image_path = str(out / "images" / f"view_{k:02d}.pfm")
            view.mask_path = str(out / "masks" / f"view_{k:02d}.png")
            save_pfm(image.astype(np.float32), view.image_path)
            save_mask(gb.coverage, view.mask_path)
            save_rm(rm, out / "gt" / f"rm_{k:02d}.pfm")
            save_normal_map(gb.normal, cam, out / "gt" / f"normals_{k:02d}.pfm")
            # float32 on disk; keep the in-memory image identical to the file
            view._image = image.astype(np.float32).astype(np.float64)
        views.append(view)
        rms.append(rm)
        normals.append(gb.normal)
        coverage.append(gb.coverage)
    scene = SceneConfig(views, center - half, center + half, spec.grid_res)
    if out is not None:
        save_obj(mesh, out / "gt" / "mesh.obj")
        save_envmap(env, out / "gt" / "env.pfm")
        save_scene(scene, out / "scene.json")
        (out / "synth.json").write_text(json.dumps(asdict(spec), indent=2))
    return SyntheticScene(scene, mesh, rms, normals, coverage)


def save_normal_map(normals, camera, path) -> None:
    """Normal map PFM plus a sidecar naming its frame and hemisphere convention."""
    path = Path(path)
    save_pfm(np.asarray(normals, dtype=np.float32), path)
    side = {"frame": "view", "view_R": camera.normal_frame.tolist(),
            "convention": "n = (p, q, 1) / sqrt(p^2 + q^2 + 1), visible normals have n_z > 0"}
    path.with_suffix(".json").write_text(json.dumps(side, indent=2))


# -- metrics ----------------------------------------------------------------

def sample_surface(mesh, n, rng):
    """Area-uniform random points on the mesh; returns ``(points, face ids)``."""
    areas = mesh.face_areas()
    face = rng.choice(len(areas), size=n, p=areas / areas.sum())
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    tri = mesh.vertices[mesh.faces[face]]
    pts = ((1 - r1)[:, None] * tri[:, 0] + (r1 * (1 - r2))[:, None] * tri[:, 1]
           + (r1 * r2)[:, None] * tri[:, 2])
    return pts, face


def visible_samples(mesh, points, cameras, bvh=None):
    """Points seen unoccluded (by ``mesh`` itself) from at least one camera."""
    bvh = bvh or BVH(mesh.vertices, mesh.faces)
    seen = np.zeros(len(points), dtype=bool)
    tol = 1e-6 * max(mesh.bbox_diagonal(), 1e-12)
    for cam in cameras:
        uv, depth = cam.project(points)
        inside = ((depth > 0) & (uv[:, 0] >= 0) & (uv[:, 0] < cam.width)
                  & (uv[:, 1] >= 0) & (uv[:, 1] < cam.height) & ~seen)
        if not inside.any():
            continue
        c = cam.center
        vec = points[inside] - c
        dist = np.linalg.norm(vec, axis=1)
        t, face, _, _ = bvh.intersect(c[None, :], vec / dist[:, None])
        idx = np.flatnonzero(inside)
        seen[idx[(face >= 0) & (t >= dist - tol)]] = True
    return seen


def eval_geometry(recon, truth, cameras, n_samples=100_000, seed=0):
    """RMS surface distances in percent of the ground-truth bounding-box diagonal.

    Returns ``(rms1, rms2)``: recovered-to-truth and truth-to-recovered, each
    over samples visible from ``cameras``.
    """
    if recon.is_empty() or truth.is_empty():
        raise ValueError("both meshes must be nonempty")
    rng = np.random.default_rng(seed)
    diag = truth.bbox_diagonal()
    out = []
    for src, dst in ((recon, truth), (truth, recon)):
        pts, _ = sample_surface(src, n_samples, rng)
        vis = visible_samples(src, pts, cameras)
        if not vis.any():
            raise ValueError("no visible surface samples")
        d, _, _ = BVH(dst.vertices, dst.faces).closest(pts[vis])
        out.append(float(np.sqrt(np.mean(d * d)) / diag * 100.0))
    return tuple(out)


def eval_rm(estimate, truth):
    """Log-scale mean absolute error over the valid disc and all channels."""
    return rm_losses(estimate, truth)["log_L1"]


# -- reconstruction ---------------------------------------------------------

@dataclass
class ReconOptions:
    rounds: int = 8
    steps: int = 100
    lr: float | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    rm_res: int = 128
    rm_rounds: int = 3
    kernel: MapKernelParams = field(default_factory=MapKernelParams)
    sfs: SfSParams = field(default_factory=SfSParams)
    sample_res: int | None = None
    gradient: str = "level_set"
    tol: float = 1e-4
    seed: int = 0
    init_grid: SdfGrid | None = None
    fixed_rms: list | None = None
    out_dir: str | None = None

    def __post_init__(self):
        if self.rounds < 1 or self.steps < 1:
            raise ValueError("rounds and steps must be at least 1")
        if self.lr is not None and not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.gradient not in ("level_set", "extraction"):
            raise ValueError(f"gradient must be 'level_set' or 'extraction', got {self.gradient!r}")


@dataclass
class ReconReport:
    rms1: float | None = None
    rms2: float | None = None
    hull_rms1: float | None = None
    hull_rms2: float | None = None
    rm_log_mae: list = field(default_factory=list)
    sfs_losses: list = field(default_factory=list)
    hull_excess: list = field(default_factory=list)
    rounds_run: int = 0
    wall_clock: float = 0.0

    def to_dict(self):
        return asdict(self)


@dataclass
class ReconResult:
    grid: SdfGrid
    mesh: TriMesh
    reflectance_maps: list
    report: ReconReport
    step_losses: list
    normal_maps: list = field(default_factory=list)


def _view_omega(scene, k):
    return scene.views[k].camera.normal_frame @ scene.viewing_direction(k)


def _dump_failure(opts, grid, message):
    if opts.out_dir is None:
        return
    out = Path(opts.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_grid(grid, out / "failed_grid")
    (out / "error.json").write_text(json.dumps({"error": message}))


def reconstruct(scene, options=None, truth=None) -> ReconResult:
    """Alternate per-view RM/normal estimation with level-set SDF updates.

    ``truth`` (a :class:`SyntheticScene`) is only used to fill the report's
    accuracy fields; it never influences the optimization.
    """
    opts = options or ReconOptions()
    t0 = time.perf_counter()
    hull = visual_hull(scene)
    grid = opts.init_grid if opts.init_grid is not None else hull
    theta_hull = hull.coeffs
    sample_res = opts.sample_res or max(grid.dims)
    lr = opts.lr if opts.lr is not None else DEFAULT_LR_FRACTION * grid.spacing
    state = AdamState(grid.dims, lr, opts.beta1, opts.beta2, opts.eps)
    report = ReconReport()
    cams = scene.cameras
    masks = [v.mask for v in scene.views]
    images = [v.image for v in scene.views]
    mesh = marching_cubes(grid, sample_res)
    if mesh.is_empty():
        raise ReconstructionError("initial surface is empty")
    if truth is not None:
        report.hull_rms1, report.hull_rms2 = eval_geometry(marching_cubes(hull, sample_res),
                                                           truth.mesh, cams)
    step_losses = []
    rms_est = []
    targets = []
    prev = None
    for rnd in range(opts.rounds):
        bvh = BVH(mesh.vertices, mesh.faces)
        targets = []
        rms_est = []
        for k, cam in enumerate(cams):
            gb = render_gbuffer(mesh, cam, bvh=bvh)
            if opts.fixed_rms is not None:
                rm = opts.fixed_rms[k]
            else:
                obs = gb.coverage & masks[k]
                rm, _ = estimate_rm(images[k], gb.normal, obs, _view_omega(scene, k), opts.kernel,
                                    opts.rm_res, opts.rm_rounds, view_R=cam.normal_frame)
            rms_est.append(rm)
            normals, valid = estimate_normals(images[k], masks[k], rm, opts.sfs)
            targets.append((normals, valid & masks[k]))
        losses = []
        for step in range(opts.steps):
            if step > 0:
                mesh = marching_cubes(grid, sample_res)
                if mesh.is_empty():
                    _dump_failure(opts, grid, "surface vanished")
                    raise ReconstructionError(f"surface vanished at round {rnd}, step {step}")
                bvh = BVH(mesh.vertices, mesh.faces)
            total = 0.0
            used = 0
            grad_v = np.zeros_like(mesh.vertices)
            for k, cam in enumerate(cams):
                gb = render_gbuffer(mesh, cam, bvh=bvh)
                normals, valid = targets[k]
                if not (gb.coverage & valid).any():
                    continue
                loss, g = sfs_loss_and_vertex_grads(gb, mesh, normals, valid)
                total += loss
                used += 1
                grad_v += g
            if used == 0:
                _dump_failure(opts, grid, f"no view has valid SfS pixels at round {rnd}")
                raise ReconstructionError(f"no view has valid SfS pixels at round {rnd}, step {step}")
            if not np.isfinite(total):
                _dump_failure(opts, grid, f"non-finite loss at round {rnd}, step {step}")
                raise ReconstructionError(f"loss diverged at round {rnd}, step {step}")
            losses.append(total / used)
            step_losses.append((rnd, step, total))
            dtheta = chain_to_theta(mesh, grad_v, grid,
                                    sample_res if opts.gradient == "extraction" else None)
            theta = hull_clamp(adam_step(grid.coeffs, dtheta, state), theta_hull)
            grid = grid.with_coeffs(theta)
        mesh = marching_cubes(grid, sample_res)
        if mesh.is_empty():
            _dump_failure(opts, grid, "surface vanished")
            raise ReconstructionError(f"surface vanished after round {rnd}")
        # Loss of the geometry entering this round against this round's targets.
        mean_loss = float(losses[0])
        report.sfs_losses.append(mean_loss)
        report.hull_excess.append(float(eval_field(hull, mesh.vertices).max()))
        report.rounds_run = rnd + 1
        logger.info("round %d: mean SfS loss %.5f", rnd, mean_loss)
        if prev is not None and prev - mean_loss < opts.tol:
            break
        prev = mean_loss
    if opts.fixed_rms is None:
        # RMs consistent with the final geometry.
        bvh = BVH(mesh.vertices, mesh.faces)
        rms_est = []
        for k, cam in enumerate(cams):
            gb = render_gbuffer(mesh, cam, bvh=bvh)
            rm, _ = estimate_rm(images[k], gb.normal, gb.coverage & masks[k], _view_omega(scene, k),
                                opts.kernel, opts.rm_res, opts.rm_rounds, view_R=cam.normal_frame)
            rms_est.append(rm)
    if truth is not None:
        report.rms1, report.rms2 = eval_geometry(mesh, truth.mesh, cams)
        if truth.rms and truth.rms[0].resolution == rms_est[0].resolution:
            report.rm_log_mae = [eval_rm(e, t) for e, t in zip(rms_est, truth.rms)]
    report.wall_clock = time.perf_counter() - t0
    result = ReconResult(grid, mesh, rms_est, report, step_losses, [t[0] for t in targets])
    if opts.out_dir is not None:
        write_outputs(result, opts.out_dir, cams)
    return result


def write_outputs(result, out_dir, cameras=()) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_obj(result.mesh, out / "mesh.obj")
    save_grid(result.grid, out / "sdf")
    for k, rm in enumerate(result.reflectance_maps):
        save_rm(rm, out / f"rm_{k:02d}.pfm")
    for k, normals in enumerate(result.normal_maps[:len(cameras)]):
        save_normal_map(normals, cameras[k], out / f"normals_{k:02d}.pfm")
    (out / "report.json").write_text(json.dumps(result.report.to_dict(), indent=2))
    with open(out / "losses.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["round", "step", "sfs_loss"])
        w.writerows(result.step_losses)
