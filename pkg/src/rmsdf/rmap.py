"""Camera-view reflectance maps.

A reflectance map stores the radiance a view observes for every visible
surface normal. Normals are expressed in the view frame (z toward the
viewer) and laid out on a square raster by the angular fisheye
projection, where the distance from the center is proportional to the
angle between the normal and the view axis.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numba import njit
from scipy import ndimage
from scipy.stats import qmc

from rmsdf.imaging import DEFAULT_LOG_FLOOR, load_pfm, log_radiance, save_pfm

__all__ = [
    "HemisphereError",
    "EmptyObservationError",
    "fisheye_project",
    "fisheye_unproject",
    "rm_pixel_normals",
    "ReflectanceMap",
    "MapKernelParams",
    "LatLongEnvMap",
    "LobeEnvMap",
    "Lambertian",
    "BlinnPhong",
    "halton_cosine_directions",
    "rm_from_scene",
    "weighted_map",
    "render_from_rm",
    "confidence_update",
    "estimate_rm",
    "rm_losses",
    "save_rm",
    "load_rm",
    "save_envmap",
    "load_envmap",
]

logger = logging.getLogger(__name__)

CONVENTION = "angular-fisheye-v1"
LOSS_WEIGHTS = {"log_L1": 1.0, "log_gradient": 0.1, "image_recon": 1.0}


class HemisphereError(ValueError):
    """A normal or raster position lies outside the visible hemisphere."""


class EmptyObservationError(ValueError):
    pass


def fisheye_project(n):
    """Map unit normals with ``n_z > 0`` to ``(u, v)`` in the unit square."""
    n = np.asarray(n, dtype=np.float64)
    if np.any(n[..., 2] <= 0):
        raise HemisphereError("normal outside the visible hemisphere (n_z <= 0)")
    rho = np.hypot(n[..., 0], n[..., 1])
    theta = np.arctan2(rho, n[..., 2])
    r = theta / (np.pi / 2)
    with np.errstate(invalid="ignore", divide="ignore"):
        cx = np.where(rho > 0, n[..., 0] / rho, 0.0)
        cy = np.where(rho > 0, n[..., 1] / rho, 0.0)
    return np.stack([0.5 + 0.5 * r * cx, 0.5 + 0.5 * r * cy], axis=-1)


def fisheye_unproject(uv):
    """Inverse of :func:`fisheye_project` for points inside the open disc."""
    uv = np.asarray(uv, dtype=np.float64)
    x = 2.0 * uv[..., 0] - 1.0
    y = 2.0 * uv[..., 1] - 1.0
    r = np.hypot(x, y)
    if np.any(r >= 1.0):
        raise HemisphereError("raster position outside the fisheye disc")
    theta = r * (np.pi / 2)
    with np.errstate(invalid="ignore", divide="ignore"):
        s = np.where(r > 0, np.sin(theta) / r, 0.0)
    return np.stack([x * s, y * s, np.cos(theta)], axis=-1)


def _pixel_uv(m):
    # Row 0 is the top of the raster (largest v) so stored maps look upright.
    c = (np.arange(m) + 0.5) / m
    u, v = np.meshgrid(c, c[::-1])
    return np.stack([u, v], axis=-1)


def rm_pixel_normals(m):
    """Normals at the pixel centers of an ``m x m`` raster and the disc mask."""
    uv = _pixel_uv(m)
    valid = (2 * uv[..., 0] - 1) ** 2 + (2 * uv[..., 1] - 1) ** 2 < 1.0
    normals = np.zeros((m, m, 3))
    normals[valid] = fisheye_unproject(uv[valid])
    return normals, valid


@dataclass(frozen=True)
class MapKernelParams:
    sharpness: float = 50.0
    den_floor: float = 1e-6
    fill_sharpness: float = 8.0

    def __post_init__(self):
        if not (self.sharpness > 0 and self.den_floor > 0 and self.fill_sharpness < self.sharpness):
            raise ValueError("need sharpness > 0, den_floor > 0 and fill_sharpness < sharpness")


@dataclass(frozen=True)
class ReflectanceMap:
    """``data`` is ``(M, M, C)``; ``view_R`` rotates world vectors into the view frame."""

    data: np.ndarray
    view_R: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim == 2:
            data = data[:, :, None]
        if data.shape[0] != data.shape[1]:
            raise ValueError(f"reflectance map must be square, got {data.shape[:2]}")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "view_R", np.asarray(self.view_R, dtype=np.float64))

    @property
    def resolution(self):
        return self.data.shape[0]

    @property
    def valid(self):
        return rm_pixel_normals(self.resolution)[1]

    def lookup(self, normals):
        """Bilinear lookup at view-frame normals (``n_z > 0`` required).

        Taps outside the disc are dropped and the remaining weights
        renormalized; a point with no valid tap takes its nearest valid pixel.
        """
        uv = fisheye_project(normals)
        return _bilinear(self.data, self.valid, uv)


def _bilinear(data, valid, uv):
    m = data.shape[0]
    x = uv[..., 0] * m - 0.5
    y = (1.0 - uv[..., 1]) * m - 0.5
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    fx = x - x0
    fy = y - y0
    out = np.zeros(uv.shape[:-1] + (data.shape[2],))
    wsum = np.zeros(uv.shape[:-1])
    for dy, wy in ((0, 1 - fy), (1, fy)):
        for dx, wx in ((0, 1 - fx), (1, fx)):
            xi = x0 + dx
            yi = y0 + dy
            inside = (xi >= 0) & (xi < m) & (yi >= 0) & (yi < m)
            xc = np.clip(xi, 0, m - 1)
            yc = np.clip(yi, 0, m - 1)
            w = np.where(inside & valid[yc, xc], wx * wy, 0.0)
            out += w[..., None] * data[yc, xc]
            wsum += w
    empty = wsum <= 0
    if np.any(empty):
        _, (iy, ix) = ndimage.distance_transform_edt(~valid, return_indices=True)
        xc = np.clip(np.rint(x[empty]).astype(np.int64), 0, m - 1)
        yc = np.clip(np.rint(y[empty]).astype(np.int64), 0, m - 1)
        out[empty] = data[iy[yc, xc], ix[yc, xc]]
        wsum[empty] = 1.0
    return out / wsum[..., None]


# -- illumination and BRDF models used by the synthesis oracle ------------

@dataclass(frozen=True)
class LatLongEnvMap:
    """Equirectangular radiance ``(H, W, 3)``; row 0 looks along world +z."""

    data: np.ndarray

    def radiance(self, dirs):
        d = np.asarray(dirs, dtype=np.float64)
        theta = np.arccos(np.clip(d[..., 2], -1.0, 1.0))
        phi = np.mod(np.arctan2(d[..., 1], d[..., 0]), 2 * np.pi)
        return _latlong_lookup(np.asarray(self.data, dtype=np.float64), theta, phi)


def _latlong_lookup(data, theta, phi):
    h, w = data.shape[:2]
    y = theta / np.pi * h - 0.5
    x = phi / (2 * np.pi) * w - 0.5
    y0 = np.floor(y).astype(np.int64)
    x0 = np.floor(x).astype(np.int64)
    fy = (y - y0)[..., None]
    fx = (x - x0)[..., None]
    ya, yb = np.clip(y0, 0, h - 1), np.clip(y0 + 1, 0, h - 1)
    xa, xb = np.mod(x0, w), np.mod(x0 + 1, w)
    return ((1 - fy) * ((1 - fx) * data[ya, xa] + fx * data[ya, xb])
            + fy * ((1 - fx) * data[yb, xa] + fx * data[yb, xb]))


@dataclass(frozen=True)
class LobeEnvMap:
    """Ambient term plus lobes ``I_k exp(sharpness_k (w . d_k - 1))``."""

    directions: np.ndarray
    intensities: np.ndarray
    sharpness: np.ndarray
    ambient: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        d = np.asarray(self.directions, dtype=np.float64).reshape(-1, 3)
        object.__setattr__(self, "directions", d / np.linalg.norm(d, axis=1, keepdims=True))
        object.__setattr__(self, "intensities",
                           np.asarray(self.intensities, dtype=np.float64).reshape(-1, 3))
        object.__setattr__(self, "sharpness",
                           np.asarray(self.sharpness, dtype=np.float64).reshape(-1))
        object.__setattr__(self, "ambient",
                           np.broadcast_to(np.asarray(self.ambient, dtype=np.float64), (3,)).copy())

    @classmethod
    def constant(cls, c):
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0), c)

    def radiance(self, dirs):
        d = np.asarray(dirs, dtype=np.float64)
        out = np.broadcast_to(self.ambient, d.shape[:-1] + (3,)).copy()
        for l, c, s in zip(self.directions, self.intensities, self.sharpness):
            out += np.exp(s * (d @ l - 1.0))[..., None] * c
        return out

    def to_latlong(self, height=128):
        w = 2 * height
        theta = (np.arange(height) + 0.5) / height * np.pi
        phi = (np.arange(w) + 0.5) / w * 2 * np.pi
        t, p = np.meshgrid(theta, phi, indexing="ij")
        dirs = np.stack([np.sin(t) * np.cos(p), np.sin(t) * np.sin(p), np.cos(t)], axis=-1)
        return LatLongEnvMap(self.radiance(dirs))


@dataclass(frozen=True)
class Lambertian:
    albedo: tuple = (0.8, 0.8, 0.8)

    def __post_init__(self):
        a = np.broadcast_to(np.asarray(self.albedo, dtype=np.float64), (3,))
        if np.any(a < 0) or np.any(a > 1):
            raise ValueError("albedo must lie in [0, 1]")
        object.__setattr__(self, "albedo", tuple(a.tolist()))

    def params(self):
        return np.array(self.albedo), np.zeros(3), 1.0


@dataclass(frozen=True)
class BlinnPhong:
    """Normalized Blinn-Phong: ``rho_d / pi + k_s (a + 8) / (8 pi) (n . h)^a``."""

    diffuse: tuple = (0.5, 0.5, 0.5)
    specular: tuple = (0.3, 0.3, 0.3)
    exponent: float = 50.0

    def __post_init__(self):
        d = np.broadcast_to(np.asarray(self.diffuse, dtype=np.float64), (3,))
        s = np.broadcast_to(np.asarray(self.specular, dtype=np.float64), (3,))
        if np.any(d < 0) or np.any(s < 0) or self.exponent < 0 or np.any(d > 1):
            raise ValueError("Blinn-Phong parameters must be nonnegative with rho_d <= 1")
        object.__setattr__(self, "diffuse", tuple(d.tolist()))
        object.__setattr__(self, "specular", tuple(s.tolist()))

    def params(self):
        return np.array(self.diffuse), np.array(self.specular), float(self.exponent)


def halton_cosine_directions(n_samples):
    """Cosine-weighted hemisphere directions (local z up) from the base-(2, 3) Halton sequence."""
    h = qmc.Halton(d=2, scramble=False).random(n_samples)
    r = np.sqrt(h[:, 0])
    phi = 2 * np.pi * h[:, 1]
    return np.stack([r * np.cos(phi), r * np.sin(phi), np.sqrt(np.maximum(1.0 - h[:, 0], 0.0))],
                    axis=1)


@njit(cache=True)
def _onb(n):
    # Duff et al. 2017 branchless orthonormal basis.
    sign = 1.0 if n[2] >= 0.0 else -1.0
    a = -1.0 / (sign + n[2])
    b = n[0] * n[1] * a
    t = np.array([1.0 + sign * n[0] * n[0] * a, sign * b, -sign * n[0]])
    bt = np.array([b, sign + n[1] * n[1] * a, -n[1]])
    return t, bt


@njit(cache=True, fastmath=True)
def _lobe_sum(lx, ly, lz, axes, lobe_c, lobe_s, ambient, rad):
    # Incident radiance of every sample direction; ``axes`` holds the lobe
    # directions already rotated into the local frame of the pixel.
    for j in range(lx.shape[0]):
        rad[j, 0] = ambient[0]
        rad[j, 1] = ambient[1]
        rad[j, 2] = ambient[2]
    for k in range(axes.shape[0]):
        a0 = axes[k, 0]
        a1 = axes[k, 1]
        a2 = axes[k, 2]
        sk = lobe_s[k]
        c0 = lobe_c[k, 0]
        c1 = lobe_c[k, 1]
        c2 = lobe_c[k, 2]
        for j in range(lx.shape[0]):
            e = np.exp(sk * (lx[j] * a0 + ly[j] * a1 + lz[j] * a2 - 1.0))
            rad[j, 0] += e * c0
            rad[j, 1] += e * c1
            rad[j, 2] += e * c2


@njit(cache=True, fastmath=True)
def _latlong_sum(lx, ly, lz, t, b, n, raster, rad):
    h = raster.shape[0]
    w = raster.shape[1]
    for j in range(lx.shape[0]):
        dx = lx[j] * t[0] + ly[j] * b[0] + lz[j] * n[0]
        dy = lx[j] * t[1] + ly[j] * b[1] + lz[j] * n[1]
        dz = lx[j] * t[2] + ly[j] * b[2] + lz[j] * n[2]
        th = np.arccos(min(max(dz, -1.0), 1.0))
        ph = np.arctan2(dy, dx)
        if ph < 0.0:
            ph += 2.0 * np.pi
        yy = th / np.pi * h - 0.5
        xx = ph / (2.0 * np.pi) * w - 0.5
        y0 = int(np.floor(yy))
        x0 = int(np.floor(xx))
        fy = yy - y0
        fx = xx - x0
        ya = min(max(y0, 0), h - 1)
        yb = min(max(y0 + 1, 0), h - 1)
        xa = x0 % w
        xb = (x0 + 1) % w
        for c in range(3):
            rad[j, c] = ((1 - fy) * ((1 - fx) * raster[ya, xa, c] + fx * raster[ya, xb, c])
                         + fy * ((1 - fx) * raster[yb, xa, c] + fx * raster[yb, xb, c]))


@njit(cache=True, fastmath=True)
def _quadrature(normals, wo, local, kind, lobe_d, lobe_c, lobe_s, ambient, raster,
                rho_d, k_s, alpha):
    p = normals.shape[0]
    ns = local.shape[0]
    nl = lobe_d.shape[0]
    lx = np.ascontiguousarray(local[:, 0])
    ly = np.ascontiguousarray(local[:, 1])
    lz = np.ascontiguousarray(local[:, 2])
    out = np.zeros((p, 3))
    rad = np.zeros((ns, 3))
    axes = np.zeros((nl, 3))
    norm_spec = (alpha + 8.0) / (8.0 * np.pi)
    specular = k_s[0] > 0.0 or k_s[1] > 0.0 or k_s[2] > 0.0
    for i in range(p):
        n = normals[i]
        t, b = _onb(n)
        if kind == 0:
            for k in range(nl):
                axes[k, 0] = t[0] * lobe_d[k, 0] + t[1] * lobe_d[k, 1] + t[2] * lobe_d[k, 2]
                axes[k, 1] = b[0] * lobe_d[k, 0] + b[1] * lobe_d[k, 1] + b[2] * lobe_d[k, 2]
                axes[k, 2] = n[0] * lobe_d[k, 0] + n[1] * lobe_d[k, 1] + n[2] * lobe_d[k, 2]
            _lobe_sum(lx, ly, lz, axes, lobe_c, lobe_s, ambient, rad)
        else:
            _latlong_sum(lx, ly, lz, t, b, n, raster, rad)
        # Cosine-weighted sampling: integrand / pdf = pi * L * f. The diffuse
        # part of f is constant, so it multiplies the plain radiance sum.
        d0 = 0.0
        d1 = 0.0
        d2 = 0.0
        for j in range(ns):
            d0 += rad[j, 0]
            d1 += rad[j, 1]
            d2 += rad[j, 2]
        s0 = 0.0
        s1 = 0.0
        s2 = 0.0
        if specular:
            w0 = t[0] * wo[0] + t[1] * wo[1] + t[2] * wo[2]
            w1 = b[0] * wo[0] + b[1] * wo[1] + b[2] * wo[2]
            w2 = n[0] * wo[0] + n[1] * wo[1] + n[2] * wo[2]
            for j in range(ns):
                # half vector (d + wo) / |d + wo|; n is the local z axis
                hx = lx[j] + w0
                hy = ly[j] + w1
                hz = lz[j] + w2
                hl = np.sqrt(hx * hx + hy * hy + hz * hz)
                if hl > 0.0 and hz > 0.0:
                    sp = norm_spec * (hz / hl) ** alpha
                    s0 += rad[j, 0] * sp
                    s1 += rad[j, 1] * sp
                    s2 += rad[j, 2] * sp
        out[i, 0] = (d0 * rho_d[0] / np.pi + s0 * k_s[0]) * np.pi / ns
        out[i, 1] = (d1 * rho_d[1] / np.pi + s1 * k_s[1]) * np.pi / ns
        out[i, 2] = (d2 * rho_d[2] / np.pi + s2 * k_s[2]) * np.pi / ns
    return out


def rm_from_scene(env, brdf, omega_o, view_R=None, resolution=128, n_samples=2 ** 16):
    """Integrate incident light times BRDF times clamped cosine per RM pixel.

    ``omega_o`` is the (world) viewing direction, ``view_R`` the world-to-view
    rotation. Directions come from a deterministic Halton set warped to the
    cosine-weighted hemisphere around each pixel's normal.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    view_R = np.eye(3) if view_R is None else np.asarray(view_R, dtype=np.float64)
    normals, valid = rm_pixel_normals(resolution)
    n_world = normals[valid] @ view_R
    local = halton_cosine_directions(n_samples)
    wo = np.asarray(omega_o, dtype=np.float64)
    wo = wo / np.linalg.norm(wo)
    empty3 = np.zeros((0, 3))
    if isinstance(env, LobeEnvMap):
        args = (0, env.directions, env.intensities, env.sharpness, env.ambient,
                np.zeros((1, 1, 3)))
    else:
        args = (1, empty3, empty3, np.zeros(0), np.zeros(3),
                np.ascontiguousarray(env.data, dtype=np.float64))
    rho_d, k_s, alpha = brdf.params()
    vals = _quadrature(np.ascontiguousarray(n_world), wo, local, *args, rho_d, k_s, alpha)
    data = np.zeros((resolution, resolution, 3))
    data[valid] = np.maximum(vals, 0.0)
    return ReflectanceMap(data, view_R)


@njit(cache=True)
def _weighted_map(feat, nrm, base, queries, s, floor, s_fill):
    q = queries.shape[0]
    m = feat.shape[0]
    c = feat.shape[1]
    out = np.zeros((q, c))
    wsum = np.zeros(q)
    for i in range(q):
        qx = queries[i, 0]
        qy = queries[i, 1]
        qz = queries[i, 2]
        acc = np.zeros(c)
        tot = 0.0
        for j in range(m):
            if base[j] <= 0.0:
                continue
            d = nrm[j, 0] * qx + nrm[j, 1] * qy + nrm[j, 2] * qz
            w = base[j] * np.exp(s * (d - 1.0))
            tot += w
            for k in range(c):
                acc[k] += w * feat[j, k]
        wsum[i] = tot
        if tot < floor:
            acc[:] = 0.0
            tot = 0.0
            for j in range(m):
                if base[j] <= 0.0:
                    continue
                d = nrm[j, 0] * qx + nrm[j, 1] * qy + nrm[j, 2] * qz
                w = base[j] * np.exp(s_fill * (d - 1.0))
                tot += w
                for k in range(c):
                    acc[k] += w * feat[j, k]
        for k in range(c):
            out[i, k] = acc[k] / tot
    return out, wsum


def weighted_map(features, normals, confidence, omega_o, params=None, resolution=128):
    """Blend per-pixel features onto the RM raster by normal similarity.

    Observation ``m`` contributes to RM pixel ``n'`` with weight
    ``w_m * max(n_m . omega_o, 0) * exp(s (n_m . n' - 1))``. The ``- 1``
    rescales every weight by ``exp(-s)``, which leaves the normalized
    result unchanged and keeps ``den_floor`` an angular criterion: pixels
    whose total weight falls below it are re-blended with ``fill_sharpness``.

    ``features`` is ``(P, C)`` or ``(H, W, C)`` with ``normals``/``confidence``
    shaped alike; non-finite normals or zero confidence exclude a pixel.
    Returns ``(feature_rm, weight_rm)``; ``weight_rm`` holds the first-pass sums.
    """
    params = params or MapKernelParams()
    feat = np.asarray(features, dtype=np.float64)
    c = feat.shape[-1]
    feat = feat.reshape(-1, c)
    nrm = np.asarray(normals, dtype=np.float64).reshape(-1, 3)
    w = np.asarray(confidence, dtype=np.float64).reshape(-1)
    if not (len(feat) == len(nrm) == len(w)):
        raise ValueError("features, normals and confidence must describe the same pixels")
    if not np.all(np.isfinite(feat)):
        raise ValueError("features must be finite")
    wo = np.asarray(omega_o, dtype=np.float64)
    base = np.where(np.isfinite(nrm).all(axis=1), w * np.maximum(np.nan_to_num(nrm) @ wo, 0.0), 0.0)
    if not np.any(base > 0):
        raise EmptyObservationError("no observation has positive weight")
    keep = base > 0
    queries, valid = rm_pixel_normals(resolution)
    vals, wsum = _weighted_map(np.ascontiguousarray(feat[keep]), np.ascontiguousarray(nrm[keep]),
                               base[keep], np.ascontiguousarray(queries[valid]),
                               float(params.sharpness), float(params.den_floor),
                               float(params.fill_sharpness))
    out = np.zeros((resolution, resolution, c))
    out[valid] = vals
    weights = np.zeros((resolution, resolution))
    weights[valid] = wsum
    return out, weights


def render_from_rm(rm, normals, coverage, return_invalid=False):
    """Shade covered pixels by looking their normals up in ``rm``.

    Covered pixels whose normal faces away from the view (``n_z <= 0``) are
    rendered black and counted.
    """
    normals = np.asarray(normals, dtype=np.float64)
    coverage = np.asarray(coverage, dtype=bool)
    image = np.zeros(coverage.shape + (rm.data.shape[2],))
    ok = coverage & (normals[..., 2] > 0)
    n_bad = int(coverage.sum() - ok.sum())
    if n_bad:
        logger.debug("render_from_rm: %d covered pixels face away from the view", n_bad)
    if ok.any():
        image[ok] = rm.lookup(normals[ok])
    return (image, n_bad) if return_invalid else image


def confidence_update(image, rendered, k=10.0, floor=DEFAULT_LOG_FLOOR):
    """``exp(-k * ||log rendered - log image||_1)`` per pixel, summed over channels."""
    image = np.asarray(image)
    rendered = np.asarray(rendered)
    if image.shape != rendered.shape:
        raise ValueError(f"image shapes differ: {image.shape} vs {rendered.shape}")
    gap = np.abs(log_radiance(rendered, floor) - log_radiance(image, floor))
    if gap.ndim == 3:
        gap = gap.sum(axis=-1)
    return np.exp(-k * gap)


def estimate_rm(image, normals, coverage, omega_o, params=None, resolution=128, rounds=3,
                k=10.0, view_R=None):
    """Alternate between blending an RM from the image and re-scoring pixels.

    Starts from uniform confidence; each round maps the raw radiance, renders
    the map back through the normals and updates the per-pixel confidence.
    Returns ``(ReflectanceMap, confidence)``; confidence is zero off-coverage.
    """
    image = np.asarray(image, dtype=np.float64)
    normals = np.asarray(normals, dtype=np.float64)
    coverage = np.asarray(coverage, dtype=bool) & (normals[..., 2] > 0)
    if not coverage.any():
        raise EmptyObservationError("no covered pixel with a visible normal")
    view_R = np.eye(3) if view_R is None else view_R
    conf = coverage.astype(np.float64)
    rm = None
    for _ in range(rounds):
        data, _ = weighted_map(image[coverage], normals[coverage], conf[coverage], omega_o,
                               params, resolution)
        rm = ReflectanceMap(data, view_R)
        rendered = render_from_rm(rm, normals, coverage)
        conf = np.where(coverage, confidence_update(image, rendered, k), 0.0)
    return rm, conf


def _log_gradients(logmap, valid):
    gx = logmap[:, 1:] - logmap[:, :-1]
    gy = logmap[1:, :] - logmap[:-1, :]
    return gx, valid[:, 1:] & valid[:, :-1], gy, valid[1:, :] & valid[:-1, :]


def rm_losses(estimate, truth, image=None, normals=None, coverage=None, floor=DEFAULT_LOG_FLOOR):
    """Log-space L1, log-gradient and confidence-weighted image losses.

    The image term needs observations (``image``, view-frame ``normals``,
    ``coverage``); it is NaN when they are not given.
    """
    est = estimate.data if isinstance(estimate, ReflectanceMap) else np.asarray(estimate)
    tru = truth.data if isinstance(truth, ReflectanceMap) else np.asarray(truth)
    if est.shape != tru.shape:
        raise ValueError(f"reflectance maps differ in shape: {est.shape} vs {tru.shape}")
    valid = rm_pixel_normals(est.shape[0])[1]
    le = log_radiance(est, floor)
    lt = log_radiance(tru, floor)
    log_l1 = float(np.abs(le - lt)[valid].mean())
    ex, mx, ey, my = _log_gradients(le, valid)
    tx, _, ty, _ = _log_gradients(lt, valid)
    diffs = np.concatenate([np.abs(ex - tx)[mx].ravel(), np.abs(ey - ty)[my].ravel()])
    log_grad = float(diffs.mean()) if diffs.size else 0.0
    recon = float("nan")
    if image is not None:
        cov = np.asarray(coverage, dtype=bool) & (np.asarray(normals)[..., 2] > 0)
        li = log_radiance(np.asarray(image)[cov], floor)
        nm = np.asarray(normals)[cov]
        r_hat = log_radiance(_bilinear(est, valid, fisheye_project(nm)), floor)
        r_true = log_radiance(_bilinear(tru, valid, fisheye_project(nm)), floor)
        alpha = np.exp(-10.0 * np.abs(r_true - li).sum(axis=-1))
        recon = float((alpha * np.abs(r_hat - li).sum(axis=-1)).sum() / alpha.sum())
    out = {"log_L1": log_l1, "log_gradient": log_grad, "image_recon": recon}
    out["total"] = sum(LOSS_WEIGHTS[k] * v for k, v in out.items() if np.isfinite(v))
    return out


def save_rm(rm, path) -> None:
    """PFM raster plus a ``.json`` sidecar carrying the view rotation."""
    path = Path(path)
    save_pfm(rm.data.astype(np.float32), path)
    side = {"resolution": rm.resolution, "view_R": rm.view_R.tolist(), "convention": CONVENTION}
    path.with_suffix(".json").write_text(json.dumps(side, indent=2))


def load_rm(path) -> ReflectanceMap:
    path = Path(path)
    data = load_pfm(path).astype(np.float64)
    side = path.with_suffix(".json")
    view_R = np.eye(3)
    if side.exists():
        meta = json.loads(side.read_text())
        if meta.get("convention", CONVENTION) != CONVENTION:
            raise ValueError(f"unsupported reflectance map convention {meta['convention']!r}")
        view_R = np.array(meta["view_R"])
    return ReflectanceMap(data, view_R)


def save_envmap(env, path, height=128) -> None:
    if isinstance(env, LobeEnvMap):
        env = env.to_latlong(height)
    save_pfm(np.asarray(env.data, dtype=np.float32), path)


def load_envmap(path) -> LatLongEnvMap:
    return LatLongEnvMap(load_pfm(path).astype(np.float64))
