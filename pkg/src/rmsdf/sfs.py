"""Per-pixel normal estimation from an image and its reflectance map.

Coarse stage: softmax likelihood over a fixed candidate set, summarized
as a small von Mises-Fisher mixture and decoded by its mean direction.
Fine stage: coordinate-wise golden-section search in gradient space
``(p, q)`` on the photometric log error.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from rmsdf.imaging import DEFAULT_LOG_FLOOR, log_radiance
from rmsdf.rmap import rm_pixel_normals

__all__ = [
    "UndefinedDirectionError",
    "candidate_normals",
    "observation_likelihood",
    "vmf_log_pdf",
    "vmf_pdf",
    "VmfMixtureMap",
    "fit_vmf_mixture",
    "mean_direction",
    "decode_mean_directions",
    "pq_to_normal",
    "normal_to_pq",
    "photometric_error",
    "refine_normals",
    "vmf_nll",
    "SfSParams",
    "estimate_normals",
]

KAPPA_CAP = 1e4
_GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0


class UndefinedDirectionError(ValueError):
    """Mixture means cancel out, so no mean direction exists."""


def candidate_normals(k=8):
    """Normals at the pixel centers of a ``k x k`` fisheye raster inside the disc."""
    normals, valid = rm_pixel_normals(k)
    return normals[valid]


def observation_likelihood(pixels, rm, candidates, beta=20.0, floor=DEFAULT_LOG_FLOOR):
    """Softmax over candidates of ``-beta * ||log I - log R(n)||_2``.

    ``pixels`` is ``(P, C)`` radiance; returns ``(P, K)`` rows summing to one.
    """
    if not beta > 0:
        raise ValueError("beta must be positive")
    feat = log_radiance(np.asarray(pixels).reshape(-1, rm.data.shape[2]), floor)
    ref = log_radiance(rm.lookup(candidates), floor)
    d = np.linalg.norm(feat[:, None, :] - ref[None, :, :], axis=-1)
    return _softmax(-beta * d)


def _softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def vmf_log_pdf(x, mu, kappa):
    """Log density of the 3D von Mises-Fisher distribution.

    Uses ``C(k) = k / (4 pi sinh k)`` rewritten as
    ``k / (2 pi (1 - exp(-2k))) * exp(-k)`` so no ``sinh`` can overflow.
    """
    x = np.asarray(x, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    kappa = np.asarray(kappa, dtype=np.float64)
    if np.any(kappa < 0):
        raise ValueError("kappa must be nonnegative")
    dot = np.sum(x * mu, axis=-1)
    small = kappa < 1e-8
    k = np.where(small, 1.0, kappa)
    log_c = np.log(k) - np.log(2 * np.pi) - np.log(-np.expm1(-2.0 * k))
    # Series of log(k / (1 - exp(-2k))) near zero: log(1/2) + k + O(k^2).
    log_c = np.where(small, -np.log(4 * np.pi) + kappa * 1.0, log_c)
    return log_c + kappa * (dot - 1.0)


def vmf_pdf(x, mu, kappa):
    return np.exp(vmf_log_pdf(x, mu, kappa))


@dataclass(frozen=True)
class VmfMixtureMap:
    """Per-pixel mixtures: ``weights (P, K)``, ``means (P, K, 3)``, ``kappa (P, K)``.

    ``capped`` marks pixels where some concentration hit the cap.
    """

    weights: np.ndarray
    means: np.ndarray
    kappa: np.ndarray
    capped: np.ndarray

    def __len__(self):
        return len(self.weights)

    def __getitem__(self, i):
        return VmfMixtureMap(self.weights[i:i + 1], self.means[i:i + 1], self.kappa[i:i + 1],
                             self.capped[i:i + 1])


def _kappa_from_resultant(rbar):
    rbar = np.clip(rbar, 0.0, 1.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        k = rbar * (3.0 - rbar * rbar) / (1.0 - rbar * rbar)
    capped = ~(k < KAPPA_CAP)
    return np.where(capped, KAPPA_CAP, k), capped


def fit_vmf_mixture(likelihood, candidates, n_components=2, n_iter=10):
    """Weighted spherical k-means on the candidates, then moment matching.

    Seeds: the most likely candidate, then repeatedly the candidate with the
    largest ``p * (1 - max cosine to chosen seeds)``.
    """
    p = np.asarray(likelihood, dtype=np.float64)
    c = np.asarray(candidates, dtype=np.float64)
    n_pix, n_cand = p.shape
    kv = int(n_components)
    if kv < 1:
        raise ValueError("need at least one mixture component")
    means = np.zeros((n_pix, kv, 3))
    means[:, 0] = c[np.argmax(p, axis=1)]
    for k in range(1, kv):
        cos = np.einsum("pkd,cd->pkc", means[:, :k], c).max(axis=1)
        means[:, k] = c[np.argmax(p * (1.0 - cos), axis=1)]
    for _ in range(n_iter):
        assign = np.argmax(np.einsum("pkd,cd->pkc", means, c), axis=1)
        onehot = assign[:, None, :] == np.arange(kv)[None, :, None]
        resultant = np.einsum("pkc,pc,cd->pkd", onehot, p, c)
        norm = np.linalg.norm(resultant, axis=-1)
        new = np.where(norm[..., None] > 1e-12, resultant / np.maximum(norm, 1e-300)[..., None],
                       means)
        if np.allclose(new, means, atol=0, rtol=0):
            break
        means = new
    assign = np.argmax(np.einsum("pkd,cd->pkc", means, c), axis=1)
    onehot = assign[:, None, :] == np.arange(kv)[None, :, None]
    mass = np.einsum("pkc,pc->pk", onehot, p)
    resultant = np.einsum("pkc,pc,cd->pkd", onehot, p, c)
    with np.errstate(invalid="ignore", divide="ignore"):
        rbar = np.where(mass > 0, np.linalg.norm(resultant, axis=-1) / mass, 0.0)
    kappa, capped = _kappa_from_resultant(rbar)
    weights = mass / mass.sum(axis=1, keepdims=True)
    return VmfMixtureMap(weights, means, kappa, np.any(capped & (mass > 0), axis=1))


def mean_direction(mixture):
    """Normalized weighted sum of component means for one pixel (or ``(K,)``/``(K, 3)`` arrays)."""
    if isinstance(mixture, VmfMixtureMap):
        weights, means = mixture.weights[0], mixture.means[0]
    else:
        weights, means = mixture
    s = np.einsum("k,kd->d", np.asarray(weights, dtype=np.float64), np.asarray(means, dtype=np.float64))
    norm = np.linalg.norm(s)
    if norm <= 1e-9:
        raise UndefinedDirectionError(f"component means cancel (|sum| = {norm:.3g})")
    return s / norm


def decode_mean_directions(mixture):
    """Vectorized :func:`mean_direction`; cancelling pixels fall back to the heaviest ``mu``.

    Returns ``(normals, fell_back)``.
    """
    s = np.einsum("pk,pkd->pd", mixture.weights, mixture.means)
    norm = np.linalg.norm(s, axis=1)
    bad = norm <= 1e-9
    out = s / np.where(bad, 1.0, norm)[:, None]
    if bad.any():
        best = np.argmax(mixture.weights[bad], axis=1)
        out[bad] = mixture.means[bad][np.arange(bad.sum()), best]
    return out, bad


def pq_to_normal(p, q):
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    inv = 1.0 / np.sqrt(p * p + q * q + 1.0)
    return np.stack([p * inv, q * inv, inv], axis=-1)


def normal_to_pq(n):
    n = np.asarray(n, dtype=np.float64)
    if np.any(n[..., 2] <= 0):
        raise ValueError("gradient-space parameters need n_z > 0")
    return n[..., 0] / n[..., 2], n[..., 1] / n[..., 2]


def photometric_error(normals, log_obs, rm, floor=DEFAULT_LOG_FLOOR):
    """Per-pixel ``||log I - log R(n)||_1``."""
    return np.abs(log_radiance(rm.lookup(normals), floor) - log_obs).sum(axis=-1)


def refine_normals(coarse, pixels, rm, iterations=4, step=0.4, shrink=0.6, evals=20,
                   floor=DEFAULT_LOG_FLOOR):
    """Coordinate golden-section descent on the photometric error in ``(p, q)``.

    Each pass brackets ``+-step`` radians (mapped into gradient space) around
    the current estimate on one axis. A move is kept only if it lowers the
    pixel's error, so the objective never increases.
    """
    coarse = np.asarray(coarse, dtype=np.float64).reshape(-1, 3)
    log_obs = log_radiance(np.asarray(pixels).reshape(len(coarse), -1), floor)
    p, q = normal_to_pq(coarse)
    best = photometric_error(coarse, log_obs, rm, floor)
    delta = step
    for _ in range(iterations):
        for axis in (0, 1):
            scale = delta * (1.0 + p * p + q * q)
            x = p if axis == 0 else q

            def objective(val):
                pp, qq = (val, q) if axis == 0 else (p, val)
                return photometric_error(pq_to_normal(pp, qq), log_obs, rm, floor)

            a = x - scale
            b = x + scale
            c1 = b - _GOLDEN * (b - a)
            c2 = a + _GOLDEN * (b - a)
            f1 = objective(c1)
            f2 = objective(c2)
            for _ in range(evals):
                left = f1 < f2
                b = np.where(left, c2, b)
                a = np.where(left, a, c1)
                c2n = np.where(left, c1, a + _GOLDEN * (b - a))
                c1n = np.where(left, b - _GOLDEN * (b - a), c2)
                c1, c2 = c1n, c2n
                fnew = objective(np.where(left, c1, c2))
                f1, f2 = np.where(left, fnew, f2), np.where(left, f1, fnew)
            cand = 0.5 * (a + b)
            fc = objective(cand)
            better = fc < best
            best = np.where(better, fc, best)
            if axis == 0:
                p = np.where(better, cand, p)
            else:
                q = np.where(better, cand, q)
        delta *= shrink
    return pq_to_normal(p, q)


def vmf_nll(mixture, targets, floor=1e-300):
    """Mean over pixels of ``-log sum_k pi_k f(n_t; mu_k, kappa_k)``.

    Returns ``(loss, n_floored)``; zero densities are floored before the log.
    """
    t = np.asarray(targets, dtype=np.float64).reshape(-1, 1, 3)
    dens = np.sum(mixture.weights * vmf_pdf(t, mixture.means, mixture.kappa), axis=1)
    floored = dens < floor
    return float(np.mean(-np.log(np.maximum(dens, floor)))), int(floored.sum())


@dataclass(frozen=True)
class SfSParams:
    beta: float = 20.0
    coarse_res: int = 8
    n_components: int = 2
    refine_iterations: int = 4


def estimate_normals(image, coverage, rm, params=None):
    """Full per-view estimate. Returns ``(normals (H, W, 3), valid (H, W))``.

    Normals are in the RM's view frame; ``valid`` marks covered pixels whose
    coarse mean direction was defined.
    """
    params = params or SfSParams()
    image = np.asarray(image, dtype=np.float64)
    coverage = np.asarray(coverage, dtype=bool)
    normals = np.zeros(coverage.shape + (3,))
    valid = np.zeros(coverage.shape, dtype=bool)
    if not coverage.any():
        return normals, valid
    pix = image[coverage]
    cands = candidate_normals(params.coarse_res)
    like = observation_likelihood(pix, rm, cands, params.beta)
    mix = fit_vmf_mixture(like, cands, params.n_components)
    coarse, fell_back = decode_mean_directions(mix)
    fine = refine_normals(coarse, pix, rm, params.refine_iterations)
    normals[coverage] = fine
    valid[coverage] = ~fell_back
    return normals, valid
