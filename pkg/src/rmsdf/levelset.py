"""Level-set updates of the SDF grid: normal loss, vertex-to-coefficient
chain rule, Adam, and containment in the visual hull."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from rmsdf.rasterizer import backward_normals
from rmsdf.sdfgrid import (basis_weights, eval_gradient, extraction_lattice, lattice_edges,
                           sample_lattice_adjoint)

__all__ = [
    "OptimizerError",
    "EmptyLossError",
    "AdamState",
    "SfSLossReport",
    "sfs_loss_and_vertex_grads",
    "chain_to_theta",
    "adam_step",
    "hull_clamp",
]


class OptimizerError(FloatingPointError):
    pass


class EmptyLossError(ValueError):
    """No pixel is both covered and valid, so the loss is undefined."""


@dataclass
class AdamState:
    shape: tuple
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: np.ndarray = field(default=None, repr=False)
    v: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.shape = tuple(self.shape)
        if self.m is None:
            self.m = np.zeros(self.shape)
        if self.v is None:
            self.v = np.zeros(self.shape)


@dataclass
class SfSLossReport:
    errors: list = field(default_factory=list)
    pixels: list = field(default_factory=list)

    @property
    def total(self):
        return float(sum(self.errors))

    @property
    def mean(self):
        return self.total / len(self.errors) if self.errors else float("nan")


def sfs_loss_and_vertex_grads(gbuffer, mesh, target, valid):
    """Mean L1 distance between rendered and target normals, and ``dL/dv``.

    The mean runs over pixels that are covered and flagged ``valid``; the
    per-pixel distance sums the absolute differences of the three axes.
    """
    target = np.asarray(target, dtype=np.float64)
    use = gbuffer.coverage & np.asarray(valid, dtype=bool)
    count = int(use.sum())
    if count == 0:
        raise EmptyLossError("no covered pixel carries a valid target normal")
    diff = np.where(use[..., None], gbuffer.normal - target, 0.0)
    loss = float(np.abs(diff).sum() / count)
    grad_n = np.sign(diff) / count
    return loss, backward_normals(gbuffer, mesh, grad_n)


def chain_to_theta(mesh, grad_vertices, grid, extraction=None) -> np.ndarray:
    """Push vertex gradients to grid coefficients.

    By default this is the level-set rule: each vertex contributes
    ``-grad_f(v) . dL/dv`` spread over its 64 support nodes by their
    blending weights, so gradients tangent to the surface vanish.

    With ``extraction`` set to the ``sample_res`` that produced ``mesh``
    (``"default"`` for ``marching_cubes``'s own default), the result is instead
    the exact derivative of the extraction: every vertex slides along its
    lattice edge as the two end values change. This is what a finite
    difference of re-extracting the mesh measures.
    """
    g = np.asarray(grad_vertices, dtype=np.float64)
    if g.shape != mesh.vertices.shape:
        raise ValueError(f"gradient shape {g.shape} does not match vertices {mesh.vertices.shape}")
    if extraction is not None:
        return _extraction_adjoint(mesh, g, grid, None if extraction == "default" else extraction)
    out = np.zeros(grid.coeffs.size)
    if len(mesh.vertices) == 0:
        return out.reshape(grid.dims)
    df = -np.einsum("ij,ij->i", eval_gradient(grid, mesh.vertices), g)
    idx, w = basis_weights(grid, mesh.vertices)
    out += np.bincount(idx.ravel(), weights=(w * df[:, None]).ravel(), minlength=out.size)
    return out.reshape(grid.dims)


def _extraction_adjoint(mesh, g, grid, sample_res):
    if len(mesh.vertices) == 0:
        return np.zeros(grid.dims)
    vals, lo, step, forced = extraction_lattice(grid, sample_res)
    ia, ib, axis, on_edge = lattice_edges(mesh.vertices, vals, lo, step)
    rows = np.arange(len(axis))
    fa = vals[tuple(ia.T)]
    fb = vals[tuple(ib.T)]
    # x = x_a + step * fa / (fa - fb) along the edge axis
    denom = np.where(on_edge, (fa - fb) ** 2, 1.0)
    ga = np.where(on_edge, g[rows, axis] * step[axis], 0.0)
    dvals = np.zeros(vals.shape)
    np.add.at(dvals, tuple(ia.T), ga * (-fb) / denom)
    np.add.at(dvals, tuple(ib.T), ga * fa / denom)
    dvals[forced] = 0.0
    out = sample_lattice_adjoint(grid, dvals)
    rest = ~on_edge
    if rest.any():
        # no unique edge: fall back to the level-set rule for these vertices
        sub = type(mesh)(mesh.vertices[rest], np.zeros((0, 3), dtype=np.int64))
        out += chain_to_theta(sub, g[rest], grid)
    return out


def adam_step(theta, grad, state) -> np.ndarray:
    """One bias-corrected Adam update; returns new coefficients, updates ``state``."""
    theta = np.asarray(theta, dtype=np.float64)
    g = np.asarray(grad, dtype=np.float64)
    if theta.shape != state.shape or g.shape != state.shape:
        raise ValueError(f"shape mismatch: theta {theta.shape}, grad {g.shape}, state {state.shape}")
    if not np.all(np.isfinite(g)):
        raise OptimizerError(f"{int((~np.isfinite(g)).sum())} non-finite gradient entries")
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * g
    state.v *= state.beta2
    state.v += (1.0 - state.beta2) * (g * g)
    denom = np.sqrt(state.v / bc2) + state.eps
    return theta - (state.lr / bc1) * state.m / denom


def hull_clamp(theta, theta_hull) -> np.ndarray:
    """Elementwise ``max``: the surface may shrink inside the hull, never leave it."""
    theta = np.asarray(theta)
    theta_hull = np.asarray(theta_hull)
    if theta.shape != theta_hull.shape:
        raise ValueError(f"grid layout mismatch: {theta.shape} vs {theta_hull.shape}")
    return np.maximum(theta, theta_hull)
