"""scikit-learn style wrappers around the three estimation stages.

Hyperparameters live on the constructor and are exposed through
``get_params``/``set_params``; fitted state carries a trailing underscore.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from rmsdf._validation import (check_direction, check_image, check_mask, check_normal_map,
                               check_points, check_positive_int, check_unit_vectors)
from rmsdf.imaging import SceneConfig, log_radiance
from rmsdf.pipeline import ReconOptions, eval_geometry, reconstruct
from rmsdf.rmap import MapKernelParams, ReflectanceMap, estimate_rm, render_from_rm
from rmsdf.sdfgrid import TriMesh, eval_field
from rmsdf.sfs import (SfSParams, candidate_normals, estimate_normals, fit_vmf_mixture,
                       observation_likelihood)

__all__ = ["ReflectanceMapEstimator", "ShadingNormalEstimator", "LevelSetReconstructor"]


class ReflectanceMapEstimator(BaseEstimator):
    """Estimate a view-frame reflectance map from one image and its normals.

    ``fit(image, normals, coverage)`` stores ``rm_`` and ``confidence_``;
    ``predict(normals)`` shades normals through the fitted map.
    """

    def __init__(self, resolution=128, sharpness=50.0, den_floor=1e-6, fill_sharpness=8.0,
                 rounds=3, confidence_k=10.0, omega_o=(0.0, 0.0, 1.0)):
        self.resolution = resolution
        self.sharpness = sharpness
        self.den_floor = den_floor
        self.fill_sharpness = fill_sharpness
        self.rounds = rounds
        self.confidence_k = confidence_k
        self.omega_o = omega_o

    def fit(self, image, normals, coverage=None):
        img = check_image(image)
        cov = (np.ones(img.shape[:2], dtype=bool) if coverage is None
               else check_mask(coverage, img.shape[:2], "coverage"))
        nrm = check_normal_map(normals, cov)
        kernel = MapKernelParams(self.sharpness, self.den_floor, self.fill_sharpness)
        self.rm_, self.confidence_ = estimate_rm(
            img, nrm, cov, check_direction(self.omega_o, "omega_o"), kernel,
            check_positive_int(self.resolution, "resolution"),
            check_positive_int(self.rounds, "rounds"), self.confidence_k)
        self.n_channels_ = img.shape[2]
        return self

    def predict(self, normals):
        """Radiance for ``(..., 3)`` view-frame normals with ``n_z > 0``."""
        check_is_fitted(self, "rm_")
        nrm = check_unit_vectors(normals)
        return self.rm_.lookup(nrm.reshape(-1, 3)).reshape(nrm.shape[:-1] + (self.n_channels_,))

    def transform(self, normals):
        return self.predict(normals)

    def score(self, image, normals, coverage):
        """Negative mean log-radiance L1 between ``image`` and the re-rendering."""
        check_is_fitted(self, "rm_")
        img = check_image(image)
        cov = check_mask(coverage, img.shape[:2], "coverage")
        nrm = check_normal_map(normals, cov)
        cov = cov & (nrm[..., 2] > 0)
        rendered = render_from_rm(self.rm_, nrm, cov)
        gap = np.abs(log_radiance(rendered[cov]) - log_radiance(img[cov]))
        return -float(gap.mean())


class ShadingNormalEstimator(BaseEstimator):
    """Per-pixel normals from radiance given a reflectance map."""

    def __init__(self, beta=20.0, coarse_res=8, n_components=2, refine_iterations=4):
        self.beta = beta
        self.coarse_res = coarse_res
        self.n_components = n_components
        self.refine_iterations = refine_iterations

    def _params(self):
        return SfSParams(self.beta, check_positive_int(self.coarse_res, "coarse_res"),
                         check_positive_int(self.n_components, "n_components"),
                         int(self.refine_iterations))

    def fit(self, rm, y=None):
        if not isinstance(rm, ReflectanceMap):
            rm = ReflectanceMap(np.asarray(rm, dtype=np.float64))
        self.params_ = self._params()
        self.rm_ = rm
        self.candidates_ = candidate_normals(self.params_.coarse_res)
        return self

    def predict(self, image, coverage=None):
        """Refined normals ``(H, W, 3)``; uncovered or undecodable pixels are zero."""
        check_is_fitted(self, "rm_")
        img = check_image(image)
        cov = (np.ones(img.shape[:2], dtype=bool) if coverage is None
               else check_mask(coverage, img.shape[:2], "coverage"))
        normals, valid = estimate_normals(img, cov, self.rm_, self.params_)
        normals[~valid] = 0.0
        return normals

    def predict_proba(self, image, coverage=None):
        """Coarse likelihood over ``candidates_`` for each covered pixel, ``(P, K)``."""
        check_is_fitted(self, "rm_")
        img = check_image(image)
        cov = (np.ones(img.shape[:2], dtype=bool) if coverage is None
               else check_mask(coverage, img.shape[:2], "coverage"))
        return observation_likelihood(img[cov], self.rm_, self.candidates_, self.params_.beta)

    def predict_mixture(self, image, coverage=None):
        """vMF mixture summary of :meth:`predict_proba`."""
        like = self.predict_proba(image, coverage)
        return fit_vmf_mixture(like, self.candidates_, self.params_.n_components)


class LevelSetReconstructor(BaseEstimator):
    """Multi-view reconstruction of a signed distance field.

    ``fit(scene)`` runs the alternating loop; ``predict(points)`` evaluates
    the fitted field and ``score(truth_mesh)`` returns ``-RMS1``.
    """

    def __init__(self, rounds=8, steps=100, lr=None, rm_res=128, rm_rounds=3, tol=1e-4,
                 sfs_beta=20.0, sample_res=None, seed=0):
        self.rounds = rounds
        self.steps = steps
        self.lr = lr
        self.rm_res = rm_res
        self.rm_rounds = rm_rounds
        self.tol = tol
        self.sfs_beta = sfs_beta
        self.sample_res = sample_res
        self.seed = seed

    def fit(self, scene, truth=None):
        if not isinstance(scene, SceneConfig):
            raise TypeError(f"expected a SceneConfig, got {type(scene).__name__}")
        opts = ReconOptions(rounds=check_positive_int(self.rounds, "rounds"),
                            steps=check_positive_int(self.steps, "steps"), lr=self.lr,
                            rm_res=check_positive_int(self.rm_res, "rm_res"),
                            rm_rounds=check_positive_int(self.rm_rounds, "rm_rounds"),
                            sfs=SfSParams(beta=self.sfs_beta), sample_res=self.sample_res,
                            tol=self.tol, seed=self.seed)
        result = reconstruct(scene, opts, truth=truth)
        self.grid_ = result.grid
        self.mesh_ = result.mesh
        self.reflectance_maps_ = result.reflectance_maps
        self.report_ = result.report
        self.cameras_ = scene.cameras
        return self

    def predict(self, points):
        """Signed distance estimates at world ``points`` (negative inside)."""
        check_is_fitted(self, "grid_")
        return eval_field(self.grid_, check_points(points))

    def transform(self, points):
        return self.predict(points)

    def score(self, truth_mesh):
        check_is_fitted(self, "mesh_")
        if not isinstance(truth_mesh, TriMesh):
            raise TypeError("score expects the ground-truth TriMesh")
        rms1, _ = eval_geometry(self.mesh_, truth_mesh, self.cameras_)
        return -rms1
