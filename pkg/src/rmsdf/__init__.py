"""Multi-view shape recovery of textureless objects under unknown lighting.

Geometry is a B-spline signed distance grid refined by level-set steps on a
shape-from-shading loss; appearance is a per-view reflectance map estimated
from the current geometry.
"""

from rmsdf.estimators import LevelSetReconstructor, ReflectanceMapEstimator, ShadingNormalEstimator
from rmsdf.imaging import Camera, ImageF, SceneConfig, View, load_pfm, load_scene, save_pfm, save_scene
from rmsdf.pipeline import ReconOptions, SynthSpec, eval_geometry, eval_rm, reconstruct, synthesize
from rmsdf.rmap import ReflectanceMap, estimate_rm, load_rm, rm_from_scene, save_rm
from rmsdf.sdfgrid import SdfGrid, TriMesh, load_obj, marching_cubes, save_obj, visual_hull

__version__ = "0.1.0"

__all__ = [
    "Camera", "ImageF", "SceneConfig", "View", "load_pfm", "save_pfm", "load_scene", "save_scene",
    "SdfGrid", "TriMesh", "marching_cubes", "visual_hull", "load_obj", "save_obj",
    "ReflectanceMap", "rm_from_scene", "estimate_rm", "load_rm", "save_rm",
    "SynthSpec", "ReconOptions", "synthesize", "reconstruct", "eval_geometry", "eval_rm",
    "ReflectanceMapEstimator", "ShadingNormalEstimator", "LevelSetReconstructor",
]
