"""Register a scanned mesh with spherical markers to posed camera images."""

from .geometry import CameraModel, Ellipse, RigidTransform, SimilarityTransform, SphereMarker, compose
from .mesh import TriangleMesh, chamfer_distance, fit_sphere_icp, load_mesh, save_mesh
from .registration import (
    EvaluationReport,
    PosedImage,
    RegistrationProblem,
    RegistrationSolution,
    SolverConfig,
    evaluate,
    match_markers,
    refine_registration,
    register_scene,
)

__version__ = "0.1.0"
