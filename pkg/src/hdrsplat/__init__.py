"""Recover a Gaussian-splat scene, a continuous camera trajectory, per-frame
exposure times and a camera response curve from blurry, auto-exposed LDR video."""

from .imaging import CrfModel, ExposureSchedule, ImagingConfig, apply_crf, form_frame, render_hdr, retint, \
    synthesize_exposure
from .lie import Pose, se3_exp, se3_log
from .scene import Camera, GaussianScene, RasterConfig, project, rasterize, rasterize_with_adjoint
from .trajectory import SplineTrajectory, fit_knots

__all__ = [
    "Camera", "CrfModel", "ExposureSchedule", "GaussianScene", "ImagingConfig", "Pose", "RasterConfig",
    "SplineTrajectory", "apply_crf", "fit_knots", "form_frame", "project", "rasterize", "rasterize_with_adjoint",
    "render_hdr", "retint", "se3_exp", "se3_log", "synthesize_exposure",
]
__version__ = "0.1.0"
