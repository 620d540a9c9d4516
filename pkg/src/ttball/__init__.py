"""Table-tennis ball physics, trajectory fitting and rally dataset tools."""

from .ballistics import (AeroParams, BallState, RacketImpactParams, TableBounceParams,
                         WorldGeometry, integrate_flight, racket_impact, table_bounce)
from .camera import CameraModel, calibrate_from_corners, project, reprojection_error
from .config import RunConfig, load_config
from .curation import CurationThresholds, curate, emit_statistics, rejection_table
from .racket import RacketStroke, StrokeProblem, solve_stroke
from .rallygen import build_pools, generate_rally
from .segmentation import annotate_rally, estimate_frame_duplication
from .trajectory import Trajectory
from .trajectory_fit import FitConfig, FitResult, ode_fit

__all__ = [
    "AeroParams", "BallState", "RacketImpactParams", "TableBounceParams", "WorldGeometry",
    "integrate_flight", "racket_impact", "table_bounce", "CameraModel",
    "calibrate_from_corners", "project", "reprojection_error", "RunConfig", "load_config",
    "CurationThresholds", "curate", "emit_statistics", "rejection_table", "RacketStroke",
    "StrokeProblem", "solve_stroke", "build_pools", "generate_rally", "annotate_rally",
    "estimate_frame_duplication", "Trajectory", "FitConfig", "FitResult", "ode_fit",
]
