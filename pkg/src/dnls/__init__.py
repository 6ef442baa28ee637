"""Disjunctive normal level set segmentation.

A parametric level set built as a soft union of convex polytopes (each a
soft intersection of half-planes), evolved by gradient descent for two-phase
piecewise-constant segmentation and for multiphase region competition whose
per-iteration cost is independent of the number of regions.
"""

from .errors import DegenerateRegionError, DnlsError, NumericalError, PgmFormatError
from .geometry import (HalfSpace, LevelSetModel, ModelConfig, Polytope,
                       eval_level_set, eval_polytope, eval_sigmoid,
                       grad_f_wrt_params, init_grid)
from .imaging import (PhantomSpec, annulus_phantom, dice, dice_multilabel,
                      disk_phantom, generate_phantom, multi_otsu, read_pgm,
                      write_pgm)
from .multiphase import (MultiphaseResult, PolytopeIntensity, RegionModel,
                         assign_labels_kmeans, best_region,
                         gradient_step_deformation, polytope_mean_intensities,
                         segment_multiphase)
from .twophase import (EvolutionConfig, RegionStats, SegmentationResult,
                       energy_two_phase, gradient_step_two_phase,
                       segment_two_phase, update_region_stats)

__version__ = "0.1.0"

__all__ = [
    "DnlsError", "DegenerateRegionError", "NumericalError", "PgmFormatError",
    "HalfSpace", "Polytope", "ModelConfig", "LevelSetModel",
    "eval_sigmoid", "eval_polytope", "eval_level_set", "grad_f_wrt_params",
    "init_grid",
    "RegionStats", "EvolutionConfig", "SegmentationResult",
    "energy_two_phase", "update_region_stats", "gradient_step_two_phase",
    "segment_two_phase",
    "RegionModel", "PolytopeIntensity", "MultiphaseResult",
    "polytope_mean_intensities", "assign_labels_kmeans", "best_region",
    "gradient_step_deformation", "segment_multiphase",
    "dice", "dice_multilabel", "PhantomSpec", "generate_phantom",
    "disk_phantom", "annulus_phantom", "multi_otsu", "read_pgm", "write_pgm",
]
