"""Canopy density estimation from lidar ray clouds.

Library for turning globally registered ray clouds of row crops into
per-voxel leaf area densities: terrain extraction, row segmentation, voxel
ray accumulation, a debiased censored-exponential density estimator, spatial
integration and Monte Carlo validation of the statistical model.
"""

from .density import (DensityField, GammaPosterior, canopy_density, debias_factor,
                      estimate_field, lambda_stats, load_field, posterior,
                      save_field, uncensored_lambda)
from .ground import (GroundMesh, extract_ground, height_at, heights_at,
                     subtract_ground)
from .pipeline import PipelineConfig, run_pipeline
from .raycloud import (Ray, RayCloud, RawMeasurement, classify_nonreturns,
                       crop_box, load_raycloud, save_raycloud)
from .report import (DensityImage, PanelSummary, RowSeries, along_row_series,
                     end_on_profile, integrate_axis, panel_aggregate, panel_lai,
                     render_colormap, rrmse)
from .rows import RowSegment, Trajectory, row_direction, split_rows, to_row_coordinates
from .simulate import (LeafScene, NormalDistributionSpec, RayDistribution,
                       TurbidConfig, bias_curves, cast_rays, debiased_error_surface,
                       gen_leaf_scene, sample_turbid, trawl_vs_spin,
                       triangle_bias_experiment)
from .synthetic import VineyardSpec, simulate_scan, terrain_height
from .voxels import VoxelGrid, VoxelStats, accumulate, build_grid, expand_undersampled, traverse

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
