"""Anatomical positioning by sparse sampling and coordinate regression.

A query point in a CT-like volume is described by a few thousand
nearest-neighbor intensity lookups on fixed millimeter grids (three
orthogonal planes plus multi-resolution cubes), and a small residual network
regresses that descriptor to a normalized position in a shared atlas space.
On top of that one mapping sit organ-label lookup, label-transfer
segmentation, cross-volume point matching by fixed-point navigation, and
iterative landmark detection. Descriptor cost is independent of volume size,
so a query stays comfortably under a millisecond on one CPU core.

Synthetic phantoms with analytically invertible deformation fields supply
exact ground truth for training and for every oracle used in the tests.
"""

from .atlas import (Atlas, MissingLandmarkError, from_normalized, label_at,
                    landmark_normalized, load_atlas, save_atlas, to_normalized)
from .model import (OUTPUT_ATLAS_COORD, OUTPUT_DISPLACEMENT_MM,
                    IncompatibleModelError, ModelFormatError, RegressorParams,
                    backward, forward, forward_batch, init, load_params,
                    param_count, save_params)
from .sampler import (WINDOW_CT, CubeGridSpec, DescriptorLayout,
                      IntensityWindow, PlaneGridSpec, default_layout, extract,
                      extract_batch, normalize_intensity)
from .synth import (DeformationField, Organ, PhantomSpec, SubjectSample,
                    ankle_spec, displacement, identity_field, make_atlas_phantom,
                    make_deformation, psi, sample_training_points, thorax_spec,
                    warp_subject)
from .tasks import (Engine, NavigationResult, OracleEngine, QueryResult,
                    dice_micro, froc_curve, match_point, multi_agent_landmark,
                    navigate, navigate_landmark, query, segment,
                    sensitivity_at_thresholds)
from .training import (TrainConfig, TrainingDivergedError, TrainingSet,
                       build_dataset, build_landmark_dataset, evaluate, logmse,
                       train)
from .volume import (LabelVolume, Volume, VolumeFormatError, load_label_volume,
                     load_volume, sample_nearest, save_volume, volume_from_bytes,
                     world_to_voxel, voxel_to_world)

__version__ = "1.0.0"

__all__ = [
    "Atlas", "CubeGridSpec", "DeformationField", "DescriptorLayout", "Engine",
    "IncompatibleModelError", "IntensityWindow", "LabelVolume",
    "MissingLandmarkError", "ModelFormatError", "NavigationResult",
    "OUTPUT_ATLAS_COORD", "OUTPUT_DISPLACEMENT_MM", "Organ", "OracleEngine",
    "PhantomSpec", "PlaneGridSpec", "QueryResult", "RegressorParams",
    "SubjectSample", "TrainConfig", "TrainingDivergedError", "TrainingSet",
    "Volume", "VolumeFormatError", "WINDOW_CT", "ankle_spec", "backward",
    "build_dataset", "build_landmark_dataset", "default_layout", "dice_micro",
    "displacement", "evaluate", "extract", "extract_batch", "forward",
    "forward_batch", "from_normalized", "froc_curve", "identity_field", "init",
    "label_at", "landmark_normalized", "load_atlas", "load_label_volume",
    "load_params", "load_volume", "logmse", "make_atlas_phantom",
    "make_deformation", "match_point", "multi_agent_landmark", "navigate",
    "navigate_landmark", "normalize_intensity", "param_count", "psi", "query",
    "sample_nearest", "sample_training_points", "save_atlas", "save_params",
    "save_volume", "segment", "sensitivity_at_thresholds", "thorax_spec",
    "to_normalized", "train", "volume_from_bytes", "voxel_to_world",
    "warp_subject", "world_to_voxel",
]
