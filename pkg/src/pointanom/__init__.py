"""Training-free, single-sample anomaly detection on 3D point clouds."""
from ._kernels import BACKEND
from .config import ConfigError, RunConfig, load_config, parse_config, serialize_config
from .decomposition import (DecompositionConfig, bisect_lambda, build_smoothness_operator,
                            labels_from_rows, lambda_max, solve_decomposition)
from .descriptors import DescriptorConfig, descriptor_scores, fpfh, pair_features, spfh, threshold_scores
from .detectors import Detection, detect
from .evaluation import Method, benchmark, confusion, metrics
from .geometry import PointCloud, build_index, estimate_normals, knn, plane_residuals
from .io import DataError, read_cloud, write_labeled_ply
from .latent import EMConfig, LviParams, SmoothnessGraph, mean_field_em, structure_tensors
from .synth import Defect, SynthSpec, gen_surface, implant_defects, make_sample, random_defects

__version__ = "0.1.0"
