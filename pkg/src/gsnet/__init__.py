"""Eigen-Graph point-cloud descriptors and a trainable GSC network in numpy."""

__version__ = "0.1.0"

from .errors import (ContractViolationError, GSNetError, InvalidArgumentError, InvalidDataError,
                     ParseError, TrainingDivergenceError)
from .geometry import (RigidTransform, apply_transform, as_cloud, jitter, normalize_unit_sphere,
                       random_rigid_transform, random_rotation)
from .eigen_graph import (EigenDescriptorSet, NeighborGraph, build_graph, eig_sym3, eig_sym3_batch,
                          eigen_descriptors, eigen_distance, eigen_distance_matrix, knn_eigen,
                          knn_euclidean, structure_tensors)
from .sampling import (InterpolationPlan, SampleSelection, fps, gather, interpolate,
                       plan_interpolation, stride_sample)
from .network import (GscConfig, classify_head, encoder_forward, group_features, gsc_forward,
                      init_params, input_recipe, load_checkpoint, save_checkpoint, segment_head)
