"""Scene-dependent video anomaly detection on decoupled scene and skeleton features."""

from .data import Clip, Dataset, DatasetHeader, SceneFeature, SkeletonSequence, load_dataset, save_dataset
from .errors import ContractViolation, DatasetError, DivergenceError, ZeroNormError
from .metrics import average_precision, frame_scores, roc_auc
from .refinement import Pools, UrConfig, partition_pools, stage2_iterate
from .rkm import KnowledgeGraph, RkmConfig, build_graph, construct_graph, query_relation
from .sai import SaiDims, SaiParams, init_params, score_clip
from .training import BagConfig, LossWeights, TrainConfig, train_stage1, train_unsupervised

__version__ = "0.1.0"
