"""Noise-robust point-cloud analysis via cloning decomposition and linkage patterns."""

from .cloning import Partition, clone_partition, entropy_hist, entropy_knn
from .geometry import (
    DatasetManifest,
    ManifestEntry,
    PointCloud,
    add_gaussian_noise,
    augment,
    gen_shape,
    load_cloud,
    load_manifest,
    normalize_unit_sphere,
    save_cloud,
    save_manifest,
)
from .neighbors import NeighborIndex, euclidean_sq, hilbert_dist, knn
from .network import (
    Descriptor,
    PatternNetConfig,
    PatternNetParams,
    branch_forward,
    classify_logits,
    count_params,
    describe,
    edge_features,
    global_descriptor,
    segment_logits,
)
from .ops import (
    MlpLayerParams,
    grad_check,
    max_pool_rows,
    ridge_pinv_solve,
    shared_mlp_forward,
    softmax_cross_entropy_smoothed,
    svd_pinv,
)
from .tensor import Tensor, concat, solve
from .training import (
    Checkpoint,
    EvalReport,
    LossBreakdown,
    evaluate,
    evaluate_iou,
    fit,
    linear_mapping_loss,
    load_checkpoint,
    mean_iou,
    save_checkpoint,
    subset_consistency,
    total_loss,
)

__version__ = "0.1.0"
