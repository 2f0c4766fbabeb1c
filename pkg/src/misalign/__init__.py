"""Misalignment classification for registered lidar point cloud pairs.

The library covers the full desk-scale workflow: synthetic scene scanning,
pair registration, co-visibility preprocessing, entropy and optimal-transport
feature extraction, ordinal classification with a regression-by-classification
loss, and evaluation against whole-cloud metrics and an aggregate-entropy
baseline.
"""

from . import errors
from .geometry import (
    EPSILON_BIN_EDGES,
    PerturbationSpec,
    PointCloud,
    RegisteredPair,
    RigidTransform,
    apply_transform,
    bin_epsilon,
    load_cloud,
    perturb,
    point_transformation_error,
    save_cloud,
    synthetic_class_spec,
)
from .preprocess import (
    Neighborhood,
    RadiusParams,
    VisibilityResult,
    build_neighborhoods,
    covisibility_scores,
    dynamic_radius,
    farthest_point_sampling,
    hidden_point_removal,
    pair_covisibility,
)
from .features import (
    FEATURE_DIM,
    FEATURE_NAMES,
    FeatureConfig,
    FeatureMap,
    SinkhornParams,
    assemble_features,
    coral_pair_features,
    extract_pair_features,
    load_feature_map,
    local_diff_entropy,
    local_sinkhorn_feature,
    save_feature_map,
    sinkhorn_distance,
    sinkhorn_divergence,
)
from .models import (
    CoralModel,
    MlpParams,
    PTLayerParams,
    TrainConfig,
    TrainingSet,
    combined_loss,
    coral_fit,
    coral_predict,
    cross_entropy,
    init_pt_layer,
    load_model,
    predict,
    predict_class,
    pt_layer_forward,
    regression_head_loss,
    save_model,
    train_mlp,
    wasserstein1,
)
from .metrics import (
    EvalReport,
    binary_accuracy,
    chamfer,
    confusion_matrix,
    correction_selection,
    evaluate_predictions,
    hausdorff,
    map_to_binary,
    pearson,
    xi_rates,
)
from .harness import (
    DatasetConfig,
    IcpParams,
    SceneSpec,
    build_dataset,
    build_scene,
    generate_scene_scan,
    icp_point2point,
    load_manifest,
    parse_config,
    random_scene_specs,
)
from .pipeline import (
    coral_baseline,
    correct_map,
    evaluate_dataset,
    featurize_dataset,
    metric_study,
    train_from_dataset,
)

__version__ = "0.1.0"
