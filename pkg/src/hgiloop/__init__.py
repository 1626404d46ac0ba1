"""Loop-closure detection toolkit.

Fuses a geometric keypoint/descriptor stream with saliency-guided keypoints
and compact gradient-histogram descriptors, scores frame pairs through two
bag-of-visual-words vocabularies, and evaluates detections with
precision/recall and trajectory-error metrics. See the `hgi` command-line
tool for the end-to-end pipeline.
"""

from .core import (
    DEFAULT_GEOM_DESCRIPTOR_LENGTH,
    SALIENT_DESCRIPTOR_LENGTH,
    DedupParams,
    FeatureFamily,
    FrameFeatures,
    FusionParams,
    GeomDescriptor,
    GradientField,
    Heatmap,
    Keypoint,
    SalDescriptor,
    SimilarityScore,
)
from .geom_features import (
    NeighborSet,
    dedup_keypoints,
    mean_cosine_similarity,
    merge_triplet,
    neighbor_set,
)
from .sal_features import (
    OrientationHistogram,
    PatchWeightTable,
    gradient_field,
    patch_weights,
    salient_descriptor,
    salient_frame_features,
    sample_keypoints,
)
from .vocab import (
    BowVector,
    FrameIndex,
    Vocabulary,
    VocabularyFileError,
    l1_distance,
    load_vocabulary,
    quantize,
    save_vocabulary,
    train,
)
from .loopdet import (
    KeyframeStore,
    LoopDetection,
    LoopDetector,
    detect,
    fuse,
    maybe_store,
    read_detections,
    squash,
    write_detections,
)
from .evalkit import (
    LoopLabelSet,
    PRCounts,
    SimilarityHistogram,
    Trajectory,
    align_sim3,
    ate_rmse,
    derive_loop_labels,
    feature_similarity_histogram,
    precision_recall,
    read_loop_labels,
    read_trajectory,
    write_loop_labels,
    write_trajectory,
)
from .ingest import (
    BadMagicError,
    FeatureFileError,
    HeatmapFormatError,
    SequenceManifest,
    SizeMismatchError,
    SynthSpec,
    TruncatedBodyError,
    VersionMismatchError,
    fallback_geometric,
    fallback_saliency,
    load_image,
    read_feature_file,
    read_heatmap,
    read_sequence,
    synth_loop_sequence,
    write_feature_file,
    write_heatmap,
)
from .cli import RunConfig, load_config

__version__ = "0.1.0"

__all__ = [
    "DEFAULT_GEOM_DESCRIPTOR_LENGTH",
    "SALIENT_DESCRIPTOR_LENGTH",
    "BadMagicError",
    "BowVector",
    "DedupParams",
    "FeatureFamily",
    "FeatureFileError",
    "FrameFeatures",
    "FrameIndex",
    "FusionParams",
    "GeomDescriptor",
    "GradientField",
    "Heatmap",
    "HeatmapFormatError",
    "Keypoint",
    "KeyframeStore",
    "LoopDetection",
    "LoopDetector",
    "LoopLabelSet",
    "NeighborSet",
    "OrientationHistogram",
    "PRCounts",
    "PatchWeightTable",
    "RunConfig",
    "SalDescriptor",
    "SequenceManifest",
    "SimilarityHistogram",
    "SimilarityScore",
    "SizeMismatchError",
    "SynthSpec",
    "Trajectory",
    "TruncatedBodyError",
    "VersionMismatchError",
    "Vocabulary",
    "VocabularyFileError",
    "align_sim3",
    "ate_rmse",
    "dedup_keypoints",
    "derive_loop_labels",
    "detect",
    "fallback_geometric",
    "fallback_saliency",
    "feature_similarity_histogram",
    "fuse",
    "gradient_field",
    "l1_distance",
    "load_config",
    "load_image",
    "load_vocabulary",
    "maybe_store",
    "mean_cosine_similarity",
    "merge_triplet",
    "neighbor_set",
    "patch_weights",
    "precision_recall",
    "quantize",
    "read_detections",
    "read_feature_file",
    "read_heatmap",
    "read_loop_labels",
    "read_sequence",
    "read_trajectory",
    "salient_descriptor",
    "salient_frame_features",
    "sample_keypoints",
    "save_vocabulary",
    "squash",
    "synth_loop_sequence",
    "train",
    "write_detections",
    "write_feature_file",
    "write_heatmap",
    "write_loop_labels",
    "write_trajectory",
]
