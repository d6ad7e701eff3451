"""Identity-aware cross-modal retrieval at desk scale.

A from-scratch float64 autodiff core, a miniature frozen dual encoder with
face-token injection and visual prompt tuning, a synthetic identity-in-
context dataset generator, an InfoNCE trainer, and a recall@k evaluation
harness, all deterministic down to the byte for a fixed seed.
"""

from .datagen import (
    DataGenConfig,
    DatasetBundle,
    DatasetManifest,
    generate_dataset,
    generate_gallery,
    validate_manifest,
)
from .encoders import (
    FaceAnchorTable,
    FaceProjector,
    ModelDims,
    encode_image,
    encode_text,
    face_features,
    project_face,
)
from .evaluation import (
    K_VALUES,
    MetricsReport,
    RankedList,
    evaluate_entity_in_context,
    evaluate_entity_only,
    rank_images,
    recall_at_k,
    rsum,
    top_k_images,
)
from .model import IdClipModel, build_model, build_vocab
from .query import (
    AnonymizedCaption,
    CompoundQuery,
    ExpansionStrategy,
    FaceGallery,
    Vocabulary,
    compose_query,
    ensemble_prompts,
    expand_entity,
    lookup_face,
)
from .tensor import Tape, Tensor, backward, finite_difference_check
from .trainer import TrainConfig, adam_step, info_nce, pretrain_backbone, train_epoch

__version__ = "0.1.0"

__all__ = [
    "AnonymizedCaption", "CompoundQuery", "DataGenConfig", "DatasetBundle",
    "DatasetManifest", "ExpansionStrategy", "FaceAnchorTable", "FaceGallery",
    "FaceProjector", "IdClipModel", "K_VALUES", "MetricsReport", "ModelDims",
    "RankedList", "Tape", "Tensor", "TrainConfig", "Vocabulary", "adam_step",
    "backward", "build_model", "build_vocab", "compose_query", "encode_image",
    "encode_text", "ensemble_prompts", "evaluate_entity_in_context",
    "evaluate_entity_only", "expand_entity", "face_features",
    "finite_difference_check", "generate_dataset", "generate_gallery",
    "info_nce", "lookup_face", "pretrain_backbone", "project_face",
    "rank_images", "recall_at_k", "rsum", "top_k_images", "train_epoch",
    "validate_manifest",
]
