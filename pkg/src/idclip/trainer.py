"""Contrastive training with a frozen/trainable parameter partition.

Two phases share one loop. Backbone pretraining teaches the towers generic
caption-image alignment on entity-free captions (no prompt tokens, no face
token), standing in for large-scale pretrained weights. The identity phase
then trains only the face projector and, when enabled, the visual prompt
tokens, while every backbone tensor stays bit-frozen.

The loss is one-directional text-to-image InfoNCE over in-batch negatives
with cosine similarities; an optional constant logit scale (never learned)
makes the toy setup converge, and a symmetric variant exists behind a flag.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .datagen import DatasetBundle
from .encoders import FaceAnchorTable, encode_image, face_features
from .errors import ConfigError, UsageError
from .evaluation import (
    K_VALUES,
    embed_split_images,
    evaluate_entity_in_context,
    rank_images,
    recall_at_k,
    rsum,
)
from .model import IdClipModel
from .query import AnonymizedCaption, ExpansionStrategy, FaceGallery, compose_slots, drop_entity, expand_entity
from .tensor import (
    Tape,
    Tensor,
    add_const,
    backward,
    diag_part,
    exp,
    log,
    matmul,
    mul,
    stack_rows,
    sum_all,
    sum_axis,
    transpose,
)

PHASE_BACKBONE = "backbone_pretrain"
PHASE_IDCLIP = "idclip"


@dataclass
class TrainConfig:
    learning_rate: float = 5e-5
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 8
    max_epochs: int = 10
    seed: int = 0
    symmetric_loss: bool = False
    phase: str = PHASE_IDCLIP
    logit_scale: float = 10.0

    def validate(self) -> None:
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2: in-batch negatives are required")
        if self.phase not in (PHASE_BACKBONE, PHASE_IDCLIP):
            raise ConfigError(f"unknown phase {self.phase!r}")
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be >= 1")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be >= 0")


@dataclass
class ParamPartition:
    trainable: dict[str, Tensor]
    frozen: dict[str, Tensor]


def build_partition(model: IdClipModel, phase: str) -> ParamPartition:
    """Split parameters by phase and set requires_grad to match."""
    all_named = model.named_params()
    if phase == PHASE_IDCLIP:
        trainable = model.adapter_named()
    elif phase == PHASE_BACKBONE:
        trainable = model.backbone_named()
    else:
        raise ConfigError(f"unknown phase {phase!r}")
    frozen = {n: t for n, t in all_named.items() if n not in trainable}
    for t in frozen.values():
        t.requires_grad = False
        t.grad = None
    for t in trainable.values():
        t.requires_grad = True
        t.grad = None
    return ParamPartition(trainable=trainable, frozen=frozen)


# ---------------------------------------------------------------------------
# loss

def info_nce(
    c_batch: Tensor,
    v_batch: Tensor,
    scale: float = 1.0,
    symmetric: bool = False,
) -> Tensor:
    """Contrastive loss over matched (c_i, v_i) unit-vector pairs.

    -1/B sum_i log softmax(scale * sim(c_i, v_.))_i with cosine similarity;
    positives sit on the diagonal. ``scale`` defaults to 1 (the printed
    form); the symmetric flag averages in the image-to-text direction.
    """
    if c_batch.data.ndim != 2 or v_batch.data.ndim != 2 or c_batch.shape != v_batch.shape:
        raise UsageError(
            f"expected matching [B x d] batches, got {c_batch.shape} and {v_batch.shape}"
        )
    b = c_batch.shape[0]
    if b < 2:
        raise UsageError("info_nce needs batch size >= 2")
    sims = matmul(c_batch, transpose(v_batch))
    logits = mul(sims, scale) if scale != 1.0 else sims

    def one_direction(lg: Tensor) -> Tensor:
        row_max = np.max(lg.data, axis=1, keepdims=True)  # constant shift
        lse = log(sum_axis(exp(add_const(lg, -row_max)), axis=1))
        lse = add_const(lse, row_max.reshape(-1))
        per_query = lse - diag_part(lg)
        return mul(sum_all(per_query), 1.0 / b)

    loss = one_direction(logits)
    if symmetric:
        loss = mul(loss + one_direction(transpose(logits)), 0.5)
    return loss


# ---------------------------------------------------------------------------
# optimizer

@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0


def init_adam(trainable: dict[str, Tensor]) -> AdamState:
    return AdamState(
        m={n: np.zeros_like(p.data) for n, p in trainable.items()},
        v={n: np.zeros_like(p.data) for n, p in trainable.items()},
    )


def adam_step(
    trainable: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: AdamState,
    config: TrainConfig,
) -> None:
    """Bias-corrected Adam update, applied in sorted name order."""
    state.t += 1
    b1, b2 = config.adam_beta1, config.adam_beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for name in sorted(trainable):
        g = grads[name]
        state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        state.v[name] = b2 * state.v[name] + (1.0 - b2) * (g * g)
        m_hat = state.m[name] / bc1
        v_hat = state.v[name] / bc2
        trainable[name].data -= config.learning_rate * m_hat / (np.sqrt(v_hat) + config.adam_eps)


# ---------------------------------------------------------------------------
# training loop

def _encode_caption_for_training(
    cap, image, model: IdClipModel, table: FaceAnchorTable, phase: str
) -> Tensor:
    if phase == PHASE_BACKBONE:
        slots = drop_entity(cap.text)
        return compose_slots(slots, None, model.projector, model.text, model.vocab, model.dims)
    # identity phase: TOK-only expansion, with the image's own rendered face
    # as the feature source (train-time augmentation; the gallery face is a
    # test-time artifact)
    slots = expand_entity(
        AnonymizedCaption(cap.text, cap.template_id), ExpansionStrategy.TOK_ONLY, cap.entity_name
    )
    face = face_features(image.identity_id, image.face_seed, table)
    return compose_slots(slots, face, model.projector, model.text, model.vocab, model.dims)


def train_epoch(
    bundle: DatasetBundle,
    config: TrainConfig,
    model: IdClipModel,
    table: FaceAnchorTable,
    partition: ParamPartition,
    state: AdamState,
    epoch: int,
    split: str = "train",
    image_cache: Optional[dict[int, np.ndarray]] = None,
) -> tuple[float, int]:
    """One seeded pass over the split; Adam steps on the trainable set only.

    Pairs are shuffled per epoch; each sample draws one of its captions
    uniformly (random stem and template). When the visual tower is fully
    frozen (identity phase without prompt tuning) image embeddings are
    cached across batches and epochs.
    """
    config.validate()
    images = bundle.split_images(split)
    if not images:
        raise UsageError(f"split {split!r} is empty")
    phase = config.phase
    use_prompts = phase == PHASE_IDCLIP and model.vpt_enabled
    visual_frozen = phase == PHASE_IDCLIP and not model.vpt_enabled
    phase_stream = 0 if phase == PHASE_BACKBONE else 1
    rng = np.random.default_rng([config.seed, 0x7E41, phase_stream, epoch])

    if phase == PHASE_IDCLIP:
        # group same-context images so every batch carries hard negatives
        # that differ only in identity; no two batch items can share a
        # (context, identity) pair, since swaps within a context are
        # distinct identities
        by_context: dict[int, list[int]] = {}
        for i, img in enumerate(images):
            by_context.setdefault(img.context_id, []).append(i)
        context_ids = list(by_context)
        rng.shuffle(context_ids)
        order_list: list[int] = []
        for cid in context_ids:
            group = by_context[cid]
            perm = rng.permutation(len(group))
            order_list.extend(group[int(j)] for j in perm)
        order = np.asarray(order_list)
    else:
        order = rng.permutation(len(images))
    losses: list[float] = []
    n_batches = 0
    for start in range(0, len(order), config.batch_size):
        chunk = order[start : start + config.batch_size]
        if len(chunk) < 2:
            continue
        with Tape():
            c_rows = []
            v_rows = []
            v_cached = []
            for idx in chunk:
                img = images[int(idx)]
                caps = bundle.captions_by_image[img.image_id]
                cap = caps[int(rng.integers(len(caps)))]
                c_rows.append(_encode_caption_for_training(cap, img, model, table, phase))
                if visual_frozen:
                    if image_cache is not None and img.image_id in image_cache:
                        v_cached.append(image_cache[img.image_id])
                    else:
                        emb = encode_image(
                            bundle.patch_grid(img.image_id), model.visual, model.dims,
                            use_prompts=False,
                        ).data
                        if image_cache is not None:
                            image_cache[img.image_id] = emb
                        v_cached.append(emb)
                else:
                    v_rows.append(encode_image(
                        bundle.patch_grid(img.image_id), model.visual, model.dims,
                        use_prompts=use_prompts,
                    ))
            c_batch = stack_rows(c_rows)
            v_batch = Tensor(np.stack(v_cached)) if visual_frozen else stack_rows(v_rows)
            loss = info_nce(
                c_batch, v_batch, scale=config.logit_scale, symmetric=config.symmetric_loss
            )
        backward(loss)
        grads = {
            n: (p.grad if p.grad is not None else np.zeros_like(p.data))
            for n, p in partition.trainable.items()
        }
        adam_step(partition.trainable, grads, state, config)
        for p in partition.trainable.values():
            p.zero_grad()
        losses.append(loss.item())
        n_batches += 1
    if n_batches == 0:
        raise UsageError(f"split {split!r} yields no batch of size >= 2")
    return sum(losses) / n_batches, n_batches


def context_validation_rsum(
    model: IdClipModel, bundle: DatasetBundle, split: str = "val"
) -> float:
    """Backbone-phase validation: entity-free captions against the split.

    Mirrors the main retrieval metric but with the placeholder dropped and
    no prompt tokens, matching what the backbone phase actually trains.
    """
    records = bundle.split_images(split)
    ids = [r.image_id for r in records]
    embs = np.stack([
        encode_image(bundle.patch_grid(r.image_id), model.visual, model.dims,
                     use_prompts=False).data
        for r in records
    ])
    recalls = {k: [] for k in K_VALUES}
    for cap in bundle.split_captions(split):
        if cap.template_id != 1:
            continue
        q = compose_slots(
            drop_entity(cap.text), None, model.projector, model.text, model.vocab, model.dims
        ).data
        ranked = rank_images(q, embs, ids)
        for k in K_VALUES:
            recalls[k].append(recall_at_k(ranked, {cap.image_id}, k))
    return rsum({k: 100.0 * sum(v) / len(v) for k, v in recalls.items()})


def validation_rsum(
    model: IdClipModel,
    bundle: DatasetBundle,
    gallery: FaceGallery,
    phase: str,
    split: str = "val",
) -> float:
    if phase == PHASE_BACKBONE:
        return context_validation_rsum(model, bundle, split)
    # all templates: five times the queries of the T1 policy, which matters
    # for epoch selection on a split this small
    report = evaluate_entity_in_context(
        model, bundle, gallery, split, ExpansionStrategy.TOK_ONLY, "all",
        seed=0, config_hash="", threads=1,
    )
    return report.rsum


@dataclass
class EpochStats:
    epoch: int
    mean_loss: float
    n_batches: int
    val_rsum: float


@dataclass
class PhaseResult:
    phase: str
    stats: list[EpochStats]
    best_epoch: int  # 1-based; argmax of validation rsum, earliest on ties
    checkpoints: list[bytes] = field(default_factory=list)


def run_phase(
    bundle: DatasetBundle,
    config: TrainConfig,
    model: IdClipModel,
    gallery: FaceGallery,
    table: FaceAnchorTable,
    config_hash: str = "",
    keep_checkpoints: bool = True,
) -> PhaseResult:
    """Train one phase to max_epochs, then restore the best-validation epoch."""
    from .checkpoint import load_checkpoint_bytes, restore_model, save_checkpoint_bytes

    config.validate()
    partition = build_partition(model, config.phase)
    state = init_adam(partition.trainable)
    image_cache: Optional[dict[int, np.ndarray]] = (
        {} if (config.phase == PHASE_IDCLIP and not model.vpt_enabled) else None
    )
    stats: list[EpochStats] = []
    checkpoints: list[bytes] = []
    for epoch in range(1, config.max_epochs + 1):
        mean_loss, n_batches = train_epoch(
            bundle, config, model, table, partition, state, epoch, image_cache=image_cache
        )
        val = validation_rsum(model, bundle, gallery, config.phase)
        stats.append(EpochStats(epoch, mean_loss, n_batches, val))
        checkpoints.append(save_checkpoint_bytes(model, config_hash))
    best_idx = max(range(len(stats)), key=lambda i: (stats[i].val_rsum, -i))
    arrays, _, _ = load_checkpoint_bytes(checkpoints[best_idx])
    restore_model(model, arrays)
    return PhaseResult(
        phase=config.phase,
        stats=stats,
        best_epoch=best_idx + 1,
        checkpoints=checkpoints if keep_checkpoints else [],
    )


def pretrain_backbone(
    bundle: DatasetBundle,
    config: TrainConfig,
    model: IdClipModel,
    gallery: FaceGallery,
    table: FaceAnchorTable,
    config_hash: str = "",
) -> PhaseResult:
    """Train the towers on entity-free pairs, then freeze them for good."""
    if config.phase != PHASE_BACKBONE:
        raise ConfigError("pretrain_backbone requires phase 'backbone_pretrain'")
    result = run_phase(bundle, config, model, gallery, table, config_hash)
    for t in model.backbone_named().values():
        t.requires_grad = False
        t.grad = None
    return result
