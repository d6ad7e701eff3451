"""Ranking and recall metrics for both retrieval tasks.

Ranking is an exact full sort of cosine similarities with a deterministic
tie-break on ascending image id; a heap-based top-k path exists for the
search command and must agree with the full sort's prefix. Recall uses the
clamped denominator min(k, |relevant|), reported in percentage points.
"""

from __future__ import annotations

import heapq
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .datagen import DatasetBundle
from .errors import DataError, GalleryMissError, UsageError
from .model import IdClipModel
from .query import (
    AnonymizedCaption,
    CompoundQuery,
    ExpansionStrategy,
    FaceGallery,
    compose_query,
    ensemble_prompts,
)
from .tensor import _sum_lr

K_VALUES = (1, 5, 10, 50)

THREADS_ENV = "IDCLIP_THREADS"


@dataclass
class RankedList:
    query_id: object
    image_ids: list[int]
    similarities: np.ndarray


@dataclass
class MetricsReport:
    task: str
    strategy: str
    template_policy: str
    recall: dict[int, float]  # percentage points, keys exactly K_VALUES
    rsum: float
    num_queries: int
    seed: int
    config_hash: str
    skipped: int = 0
    notes: list[str] = field(default_factory=list)

    def to_json_dict(self) -> dict:
        return {
            "task": self.task,
            "strategy": self.strategy,
            "template_policy": self.template_policy,
            "recall": {str(k): self.recall[k] for k in K_VALUES},
            "rsum": self.rsum,
            "num_queries": self.num_queries,
            "seed": self.seed,
            "config_hash": self.config_hash,
            "skipped": self.skipped,
            "notes": self.notes,
        }


def eval_threads() -> int:
    """Worker cap for per-query parallelism, from IDCLIP_THREADS (default 1)."""
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _map_ordered(fn: Callable, items: Sequence, threads: int) -> list:
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _similarities(query_embedding: np.ndarray, image_embeddings: np.ndarray) -> np.ndarray:
    # cosine == dot product on unit vectors; strict summation keeps ranking
    # byte-stable across runs
    return _sum_lr(image_embeddings * query_embedding[None, :], axis=1)


def rank_images(
    query_embedding: np.ndarray,
    image_embeddings: np.ndarray,
    image_ids: Sequence[int],
    query_id: object = None,
) -> RankedList:
    """Full descending sort by similarity, ties broken by ascending id."""
    ids = np.asarray(image_ids, dtype=np.int64)
    if ids.size == 0:
        raise UsageError("rank_images on an empty image database")
    if len(ids) != len(image_embeddings):
        raise UsageError(
            f"{len(image_embeddings)} embeddings but {len(ids)} image ids"
        )
    sims = _similarities(np.asarray(query_embedding), np.asarray(image_embeddings))
    order = np.lexsort((ids, -sims))
    return RankedList(query_id, ids[order].tolist(), sims[order])


def top_k_images(
    query_embedding: np.ndarray,
    image_embeddings: np.ndarray,
    image_ids: Sequence[int],
    k: int,
) -> RankedList:
    """Heap-based top-k; its prefix must equal the full sort's prefix."""
    ids = np.asarray(image_ids, dtype=np.int64)
    if ids.size == 0:
        raise UsageError("top_k_images on an empty image database")
    sims = _similarities(np.asarray(query_embedding), np.asarray(image_embeddings))
    best = heapq.nsmallest(min(k, len(ids)), zip(-sims, ids.tolist()))
    return RankedList(
        None,
        [int(i) for _, i in best],
        np.array([-s for s, _ in best]),
    )


def recall_at_k(ranked: RankedList, relevant: set, k: int) -> float:
    """|relevant intersect top-k| / min(k, |relevant|), in [0, 1]."""
    if not relevant:
        raise UsageError("recall_at_k with an empty relevant set")
    if k < 1:
        raise UsageError(f"recall_at_k needs k >= 1, got {k}")
    hits = sum(1 for i in ranked.image_ids[:k] if i in relevant)
    return hits / min(k, len(relevant))


def rsum(recalls: dict[int, float]) -> float:
    """Sum of the four recall percentages."""
    if set(recalls) != set(K_VALUES):
        raise UsageError(f"rsum needs recalls for exactly k in {K_VALUES}, got {sorted(recalls)}")
    return float(sum(recalls[k] for k in K_VALUES))


def embed_split_images(
    model: IdClipModel, bundle: DatasetBundle, split: str, threads: int = 1
) -> tuple[list[int], np.ndarray]:
    """Unit embeddings of a split's images, in split order."""
    records = bundle.split_images(split)
    if not records:
        raise UsageError(f"split {split!r} is empty")

    def embed(rec):
        return model.embed_image(bundle.patch_grid(rec.image_id)).data

    embs = _map_ordered(embed, records, threads)
    return [r.image_id for r in records], np.stack(embs, axis=0)


def _mean_percent(values: list[float]) -> float:
    return 100.0 * sum(values) / len(values)


def evaluate_entity_in_context(
    model: IdClipModel,
    bundle: DatasetBundle,
    gallery: FaceGallery,
    split: str,
    strategy: ExpansionStrategy,
    template_policy: str,
    seed: int,
    config_hash: str,
    image_embeddings: Optional[tuple[list[int], np.ndarray]] = None,
    threads: Optional[int] = None,
) -> MetricsReport:
    """One query per caption; the single relevant image is its source.

    ``template_policy`` is 't1' (only the canonical template's captions) or
    'all' (recall per template, then the arithmetic mean across templates).
    Gallery misses are recorded and skipped, never fatal.
    """
    if template_policy not in ("t1", "all"):
        raise UsageError(f"unknown template policy {template_policy!r}")
    threads = eval_threads() if threads is None else threads
    ids, embs = image_embeddings or embed_split_images(model, bundle, split, threads)
    captions = bundle.split_captions(split)
    if template_policy == "t1":
        groups = {1: [c for c in captions if c.template_id == 1]}
        if not groups[1]:
            raise DataError("no captions with template_id 1 in this split")
    else:
        groups = {}
        for cap in captions:
            groups.setdefault(cap.template_id, []).append(cap)

    skipped = 0
    notes: list[str] = []
    per_template: dict[int, dict[int, float]] = {}
    total_queries = 0
    for template_id in sorted(groups):
        recalls: dict[int, list[float]] = {k: [] for k in K_VALUES}
        for cap in groups[template_id]:
            query = CompoundQuery(
                AnonymizedCaption(cap.text, cap.template_id), cap.entity_name, strategy
            )
            try:
                q = compose_query(
                    query, gallery, model.projector, model.text, model.vocab, model.dims
                ).data
            except GalleryMissError:
                skipped += 1
                notes.append(f"gallery miss for {cap.entity_name!r} (image {cap.image_id})")
                continue
            ranked = rank_images(q, embs, ids, query_id=(cap.image_id, cap.template_id))
            for k in K_VALUES:
                recalls[k].append(recall_at_k(ranked, {cap.image_id}, k))
            total_queries += 1
        if any(recalls[k] for k in K_VALUES):
            per_template[template_id] = {k: _mean_percent(recalls[k]) for k in K_VALUES}

    if not per_template:
        raise DataError("no usable queries in this split")
    recall_pct = {
        k: sum(per_template[t][k] for t in per_template) / len(per_template) for k in K_VALUES
    }
    return MetricsReport(
        task="entity_in_context",
        strategy=ExpansionStrategy(strategy).value,
        template_policy="single_T1" if template_policy == "t1" else "all_templates_avg",
        recall=recall_pct,
        rsum=rsum(recall_pct),
        num_queries=total_queries,
        seed=seed,
        config_hash=config_hash,
        skipped=skipped,
        notes=notes,
    )


def evaluate_entity_only(
    model: IdClipModel,
    bundle: DatasetBundle,
    gallery: FaceGallery,
    split: str,
    strategy: ExpansionStrategy,
    prompt_templates: Sequence[str],
    seed: int,
    config_hash: str,
    image_embeddings: Optional[tuple[list[int], np.ndarray]] = None,
    threads: Optional[int] = None,
) -> MetricsReport:
    """One query per identity present in the split, via prompt ensembling.

    All of the identity's split images are relevant, so the min(k, n)
    denominator clamp is exercised whenever an identity has several images.
    """
    threads = eval_threads() if threads is None else threads
    ids, embs = image_embeddings or embed_split_images(model, bundle, split, threads)
    records = bundle.split_images(split)
    identities = sorted({r.identity_id for r in records})

    skipped = 0
    notes: list[str] = []
    recalls: dict[int, list[float]] = {k: [] for k in K_VALUES}
    n_queries = 0
    for identity in identities:
        name = bundle.manifest.gallery_names[identity]
        relevant = {r.image_id for r in records if r.identity_id == identity}
        try:
            q = ensemble_prompts(
                name, strategy, list(prompt_templates), gallery,
                model.projector, model.text, model.vocab, model.dims,
            ).data
        except GalleryMissError:
            skipped += 1
            notes.append(f"gallery miss for identity {identity} ({name!r})")
            continue
        ranked = rank_images(q, embs, ids, query_id=identity)
        for k in K_VALUES:
            recalls[k].append(recall_at_k(ranked, relevant, k))
        n_queries += 1

    if n_queries == 0:
        raise DataError("no identities with gallery entries in this split")
    recall_pct = {k: _mean_percent(recalls[k]) for k in K_VALUES}
    return MetricsReport(
        task="entity_only",
        strategy=ExpansionStrategy(strategy).value,
        template_policy="prompt_ensemble",
        recall=recall_pct,
        rsum=rsum(recall_pct),
        num_queries=n_queries,
        seed=seed,
        config_hash=config_hash,
        skipped=skipped,
        notes=notes,
    )
