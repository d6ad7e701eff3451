"""Synthetic identity-in-context dataset: generator, manifest, validator.

Images are patch grids rendered straight from seeds (no raster files):
every image of a context shares the same context pattern, and one
designated face patch carries a linear rendering of that image's jittered
face feature. Captions come from per-context stems crossed with caption
templates; splits are disjoint in contexts but share identities, so
evaluation recombines known identities with unseen contexts.

The manifest is JSON-lines with a header line and fixed key order, so a
fixed seed produces byte-identical files. Patch tensors live in a binary
sidecar; the manifest alone can describe a real externally-built corpus
via the optional per-image file path field.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, TextIO

import numpy as np

from .encoders import FaceAnchorTable, ModelDims, build_anchor_table, face_features
from .errors import ConfigError, ConstraintError, DataError, FormatError, VersionError
from .query import ENTITY_MARKER, FaceGallery, GalleryEntry

MANIFEST_VERSION = 1
# the face region spans the first patches of the grid, mirroring a corpus
# filtered so faces occupy a significant share of the image
FACE_PATCH_COUNT = 4
FACE_PATCH_INDICES = tuple(range(FACE_PATCH_COUNT))
GENERIC_NOUN = "the person"
GALLERY_SAMPLE_SEED = 999_999_937

CAPTION_MARKER = "[CAPTION]"
IDENTITY_TEMPLATE = "[CAPTION]"

# template 1 is the canonical best-performing phrasing; the rest are toy
# fillers so the per-template averaging machinery has something to average
DEFAULT_TEMPLATE_TEXTS = [
    "[ENTITY] in the image. [CAPTION]",
    "[CAPTION]",
    "An image with [ENTITY]. [CAPTION]",
    "A photo of the famous [ENTITY]. [CAPTION]",
    "[CAPTION] The person shown is [ENTITY].",
]

_VERBS = [
    "is riding a bike", "is running", "is eating a sandwich", "is playing guitar",
    "is reading a book", "is flying a kite", "is walking a dog", "is drinking coffee",
    "is taking a photo", "is throwing a frisbee", "is holding an umbrella", "is skateboarding",
]
_PLACES = [
    "in the park", "at the beach", "on the street", "in a kitchen",
    "at the station", "on a mountain", "in the library", "at the market",
    "on the bridge", "in the garden", "at the airport", "on the field",
]
_STEM_PATTERNS = [
    "[ENTITY] {verb} {place}",
    "a photo of [ENTITY] {verb} {place}",
    "there is [ENTITY] {verb} {place}",
    "[ENTITY] {verb} {place} on a sunny day",
]


@dataclass(frozen=True)
class CaptionTemplate:
    template_id: int
    text: str
    canonical: bool = False


def default_templates() -> list[CaptionTemplate]:
    return [
        CaptionTemplate(i + 1, text, canonical=(i == 0))
        for i, text in enumerate(DEFAULT_TEMPLATE_TEXTS)
    ]


@dataclass
class DataGenConfig:
    num_identities: int = 16
    train_contexts: int = 12
    val_contexts: int = 3
    test_contexts: int = 3
    swaps_per_context: int = 4
    stems_per_context: int = 3
    jitter_sigma: float = 0.1
    face_gain: float = 3.0
    context_gain: float = 1.0
    d_face: int = 64
    template_texts: list[str] = field(default_factory=lambda: list(DEFAULT_TEMPLATE_TEXTS))

    def templates(self) -> list[CaptionTemplate]:
        return [
            CaptionTemplate(i + 1, text, canonical=(text == DEFAULT_TEMPLATE_TEXTS[0]))
            for i, text in enumerate(self.template_texts)
        ]


@dataclass
class ContextSpec:
    context_id: int
    signature: int  # combined with the dataset seed to render the pattern
    caption_stems: list[str]


@dataclass
class ImageRecord:
    image_id: int
    context_id: int
    identity_id: int
    face_seed: int
    file_path: Optional[str] = None


@dataclass
class CaptionRecord:
    image_id: int
    template_id: int
    stem_index: int
    text: str  # anonymized: [ENTITY] kept
    entity_name: str


@dataclass
class DatasetManifest:
    format_version: int
    seed: int
    contexts: list[ContextSpec]
    images: list[ImageRecord]
    captions: list[CaptionRecord]
    gallery_names: list[str]
    splits: dict[str, list[int]]
    templates: list[CaptionTemplate]
    stems_per_context: int


@dataclass
class Violation:
    invariant: str
    message: str

    def __str__(self) -> str:
        return f"{self.invariant}: {self.message}"


# ---------------------------------------------------------------------------
# generation

def generate_gallery(
    num_identities: int,
    seed: int,
    d_face: int = 64,
    jitter_sigma: float = 0.1,
) -> tuple[FaceGallery, FaceAnchorTable]:
    """Anchor table plus a gallery holding one stored sample per identity."""
    if num_identities < 2:
        raise ConfigError(f"need at least 2 identities, got {num_identities}")
    table = build_anchor_table(num_identities, d_face, jitter_sigma, seed)
    entries = {}
    for identity in range(num_identities):
        name = f"person_{identity + 1:04d}"
        entries[name] = GalleryEntry(
            identity_id=identity,
            face_sample=face_features(identity, GALLERY_SAMPLE_SEED + identity, table),
        )
    return FaceGallery(entries), table


def apply_template(template: str, stem: str, name: str) -> tuple[str, str]:
    """Compose a stem into a template; returns (anonymized, named) captions.

    The stem's own entity slot is rendered as a generic noun whenever the
    template carries its own [ENTITY] marker, so the anonymized output
    always holds exactly one placeholder.
    """
    if stem.count(ENTITY_MARKER) != 1:
        raise FormatError(f"stem must contain exactly one {ENTITY_MARKER}: {stem!r}")
    if template == IDENTITY_TEMPLATE:
        return stem, stem.replace(ENTITY_MARKER, name)
    if template.count(ENTITY_MARKER) != 1 or template.count(CAPTION_MARKER) != 1:
        raise FormatError(
            f"template must contain one {ENTITY_MARKER} and one {CAPTION_MARKER}, "
            f"or be the identity template: {template!r}"
        )
    generic_stem = stem.replace(ENTITY_MARKER, GENERIC_NOUN)
    anonymized = template.replace(CAPTION_MARKER, generic_stem)
    return anonymized, anonymized.replace(ENTITY_MARKER, name)


def context_factors(context_id: int) -> tuple[int, int]:
    """Map a context to its (verb, place) pair.

    The diagonal-with-offset assignment keeps every pair unique while both
    components recur across splits, so unseen contexts are genuinely novel
    combinations of visual factors the encoders could learn in training.
    """
    verb_idx = context_id % len(_VERBS)
    place_idx = (context_id + context_id // len(_VERBS)) % len(_PLACES)
    return verb_idx, place_idx


def context_stems(context_id: int, n_stems: int) -> list[str]:
    verb_idx, place_idx = context_factors(context_id)
    verb = _VERBS[verb_idx]
    place = _PLACES[place_idx]
    return [
        _STEM_PATTERNS[i % len(_STEM_PATTERNS)].format(verb=verb, place=place)
        for i in range(n_stems)
    ]


def render_context_pattern(seed: int, context_id: int, dims: ModelDims) -> np.ndarray:
    """Compositional context rendering: verb signature plus place signature.

    Signatures are keyed by the factor index, not the context id, so a
    validation context reuses visual components that occurred in training;
    only their combination is new. Each factor is one pixel-space direction
    with per-patch amplitudes (rank one), keeping the context evidence
    linearly accessible to a small encoder.
    """
    verb_idx, place_idx = context_factors(context_id)

    def signature(stream: int, idx: int) -> np.ndarray:
        rng = np.random.default_rng([seed, 0xC0DE, stream, idx])
        direction = rng.standard_normal(dims.patch_pixels)
        amplitudes = rng.standard_normal((dims.n_patches, 1))
        return amplitudes * direction[None, :]

    return (signature(1, verb_idx) + signature(2, place_idx)) / np.sqrt(2.0)


def face_render_matrix(seed: int, d_face: int, patch_pixels: int) -> np.ndarray:
    rng = np.random.default_rng([seed, 0xFACE2])
    return rng.standard_normal((d_face, len(FACE_PATCH_INDICES) * patch_pixels))


def render_face_patch(face_vec: np.ndarray, render: np.ndarray, gain: float) -> np.ndarray:
    """Linear rendering of a face feature into the face region's pixels."""
    return gain * (face_vec @ render).reshape(len(FACE_PATCH_INDICES), -1)


def _split_identity_assignment(
    n_contexts: int, swaps: int, num_identities: int
) -> list[list[int]]:
    """Round-robin identities over a split's context slots.

    The pool is capped so every pooled identity lands in at least two
    distinct contexts of the split; consecutive occurrences of an identity
    are exactly ``pool`` slots apart, which crosses a context boundary
    because pool >= swaps.
    """
    slots = n_contexts * swaps
    pool = min(num_identities, slots // 2)
    assignment = []
    for c in range(n_contexts):
        assignment.append([(c * swaps + j) % pool for j in range(swaps)])
    return assignment


def generate_dataset(
    config: DataGenConfig,
    gallery: FaceGallery,
    table: FaceAnchorTable,
    seed: int,
    dims: ModelDims,
) -> tuple[DatasetManifest, dict[str, np.ndarray]]:
    """Build the manifest and the rendered patch-grid tensors.

    Raises ConstraintError naming the violated balance invariant when the
    configuration cannot satisfy the dataset's structural guarantees.
    """
    m = config.num_identities
    swaps = config.swaps_per_context
    if swaps < 2:
        raise ConstraintError(
            "identity balance infeasible: swaps_per_context must be >= 2 so each "
            "context hosts multiple identities"
        )
    if m < swaps:
        raise ConstraintError(
            f"identity balance infeasible: {m} identities cannot fill {swaps} "
            "distinct swaps per context"
        )
    split_sizes = {
        "train": config.train_contexts,
        "val": config.val_contexts,
        "test": config.test_contexts,
    }
    for split, n_ctx in split_sizes.items():
        if 0 < n_ctx < 2:
            raise ConstraintError(
                f"identity balance infeasible: split {split!r} has {n_ctx} context; "
                "every identity needs >= 2 distinct contexts per split"
            )
    if len(gallery.entries) != m:
        raise ConfigError(f"gallery has {len(gallery.entries)} names, config says {m}")
    templates = config.templates()
    if not templates:
        raise ConfigError("at least one caption template is required")
    if config.stems_per_context < 1:
        raise ConfigError("stems_per_context must be >= 1")

    names = list(gallery.entries)
    render = face_render_matrix(seed, config.d_face, dims.patch_pixels)

    contexts: list[ContextSpec] = []
    images: list[ImageRecord] = []
    captions: list[CaptionRecord] = []
    splits: dict[str, list[int]] = {}
    tensors: dict[str, np.ndarray] = {}

    next_context = 0
    next_image = 0
    for split, n_ctx in split_sizes.items():
        split_images: list[int] = []
        assignment = _split_identity_assignment(n_ctx, swaps, m)
        for local_c in range(n_ctx):
            context_id = next_context
            next_context += 1
            stems = context_stems(context_id, config.stems_per_context)
            contexts.append(ContextSpec(context_id, signature=context_id, caption_stems=stems))
            pattern = config.context_gain * render_context_pattern(seed, context_id, dims)
            for identity in assignment[local_c]:
                image_id = next_image
                next_image += 1
                rec = ImageRecord(image_id, context_id, identity, face_seed=image_id)
                images.append(rec)
                split_images.append(image_id)
                face_vec = face_features(identity, rec.face_seed, table)
                grid = pattern.copy()
                # the face is superimposed on its region, not substituted
                # for it: a backbone pretrained on entity-free captions
                # cannot null the face subspace without also losing the
                # context evidence sharing those pixels, so identity
                # variance survives into the frozen image embeddings
                grid[list(FACE_PATCH_INDICES)] += render_face_patch(face_vec, render, config.face_gain)
                tensors[f"image/{image_id:06d}"] = grid
                for stem_index, stem in enumerate(stems):
                    for tpl in templates:
                        anonymized, _ = apply_template(tpl.text, stem, names[identity])
                        captions.append(
                            CaptionRecord(image_id, tpl.template_id, stem_index,
                                          anonymized, names[identity])
                        )
        splits[split] = split_images

    manifest = DatasetManifest(
        format_version=MANIFEST_VERSION,
        seed=seed,
        contexts=contexts,
        images=images,
        captions=captions,
        gallery_names=names,
        splits=splits,
        templates=templates,
        stems_per_context=config.stems_per_context,
    )
    return manifest, tensors


# ---------------------------------------------------------------------------
# validation

def validate_manifest(manifest: DatasetManifest) -> list[Violation]:
    """Check every structural invariant; an empty report means valid."""
    report: list[Violation] = []
    image_by_id = {}
    for img in manifest.images:
        if img.image_id in image_by_id:
            report.append(Violation("unique_image_ids", f"duplicate image_id {img.image_id}"))
        image_by_id[img.image_id] = img
    context_ids = {c.context_id for c in manifest.contexts}
    stems_by_context = {c.context_id: c.caption_stems for c in manifest.contexts}
    n_names = len(manifest.gallery_names)

    for img in manifest.images:
        if img.context_id not in context_ids:
            report.append(Violation(
                "image_refs", f"image {img.image_id} references unknown context {img.context_id}"))
        if not 0 <= img.identity_id < n_names:
            report.append(Violation(
                "image_refs", f"image {img.image_id} references unknown identity {img.identity_id}"))

    seen = set()
    for split, ids in manifest.splits.items():
        for image_id in ids:
            if image_id in seen:
                report.append(Violation("split_partition", f"image {image_id} in multiple splits"))
            seen.add(image_id)
            if image_id not in image_by_id:
                report.append(Violation(
                    "split_partition", f"split {split!r} lists unknown image {image_id}"))
    missing = set(image_by_id) - seen
    if missing:
        report.append(Violation(
            "split_partition", f"{len(missing)} images assigned to no split: {sorted(missing)[:5]}"))

    # every identity occurring in a split must occur in >= 2 distinct contexts there
    for split, ids in manifest.splits.items():
        contexts_of: dict[int, set[int]] = {}
        for image_id in ids:
            img = image_by_id.get(image_id)
            if img is not None:
                contexts_of.setdefault(img.identity_id, set()).add(img.context_id)
        for identity, ctxs in sorted(contexts_of.items()):
            if len(ctxs) < 2:
                report.append(Violation(
                    "identity_context_coverage",
                    f"identity {identity} appears in only {len(ctxs)} context of split {split!r}",
                ))

    # captions: name matches the image's identity, one [ENTITY], full
    # stems x templates coverage per image
    template_ids = [t.template_id for t in manifest.templates]
    caption_keys: dict[int, list[tuple[int, int]]] = {img_id: [] for img_id in image_by_id}
    for cap in manifest.captions:
        img = image_by_id.get(cap.image_id)
        if img is None:
            report.append(Violation(
                "image_refs", f"caption references unknown image {cap.image_id}"))
            continue
        expected = manifest.gallery_names[img.identity_id] if 0 <= img.identity_id < n_names else None
        if cap.entity_name != expected:
            report.append(Violation(
                "caption_name_matches_identity",
                f"caption for image {cap.image_id} names {cap.entity_name!r}, "
                f"image identity is {expected!r}",
            ))
        if cap.text.count(ENTITY_MARKER) != 1:
            report.append(Violation(
                "caption_entity_marker",
                f"caption for image {cap.image_id} has {cap.text.count(ENTITY_MARKER)} "
                f"{ENTITY_MARKER} markers",
            ))
        caption_keys[cap.image_id].append((cap.stem_index, cap.template_id))
    for image_id, keys in caption_keys.items():
        img = image_by_id[image_id]
        n_stems = len(stems_by_context.get(img.context_id, []))
        expected_keys = {(s, t) for s in range(n_stems) for t in template_ids}
        if set(keys) != expected_keys or len(keys) != len(expected_keys):
            report.append(Violation(
                "caption_template_coverage",
                f"image {image_id} has {len(keys)} captions, expected "
                f"{n_stems} stems x {len(template_ids)} templates",
            ))
    return report


# ---------------------------------------------------------------------------
# manifest serialization (JSON lines, fixed key order, byte-stable)

def _dump_line(obj: dict) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")) + "\n"


def write_manifest(manifest: DatasetManifest, fh: TextIO) -> None:
    fh.write(_dump_line({
        "kind": "header",
        "format_version": manifest.format_version,
        "seed": manifest.seed,
        "counts": {
            "images": len(manifest.images),
            "captions": len(manifest.captions),
            "contexts": len(manifest.contexts),
            "identities": len(manifest.gallery_names),
        },
        "stems_per_context": manifest.stems_per_context,
    }))
    for tpl in manifest.templates:
        fh.write(_dump_line({
            "kind": "template", "template_id": tpl.template_id,
            "text": tpl.text, "canonical": tpl.canonical,
        }))
    for ctx in manifest.contexts:
        fh.write(_dump_line({
            "kind": "context", "context_id": ctx.context_id,
            "signature": ctx.signature, "caption_stems": ctx.caption_stems,
        }))
    fh.write(_dump_line({"kind": "gallery", "names": manifest.gallery_names}))
    for img in manifest.images:
        fh.write(_dump_line({
            "kind": "image", "image_id": img.image_id, "context_id": img.context_id,
            "identity_id": img.identity_id, "face_seed": img.face_seed,
            "file_path": img.file_path,
        }))
    for cap in manifest.captions:
        fh.write(_dump_line({
            "kind": "caption", "image_id": cap.image_id, "template_id": cap.template_id,
            "stem_index": cap.stem_index, "text": cap.text, "entity_name": cap.entity_name,
        }))
    for split in manifest.splits:
        fh.write(_dump_line({
            "kind": "split", "name": split, "image_ids": manifest.splits[split],
        }))


def read_manifest(fh: TextIO) -> DatasetManifest:
    first = fh.readline()
    if not first:
        raise DataError("empty manifest file")
    try:
        header = json.loads(first)
    except json.JSONDecodeError as exc:
        raise DataError(f"manifest header is not valid JSON: {exc}") from exc
    if header.get("kind") != "header":
        raise DataError("manifest must start with a header line")
    version = header.get("format_version")
    if version != MANIFEST_VERSION:
        raise VersionError(f"unsupported manifest format_version {version}")

    manifest = DatasetManifest(
        format_version=version,
        seed=header["seed"],
        contexts=[], images=[], captions=[], gallery_names=[],
        splits={}, templates=[],
        stems_per_context=header.get("stems_per_context", 0),
    )
    for line_no, line in enumerate(fh, start=2):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"manifest line {line_no} is not valid JSON: {exc}") from exc
        kind = obj.get("kind")
        if kind == "template":
            manifest.templates.append(
                CaptionTemplate(obj["template_id"], obj["text"], obj["canonical"]))
        elif kind == "context":
            manifest.contexts.append(
                ContextSpec(obj["context_id"], obj["signature"], obj["caption_stems"]))
        elif kind == "gallery":
            manifest.gallery_names = obj["names"]
        elif kind == "image":
            manifest.images.append(ImageRecord(
                obj["image_id"], obj["context_id"], obj["identity_id"],
                obj["face_seed"], obj.get("file_path")))
        elif kind == "caption":
            manifest.captions.append(CaptionRecord(
                obj["image_id"], obj["template_id"], obj["stem_index"],
                obj["text"], obj["entity_name"]))
        elif kind == "split":
            manifest.splits[obj["name"]] = obj["image_ids"]
        else:
            raise DataError(f"manifest line {line_no} has unknown kind {kind!r}")
    return manifest


def manifest_to_bytes(manifest: DatasetManifest) -> bytes:
    import io

    buf = io.StringIO()
    write_manifest(manifest, buf)
    return buf.getvalue().encode("utf-8")


# ---------------------------------------------------------------------------
# runtime bundle: manifest + tensors with fast lookups

@dataclass
class DatasetBundle:
    manifest: DatasetManifest
    tensors: dict[str, np.ndarray]
    images_by_id: dict[int, ImageRecord]
    captions_by_image: dict[int, list[CaptionRecord]]

    @classmethod
    def build(cls, manifest: DatasetManifest, tensors: dict[str, np.ndarray]) -> "DatasetBundle":
        captions_by_image: dict[int, list[CaptionRecord]] = {}
        for cap in manifest.captions:
            captions_by_image.setdefault(cap.image_id, []).append(cap)
        return cls(
            manifest=manifest,
            tensors=tensors,
            images_by_id={img.image_id: img for img in manifest.images},
            captions_by_image=captions_by_image,
        )

    def patch_grid(self, image_id: int) -> np.ndarray:
        key = f"image/{image_id:06d}"
        if key not in self.tensors:
            raise DataError(f"tensor sidecar is missing {key}")
        return self.tensors[key]

    def split_images(self, split: str) -> list[ImageRecord]:
        if split not in self.manifest.splits:
            raise DataError(f"manifest has no split {split!r}")
        return [self.images_by_id[i] for i in self.manifest.splits[split]]

    def split_captions(self, split: str) -> list[CaptionRecord]:
        out = []
        for image_id in self.manifest.splits.get(split, []):
            out.extend(self.captions_by_image.get(image_id, []))
        return out
