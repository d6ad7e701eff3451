"""Turning captions plus identities into encoder inputs.

A caption arrives anonymized, holding exactly one ``[ENTITY]`` placeholder.
An expansion strategy rewrites it into a flat slot sequence of ordinary
words and at most one TOK slot; composing a query tokenizes the words,
splices the projected face feature into the TOK slot, and runs the text
encoder. The face gallery is the external name -> face store resolved at
query time.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from .encoders import FaceProjector, ModelDims, TextEncoderParams, encode_text, project_face
from .errors import FormatError, GalleryMissError, UsageError
from .tensor import Tensor, gather_rows

ENTITY_MARKER = "[ENTITY]"

UNK, BOS, EOS = "<unk>", "<bos>", "<eos>"

# the two phrasings quoted for entity-only prompting, plus the bare name
DEFAULT_ENTITY_PROMPTS = [
    "An image with [ENTITY]",
    "The famous [ENTITY]",
    "[ENTITY]",
]

_WORD_RE = re.compile(r"[a-z0-9_]+")


class TokSlot:
    """Sentinel marking where the projected face embedding is spliced."""

    _instance: Optional["TokSlot"] = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self) -> str:
        return "[TOK]"


TOK = TokSlot()

Slot = Union[str, TokSlot]


def tokenize_words(text: str) -> list[str]:
    """Lowercase whitespace-and-punctuation tokenization."""
    return _WORD_RE.findall(text.lower())


def detokenize(slots: Sequence[Slot]) -> str:
    """Render a slot sequence back to a surface string, TOK slot literal."""
    return " ".join("[TOK]" if isinstance(s, TokSlot) else s for s in slots)


class Vocabulary:
    """Fixed token table; unknown words map to the reserved UNK id."""

    def __init__(self, words: Iterable[str]):
        self.tokens: list[str] = [UNK, BOS, EOS] + list(words)
        if len(set(self.tokens)) != len(self.tokens):
            raise UsageError("vocabulary words must be unique and not shadow specials")
        self.index = {t: i for i, t in enumerate(self.tokens)}
        self.unk_id = self.index[UNK]
        self.bos_id = self.index[BOS]
        self.eos_id = self.index[EOS]

    @classmethod
    def from_texts(cls, texts: Iterable[str]) -> "Vocabulary":
        words = set()
        for text in texts:
            words.update(tokenize_words(text.replace(ENTITY_MARKER, " ")))
        return cls(sorted(words))

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, words: Sequence[str]) -> list[int]:
        return [self.index.get(w, self.unk_id) for w in words]


@dataclass
class GalleryEntry:
    identity_id: int
    face_sample: np.ndarray


@dataclass
class FaceGallery:
    """External knowledge base: person name -> stored face sample."""

    entries: dict[str, GalleryEntry]

    def names(self) -> list[str]:
        return list(self.entries)


class ExpansionStrategy(str, Enum):
    TOK_ONLY = "tok"
    NAME_ONLY = "name"
    NAME_THEN_TOK = "name_tok"
    TOK_THEN_NAME = "tok_name"
    PREFIX_TOK_NAME_INLINE = "prefix_tok"

    def needs_face(self) -> bool:
        return self is not ExpansionStrategy.NAME_ONLY


@dataclass
class AnonymizedCaption:
    text: str
    source_template_id: int = 1


@dataclass
class CompoundQuery:
    caption: AnonymizedCaption
    name: str
    strategy: ExpansionStrategy


def lookup_face(name: str, gallery: FaceGallery) -> np.ndarray:
    """Resolve a name to its stored face sample (test-time face source)."""
    entry = gallery.entries.get(name)
    if entry is None:
        raise GalleryMissError(f"name {name!r} not found in gallery")
    return entry.face_sample


def _split_on_marker(text: str) -> tuple[str, str]:
    count = text.count(ENTITY_MARKER)
    if count != 1:
        raise FormatError(
            f"caption must contain exactly one {ENTITY_MARKER}, found {count}: {text!r}"
        )
    before, _, after = text.partition(ENTITY_MARKER)
    return before, after


def expand_entity(
    caption: AnonymizedCaption, strategy: ExpansionStrategy, name: str
) -> list[Slot]:
    """Rewrite the entity placeholder per strategy into a word/TOK stream.

    Pure function of (caption text, strategy, name). Every strategy except
    NAME_ONLY yields exactly one TOK slot.
    """
    before, after = _split_on_marker(caption.text)
    head = tokenize_words(before)
    tail = tokenize_words(after)
    name_words = tokenize_words(name)
    s = ExpansionStrategy(strategy)
    if s is ExpansionStrategy.TOK_ONLY:
        return [*head, TOK, *tail]
    if s is ExpansionStrategy.NAME_ONLY:
        return [*head, *name_words, *tail]
    if s is ExpansionStrategy.NAME_THEN_TOK:
        return [*head, *name_words, TOK, *tail]
    if s is ExpansionStrategy.TOK_THEN_NAME:
        return [*head, TOK, *name_words, *tail]
    # prefix variant: leading TOK, then the caption with the name inlined
    return [TOK, *head, *name_words, *tail]


def drop_entity(text: str) -> list[Slot]:
    """Remove the placeholder entirely (backbone pretraining captions)."""
    before, after = _split_on_marker(text)
    return [*tokenize_words(before), *tokenize_words(after)]


def compose_slots(
    slots: Sequence[Slot],
    face_vec: Optional[np.ndarray],
    projector: FaceProjector,
    text_params: TextEncoderParams,
    vocab: Vocabulary,
    dims: ModelDims,
) -> Tensor:
    """Embed a slot sequence: BOS + words/TOK + EOS, then encode.

    ``face_vec`` feeds the TOK slot via the projector; it must be present
    exactly when the sequence contains a TOK slot.
    """
    has_tok = any(isinstance(s, TokSlot) for s in slots)
    if has_tok and face_vec is None:
        raise UsageError("slot sequence has a TOK slot but no face vector was given")
    pieces = []
    run: list[int] = [vocab.bos_id]
    for slot in slots:
        if isinstance(slot, TokSlot):
            if run:
                pieces.append(gather_rows(text_params.vocab_embeddings, run))
                run = []
            pieces.append(project_face(face_vec, projector))
        else:
            run.append(vocab.index.get(slot, vocab.unk_id))
    run.append(vocab.eos_id)
    pieces.append(gather_rows(text_params.vocab_embeddings, run))
    return encode_text(pieces, text_params, dims)


def compose_query(
    query: CompoundQuery,
    gallery: FaceGallery,
    projector: FaceProjector,
    text_params: TextEncoderParams,
    vocab: Vocabulary,
    dims: ModelDims,
) -> Tensor:
    """Full query path: expand, resolve the face if needed, encode."""
    slots = expand_entity(query.caption, query.strategy, query.name)
    face = lookup_face(query.name, gallery) if query.strategy.needs_face() else None
    return compose_slots(slots, face, projector, text_params, vocab, dims)


def ensemble_prompts(
    name: str,
    strategy: ExpansionStrategy,
    prompt_templates: Sequence[str],
    gallery: FaceGallery,
    projector: FaceProjector,
    text_params: TextEncoderParams,
    vocab: Vocabulary,
    dims: ModelDims,
) -> Tensor:
    """Average the embeddings of several templated phrasings, re-normalized."""
    if not prompt_templates:
        raise UsageError("ensemble_prompts needs at least one template")
    embs = []
    for i, template in enumerate(prompt_templates):
        q = CompoundQuery(AnonymizedCaption(template, source_template_id=i + 1), name, strategy)
        embs.append(compose_query(q, gallery, projector, text_params, vocab, dims).data)
    avg = np.mean(np.stack(embs, axis=0), axis=0)
    return Tensor(avg / np.linalg.norm(avg))
