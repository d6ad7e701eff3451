"""Bundle tying together vocabulary, encoder parameters, and the projector."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datagen import DatasetManifest
from .encoders import (
    FaceProjector,
    ModelDims,
    TextEncoderParams,
    VisualEncoderParams,
    encode_image,
    init_face_projector,
    init_text_encoder,
    init_visual_encoder,
    projector_named_params,
    text_named_params,
    visual_named_params,
)
from .errors import ConfigError
from .query import DEFAULT_ENTITY_PROMPTS, ENTITY_MARKER, Vocabulary, tokenize_words
from .tensor import Tensor


@dataclass
class IdClipModel:
    dims: ModelDims
    vocab: Vocabulary
    text: TextEncoderParams
    visual: VisualEncoderParams
    projector: FaceProjector
    vpt_enabled: bool = True

    def named_params(self) -> dict[str, Tensor]:
        named = {}
        named.update(text_named_params(self.text))
        named.update(visual_named_params(self.visual))
        named.update(projector_named_params(self.projector))
        return named

    def backbone_named(self) -> dict[str, Tensor]:
        """Everything that stays frozen once pretraining is over."""
        return {
            name: t
            for name, t in self.named_params().items()
            if not name.startswith("projector/") and name != "visual/prompt_tokens"
        }

    def adapter_named(self) -> dict[str, Tensor]:
        """The parameters the identity phase is allowed to move."""
        named = dict(projector_named_params(self.projector))
        if self.vpt_enabled:
            named["visual/prompt_tokens"] = self.visual.prompt_tokens
        return named

    def embed_image(self, patch_grid: np.ndarray) -> Tensor:
        return encode_image(patch_grid, self.visual, self.dims, use_prompts=self.vpt_enabled)


def build_vocab(manifest: DatasetManifest, extra_texts=DEFAULT_ENTITY_PROMPTS) -> Vocabulary:
    """Deterministic vocabulary: caption words, gallery names, prompt words."""
    texts = [cap.text for cap in manifest.captions]
    texts.extend(manifest.gallery_names)
    texts.extend(extra_texts)
    return Vocabulary.from_texts(texts)


def build_model(
    vocab: Vocabulary, dims: ModelDims, seed: int, vpt_enabled: bool = True
) -> IdClipModel:
    dims.validate()
    rng = np.random.default_rng([seed, 0x0DE1])
    return IdClipModel(
        dims=dims,
        vocab=vocab,
        text=init_text_encoder(len(vocab), dims, rng),
        visual=init_visual_encoder(dims, rng),
        projector=init_face_projector(dims, rng),
        vpt_enabled=vpt_enabled,
    )


def check_caption_budget(manifest: DatasetManifest, dims: ModelDims) -> None:
    """Fail early if any caption could exceed the positional table.

    Worst case adds the longest gallery name, one TOK slot, and the
    BOS/EOS pair to the longest anonymized caption.
    """
    max_caption = max(
        (len(tokenize_words(cap.text.replace(ENTITY_MARKER, " "))) for cap in manifest.captions),
        default=0,
    )
    max_name = max((len(tokenize_words(n)) for n in manifest.gallery_names), default=0)
    worst = max_caption + max_name + 1 + 2
    if worst > dims.max_seq_len:
        raise ConfigError(
            f"captions may expand to {worst} tokens, beyond max_seq_len {dims.max_seq_len}"
        )
