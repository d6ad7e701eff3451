"""The miniature dual encoder and its face-feature machinery.

Text and visual towers are small pre-norm transformers sharing one block
layout. The visual tower carries learnable prompt tokens between the class
token and the patch tokens; the text tower consumes token-embedding
sequences in which one position may be a spliced face projection. A
deterministic anchor-plus-jitter table stands in for a pretrained face
recognition network, and a bias-free one-hidden-layer ReLU MLP projects
face features into token-embedding space.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, GalleryMissError, SequenceTooLongError, ShapeError
from .tensor import (
    Tensor,
    concat_cols,
    concat_rows,
    l2_normalize_rows,
    layer_norm,
    matmul,
    mul,
    relu,
    reshape_row,
    slice_cols,
    slice_rows,
    softmax,
    stack_rows,
    transpose,
)

LN_EPS = 1e-5
INIT_STD = 0.02


@dataclass
class ModelDims:
    """Width/depth knobs for the toy model; defaults train in minutes."""

    d_tok: int = 64
    d_vis: int = 64
    d_embed: int = 32
    d_face: int = 64
    d_hidden: int = 128
    n_blocks: int = 2
    n_heads: int = 4
    n_patches: int = 16
    patch_pixels: int = 16
    max_seq_len: int = 32
    n_prompts: int = 5
    mlp_ratio: int = 2

    def validate(self) -> None:
        if self.d_tok % self.n_heads or self.d_vis % self.n_heads:
            raise ConfigError("encoder widths must be divisible by n_heads")
        for name in ("d_tok", "d_vis", "d_embed", "d_face", "d_hidden", "n_blocks",
                     "n_heads", "n_patches", "patch_pixels", "max_seq_len", "n_prompts"):
            if getattr(self, name) < 1:
                raise ConfigError(f"dims.{name} must be >= 1")


@dataclass
class BlockParams:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    w_up: Tensor
    w_down: Tensor
    ln1_gamma: Tensor
    ln1_beta: Tensor
    ln2_gamma: Tensor
    ln2_beta: Tensor


@dataclass
class TextEncoderParams:
    vocab_embeddings: Tensor
    positional_embeddings: Tensor
    blocks: list[BlockParams]
    final_gamma: Tensor
    final_beta: Tensor
    text_projection: Tensor


@dataclass
class VisualEncoderParams:
    patch_projection: Tensor
    positional_embeddings: Tensor  # rows: [class, prompts..., patches...]
    class_token: Tensor
    blocks: list[BlockParams]
    final_gamma: Tensor
    final_beta: Tensor
    visual_projection: Tensor
    prompt_tokens: Tensor


@dataclass
class FaceAnchorTable:
    """Frozen stand-in for a face recognition network.

    One fixed unit anchor per identity; samples are the anchor plus seeded
    Gaussian jitter whose expected norm is ``jitter_sigma`` (the per-entry
    scale is jitter_sigma/sqrt(d_face)), re-normalized to the unit sphere.
    """

    anchors: dict[int, np.ndarray]
    jitter_sigma: float
    d_face: int
    seed: int


@dataclass
class FaceProjector:
    """Bias-free one-hidden-layer ReLU MLP: face space -> token space."""

    w1: Tensor
    w2: Tensor


def _init_weight(rng: np.random.Generator, shape) -> Tensor:
    return Tensor(rng.normal(0.0, INIT_STD, size=shape), requires_grad=True)


def _init_matrix(rng: np.random.Generator, shape) -> Tensor:
    # fan-in scaling for the linear maps: a flat 0.02 init leaves attention
    # scores two orders of magnitude too small at this width, so attention
    # stays uniform for the whole (short) toy training run and anything
    # that depends on learned attention structure never gets off the ground
    return Tensor(rng.normal(0.0, 1.0 / math.sqrt(shape[0]), size=shape), requires_grad=True)


def _init_block(rng: np.random.Generator, d: int, ratio: int) -> BlockParams:
    return BlockParams(
        wq=_init_matrix(rng, (d, d)),
        wk=_init_matrix(rng, (d, d)),
        wv=_init_matrix(rng, (d, d)),
        wo=_init_matrix(rng, (d, d)),
        w_up=_init_matrix(rng, (d, ratio * d)),
        w_down=_init_matrix(rng, (ratio * d, d)),
        ln1_gamma=Tensor(np.ones(d), requires_grad=True),
        ln1_beta=Tensor(np.zeros(d), requires_grad=True),
        ln2_gamma=Tensor(np.ones(d), requires_grad=True),
        ln2_beta=Tensor(np.zeros(d), requires_grad=True),
    )


def init_text_encoder(vocab_size: int, dims: ModelDims, rng: np.random.Generator) -> TextEncoderParams:
    return TextEncoderParams(
        vocab_embeddings=_init_weight(rng, (vocab_size, dims.d_tok)),
        positional_embeddings=_init_weight(rng, (dims.max_seq_len, dims.d_tok)),
        blocks=[_init_block(rng, dims.d_tok, dims.mlp_ratio) for _ in range(dims.n_blocks)],
        final_gamma=Tensor(np.ones(dims.d_tok), requires_grad=True),
        final_beta=Tensor(np.zeros(dims.d_tok), requires_grad=True),
        text_projection=_init_matrix(rng, (dims.d_tok, dims.d_embed)),
    )


def init_visual_encoder(dims: ModelDims, rng: np.random.Generator) -> VisualEncoderParams:
    seq = 1 + dims.n_prompts + dims.n_patches
    positional = _init_weight(rng, (seq, dims.d_vis))
    # The pooled slot starts at exact zero (token and positional row), so
    # its residual stream is pure attended content from step one. With the
    # 0.02 Gaussian init the slot's own bias dominates the output and every
    # image embeds nearly identically, which a few hundred optimizer steps
    # cannot undo.
    positional.data[0, :] = 0.0
    return VisualEncoderParams(
        patch_projection=_init_matrix(rng, (dims.patch_pixels, dims.d_vis)),
        positional_embeddings=positional,
        class_token=Tensor(np.zeros((1, dims.d_vis)), requires_grad=True),
        blocks=[_init_block(rng, dims.d_vis, dims.mlp_ratio) for _ in range(dims.n_blocks)],
        final_gamma=Tensor(np.ones(dims.d_vis), requires_grad=True),
        final_beta=Tensor(np.zeros(dims.d_vis), requires_grad=True),
        visual_projection=_init_matrix(rng, (dims.d_vis, dims.d_embed)),
        # prompts start at patch-token scale (pixels ~N(0,1) through the
        # fan-in patch projection give rows of comparable variance); rows
        # far below that sit in the layer norms' ill-conditioned regime
        prompt_tokens=Tensor(
            rng.normal(0.0, 2.5 * INIT_STD, size=(dims.n_prompts, dims.d_vis)),
            requires_grad=True,
        ),
    )


def init_face_projector(dims: ModelDims, rng: np.random.Generator) -> FaceProjector:
    # sized so the projected token starts at word-embedding scale: for a
    # unit face vector, output std per dim is std^2 * sqrt(d_hidden / 2),
    # which at 0.05 matches the 0.02-scale vocabulary rows; a token that
    # starts orders of magnitude smaller never influences the caption
    # embedding enough to receive useful gradient
    std = float(np.sqrt(INIT_STD / np.sqrt(dims.d_hidden / 2.0)))
    return FaceProjector(
        w1=Tensor(rng.normal(0.0, std, size=(dims.d_face, dims.d_hidden)), requires_grad=True),
        w2=Tensor(rng.normal(0.0, std, size=(dims.d_hidden, dims.d_tok)), requires_grad=True),
    )


# anchors put this energy fraction into a shared low-dimensional subspace:
# faces have common structure, so features learned on some identities carry
# over to unseen ones, while the idiosyncratic remainder keeps anchors
# near-orthogonal (mean pairwise cosine ~ 0, |cosine| < 0.5 w.h.p. at d=64)
ANCHOR_STRUCTURE_SHARE = 0.4
ANCHOR_STRUCTURE_DIM = 16


def build_anchor_table(
    num_identities: int, d_face: int, jitter_sigma: float, seed: int
) -> FaceAnchorTable:
    rng = np.random.default_rng([seed, 0xFACE])
    k = min(ANCHOR_STRUCTURE_DIM, d_face)
    basis, _ = np.linalg.qr(rng.standard_normal((d_face, k)))
    anchors = {}
    for identity in range(num_identities):
        z = rng.standard_normal(k)
        e = rng.standard_normal(d_face)
        shared = basis @ (z / np.linalg.norm(z))
        v = math.sqrt(ANCHOR_STRUCTURE_SHARE) * shared
        v = v + math.sqrt(1.0 - ANCHOR_STRUCTURE_SHARE) * (e / np.linalg.norm(e))
        anchors[identity] = v / np.linalg.norm(v)
    return FaceAnchorTable(anchors=anchors, jitter_sigma=jitter_sigma, d_face=d_face, seed=seed)


def face_features(identity_id: int, sample_seed: int, table: FaceAnchorTable) -> np.ndarray:
    """One jittered unit-norm sample of an identity's face feature."""
    if identity_id not in table.anchors:
        raise GalleryMissError(f"identity {identity_id} not in anchor table")
    anchor = table.anchors[identity_id]
    if table.jitter_sigma == 0.0:
        return anchor.copy()
    rng = np.random.default_rng([table.seed, 0x5EED, int(sample_seed), int(identity_id)])
    jitter = rng.standard_normal(table.d_face) * (table.jitter_sigma / math.sqrt(table.d_face))
    v = anchor + jitter
    return v / np.linalg.norm(v)


def project_face(face_vec, proj: FaceProjector) -> Tensor:
    """Map a face feature to one token embedding (shape [1 x d_tok]).

    No bias anywhere, so zero maps to zero and the map is positively
    homogeneous. The output stays un-normalized: it must live in raw
    token-embedding space next to ordinary word embeddings.
    """
    if isinstance(face_vec, Tensor):
        f = face_vec
        if f.data.ndim == 1:
            f = stack_rows([f])
    else:
        arr = np.asarray(face_vec, dtype=np.float64)
        f = Tensor(arr.reshape(1, -1))
    if f.shape[1] != proj.w1.shape[0]:
        raise ShapeError(f"face vector length {f.shape[1]} != projector input {proj.w1.shape[0]}")
    return matmul(relu(matmul(f, proj.w1)), proj.w2)


def _block_forward(x: Tensor, blk: BlockParams, n_heads: int) -> Tensor:
    h = layer_norm(x, blk.ln1_gamma, blk.ln1_beta, LN_EPS)
    q = matmul(h, blk.wq)
    k = matmul(h, blk.wk)
    v = matmul(h, blk.wv)
    d_head = q.shape[1] // n_heads
    scale = 1.0 / math.sqrt(d_head)
    heads = []
    for i in range(n_heads):
        lo, hi = i * d_head, (i + 1) * d_head
        scores = mul(matmul(slice_cols(q, lo, hi), transpose(slice_cols(k, lo, hi))), scale)
        attn = softmax(scores, axis=1)
        heads.append(matmul(attn, slice_cols(v, lo, hi)))
    x = x + matmul(concat_cols(heads), blk.wo)
    h2 = layer_norm(x, blk.ln2_gamma, blk.ln2_beta, LN_EPS)
    return x + matmul(relu(matmul(h2, blk.w_up)), blk.w_down)


def _as_row_blocks(pieces: Sequence[Tensor]) -> list[Tensor]:
    blocks = []
    for p in pieces:
        blocks.append(stack_rows([p]) if p.data.ndim == 1 else p)
    return blocks


def encode_text(pieces: Sequence[Tensor], params: TextEncoderParams, dims: ModelDims) -> Tensor:
    """Encode a token-embedding sequence to a unit vector in the joint space.

    ``pieces`` are row blocks (each [k x d_tok] or a bare [d_tok] vector)
    concatenated in order; any [TOK] splice is just one of the rows. The
    final sequence position is pooled, mirroring the end-of-text convention.
    """
    blocks = _as_row_blocks(pieces)
    n = sum(b.shape[0] for b in blocks)
    if n == 0:
        raise ShapeError("encode_text needs a non-empty sequence")
    if n > dims.max_seq_len:
        raise SequenceTooLongError(
            f"sequence of {n} tokens exceeds max_seq_len {dims.max_seq_len}"
        )
    x = concat_rows(blocks) + slice_rows(params.positional_embeddings, 0, n)
    for blk in params.blocks:
        x = _block_forward(x, blk, dims.n_heads)
    x = layer_norm(x, params.final_gamma, params.final_beta, LN_EPS)
    pooled = slice_rows(x, n - 1, n)
    return reshape_row(l2_normalize_rows(matmul(pooled, params.text_projection)))


def encode_image(
    patch_grid,
    params: VisualEncoderParams,
    dims: ModelDims,
    use_prompts: bool = True,
) -> Tensor:
    """Encode a patch grid to a unit vector in the joint space.

    Sequence layout is [class, prompt_1..p, patch_1..wh]; positional rows
    are bound to those slots, so disabling prompts (the prompt-free
    baseline and the backbone pretraining phase) keeps every patch on the
    positional row it was trained with. Pooling reads the class token.
    """
    patches = patch_grid if isinstance(patch_grid, Tensor) else Tensor(patch_grid)
    if patches.data.ndim != 2 or patches.shape != (dims.n_patches, dims.patch_pixels):
        raise ShapeError(
            f"patch grid must be ({dims.n_patches}, {dims.patch_pixels}), got {patches.shape}"
        )
    p = dims.n_prompts
    toks = matmul(patches, params.patch_projection)
    pos = params.positional_embeddings
    pieces = [params.class_token]
    pos_pieces = [slice_rows(pos, 0, 1)]
    if use_prompts:
        pieces.append(params.prompt_tokens)
        pos_pieces.append(slice_rows(pos, 1, 1 + p))
    pieces.append(toks)
    pos_pieces.append(slice_rows(pos, 1 + p, 1 + p + dims.n_patches))
    x = concat_rows(pieces) + concat_rows(pos_pieces)
    for blk in params.blocks:
        x = _block_forward(x, blk, dims.n_heads)
    x = layer_norm(x, params.final_gamma, params.final_beta, LN_EPS)
    pooled = slice_rows(x, 0, 1)
    return reshape_row(l2_normalize_rows(matmul(pooled, params.visual_projection)))


# ---------------------------------------------------------------------------
# parameter bookkeeping

def block_named_params(prefix: str, blk: BlockParams) -> dict[str, Tensor]:
    return {
        f"{prefix}/wq": blk.wq,
        f"{prefix}/wk": blk.wk,
        f"{prefix}/wv": blk.wv,
        f"{prefix}/wo": blk.wo,
        f"{prefix}/w_up": blk.w_up,
        f"{prefix}/w_down": blk.w_down,
        f"{prefix}/ln1_gamma": blk.ln1_gamma,
        f"{prefix}/ln1_beta": blk.ln1_beta,
        f"{prefix}/ln2_gamma": blk.ln2_gamma,
        f"{prefix}/ln2_beta": blk.ln2_beta,
    }


def text_named_params(params: TextEncoderParams) -> dict[str, Tensor]:
    named = {
        "text/vocab_embeddings": params.vocab_embeddings,
        "text/positional_embeddings": params.positional_embeddings,
        "text/final_gamma": params.final_gamma,
        "text/final_beta": params.final_beta,
        "text/projection": params.text_projection,
    }
    for i, blk in enumerate(params.blocks):
        named.update(block_named_params(f"text/block{i}", blk))
    return named


def visual_named_params(params: VisualEncoderParams) -> dict[str, Tensor]:
    named = {
        "visual/patch_projection": params.patch_projection,
        "visual/positional_embeddings": params.positional_embeddings,
        "visual/class_token": params.class_token,
        "visual/final_gamma": params.final_gamma,
        "visual/final_beta": params.final_beta,
        "visual/projection": params.visual_projection,
        "visual/prompt_tokens": params.prompt_tokens,
    }
    for i, blk in enumerate(params.blocks):
        named.update(block_named_params(f"visual/block{i}", blk))
    return named


def projector_named_params(proj: FaceProjector) -> dict[str, Tensor]:
    return {"projector/w1": proj.w1, "projector/w2": proj.w2}


def set_requires_grad(named: dict[str, Tensor], flag: bool) -> None:
    for t in named.values():
        t.requires_grad = flag
        t.grad = None
