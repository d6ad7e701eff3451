import numpy as np
import pytest

from idclip.blobs import serialize_arrays
from idclip.encoders import (
    FaceProjector,
    ModelDims,
    build_anchor_table,
    encode_image,
    encode_text,
    face_features,
    init_face_projector,
    init_text_encoder,
    init_visual_encoder,
    project_face,
    text_named_params,
    visual_named_params,
)
from idclip.errors import ConfigError, GalleryMissError, SequenceTooLongError, ShapeError
from idclip.tensor import Tape, Tensor, backward, sum_all, mul

DIMS = ModelDims()


@pytest.fixture(scope="module")
def text_params():
    return init_text_encoder(40, DIMS, np.random.default_rng(1))


@pytest.fixture(scope="module")
def visual_params():
    return init_visual_encoder(DIMS, np.random.default_rng(2))


def random_pieces(rng, n_tokens):
    return [Tensor(rng.normal(0, 0.02, size=(n_tokens, DIMS.d_tok)))]


# ---------------------------------------------------------------------------
# encode_text

def test_encode_text_output_is_unit_norm(text_params):
    rng = np.random.default_rng(3)
    for n in (1, 5, 32):
        out = encode_text(random_pieces(rng, n), text_params, DIMS)
        assert out.shape == (DIMS.d_embed,)
        assert abs(np.linalg.norm(out.data) - 1.0) < 1e-10


def test_encode_text_rejects_too_long(text_params):
    rng = np.random.default_rng(4)
    with pytest.raises(SequenceTooLongError):
        encode_text(random_pieces(rng, DIMS.max_seq_len + 1), text_params, DIMS)


def test_encode_text_sensitive_to_tok_swap(text_params):
    # replacing one embedding with a different face's projection moves the output
    rng = np.random.default_rng(5)
    table = build_anchor_table(4, DIMS.d_face, 0.1, seed=9)
    proj = init_face_projector(DIMS, rng)
    words = Tensor(rng.normal(0, 0.02, size=(6, DIMS.d_tok)))
    out_a = encode_text([words, project_face(face_features(0, 1, table), proj)], text_params, DIMS)
    out_b = encode_text([words, project_face(face_features(1, 1, table), proj)], text_params, DIMS)
    assert float(out_a.data @ out_b.data) < 1.0 - 1e-6


def test_encode_text_deterministic(text_params):
    rng = np.random.default_rng(6)
    pieces_data = rng.normal(0, 0.02, size=(7, DIMS.d_tok))
    out1 = encode_text([Tensor(pieces_data.copy())], text_params, DIMS)
    out2 = encode_text([Tensor(pieces_data.copy())], text_params, DIMS)
    assert np.array_equal(out1.data, out2.data)


def test_encode_text_accepts_1d_pieces(text_params):
    rng = np.random.default_rng(7)
    pieces = [Tensor(rng.normal(0, 0.02, size=DIMS.d_tok)) for _ in range(3)]
    out = encode_text(pieces, text_params, DIMS)
    assert out.shape == (DIMS.d_embed,)


# ---------------------------------------------------------------------------
# encode_image

def test_encode_image_unit_norm(visual_params):
    rng = np.random.default_rng(8)
    grid = rng.standard_normal((DIMS.n_patches, DIMS.patch_pixels))
    for prompts in (True, False):
        out = encode_image(grid, visual_params, DIMS, use_prompts=prompts)
        assert abs(np.linalg.norm(out.data) - 1.0) < 1e-10


def test_encode_image_patch_count_mismatch(visual_params):
    with pytest.raises(ShapeError):
        encode_image(np.zeros((DIMS.n_patches + 1, DIMS.patch_pixels)), visual_params, DIMS)


def test_encode_image_positional_sensitivity(visual_params):
    rng = np.random.default_rng(9)
    grid = rng.standard_normal((DIMS.n_patches, DIMS.patch_pixels))
    swapped = grid.copy()
    swapped[[2, 3]] = swapped[[3, 2]]
    out_a = encode_image(grid, visual_params, DIMS)
    out_b = encode_image(swapped, visual_params, DIMS)
    assert not np.array_equal(out_a.data, out_b.data)


def test_encode_image_prompts_change_output(visual_params):
    rng = np.random.default_rng(10)
    grid = rng.standard_normal((DIMS.n_patches, DIMS.patch_pixels))
    with_p = encode_image(grid, visual_params, DIMS, use_prompts=True)
    without = encode_image(grid, visual_params, DIMS, use_prompts=False)
    assert float(with_p.data @ without.data) < 1.0


def test_prompt_gradient_nonzero(visual_params):
    rng = np.random.default_rng(11)
    grid = rng.standard_normal((DIMS.n_patches, DIMS.patch_pixels))
    readout = Tensor(rng.standard_normal(DIMS.d_embed))
    visual_params.prompt_tokens.zero_grad()
    with Tape():
        out = encode_image(grid, visual_params, DIMS, use_prompts=True)
        loss = sum_all(mul(out, readout))
    backward(loss)
    assert visual_params.prompt_tokens.grad is not None
    assert np.abs(visual_params.prompt_tokens.grad).max() > 0
    visual_params.prompt_tokens.zero_grad()


# ---------------------------------------------------------------------------
# face features

def test_face_features_zero_jitter_returns_anchor():
    table = build_anchor_table(4, 64, 0.0, seed=5)
    out = face_features(2, 123, table)
    assert np.array_equal(out, table.anchors[2])


def test_face_features_deterministic_per_seed():
    table = build_anchor_table(4, 64, 0.1, seed=5)
    a = face_features(1, 42, table)
    b = face_features(1, 42, table)
    c = face_features(1, 43, table)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_face_features_unknown_identity():
    table = build_anchor_table(4, 64, 0.1, seed=5)
    with pytest.raises(GalleryMissError):
        face_features(99, 0, table)


def test_same_identity_samples_stay_close():
    # Monte-Carlo over 1000 pairs, construction threshold: cosine > 0.9
    table = build_anchor_table(8, 64, 0.1, seed=17)
    rng = np.random.default_rng(0)
    worst = 1.0
    for _ in range(1000):
        identity = int(rng.integers(8))
        s1, s2 = rng.integers(1, 10**6, size=2)
        a = face_features(identity, int(s1), table)
        b = face_features(identity, int(s2), table)
        worst = min(worst, float(a @ b))
    assert worst > 0.9


def test_different_identities_near_orthogonal():
    # |cosine| < 0.5 should hold with probability > 0.999 at d_face=64
    bad = total = 0
    for seed in range(10):
        table = build_anchor_table(50, 64, 0.1, seed=100 + seed)
        anchors = np.stack([table.anchors[i] for i in range(50)])
        cos = anchors @ anchors.T
        off = cos[np.triu_indices(50, 1)]
        bad += int((np.abs(off) >= 0.5).sum())
        total += off.size
    assert bad / total < 0.001


def test_anchor_mean_cosine_near_zero():
    table = build_anchor_table(100, 64, 0.1, seed=3)
    anchors = np.stack([table.anchors[i] for i in range(100)])
    off = (anchors @ anchors.T)[np.triu_indices(100, 1)]
    assert abs(off.mean()) < 0.05


# ---------------------------------------------------------------------------
# face projector

def test_project_face_zero_maps_to_zero():
    proj = init_face_projector(DIMS, np.random.default_rng(12))
    out = project_face(np.zeros(DIMS.d_face), proj)
    assert np.array_equal(out.data, np.zeros((1, DIMS.d_tok)))


def test_project_face_positive_homogeneity_bit_exact():
    proj = init_face_projector(DIMS, np.random.default_rng(13))
    x = np.random.default_rng(14).standard_normal(DIMS.d_face)
    base = project_face(x, proj).data
    assert np.array_equal(project_face(0.0 * x, proj).data, 0.0 * base)
    assert np.array_equal(project_face(1.0 * x, proj).data, base)
    # scaling by 2 is exact in binary floating point
    assert np.array_equal(project_face(2.0 * x, proj).data, 2.0 * base)


def test_project_face_matches_hand_computation():
    rng = np.random.default_rng(15)
    w1 = rng.standard_normal((DIMS.d_face, DIMS.d_hidden)) * 0.05
    w2 = rng.standard_normal((DIMS.d_hidden, DIMS.d_tok)) * 0.05
    proj = FaceProjector(w1=Tensor(w1.copy(), requires_grad=True),
                         w2=Tensor(w2.copy(), requires_grad=True))
    x = rng.standard_normal(DIMS.d_face)
    hidden = np.maximum(x @ w1, 0.0)
    expected = hidden @ w2
    assert np.allclose(project_face(x, proj).data.ravel(), expected, atol=1e-12)


def test_projector_has_no_bias_fields():
    proj = init_face_projector(DIMS, np.random.default_rng(16))
    assert set(vars(proj)) == {"w1", "w2"}


# ---------------------------------------------------------------------------
# frozen-parameter serialization

def test_frozen_params_bit_identical_after_adapter_updates(text_params, visual_params):
    """Serialized backbone bytes must not move when adapters train."""
    proj = init_face_projector(DIMS, np.random.default_rng(20))
    frozen = {}
    frozen.update(text_named_params(text_params))
    frozen.update(visual_named_params(visual_params))
    frozen.pop("visual/prompt_tokens")
    before = serialize_arrays({n: t.data for n, t in frozen.items()})
    # emulate some optimizer steps on the trainable set
    proj.w1.data += 0.05
    visual_params.prompt_tokens.data -= 0.01
    after = serialize_arrays({n: t.data for n, t in frozen.items()})
    assert before == after


def test_dims_validation():
    with pytest.raises(ConfigError):
        ModelDims(d_tok=30, n_heads=4).validate()
    ModelDims().validate()
