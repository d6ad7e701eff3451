import numpy as np
import pytest

from idclip.datagen import DataGenConfig, DatasetBundle, generate_dataset, generate_gallery
from idclip.encoders import ModelDims, init_face_projector, init_text_encoder
from idclip.errors import FormatError, GalleryMissError, UsageError
from idclip.model import build_vocab
from idclip.query import (
    TOK,
    AnonymizedCaption,
    CompoundQuery,
    ExpansionStrategy,
    FaceGallery,
    GalleryEntry,
    TokSlot,
    Vocabulary,
    compose_query,
    compose_slots,
    detokenize,
    drop_entity,
    ensemble_prompts,
    expand_entity,
    lookup_face,
    tokenize_words,
)

DIMS = ModelDims()

CAPTION = AnonymizedCaption("The famous kid [ENTITY] is running at the park", 1)


@pytest.fixture(scope="module")
def setup():
    gallery, table = generate_gallery(6, seed=11)
    vocab = Vocabulary.from_texts([
        "the famous kid is running at the park",
        "an image with", "rides a bike",
        " ".join(gallery.names()),
        "gianni morandi",
    ])
    text_params = init_text_encoder(len(vocab), DIMS, np.random.default_rng(4))
    projector = init_face_projector(DIMS, np.random.default_rng(5))
    return gallery, vocab, text_params, projector


# ---------------------------------------------------------------------------
# lookup

def test_lookup_registered_name(setup):
    gallery, *_ = setup
    name = gallery.names()[0]
    vec = lookup_face(name, gallery)
    assert vec.shape == (64,)
    assert np.array_equal(vec, gallery.entries[name].face_sample)


def test_lookup_unknown_name_raises(setup):
    gallery, *_ = setup
    with pytest.raises(GalleryMissError):
        lookup_face("nobody here", gallery)


def test_lookup_distinct_identities_distinct_vectors(setup):
    gallery, *_ = setup
    names = gallery.names()
    assert not np.array_equal(lookup_face(names[0], gallery), lookup_face(names[1], gallery))


# ---------------------------------------------------------------------------
# expansion

def test_expand_prefix_tok_matches_expected_surface():
    slots = expand_entity(CAPTION, ExpansionStrategy.PREFIX_TOK_NAME_INLINE, "Gianni Morandi")
    assert detokenize(slots) == "[TOK] the famous kid gianni morandi is running at the park"
    assert isinstance(slots[0], TokSlot)


def test_expand_tok_only_direct_substitution():
    slots = expand_entity(AnonymizedCaption("[ENTITY] rides a bike", 1),
                          ExpansionStrategy.TOK_ONLY, "anyone")
    assert slots == [TOK, "rides", "a", "bike"]


def test_expand_name_then_tok():
    slots = expand_entity(AnonymizedCaption("[ENTITY] rides a bike", 1),
                          ExpansionStrategy.NAME_THEN_TOK, "Gianni Morandi")
    assert slots == ["gianni", "morandi", TOK, "rides", "a", "bike"]


def test_expand_tok_then_name():
    slots = expand_entity(AnonymizedCaption("[ENTITY] rides a bike", 1),
                          ExpansionStrategy.TOK_THEN_NAME, "Gianni Morandi")
    assert slots == [TOK, "gianni", "morandi", "rides", "a", "bike"]


def test_expand_name_only_has_no_tok_slot():
    slots = expand_entity(CAPTION, ExpansionStrategy.NAME_ONLY, "Gianni Morandi")
    assert not any(isinstance(s, TokSlot) for s in slots)
    assert "gianni" in slots and "morandi" in slots


def test_every_strategy_tok_slot_count():
    for strategy in ExpansionStrategy:
        slots = expand_entity(CAPTION, strategy, "Gianni Morandi")
        n_tok = sum(isinstance(s, TokSlot) for s in slots)
        assert n_tok == (0 if strategy is ExpansionStrategy.NAME_ONLY else 1)


def test_expand_rejects_malformed_captions():
    for bad in ("no placeholder here", "[ENTITY] and [ENTITY] again"):
        with pytest.raises(FormatError):
            expand_entity(AnonymizedCaption(bad, 1), ExpansionStrategy.TOK_ONLY, "x")


def test_expand_is_pure():
    a = expand_entity(CAPTION, ExpansionStrategy.NAME_THEN_TOK, "Ada Lovelace")
    b = expand_entity(CAPTION, ExpansionStrategy.NAME_THEN_TOK, "Ada Lovelace")
    assert a == b


def test_drop_entity_removes_slot():
    assert drop_entity("[ENTITY] rides a bike") == ["rides", "a", "bike"]


def test_detokenize_round_trip_on_generated_corpus():
    """Golden round-trip: 50+ dataset captions, every strategy."""
    gallery, table = generate_gallery(16, seed=2)
    manifest, _ = generate_dataset(DataGenConfig(), gallery, table, seed=2, dims=DIMS)
    captions = manifest.captions[:60]
    assert len(captions) >= 50
    for cap in captions:
        for strategy in ExpansionStrategy:
            slots = expand_entity(AnonymizedCaption(cap.text, cap.template_id),
                                  strategy, cap.entity_name)
            words_before, _, words_after = cap.text.partition("[ENTITY]")
            head = tokenize_words(words_before)
            tail = tokenize_words(words_after)
            name = tokenize_words(cap.entity_name)
            expected = {
                ExpansionStrategy.TOK_ONLY: head + ["[TOK]"] + tail,
                ExpansionStrategy.NAME_ONLY: head + name + tail,
                ExpansionStrategy.NAME_THEN_TOK: head + name + ["[TOK]"] + tail,
                ExpansionStrategy.TOK_THEN_NAME: head + ["[TOK]"] + name + tail,
                ExpansionStrategy.PREFIX_TOK_NAME_INLINE: ["[TOK]"] + head + name + tail,
            }[strategy]
            assert detokenize(slots) == " ".join(expected)


# ---------------------------------------------------------------------------
# vocabulary

def test_vocabulary_unknown_maps_to_unk():
    vocab = Vocabulary(["apple", "pie"])
    ids = vocab.encode(["apple", "zebra"])
    assert ids[0] != vocab.unk_id and ids[1] == vocab.unk_id


def test_vocabulary_from_texts_strips_entity_marker():
    vocab = Vocabulary.from_texts(["[ENTITY] rides"])
    assert "entity" not in vocab.tokens
    assert "rides" in vocab.tokens


# ---------------------------------------------------------------------------
# composition

def test_compose_query_unit_norm_and_deterministic(setup):
    gallery, vocab, text_params, projector = setup
    query = CompoundQuery(CAPTION, gallery.names()[0], ExpansionStrategy.TOK_ONLY)
    out1 = compose_query(query, gallery, projector, text_params, vocab, DIMS)
    out2 = compose_query(query, gallery, projector, text_params, vocab, DIMS)
    assert abs(np.linalg.norm(out1.data) - 1.0) < 1e-10
    assert np.array_equal(out1.data, out2.data)


def test_compose_tok_vs_name_differ(setup):
    gallery, vocab, text_params, projector = setup
    name = gallery.names()[0]
    tok = compose_query(CompoundQuery(CAPTION, name, ExpansionStrategy.TOK_ONLY),
                        gallery, projector, text_params, vocab, DIMS)
    nm = compose_query(CompoundQuery(CAPTION, name, ExpansionStrategy.NAME_ONLY),
                       gallery, projector, text_params, vocab, DIMS)
    assert float(tok.data @ nm.data) < 1.0


def test_compose_slots_requires_face_for_tok(setup):
    _, vocab, text_params, projector = setup
    with pytest.raises(UsageError):
        compose_slots([TOK, "hello"], None, projector, text_params, vocab, DIMS)


def test_compose_gallery_miss_propagates(setup):
    gallery, vocab, text_params, projector = setup
    query = CompoundQuery(CAPTION, "missing person", ExpansionStrategy.TOK_ONLY)
    with pytest.raises(GalleryMissError):
        compose_query(query, gallery, projector, text_params, vocab, DIMS)


# ---------------------------------------------------------------------------
# prompt ensembling

def test_ensemble_single_template_equals_compose(setup):
    gallery, vocab, text_params, projector = setup
    name = gallery.names()[1]
    template = "An image with [ENTITY]"
    single = ensemble_prompts(name, ExpansionStrategy.TOK_ONLY, [template],
                              gallery, projector, text_params, vocab, DIMS)
    direct = compose_query(CompoundQuery(AnonymizedCaption(template, 1), name,
                                         ExpansionStrategy.TOK_ONLY),
                           gallery, projector, text_params, vocab, DIMS)
    assert np.allclose(single.data, direct.data, atol=1e-12)


def test_ensemble_duplicate_templates_idempotent(setup):
    gallery, vocab, text_params, projector = setup
    name = gallery.names()[1]
    template = "An image with [ENTITY]"
    once = ensemble_prompts(name, ExpansionStrategy.TOK_ONLY, [template],
                            gallery, projector, text_params, vocab, DIMS)
    twice = ensemble_prompts(name, ExpansionStrategy.TOK_ONLY, [template, template],
                             gallery, projector, text_params, vocab, DIMS)
    assert np.array_equal(once.data, twice.data)


def test_ensemble_two_templates_matches_hand_average(setup):
    gallery, vocab, text_params, projector = setup
    name = gallery.names()[2]
    templates = ["An image with [ENTITY]", "The famous [ENTITY]"]
    embs = [
        compose_query(CompoundQuery(AnonymizedCaption(t, i + 1), name,
                                    ExpansionStrategy.TOK_ONLY),
                      gallery, projector, text_params, vocab, DIMS).data
        for i, t in enumerate(templates)
    ]
    expected = np.mean(np.stack(embs), axis=0)
    expected = expected / np.linalg.norm(expected)
    got = ensemble_prompts(name, ExpansionStrategy.TOK_ONLY, templates,
                           gallery, projector, text_params, vocab, DIMS)
    assert np.allclose(got.data, expected, atol=1e-12)


def test_ensemble_empty_template_list(setup):
    gallery, vocab, text_params, projector = setup
    with pytest.raises(UsageError):
        ensemble_prompts("x", ExpansionStrategy.TOK_ONLY, [],
                         gallery, projector, text_params, vocab, DIMS)
