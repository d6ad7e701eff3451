import math

import numpy as np
import pytest

from idclip.blobs import serialize_arrays
from idclip.datagen import DataGenConfig, DatasetBundle, generate_dataset, generate_gallery
from idclip.encoders import ModelDims
from idclip.errors import ConfigError, UsageError
from idclip.model import build_model, build_vocab
from idclip.tensor import Tape, Tensor, backward, finite_difference_check
from idclip.trainer import (
    PHASE_BACKBONE,
    PHASE_IDCLIP,
    AdamState,
    TrainConfig,
    adam_step,
    build_partition,
    info_nce,
    init_adam,
    train_epoch,
)

DIMS = ModelDims()


@pytest.fixture(scope="module")
def toy():
    config = DataGenConfig()
    gallery, table = generate_gallery(config.num_identities, seed=5)
    manifest, tensors = generate_dataset(config, gallery, table, seed=5, dims=DIMS)
    bundle = DatasetBundle.build(manifest, tensors)
    vocab = build_vocab(manifest)
    return bundle, vocab, gallery, table


def unit_vec(v):
    return v / np.linalg.norm(v)


def orthonormal_batch(b, d, rng):
    q, _ = np.linalg.qr(rng.standard_normal((d, b)))
    return q.T.copy()


# ---------------------------------------------------------------------------
# info_nce closed forms

def test_info_nce_uniform_similarities_give_log_b():
    for b in (2, 8, 32):
        v = unit_vec(np.ones(64))
        batch = Tensor(np.tile(v, (b, 1)))
        loss = info_nce(batch, batch)
        assert abs(loss.item() - math.log(b)) < 1e-9


def test_info_nce_identity_sim_matrix_closed_form():
    # sims [[1,0],[0,1]] -> loss = ln(1 + e^-1)
    c = Tensor(np.eye(2, 64))
    loss = info_nce(c, c)
    assert abs(loss.item() - math.log(1.0 + math.exp(-1.0))) < 1e-9
    assert abs(loss.item() - 0.313262) < 1e-6


def test_info_nce_opposed_pair_closed_form():
    # sims [[1,-1],[-1,1]] -> loss = ln(1 + e^-2)
    v = unit_vec(np.arange(1.0, 65.0))
    c = Tensor(np.stack([v, -v]))
    loss = info_nce(c, c)
    assert abs(loss.item() - math.log(1.0 + math.exp(-2.0))) < 1e-9


def test_info_nce_bounds_for_unit_inputs():
    rng = np.random.default_rng(0)
    for _ in range(25):
        b = int(rng.integers(2, 9))
        c = Tensor(np.stack([unit_vec(rng.standard_normal(16)) for _ in range(b)]))
        v = Tensor(np.stack([unit_vec(rng.standard_normal(16)) for _ in range(b)]))
        loss = info_nce(c, v).item()
        assert math.log(b) - 2.0 <= loss <= math.log(b) + 2.0


def test_info_nce_symmetric_averages_both_directions():
    rng = np.random.default_rng(1)
    c = Tensor(orthonormal_batch(3, 16, rng))
    v = Tensor(orthonormal_batch(3, 16, rng))
    one_way = info_nce(c, v).item()
    other_way = info_nce(v, c).item()
    sym = info_nce(c, v, symmetric=True).item()
    assert abs(sym - 0.5 * (one_way + other_way)) < 1e-12


def test_info_nce_scale_changes_softmax_sharpness():
    c = Tensor(np.eye(2, 64))
    assert abs(info_nce(c, c, scale=10.0).item() - math.log(1.0 + math.exp(-10.0))) < 1e-9


def test_info_nce_rejects_batch_of_one():
    c = Tensor(np.ones((1, 8)))
    with pytest.raises(UsageError):
        info_nce(c, c)


def test_info_nce_gradient_matches_finite_differences():
    rng = np.random.default_rng(2)
    c = Tensor(rng.standard_normal((4, 8)), requires_grad=True)
    v = Tensor(rng.standard_normal((4, 8)), requires_grad=True)

    def f():
        return info_nce(c, v, scale=3.0)

    assert finite_difference_check(f, [c, v], h=1e-5) < 1e-6


# ---------------------------------------------------------------------------
# adam

def make_param(data):
    return {"p": Tensor(np.asarray(data, dtype=float), requires_grad=True)}


def test_adam_zero_gradient_fresh_state_no_update():
    params = make_param([1.0, -2.0])
    state = init_adam(params)
    before = params["p"].data.copy()
    adam_step(params, {"p": np.zeros(2)}, state, TrainConfig(learning_rate=0.1))
    assert np.array_equal(params["p"].data, before)


def test_adam_single_step_matches_hand_formula():
    # bias-corrected first step: delta = -lr * g / (|g| + eps)
    lr, eps = 0.05, 1e-8
    g = np.array([0.3, -4.0, 1e-5])
    params = make_param([0.0, 0.0, 0.0])
    state = init_adam(params)
    adam_step(params, {"p": g.copy()}, state, TrainConfig(learning_rate=lr, adam_eps=eps))
    expected = -lr * g / (np.abs(g) + eps)
    assert np.allclose(params["p"].data, expected, atol=1e-15)
    assert state.t == 1


def test_adam_two_runs_bit_identical():
    rng = np.random.default_rng(3)
    grads = [rng.standard_normal(4) for _ in range(5)]

    def run():
        params = make_param(np.ones(4))
        state = init_adam(params)
        for g in grads:
            adam_step(params, {"p": g}, state, TrainConfig(learning_rate=0.01))
        return params["p"].data.copy(), state.m["p"].copy(), state.v["p"].copy()

    a, ma, va = run()
    b, mb, vb = run()
    assert np.array_equal(a, b) and np.array_equal(ma, mb) and np.array_equal(va, vb)


# ---------------------------------------------------------------------------
# partition

def test_partition_idclip_trainable_set(toy):
    bundle, vocab, gallery, table = toy
    model = build_model(vocab, DIMS, seed=1, vpt_enabled=True)
    part = build_partition(model, PHASE_IDCLIP)
    assert set(part.trainable) == {"projector/w1", "projector/w2", "visual/prompt_tokens"}
    assert not set(part.trainable) & set(part.frozen)
    assert all(not t.requires_grad for t in part.frozen.values())
    model_off = build_model(vocab, DIMS, seed=1, vpt_enabled=False)
    part_off = build_partition(model_off, PHASE_IDCLIP)
    assert set(part_off.trainable) == {"projector/w1", "projector/w2"}


def test_partition_backbone_excludes_adapters(toy):
    bundle, vocab, gallery, table = toy
    model = build_model(vocab, DIMS, seed=1)
    part = build_partition(model, PHASE_BACKBONE)
    assert "visual/prompt_tokens" in part.frozen
    assert "projector/w1" in part.frozen
    assert "text/vocab_embeddings" in part.trainable


def test_partition_unknown_phase(toy):
    _, vocab, *_ = toy
    model = build_model(vocab, DIMS, seed=1)
    with pytest.raises(ConfigError):
        build_partition(model, "warmup")


# ---------------------------------------------------------------------------
# train_epoch contracts

def test_train_epoch_zero_lr_leaves_params_bit_identical(toy):
    bundle, vocab, gallery, table = toy
    model = build_model(vocab, DIMS, seed=2)
    config = TrainConfig(phase=PHASE_IDCLIP, learning_rate=0.0, batch_size=4, seed=2)
    part = build_partition(model, PHASE_IDCLIP)
    state = init_adam(part.trainable)
    before = serialize_arrays({n: t.data for n, t in model.named_params().items()})
    train_epoch(bundle, config, model, table, part, state, epoch=1)
    after = serialize_arrays({n: t.data for n, t in model.named_params().items()})
    assert before == after


def test_train_epoch_frozen_set_bit_identical(toy):
    bundle, vocab, gallery, table = toy
    model = build_model(vocab, DIMS, seed=3)
    config = TrainConfig(phase=PHASE_IDCLIP, learning_rate=1e-2, batch_size=4, seed=3)
    part = build_partition(model, PHASE_IDCLIP)
    state = init_adam(part.trainable)
    frozen_before = serialize_arrays({n: t.data for n, t in part.frozen.items()})
    trainable_before = serialize_arrays({n: t.data for n, t in part.trainable.items()})
    loss, n_batches = train_epoch(bundle, config, model, table, part, state, epoch=1)
    assert n_batches == 12
    assert serialize_arrays({n: t.data for n, t in part.frozen.items()}) == frozen_before
    assert serialize_arrays({n: t.data for n, t in part.trainable.items()}) != trainable_before


def test_train_epoch_deterministic(toy):
    bundle, vocab, gallery, table = toy

    def run():
        model = build_model(vocab, DIMS, seed=4)
        config = TrainConfig(phase=PHASE_BACKBONE, learning_rate=5e-3, batch_size=4, seed=4)
        part = build_partition(model, PHASE_BACKBONE)
        state = init_adam(part.trainable)
        losses = [train_epoch(bundle, config, model, table, part, state, epoch=e)[0]
                  for e in (1, 2)]
        return losses, serialize_arrays({n: t.data for n, t in model.named_params().items()})

    (l1, b1), (l2, b2) = run(), run()
    assert l1 == l2
    assert b1 == b2


def test_train_epoch_loss_decreases_over_training(toy):
    bundle, vocab, gallery, table = toy
    model = build_model(vocab, DIMS, seed=6)
    config = TrainConfig(phase=PHASE_BACKBONE, learning_rate=5e-3, batch_size=4, seed=6,
                         max_epochs=8)
    part = build_partition(model, PHASE_BACKBONE)
    state = init_adam(part.trainable)
    losses = [train_epoch(bundle, config, model, table, part, state, epoch=e)[0]
              for e in range(1, 9)]
    assert min(losses[4:]) < losses[0]


def test_train_epoch_empty_split(toy):
    bundle, vocab, gallery, table = toy
    model = build_model(vocab, DIMS, seed=7)
    config = TrainConfig(phase=PHASE_IDCLIP, batch_size=4, seed=7)
    part = build_partition(model, PHASE_IDCLIP)
    state = init_adam(part.trainable)
    bundle.manifest.splits["ghost"] = []
    try:
        with pytest.raises(Exception):
            train_epoch(bundle, config, model, table, part, state, epoch=1, split="ghost")
    finally:
        del bundle.manifest.splits["ghost"]


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=1).validate()
    with pytest.raises(ConfigError):
        TrainConfig(phase="nope").validate()
    TrainConfig().validate()
