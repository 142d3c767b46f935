import math

import numpy as np
import pytest

from capalign.two_tower import (
    AdamState,
    Batch,
    DatasetTooSmall,
    DegenerateEmbedding,
    ShapeMismatch,
    TrainConfig,
    TwoTowerModel,
    _batch_starts,
    adam_step,
    contrastive_loss,
    embed_image,
    embed_text,
    load_checkpoint,
    loss_from_logits,
    loss_gradients,
    lr_at,
    save_checkpoint,
    train,
    write_loss_log,
)

from helpers import (
    finite_difference_grads,
    make_cluster_dataset,
    make_sequence,
    max_relative_error,
    random_gradcheck_instance,
)


def identity_model(vocab, d=2):
    """Model whose towers are identity maps: embeddings follow inputs directly."""
    return TwoTowerModel(
        w_img=np.eye(d),
        b_img=np.zeros(d),
        embeddings=np.zeros((len(vocab), d)),
        w_txt=np.eye(d),
        b_txt=np.zeros(d),
        log_temperature=0.0,
    )


# --- embeddings ---------------------------------------------------------------


def test_embed_image_identity_on_unit_input(vocab):
    model = identity_model(vocab)
    v = np.array([0.6, 0.8])
    np.testing.assert_allclose(embed_image(model, v), v, atol=1e-12)


def test_embed_image_scale_invariant(vocab):
    model = identity_model(vocab)
    v = np.array([3.0, -4.0])
    np.testing.assert_array_equal(embed_image(model, v), embed_image(model, 2 * v))


def test_embed_image_unit_norm(vocab, rng):
    model = TwoTowerModel.initialize(5, 4, 3, len(vocab), seed=0)
    out = embed_image(model, rng.normal(size=5))
    assert abs(np.linalg.norm(out) - 1.0) < 1e-9


def test_zero_projection_is_degenerate(vocab):
    model = identity_model(vocab)
    with pytest.raises(DegenerateEmbedding):
        embed_image(model, np.zeros(2))


def test_embed_image_shape_checked(vocab):
    with pytest.raises(ShapeMismatch):
        embed_image(identity_model(vocab), np.ones(3))


def test_embed_text_single_repeated_token(vocab):
    # With start/end rows equal to the token row, the mean is the row itself.
    model = identity_model(vocab)
    row = np.array([2.0, 1.0])
    for token in (vocab.start_id, vocab.end_id, 5):
        model.embeddings[token] = row
    seq = make_sequence(vocab, [5, 5, 5])
    np.testing.assert_allclose(embed_text(model, seq), row / np.linalg.norm(row), atol=1e-12)


def test_embed_text_order_invariant(vocab, rng):
    model = TwoTowerModel.initialize(3, 4, 3, len(vocab), seed=1)
    forward = embed_text(model, make_sequence(vocab, [4, 9, 7]))
    permuted = embed_text(model, make_sequence(vocab, [7, 4, 9]))
    np.testing.assert_allclose(forward, permuted, atol=1e-12)


def test_embed_text_ignores_padding_length(vocab):
    model = TwoTowerModel.initialize(3, 4, 3, len(vocab), seed=2)
    short = embed_text(model, make_sequence(vocab, [4, 6], context_length=5))
    long = embed_text(model, make_sequence(vocab, [4, 6], context_length=40))
    np.testing.assert_array_equal(short, long)


# --- loss ------------------------------------------------------------------------


def test_uniform_batch_loss_is_ln2(vocab):
    model = TwoTowerModel.initialize(3, 4, 2, len(vocab), seed=3)
    feature = np.array([0.3, -1.2, 0.5])
    seq = make_sequence(vocab, [5, 6])
    batch = Batch(np.stack([feature, feature]), [seq, seq])
    loss, logits = contrastive_loss(model, batch)
    assert logits.shape == (2, 2)
    assert abs(loss - math.log(2)) < 1e-9


def test_injected_logits_anchor():
    loss = loss_from_logits(np.array([[10.0, 0.0], [0.0, 10.0]]))
    assert abs(loss - math.log(1 + math.exp(-10))) < 1e-9


def test_loss_nonnegative_on_random_batches(vocab, rng):
    for _ in range(10):
        model, batch = random_gradcheck_instance(rng, vocab, n=4)
        loss, _ = contrastive_loss(model, batch)
        assert loss >= 0.0
        assert math.isfinite(loss)


def test_loss_invariant_under_joint_permutation(vocab, rng):
    model, batch = random_gradcheck_instance(rng, vocab, n=5)
    perm = rng.permutation(5)
    shuffled = Batch(
        batch.image_features[perm],
        [batch.token_sequences[i] for i in perm],
    )
    base, _ = contrastive_loss(model, batch)
    permuted, _ = contrastive_loss(model, shuffled)
    assert abs(base - permuted) < 1e-12


def test_loss_from_logits_rejects_bad_shapes():
    with pytest.raises(ShapeMismatch):
        loss_from_logits(np.zeros((2, 3)))
    with pytest.raises(ShapeMismatch):
        loss_from_logits(np.zeros((1, 1)))


def test_batch_requires_matched_lengths(vocab):
    seq = make_sequence(vocab, [4])
    with pytest.raises(ShapeMismatch):
        Batch(np.zeros((3, 2)), [seq, seq])
    with pytest.raises(ValueError):
        Batch(np.zeros((1, 2)), [seq])


# --- gradients --------------------------------------------------------------------


def test_gradients_match_finite_differences(vocab, rng):
    for _ in range(5):
        model, batch = random_gradcheck_instance(rng, vocab)
        _, analytic = loss_gradients(model, batch)
        numeric = finite_difference_grads(model, batch)
        assert max_relative_error(analytic, numeric) < 1e-4


def test_separated_batch_has_plateaued_gradients(vocab):
    model = identity_model(vocab)
    model.log_temperature = math.log(50.0)
    e1, e2 = np.array([1.0, 0.0]), np.array([0.0, 1.0])
    model.embeddings[5] = 3 * e1  # start/end rows stay zero, so the mean points at e_i
    model.embeddings[6] = 3 * e2
    batch = Batch(
        np.stack([e1, e2]),
        [make_sequence(vocab, [5]), make_sequence(vocab, [6])],
    )
    loss, grads = loss_gradients(model, batch)
    assert loss < 1e-9
    total_norm = math.sqrt(sum(float((g**2).sum()) for g in grads.values()))
    assert total_norm < 1e-3


def test_duplicate_batch_entries_stay_finite(vocab):
    model = TwoTowerModel.initialize(3, 4, 2, len(vocab), seed=4)
    feature = np.array([1.0, 2.0, 3.0])
    seq = make_sequence(vocab, [7, 8])
    batch = Batch(np.stack([feature, feature, feature]), [seq, seq, seq])
    loss, grads = loss_gradients(model, batch)
    assert math.isfinite(loss) and loss > 0
    assert all(np.all(np.isfinite(g)) for g in grads.values())


def test_temperature_gradient_respects_clamp(vocab, rng):
    model, batch = random_gradcheck_instance(rng, vocab)
    model.log_temperature = 10.0  # exp() far above the clamp
    assert model.logit_scale == 100.0
    _, grads = loss_gradients(model, batch)
    assert grads["log_temperature"] == 0.0

    model.log_temperature = 1.0
    _, grads = loss_gradients(model, batch)
    assert grads["log_temperature"] != 0.0


def test_logit_scale_never_exceeds_clamp(vocab, rng):
    model = TwoTowerModel.initialize(2, 2, 2, len(vocab), seed=5)
    for log_t in rng.uniform(-5, 20, size=25):
        model.log_temperature = float(log_t)
        assert model.logit_scale <= 100.0


# --- Adam ----------------------------------------------------------------------


def test_zero_gradient_leaves_params_unchanged():
    params = {"w": np.array([1.0, -2.0])}
    state = AdamState.zeros_like(params)
    updated = adam_step(params, {"w": np.zeros(2)}, state, t=1, lr_t=0.1)
    np.testing.assert_array_equal(updated["w"], params["w"])


def test_first_step_moves_by_learning_rate():
    params = {"theta": np.array(0.0)}
    state = AdamState.zeros_like(params)
    updated = adam_step(params, {"theta": np.array(1.0)}, state, t=1, lr_t=0.1)
    # bias correction makes m_hat = g and v_hat = g^2, so the step is
    # -lr * 1 / (1 + eps)
    expected = -0.1 / (1.0 + 1e-8)
    assert updated["theta"] == pytest.approx(expected, abs=1e-15)
    assert updated["theta"] == pytest.approx(-0.1, abs=1e-6)


def test_adam_is_bitwise_deterministic():
    def run():
        params = {"w": np.array([0.5, -0.5])}
        state = AdamState.zeros_like(params)
        for t in (1, 2, 3):
            params = adam_step(params, {"w": np.array([0.1, 0.2])}, state, t, 0.01)
        return params["w"].tobytes()

    assert run() == run()


def test_adam_shape_mismatch():
    params = {"w": np.zeros(2)}
    state = AdamState.zeros_like(params)
    with pytest.raises(ShapeMismatch):
        adam_step(params, {"w": np.zeros(3)}, state, t=1, lr_t=0.1)
    with pytest.raises(ShapeMismatch):
        adam_step(params, {"v": np.zeros(2)}, state, t=1, lr_t=0.1)


# --- scheduler -------------------------------------------------------------------


def test_lr_anchors():
    cfg = TrainConfig(learning_rate=1e-5, eta_min=0.0, t_0=100)
    assert lr_at(0, cfg) == 1e-5
    assert lr_at(100, cfg) == 0.0
    assert lr_at(50, cfg) == pytest.approx(5e-6, abs=1e-18)


def test_lr_midpoint_with_nonzero_floor():
    cfg = TrainConfig(learning_rate=2e-4, eta_min=4e-5, t_0=8)
    midpoint = (2e-4 + 4e-5) / 2
    assert lr_at(4, cfg) == pytest.approx(midpoint, abs=1e-15)
    assert lr_at(0, cfg) == pytest.approx(2e-4, abs=1e-18)
    assert lr_at(8, cfg) == pytest.approx(4e-5, abs=1e-18)


def test_lr_continuous_within_cycle():
    cfg = TrainConfig(learning_rate=1e-3, eta_min=1e-6, t_0=40)
    values = [lr_at(k, cfg) for k in range(41)]
    bound = 0.5 * (1e-3 - 1e-6) * math.pi / 40 * 1.0001
    assert all(abs(b - a) <= bound for a, b in zip(values, values[1:]))
    assert all(b <= a for a, b in zip(values, values[1:]))  # monotone within cycle


def test_restart_returns_to_peak_and_cycles_grow():
    cfg = TrainConfig(learning_rate=1e-2, eta_min=0.0, t_0=10, t_mult=2)
    assert lr_at(0, cfg, cycle=0) == 1e-2
    assert lr_at(0, cfg, cycle=3) == 1e-2
    # cycle 1 has length 20 under t_mult=2
    assert lr_at(20, cfg, cycle=1) == 0.0
    with pytest.raises(ValueError):
        lr_at(21, cfg, cycle=0)


def test_lr_rejects_unset_cycle_length():
    with pytest.raises(ValueError):
        lr_at(0, TrainConfig(t_0=0))


# --- training --------------------------------------------------------------------


def test_partial_batches_dropped_below_two():
    assert _batch_starts(10, 4) == [0, 4, 8]
    assert _batch_starts(9, 4) == [0, 4]
    assert _batch_starts(4, 4) == [0]
    assert _batch_starts(64, 64) == [0]


def test_training_reduces_loss_on_separable_data(vocab):
    sep_vocab, dataset, _, _ = make_cluster_dataset(seed=11)
    cfg = TrainConfig(batch_size=64, learning_rate=0.05, epochs=10, t_0=40, rng_seed=5)
    model = TwoTowerModel.initialize(4, 8, 8, len(sep_vocab), seed=5)
    model, log = train(model, dataset, cfg)
    assert len(log) == 10
    assert log[-1][1] < log[0][1]
    assert log[0][2] == pytest.approx(0.05)  # first epoch starts at the peak lr


def test_zero_epochs_returns_initial_model(vocab):
    sep_vocab, dataset, _, _ = make_cluster_dataset(seed=1)
    cfg = TrainConfig(batch_size=64, epochs=0, rng_seed=0)
    model = TwoTowerModel.initialize(4, 8, 8, len(sep_vocab), seed=9)
    reference = TwoTowerModel.initialize(4, 8, 8, len(sep_vocab), seed=9)
    trained, log = train(model, dataset, cfg)
    assert log == []
    np.testing.assert_array_equal(trained.w_img, reference.w_img)
    np.testing.assert_array_equal(trained.embeddings, reference.embeddings)
    assert trained.log_temperature == reference.log_temperature


def test_same_seed_gives_bit_identical_checkpoints(tmp_path, vocab):
    paths = []
    for run in ("a", "b"):
        sep_vocab, dataset, _, _ = make_cluster_dataset(seed=2)
        cfg = TrainConfig(batch_size=50, learning_rate=0.02, epochs=3, rng_seed=123)
        model = TwoTowerModel.initialize(4, 6, 6, len(sep_vocab), seed=123)
        model, _ = train(model, dataset, cfg)
        path = tmp_path / f"run_{run}.ckpt"
        save_checkpoint(model, path)
        paths.append(path)
    assert paths[0].read_bytes() == paths[1].read_bytes()


def test_dataset_smaller_than_batch_rejected(vocab):
    sep_vocab, dataset, _, _ = make_cluster_dataset(seed=3, n_samples=10)
    model = TwoTowerModel.initialize(4, 6, 6, len(sep_vocab), seed=0)
    with pytest.raises(DatasetTooSmall):
        train(model, dataset, TrainConfig(batch_size=64))


def test_loss_log_csv(tmp_path):
    path = tmp_path / "log.csv"
    write_loss_log([(1, 0.25, 1e-5), (2, 0.125, 5e-6)], path)
    lines = path.read_text().splitlines()
    assert lines[0] == "epoch,mean_loss,lr_at_epoch_start"
    assert lines[1] == "1,0.25,1e-05"


# --- checkpoints -------------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path, vocab):
    model = TwoTowerModel.initialize(3, 4, 2, len(vocab), seed=6)
    model.log_temperature = 1.2345678901234567
    path = tmp_path / "model.ckpt"
    save_checkpoint(model, path)
    loaded = load_checkpoint(path)
    np.testing.assert_array_equal(loaded.w_img, model.w_img)
    np.testing.assert_array_equal(loaded.b_img, model.b_img)
    np.testing.assert_array_equal(loaded.embeddings, model.embeddings)
    np.testing.assert_array_equal(loaded.w_txt, model.w_txt)
    np.testing.assert_array_equal(loaded.b_txt, model.b_txt)
    assert loaded.log_temperature == model.log_temperature

    resaved = tmp_path / "again.ckpt"
    save_checkpoint(loaded, resaved)
    assert resaved.read_bytes() == path.read_bytes()


def test_checkpoint_rejects_wrong_magic(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_text("something else v9\n")
    with pytest.raises(ValueError):
        load_checkpoint(path)


def test_checkpoint_rejects_truncation(tmp_path, vocab):
    model = TwoTowerModel.initialize(3, 4, 2, len(vocab), seed=7)
    path = tmp_path / "model.ckpt"
    save_checkpoint(model, path)
    lines = path.read_text().splitlines()
    path.write_text("\n".join(lines[:8]) + "\n")
    with pytest.raises(ValueError):
        load_checkpoint(path)


def test_checkpoint_rejects_non_finite(tmp_path, vocab):
    model = TwoTowerModel.initialize(3, 4, 2, len(vocab), seed=8)
    path = tmp_path / "model.ckpt"
    save_checkpoint(model, path)
    path.write_text(path.read_text().replace(repr(float(model.w_img[0, 0])), "nan", 1))
    with pytest.raises(ValueError):
        load_checkpoint(path)
