import math

import numpy as np
import pytest

import storyspace_model
from storyspace_inputs import ConfigError, INetConfig
from storyspace_layers import zero_parameters
from storyspace_model import (
    INetModel,
    MaskPattern,
    curriculum_level,
    decode_step,
    forward_loss,
    hidden_count,
    hide,
    imagine,
    initial_state,
    one_hot,
    parameter_specs,
    sample_mask,
    sentence_loss,
    story_context,
    tell,
)
from storyspace_tensor import ShapeError, Tensor


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def test_curriculum_matches_step_function_on_0_to_200():
    for epoch in range(201):
        expected = 0 if epoch < 50 else 1 if epoch < 80 else 2
        assert curriculum_level(epoch, 50, 80) == expected
    assert [curriculum_level(e, 50, 80) for e in (49, 50, 79, 80)] == [0, 1, 1, 2]


def test_curriculum_rejects_negative_epoch_and_bad_schedule():
    with pytest.raises(ValueError):
        curriculum_level(-1, 50, 80)
    with pytest.raises(ConfigError):
        curriculum_level(3, 80, 50)


def test_fixed_curriculum_ignores_epoch(micro_config):
    fixed = micro_config.model_copy(update={"curriculum": "fixed", "fixed_hidden": 1})
    assert [hidden_count(e, fixed) for e in (0, 5, 50)] == [1, 1, 1]
    assert [hidden_count(e, micro_config) for e in (0, 9, 10)] == [1, 1, 2]


def test_sample_mask_without_hiding_is_all_visible(rng):
    state = rng.bit_generator.state
    assert sample_mask(5, 0, rng) == MaskPattern.all_visible(5)
    assert rng.bit_generator.state == state


def test_sample_mask_hides_each_slot_uniformly():
    rng = np.random.default_rng(0)
    counts = np.zeros(5)
    draws = 100_000
    for _ in range(draws):
        counts[sample_mask(5, 1, rng).hidden_slots[0]] += 1
    np.testing.assert_allclose(counts / draws, np.full(5, 0.2), atol=0.02)


def test_sample_mask_two_hidden_slots_are_distinct(rng):
    for _ in range(200):
        mask = sample_mask(5, 2, rng)
        assert mask.n_hidden == 2
    with pytest.raises(ValueError):
        sample_mask(2, 3, rng)


def test_hide_zeroes_exactly_the_masked_rows(rng):
    features = Tensor(rng.normal(size=(5, 4)))
    mask = MaskPattern((True, True, False, True, True))
    blind = hide(features, mask).data
    assert np.all(blind[2] == 0.0)
    assert np.array_equal(blind[[0, 1, 3, 4]], features.data[[0, 1, 3, 4]])
    assert np.array_equal(hide(Tensor(blind), mask).data, blind)
    assert np.array_equal(hide(features, MaskPattern.all_visible(5)).data, features.data)
    with pytest.raises(ShapeError):
        hide(features, MaskPattern.all_visible(4))


def test_hiding_pattern_checks_range():
    assert MaskPattern.hiding(5, [0, 4]).hidden_slots == [0, 4]
    with pytest.raises(ValueError):
        MaskPattern.hiding(3, [3])


def test_reminding_connection_collapses_with_zero_blocks(micro_config, rng):
    model = INetModel(micro_config, rng=rng)
    zero_parameters(model.params, [name for name in model.params if name.startswith("imagine.")])
    blind = Tensor(rng.normal(size=(3, 8)))
    assert np.array_equal(imagine(model, blind).data, blind.data)


def test_imagine_and_tell_preserve_shape(micro_config, rng):
    model = INetModel(micro_config, rng=rng)
    features = Tensor(rng.normal(size=(3, 8)))
    assert imagine(model, features).shape == (3, 8)
    assert tell(model, features).shape == (3, 8)
    with pytest.raises(ShapeError):
        imagine(model, Tensor(np.ones((3, 6))))


def test_telling_parameters_do_not_touch_imagine(micro_config, rng):
    model = INetModel(micro_config, rng=rng)
    features = Tensor(rng.normal(size=(3, 8)))
    before = imagine(model, features).data.copy()
    for name, tensor in model.params.items():
        if name.startswith("tell."):
            tensor.data[...] = rng.normal(size=tensor.shape)
    assert np.array_equal(imagine(model, features).data, before)


def test_no_telling_variant_passes_features_through(micro_config, rng):
    model = INetModel(micro_config.model_copy(update={"ablation": "no_telling"}), rng=rng)
    assert model.telling is None
    assert not any(name.startswith("tell.") for name in model.params)
    reminded = Tensor(rng.normal(size=(3, 8)))
    assert tell(model, reminded) is reminded


def test_no_nonlocal_variant_never_reaches_the_relational_layer(micro_config, rng, make_story, monkeypatch):
    calls = []
    original = storyspace_model.nonlocal_forward

    def counting(block, x):
        calls.append(x.shape)
        return original(block, x)

    monkeypatch.setattr(storyspace_model, "nonlocal_forward", counting)
    batch = [make_story(rng)]

    ablated = INetModel(micro_config.model_copy(update={"ablation": "no_nonlocal"}), rng=np.random.default_rng(0))
    assert not any(".nonlocal." in name for name in ablated.params)
    forward_loss(ablated, batch, epoch=0, rng=np.random.default_rng(1))
    assert calls == []

    full = INetModel(micro_config, rng=np.random.default_rng(0))
    forward_loss(full, batch, epoch=0, rng=np.random.default_rng(1))
    assert len(calls) == 2


def test_full_and_no_nonlocal_losses_differ(micro_config, rng, make_story):
    batch = [make_story(rng)]
    full = INetModel(micro_config, rng=np.random.default_rng(0))
    ablated = INetModel(micro_config.model_copy(update={"ablation": "no_nonlocal"}), rng=np.random.default_rng(0))
    first = forward_loss(full, batch, epoch=0, rng=np.random.default_rng(1)).item()
    second = forward_loss(ablated, batch, epoch=0, rng=np.random.default_rng(1)).item()
    assert first != second


def test_no_blinding_matches_full_model_before_hiding_starts(rng, make_story):
    config = INetConfig(n_slots=3, feature_dim=8, vocab_size=7, alpha=5, beta=10)
    batch = [make_story(rng) for _ in range(2)]
    full = INetModel(config, rng=np.random.default_rng(3))
    unblind = INetModel(config.model_copy(update={"ablation": "no_blinding"}), params=full.params)
    first = forward_loss(full, batch, epoch=0, rng=np.random.default_rng(9)).item()
    second = forward_loss(unblind, batch, epoch=60, rng=np.random.default_rng(9)).item()
    assert first == second


def test_zero_head_gives_log_vocab_loss(micro_config, rng, make_story):
    model = INetModel(micro_config, rng=rng)
    zero_parameters(model.params, [name for name in model.params if name.startswith("head.")])
    loss = forward_loss(model, [make_story(rng), make_story(rng)], epoch=3, rng=rng).item()
    assert loss == pytest.approx(math.log(7), abs=1e-12)


def test_loss_is_positive_and_batch_independent(rng, make_story):
    config = INetConfig(n_slots=3, feature_dim=8, vocab_size=7, alpha=5, beta=10)
    model = INetModel(config, rng=rng)
    a, b = make_story(rng), make_story(rng)
    together = forward_loss(model, [a, b], epoch=0, rng=rng).item()
    alone_a = forward_loss(model, [a], epoch=0, rng=rng).item()
    alone_b = forward_loss(model, [b], epoch=0, rng=rng).item()
    assert together > 0
    assert together == pytest.approx((alone_a + alone_b) / 2, abs=1e-12)
    context = story_context(model, a[0]).data
    assert np.array_equal(context, story_context(model, a[0]).data)


def test_forward_loss_rejects_empty_batch_and_slot_mismatch(micro_config, rng, make_story):
    from storyspace_tensor import DegenerateBatchError

    model = INetModel(micro_config, rng=rng)
    with pytest.raises(DegenerateBatchError):
        forward_loss(model, [], epoch=0, rng=rng)
    features, rows = make_story(rng)
    with pytest.raises(ShapeError):
        forward_loss(model, [(features, rows[:2])], epoch=0, rng=rng)


def test_overlong_sentence_is_truncated_with_warning(micro_config, rng, capsys):
    model = INetModel(micro_config, rng=rng)
    rows = [[4] * 10 + [2], [5, 2], [6, 2]]
    loss = forward_loss(model, [(rng.normal(size=(3, 8)), rows)], epoch=0, rng=rng)
    assert np.isfinite(loss.item())
    assert "truncated to 6" in capsys.readouterr().err
    kept = storyspace_model._truncate(0, rows, 6)
    assert kept[0] == [4, 4, 4, 4, 4, 2]
    assert kept[1:] == [[5, 2], [6, 2]]


def test_decode_step_needs_one_hot_input(micro_config, rng):
    model = INetModel(micro_config, rng=rng)
    h = initial_state(model)
    f = Tensor(rng.normal(size=8))
    h_next, logits = decode_step(model, h, f, one_hot(1, 7))
    assert h_next.shape == (8,) and logits.shape == (7,)
    with pytest.raises(ValueError):
        decode_step(model, h, f, Tensor(np.full(7, 1.0 / 7)))


def test_decode_step_zero_parameters_are_uniform(micro_config, rng):
    model = INetModel(micro_config, rng=rng)
    zero_parameters(model.params)
    _, logits = decode_step(model, initial_state(model), Tensor(rng.normal(size=8)), one_hot(1, 7))
    assert np.all(logits.data == 0.0)


def test_teacher_forced_loss_matches_unrolled_computation():
    config = INetConfig(n_slots=1, feature_dim=2, vocab_size=4)
    model = INetModel(config, rng=np.random.default_rng(5))
    p = {name: tensor.data for name, tensor in model.params.items()}
    f_tell = np.array([0.4, -0.7])
    sentence = [3, 3, 2]

    h = np.zeros(2)
    previous = 1
    total = 0.0
    for target in sentence:
        x = np.concatenate([f_tell, np.eye(4)[previous]])
        z = sigmoid(p["decoder.W_z"] @ x + p["decoder.U_z"] @ h + p["decoder.b_z"])
        r = sigmoid(p["decoder.W_r"] @ x + p["decoder.U_r"] @ h + p["decoder.b_r"])
        candidate = np.tanh(p["decoder.W_h"] @ x + p["decoder.U_h"] @ (r * h) + p["decoder.b_h"])
        h = (1 - z) * h + z * candidate
        logits = p["head.out.W"] @ np.tanh(p["head.hidden.W"] @ h + p["head.hidden.b"]) + p["head.out.b"]
        total -= logits[target] - np.log(np.exp(logits).sum())
        previous = target

    loss = sentence_loss(model, Tensor(f_tell[None, :]), [sentence]).item()
    assert loss == pytest.approx(total / 3, abs=1e-12)


def test_scheduled_sampling_draws_only_when_enabled(micro_config, rng, make_story):
    features, rows = make_story(rng)
    model = INetModel(micro_config, rng=np.random.default_rng(0))
    context = story_context(model, features)
    draws = np.random.default_rng(2)
    state = draws.bit_generator.state
    sentence_loss(model, context, rows, draws)
    assert draws.bit_generator.state == state

    sampled = INetModel(micro_config.model_copy(update={"scheduled_sampling": 1.0}), params=model.params)
    sentence_loss(sampled, context, rows, draws)
    assert draws.bit_generator.state != state


def test_embedding_option_adds_a_word_matrix(micro_config, rng, make_story):
    config = micro_config.model_copy(update={"word_embedding": 3})
    names = {spec.name: spec.shape for spec in parameter_specs(config)}
    assert names["embed.W"] == (7, 3)
    assert names["decoder.W_z"] == (8, 8 + 3)
    model = INetModel(config, rng=rng)
    assert np.isfinite(forward_loss(model, [make_story(rng)], epoch=0, rng=rng).item())


def test_mismatched_parameters_are_rejected(micro_config, rng):
    model = INetModel(micro_config, rng=rng)
    with pytest.raises(ConfigError):
        INetModel(micro_config.model_copy(update={"ablation": "no_telling"}), params=model.params)
