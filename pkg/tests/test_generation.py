import itertools

import numpy as np
import pytest

from storyspace_data import BOS_ID, EOS_ID, PAD_ID
from storyspace_generation import (
    BeamDecoder,
    DecoderFactory,
    GreedyDecoder,
    beam_search,
    generate_story,
    greedy_decode,
    hiding_sweep,
    interleave_blank_slots,
    interpolate_story,
    is_inserted_slot,
)
from storyspace_inputs import INetConfig
from storyspace_layers import zero_parameters
from storyspace_model import INetModel, MaskPattern, decode_step, initial_state, one_hot
from storyspace_tensor import Tensor, log_softmax_np, no_tape


def sequence_log_prob(model, f_tell, tokens):
    h = initial_state(model)
    previous = BOS_ID
    total = 0.0
    with no_tape():
        for token in tokens:
            h, logits = decode_step(model, h, f_tell, one_hot(previous, model.vocab_size))
            total += float(log_softmax_np(logits.data)[token])
            previous = token
    return total


def random_model(seed, vocab_size=7, max_len=6, n_slots=3):
    config = INetConfig(n_slots=n_slots, feature_dim=8, vocab_size=vocab_size, max_len=max_len)
    rng = np.random.default_rng(seed)
    model = INetModel(config, rng=rng)
    for name, tensor in model.params.items():
        if name.startswith("head.out"):
            tensor.data[...] = rng.normal(scale=2.0, size=tensor.shape)
    return model, Tensor(rng.normal(size=8))


def biased_model(bias):
    model = INetModel(INetConfig(n_slots=1, feature_dim=2, vocab_size=4, max_len=3))
    zero_parameters(model.params)
    model.params["head.out.b"].data[...] = bias
    return model


def test_greedy_follows_engineered_logits():
    f_tell = Tensor([0.2, -0.1])
    assert greedy_decode(biased_model([5.0, 5.0, 0.5, 1.0]), f_tell) == [3, 3, 3]
    assert greedy_decode(biased_model([5.0, 5.0, 1.0, 0.5]), f_tell) == [EOS_ID]


def test_greedy_ties_go_to_the_lowest_token():
    f_tell = Tensor([0.2, -0.1])
    assert greedy_decode(biased_model([0.0, 0.0, 0.0, 0.0]), f_tell) == [EOS_ID]
    assert beam_search(biased_model([0.0, 0.0, 0.0, 0.0]), f_tell, beam=2) == [EOS_ID]


@pytest.mark.parametrize("vocab_size", [4, 6])
def test_beam_matches_exhaustive_search_on_a_toy(vocab_size):
    for seed in range(100):
        model, f_tell = random_model(seed, vocab_size=vocab_size, max_len=3)
        finished = []
        for length in range(1, 4):
            for prefix in itertools.product(range(EOS_ID + 1, vocab_size), repeat=length - 1):
                tokens = prefix + (EOS_ID,)
                finished.append((-sequence_log_prob(model, f_tell, tokens), tokens))
        best = min(finished)[1]
        assert beam_search(model, f_tell, beam=vocab_size ** 3) == list(best), f"seed {seed}"


def test_beam_of_one_is_greedy():
    for seed in range(100):
        model, f_tell = random_model(seed)
        assert beam_search(model, f_tell, beam=1) == greedy_decode(model, f_tell)


def test_wide_beam_never_scores_below_greedy():
    for seed in range(20):
        model, f_tell = random_model(seed, vocab_size=4, max_len=3)
        greedy = greedy_decode(model, f_tell)
        beamed = beam_search(model, f_tell, beam=4 ** 3)
        if greedy[-1] == EOS_ID:
            assert sequence_log_prob(model, f_tell, beamed) >= sequence_log_prob(model, f_tell, greedy) - 1e-12


def test_decoded_sentences_are_well_formed():
    for seed in range(20):
        model, f_tell = random_model(seed)
        for tokens in (greedy_decode(model, f_tell), beam_search(model, f_tell, beam=3)):
            assert 1 <= len(tokens) <= model.config.max_len
            assert PAD_ID not in tokens and BOS_ID not in tokens
            assert EOS_ID not in tokens[:-1]


def test_decoding_is_deterministic():
    model, f_tell = random_model(4)
    assert beam_search(model, f_tell) == beam_search(model, f_tell)


def test_length_normalized_beam_returns_a_sentence():
    model, f_tell = random_model(11)
    tokens = beam_search(model, f_tell, beam=3, length_normalize=True)
    assert 1 <= len(tokens) <= model.config.max_len


def test_invalid_beam_width():
    model, f_tell = random_model(0)
    with pytest.raises(ValueError):
        beam_search(model, f_tell, beam=0)
    with pytest.raises(ValueError):
        BeamDecoder(model, beam=0)


def test_decoder_factory_and_stats():
    model, _ = random_model(2)
    assert isinstance(DecoderFactory.create(model, "greedy"), GreedyDecoder)
    decoder = DecoderFactory.create(model, "BEAM", beam=2)
    assert isinstance(decoder, BeamDecoder) and decoder.beam == 2
    with pytest.raises(ValueError):
        DecoderFactory.create(model, "nucleus")

    sentences = generate_story(model, np.random.default_rng(0).normal(size=(3, 8)), decoder=decoder)
    stats = decoder.get_stats()
    assert stats["sentences"] == 3
    assert stats["steps"] >= 3 and stats["expansions"] >= stats["steps"]
    assert len(sentences) == 3


def test_all_visible_mask_matches_no_mask():
    model, _ = random_model(5)
    features = np.random.default_rng(1).normal(size=(3, 8))
    assert generate_story(model, features, MaskPattern.all_visible(3)) == generate_story(model, features)


@pytest.mark.parametrize("n_slots", [3, 5, 9])
def test_one_sentence_per_slot(n_slots, capsys):
    model, _ = random_model(6, n_slots=5)
    features = np.random.default_rng(2).normal(size=(n_slots, 8))
    assert len(generate_story(model, features)) == n_slots
    warned = "model was configured for 5" in capsys.readouterr().err
    assert warned == (n_slots != 5)


def test_hidden_slot_still_gets_a_sentence():
    model, _ = random_model(7, n_slots=5)
    features = np.random.default_rng(3).normal(size=(5, 8))
    sentences = generate_story(model, features, MaskPattern.hiding(5, [2]))
    assert len(sentences) == 5 and all(sentences)


def test_hiding_sweep_covers_every_slot():
    model, _ = random_model(8)
    results = hiding_sweep(model, np.random.default_rng(4).normal(size=(3, 8)),
                           DecoderFactory.create(model, "greedy"))
    assert [r.hidden_slot for r in results] == [None, 0, 1, 2]
    assert all(len(r.sentences) == 3 for r in results)


def test_interleaving_places_blank_rows_between_photos():
    features = np.random.default_rng(5).normal(size=(5, 8))
    stream = interleave_blank_slots(features)
    assert stream.shape == (9, 8)
    assert np.array_equal(stream[0::2], features)
    assert np.all(stream[1::2] == 0.0)
    assert [i for i in range(9) if is_inserted_slot(i)] == [1, 3, 5, 7]
    with pytest.raises(ValueError):
        interleave_blank_slots(features[:4])


def test_interpolation_decodes_nine_sentences(capsys):
    model, _ = random_model(9, n_slots=5)
    sentences = interpolate_story(model, np.random.default_rng(6).normal(size=(5, 8)),
                                  DecoderFactory.create(model, "greedy"))
    assert len(sentences) == 9
    assert capsys.readouterr().err == ""
