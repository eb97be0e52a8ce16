import json

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays
from pydantic import ValidationError

from storyspace_data import (
    EOS_ID,
    TEMPLATE_TOKENS,
    UNK_ID,
    FeatureFileError,
    StoryRecord,
    Vocabulary,
    build_vocab,
    content_tokens,
    corpus_sentences,
    decode,
    encode,
    normalize,
    read_corpus,
    read_features,
    recover_hidden_topic,
    synth_generate,
    tokenize,
    write_corpus,
    write_features,
    write_synthetic_dataset,
)
from storyspace_inputs import SyntheticSpec


def test_feature_file_size_and_header(tmp_path):
    path = tmp_path / "story.inft"
    write_features(path, np.arange(20.0).reshape(5, 4))
    raw = path.read_bytes()
    assert len(raw) == 16 + 80
    assert raw[:4] == b"INFT"
    assert int.from_bytes(raw[4:8], "little") == 1


@given(arrays(np.float32, st.tuples(st.integers(1, 6), st.integers(1, 6)),
              elements=st.floats(-1e6, 1e6, width=32)))
def test_feature_round_trip_is_bit_identical(tmp_path_factory, values):
    path = tmp_path_factory.mktemp("features") / "f.inft"
    write_features(path, values)
    restored = read_features(path)
    assert restored.dtype == np.float32
    assert restored.tobytes() == values.astype("<f4").tobytes()


def test_corrupt_feature_files_are_detected(tmp_path):
    path = tmp_path / "story.inft"
    write_features(path, np.ones((2, 3)))
    raw = path.read_bytes()

    (tmp_path / "magic.inft").write_bytes(b"XNFT" + raw[4:])
    with pytest.raises(FeatureFileError, match="magic"):
        read_features(tmp_path / "magic.inft")

    (tmp_path / "short.inft").write_bytes(raw[:-1])
    with pytest.raises(FeatureFileError, match="expected"):
        read_features(tmp_path / "short.inft")

    (tmp_path / "header.inft").write_bytes(raw[:10])
    with pytest.raises(FeatureFileError, match="truncated"):
        read_features(tmp_path / "header.inft")

    (tmp_path / "version.inft").write_bytes(raw[:4] + (2).to_bytes(4, "little") + raw[8:])
    with pytest.raises(FeatureFileError, match="version"):
        read_features(tmp_path / "version.inft")


def test_write_features_rejects_bad_streams(tmp_path):
    with pytest.raises(FeatureFileError):
        write_features(tmp_path / "a.inft", np.zeros((3, 0)))
    with pytest.raises(FeatureFileError):
        write_features(tmp_path / "b.inft", np.array([[1.0, np.inf]]))


def test_min_count_maps_rare_tokens_to_unk():
    vocab = build_vocab(["a a b"], min_count=2)
    assert vocab.tokens == ["a"]
    assert len(vocab) == 5
    assert encode(vocab, "a b") == [4, UNK_ID, EOS_ID]


def test_vocab_ids_follow_frequency_then_lexicographic_order():
    corpus = ["the cat sat", "The dog sat!", "a cat"]
    vocab = build_vocab(corpus)
    assert vocab.tokens == ["cat", "sat", "the", "a", "dog"]
    assert build_vocab(corpus) == vocab
    assert all(vocab.id_of(token) != UNK_ID for s in corpus for token in tokenize(s))


def test_vocab_errors():
    with pytest.raises(ValueError):
        build_vocab([])
    with pytest.raises(ValueError):
        build_vocab(["a"], min_count=0)
    with pytest.raises(ValueError):
        Vocabulary(["<eos>"])
    with pytest.raises(ValueError):
        Vocabulary(["a", "a"])


def test_vocab_file_keeps_reserved_offset(tmp_path):
    vocab = build_vocab(["red boat", "red kite"])
    vocab.save(tmp_path / "vocab.txt")
    assert (tmp_path / "vocab.txt").read_text().splitlines() == ["red", "boat", "kite"]
    loaded = Vocabulary.load(tmp_path / "vocab.txt")
    assert loaded == vocab
    assert loaded.id_of("red") == 4 and loaded.token_of(0) == "<pad>"


def test_encode_decode_round_trip():
    vocab = build_vocab(["We saw the red beach, and the dog."])
    sentence = "We saw the RED beach and the dog!"
    assert decode(vocab, encode(vocab, sentence)) == normalize(sentence)
    assert encode(vocab, "") == [EOS_ID]
    assert decode(vocab, [4, 0, 1, 3, 5, EOS_ID, 6]) == "the and"
    with pytest.raises(ValueError):
        decode(vocab, [len(vocab)])


def test_content_tokens_drop_template_words():
    assert content_tokens("We saw the red beach and the dog", TEMPLATE_TOKENS) == ["red", "beach", "dog"]


def test_corpus_round_trip_with_feature_files(tmp_path):
    records = [
        StoryRecord("s1", np.ones((2, 3)), ["a b", "c"]),
        StoryRecord("s2", np.zeros((2, 3)), ["d", "e f"], topics=[1, 2]),
    ]
    write_corpus(tmp_path / "train.jsonl", records)
    first_line = json.loads((tmp_path / "train.jsonl").read_text().splitlines()[0])
    assert first_line["features"] == "train_features/s1.inft"

    restored = read_corpus(tmp_path / "train.jsonl")
    assert [r.story_id for r in restored] == ["s1", "s2"]
    assert np.array_equal(restored[0].features, np.ones((2, 3)))
    assert restored[1].topics == [1, 2]
    assert corpus_sentences(restored) == ["a b", "c", "d", "e f"]

    lazy = read_corpus(tmp_path / "train.jsonl", load=False)
    assert lazy[0].features == "train_features/s1.inft"


def test_corpus_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_corpus(tmp_path / "missing.jsonl")
    (tmp_path / "bad.jsonl").write_text('{"story_id": "x"}\n')
    with pytest.raises(ValueError, match="malformed"):
        read_corpus(tmp_path / "bad.jsonl")
    mismatch = StoryRecord("m", np.ones((3, 2)), ["only one"])
    with pytest.raises(ValueError, match="feature slots"):
        mismatch.load_features()


def test_synthetic_corpus_is_deterministic():
    spec = SyntheticSpec(topics=4, slots=3, feature_dim=6, stories=5, test_stories=2, seed=3)
    _, first = synth_generate(spec)
    _, second = synth_generate(spec)
    for split in ("train", "test"):
        for a, b in zip(first[split], second[split]):
            assert a.sentences == b.sentences
            assert np.array_equal(a.features, b.features)
    assert len(first["train"]) == 5 and len(first["test"]) == 2


def test_noise_free_topics_share_identical_rows():
    spec = SyntheticSpec(topics=3, slots=4, feature_dim=5, noise=0.0, stories=20, test_stories=0)
    world, splits = synth_generate(spec)
    rows = {}
    for record in splits["train"]:
        for topic, row in zip(record.topics, record.features):
            rows.setdefault(topic, row)
            assert np.array_equal(rows[topic], row)
    np.testing.assert_allclose(world.projection @ world.projection.T, np.eye(3) * 4.0, atol=1e-12)


def test_chain_follows_topics_and_recovers_hidden_slots():
    spec = SyntheticSpec(topics=8, slots=5, feature_dim=16, stories=30, test_stories=0)
    world, splits = synth_generate(spec)
    assert sorted(world.chain.tolist()) == list(range(8))
    for record in splits["train"]:
        topics = record.topics
        assert all(world.next_topic(a) == b for a, b in zip(topics, topics[1:]))
        assert record.sentences == [world.sentence(t) for t in topics]
        for slot in range(5):
            hidden = list(topics)
            hidden[slot] = None
            assert recover_hidden_topic(world, hidden, slot) == topics[slot]
    with pytest.raises(ValueError):
        recover_hidden_topic(world, [None, None], 0)


def test_topic_words_stay_distinct_beyond_word_lists():
    spec = SyntheticSpec(topics=14, slots=2, feature_dim=14, stories=1, test_stories=0)
    world, _ = synth_generate(spec)
    assert len({world.sentence(k) for k in range(14)}) == 14


def test_more_topics_than_dimensions_is_rejected():
    with pytest.raises(ValidationError):
        SyntheticSpec(topics=9, feature_dim=8)


def test_synthetic_dataset_files(tmp_path):
    spec = SyntheticSpec(topics=4, slots=3, feature_dim=6, stories=4, test_stories=2)
    paths = write_synthetic_dataset(tmp_path, spec)
    assert {"train", "test", "vocab", "meta"} <= set(paths)
    meta = json.loads(paths["meta"].read_text())
    assert meta["template_tokens"] == TEMPLATE_TOKENS
    assert len(meta["chain"]) == 4
    vocab = Vocabulary.load(paths["vocab"])
    for record in read_corpus(paths["test"]):
        assert record.features.shape == (3, 6)
        assert all(UNK_ID not in encode(vocab, s) for s in record.sentences)
