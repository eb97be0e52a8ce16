"""
Storyspace - Data I/O

Handles:
- "INFT" binary feature files (one photo stream per file)
- Story corpora (one JSON record per line)
- Vocabulary construction, encoding and decoding
- The deterministic-chain synthetic photo-stream generator

Feature file layout (little-endian):
    magic "INFT" | u32 version=1 | u32 N | u32 D | N*D float32, row-major
"""

import json
import re
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from storyspace_inputs import SyntheticSpec


FEATURE_MAGIC = b"INFT"
FEATURE_VERSION = 1
_FEATURE_HEADER = struct.Struct("<4sIII")

PAD_ID, BOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3
RESERVED_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>")


class FeatureFileError(ValueError):
    """Raised for malformed, truncated or foreign feature files."""


# ============================================================================
# FEATURE FILES
# ============================================================================

def write_features(path: Union[str, Path], features) -> None:
    values = np.asarray(getattr(features, "data", features), dtype=np.float64)
    if values.ndim != 2 or values.shape[0] < 1 or values.shape[1] < 1:
        raise FeatureFileError(f"feature stream must be a non-empty N x D matrix, got {values.shape}")
    if not np.isfinite(values).all():
        raise FeatureFileError("feature stream contains non-finite values")
    n_slots, width = values.shape
    payload = values.astype("<f4").tobytes(order="C")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(_FEATURE_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, n_slots, width))
        f.write(payload)


def read_features(path: Union[str, Path]) -> np.ndarray:
    """Read an N x D float32 stream, validating magic, version and length."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _FEATURE_HEADER.size:
        raise FeatureFileError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, version, n_slots, width = _FEATURE_HEADER.unpack_from(raw)
    if magic != FEATURE_MAGIC:
        raise FeatureFileError(f"{path}: bad magic {magic!r}")
    if version != FEATURE_VERSION:
        raise FeatureFileError(f"{path}: unsupported version {version}")
    expected = _FEATURE_HEADER.size + 4 * n_slots * width
    if len(raw) != expected:
        raise FeatureFileError(f"{path}: expected {expected} bytes, found {len(raw)}")
    values = np.frombuffer(raw, dtype="<f4", offset=_FEATURE_HEADER.size)
    return values.reshape(n_slots, width).astype(np.float32)


# ============================================================================
# VOCABULARY
# ============================================================================

_PUNCTUATION = re.compile(r"[^\w\s]")


def tokenize(sentence: str) -> List[str]:
    return _PUNCTUATION.sub(" ", sentence.lower()).split()


def normalize(sentence: str) -> str:
    return " ".join(tokenize(sentence))


class Vocabulary:
    """Token <-> id bijection. Ids 0..3 are PAD, BOS, EOS, UNK."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        clash = set(tokens) & set(RESERVED_TOKENS)
        if clash:
            raise ValueError(f"reserved tokens cannot appear in the vocabulary: {sorted(clash)}")
        if len(set(tokens)) != len(tokens):
            raise ValueError("vocabulary tokens must be unique")
        self.tokens = tokens
        self._ids = {token: i + len(RESERVED_TOKENS) for i, token in enumerate(tokens)}

    def __len__(self) -> int:
        return len(RESERVED_TOKENS) + len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    @property
    def size(self) -> int:
        return len(self)

    def id_of(self, token: str) -> int:
        return self._ids.get(token, UNK_ID)

    def token_of(self, token_id: int) -> str:
        if not 0 <= token_id < len(self):
            raise ValueError(f"token id {token_id} out of range [0, {len(self)})")
        if token_id < len(RESERVED_TOKENS):
            return RESERVED_TOKENS[token_id]
        return self.tokens[token_id - len(RESERVED_TOKENS)]

    def save(self, path: Union[str, Path]) -> None:
        """One token per line; line k holds id k + 4."""
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text("".join(f"{token}\n" for token in self.tokens), encoding="utf-8")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([line.strip() for line in lines if line.strip()])


def build_vocab(sentences: Iterable[str], min_count: int = 1) -> Vocabulary:
    """Ids by descending frequency, ties broken lexicographically."""
    if min_count < 1:
        raise ValueError(f"min_count must be >= 1, got {min_count}")
    counts: Counter = Counter()
    seen = 0
    for sentence in sentences:
        seen += 1
        counts.update(tokenize(sentence))
    if seen == 0:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    kept = [token for token, count in counts.items() if count >= min_count]
    kept.sort(key=lambda token: (-counts[token], token))
    return Vocabulary(kept)


def encode(vocab: Vocabulary, sentence: str) -> List[int]:
    return [vocab.id_of(token) for token in tokenize(sentence)] + [EOS_ID]


def decode(vocab: Vocabulary, ids: Sequence[int]) -> str:
    words = []
    for token_id in ids:
        token_id = int(token_id)
        vocab.token_of(token_id)
        if token_id == EOS_ID:
            break
        if token_id < len(RESERVED_TOKENS):
            continue
        words.append(vocab.token_of(token_id))
    return " ".join(words)


def content_tokens(sentence: str, template_tokens: Iterable[str] = ()) -> List[str]:
    """Tokens that carry meaning: not reserved, not template filler."""
    skip = set(template_tokens) | set(RESERVED_TOKENS)
    return [token for token in tokenize(sentence) if token not in skip]


# ============================================================================
# CORPUS
# ============================================================================

@dataclass
class StoryRecord:
    story_id: str
    features: Union[str, np.ndarray]   # path (relative to the corpus file) or inline N x D
    sentences: List[str]
    topics: Optional[List[int]] = None  # synthetic corpora only

    @property
    def n_slots(self) -> int:
        return len(self.sentences)

    def load_features(self, base_dir: Union[str, Path] = ".") -> np.ndarray:
        if isinstance(self.features, np.ndarray):
            values = self.features
        else:
            location = Path(self.features)
            if not location.is_absolute():
                location = Path(base_dir) / location
            values = read_features(location)
        if values.shape[0] != len(self.sentences):
            raise ValueError(
                f"story {self.story_id}: {values.shape[0]} feature slots but {len(self.sentences)} sentences"
            )
        return values


def write_corpus(path: Union[str, Path], records: Sequence[StoryRecord]) -> None:
    """
    Write one JSON record per line. In-memory features are saved as
    `<corpus stem>_features/<story_id>.inft` next to the corpus.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    feature_dir = f"{path.stem}_features"
    lines = []
    for record in records:
        features = record.features
        if isinstance(features, np.ndarray):
            relative = f"{feature_dir}/{record.story_id}.inft"
            write_features(path.parent / relative, features)
            features = relative
        entry = {"story_id": record.story_id, "features": features, "sentences": list(record.sentences)}
        if record.topics is not None:
            entry["topics"] = [int(t) for t in record.topics]
        lines.append(json.dumps(entry, ensure_ascii=False))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_corpus(path: Union[str, Path], load: bool = True) -> List[StoryRecord]:
    """Read a corpus; with load=True every feature stream is read and checked."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"corpus not found: {path}")
    records = []
    for line_no, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            entry = json.loads(line)
            record = StoryRecord(
                story_id=str(entry["story_id"]),
                features=entry["features"] if isinstance(entry["features"], str)
                else np.asarray(entry["features"], dtype=np.float64),
                sentences=[str(s) for s in entry["sentences"]],
                topics=entry.get("topics"),
            )
        except (json.JSONDecodeError, KeyError, TypeError) as e:
            raise ValueError(f"{path}:{line_no}: malformed story record ({e})") from e
        if load:
            record.features = record.load_features(path.parent)
        records.append(record)
    return records


def corpus_sentences(records: Iterable[StoryRecord]) -> List[str]:
    return [sentence for record in records for sentence in record.sentences]


# ============================================================================
# SYNTHETIC PHOTO STREAMS
# ============================================================================

TEMPLATE = "we saw the {adj} {noun} and the {extra}"
TEMPLATE_TOKENS = ["we", "saw", "the", "and"]

ADJECTIVES = ["red", "quiet", "sunny", "tall", "old", "bright", "windy", "happy", "small", "golden", "snowy", "busy"]
NOUNS = ["beach", "castle", "forest", "market", "bridge", "garden", "harbor", "temple", "museum", "canyon", "lake", "village"]
EXTRAS = ["dog", "boat", "kite", "train", "crowd", "tower", "fountain", "parade", "horse", "cake", "band", "statue"]


def _topic_word(words: Sequence[str], topic: int) -> str:
    base = words[topic % len(words)]
    return base if topic < len(words) else f"{base}{topic // len(words)}"


@dataclass
class SyntheticWorld:
    """Topic chain, topic-to-feature projection and sentence templates."""
    spec: SyntheticSpec
    chain: np.ndarray        # chain[k] = topic that follows topic k
    projection: np.ndarray   # K x D, orthogonal rows scaled to feature_scale
    words: List[Tuple[str, str, str]] = field(default_factory=list)

    def next_topic(self, topic: int) -> int:
        return int(self.chain[topic])

    def previous_topic(self, topic: int) -> int:
        return int(np.flatnonzero(self.chain == topic)[0])

    def sentence(self, topic: int) -> str:
        adj, noun, extra = self.words[topic]
        return TEMPLATE.format(adj=adj, noun=noun, extra=extra)


def build_world(spec: SyntheticSpec, rng: np.random.Generator) -> SyntheticWorld:
    order = rng.permutation(spec.topics)
    chain = np.empty(spec.topics, dtype=np.int64)
    for i, topic in enumerate(order):
        chain[topic] = order[(i + 1) % spec.topics]   # a single cycle: a bijection
    gaussian = rng.normal(size=(spec.feature_dim, spec.topics))
    q, _ = np.linalg.qr(gaussian)
    projection = q.T * spec.feature_scale
    words = [
        (_topic_word(ADJECTIVES, k), _topic_word(NOUNS, k), _topic_word(EXTRAS, k))
        for k in range(spec.topics)
    ]
    return SyntheticWorld(spec=spec, chain=chain, projection=projection, words=words)


def synth_generate(
    spec: SyntheticSpec,
    split_sizes: Optional[Dict[str, int]] = None,
) -> Tuple[SyntheticWorld, Dict[str, List[StoryRecord]]]:
    """
    Per story: slot-1 topic uniform, later topics follow the chain, feature
    row = projection[topic] + N(0, noise^2), sentence = topic template.
    Any hidden slot's topic follows from either visible neighbour.
    """
    rng = np.random.default_rng(spec.seed)
    world = build_world(spec, rng)
    if split_sizes is None:
        split_sizes = {"train": spec.stories, "test": spec.test_stories}

    splits: Dict[str, List[StoryRecord]] = {}
    for split, size in split_sizes.items():
        records = []
        for index in range(size):
            topics = [int(rng.integers(spec.topics))]
            for _ in range(spec.slots - 1):
                topics.append(world.next_topic(topics[-1]))
            noise = rng.normal(size=(spec.slots, spec.feature_dim)) * spec.noise
            features = world.projection[topics] + noise
            records.append(StoryRecord(
                story_id=f"{split}-{index:05d}",
                features=features,
                sentences=[world.sentence(t) for t in topics],
                topics=topics,
            ))
        splits[split] = records
    return world, splits


def recover_hidden_topic(world: SyntheticWorld, topics: Sequence[Optional[int]], slot: int) -> int:
    """Chain oracle: infer topics[slot] (None = hidden) from a visible neighbour."""
    if slot > 0 and topics[slot - 1] is not None:
        return world.next_topic(topics[slot - 1])
    if slot + 1 < len(topics) and topics[slot + 1] is not None:
        return world.previous_topic(topics[slot + 1])
    raise ValueError(f"slot {slot} has no visible neighbour")


def write_synthetic_dataset(out_dir: Union[str, Path], spec: SyntheticSpec) -> Dict[str, Path]:
    """Write train/test corpora, features, vocabulary and synthetic.json."""
    out_dir = Path(out_dir)
    world, splits = synth_generate(spec)
    paths = {}
    for split, records in splits.items():
        paths[split] = out_dir / f"{split}.jsonl"
        write_corpus(paths[split], records)
    vocab = build_vocab(corpus_sentences(r for records in splits.values() for r in records))
    paths["vocab"] = out_dir / "vocab.txt"
    vocab.save(paths["vocab"])
    paths["meta"] = out_dir / "synthetic.json"
    meta = {
        "spec": spec.model_dump(),
        "template_tokens": TEMPLATE_TOKENS,
        "chain": [int(t) for t in world.chain],
    }
    paths["meta"].write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return paths
