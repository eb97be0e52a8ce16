"""
Storyspace - Evaluation Metrics

- Corpus BLEU-1..4: clipped n-gram precisions pooled over the corpus,
  geometric mean, brevity penalty on total lengths
- ROUGE-L: LCS-based F-measure (beta = 1.2), averaged over sentence pairs
- masked_slot_accuracy: content-token agreement on hidden slots
- interpolation_consistency: inserted-slot tokens found among the adjacent
  real slots' gold tokens

Generated sentence i of a story is scored against reference sentence i.
"""

import json
import math
from collections import Counter
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field

from storyspace_data import StoryRecord, Vocabulary, content_tokens, decode, normalize, tokenize
from storyspace_generation import DecoderFactory, generate_story, interpolate_story, is_inserted_slot
from storyspace_inputs import EvaluationOptions
from storyspace_model import INetModel, MaskPattern


Sentence = Union[str, Sequence[str]]

ROUGE_BETA = 1.2


def _tokens(sentence: Sentence) -> List[str]:
    return tokenize(sentence) if isinstance(sentence, str) else list(sentence)


def _check_pairs(candidates: Sequence[Sentence], references: Sequence[Sentence]) -> None:
    if len(candidates) != len(references):
        raise ValueError(f"{len(candidates)} candidates but {len(references)} references")


# ============================================================================
# BLEU
# ============================================================================

def ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def modified_precisions(
    candidates: Sequence[Sentence],
    references: Sequence[Sentence],
    n_max: int = 4,
) -> List[Tuple[int, int]]:
    """(clipped matches, candidate n-grams) per order 1..n_max, pooled over pairs."""
    _check_pairs(candidates, references)
    totals = [[0, 0] for _ in range(n_max)]
    for candidate, reference in zip(candidates, references):
        cand, ref = _tokens(candidate), _tokens(reference)
        for n in range(1, n_max + 1):
            cand_counts, ref_counts = ngrams(cand, n), ngrams(ref, n)
            totals[n - 1][0] += sum(min(count, ref_counts[gram]) for gram, count in cand_counts.items())
            totals[n - 1][1] += sum(cand_counts.values())
    return [(matched, total) for matched, total in totals]


def brevity_penalty(candidate_length: int, reference_length: int) -> float:
    if candidate_length == 0:
        return 0.0
    if candidate_length > reference_length:
        return 1.0
    return math.exp(1.0 - reference_length / candidate_length)


def bleu(
    candidates: Sequence[Sentence],
    references: Sequence[Sentence],
    n_max: int = 4,
    smooth: bool = False,
) -> List[float]:
    """
    [BLEU-1, ..., BLEU-n_max]. A zero precision zeroes BLEU-n for every n
    at or above its order; smooth=True adds one to numerator and
    denominator of orders 2 and up.
    """
    if n_max < 1:
        raise ValueError(f"n_max must be >= 1, got {n_max}")
    stats = modified_precisions(candidates, references, n_max)
    c = sum(len(_tokens(s)) for s in candidates)
    r = sum(len(_tokens(s)) for s in references)
    bp = brevity_penalty(c, r)

    log_precisions = []
    for order, (matched, total) in enumerate(stats, start=1):
        if smooth and order > 1:
            matched, total = matched + 1, total + 1
        log_precisions.append(math.log(matched / total) if matched > 0 and total > 0 else None)

    scores = []
    for n in range(1, n_max + 1):
        window = log_precisions[:n]
        if bp == 0.0 or any(value is None for value in window):
            scores.append(0.0)
        else:
            scores.append(bp * math.exp(sum(window) / n))
    return scores


# ============================================================================
# ROUGE-L
# ============================================================================

def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    if not a or not b:
        return 0
    table = np.zeros((len(a) + 1, len(b) + 1), dtype=np.int64)
    for i, token_a in enumerate(a, start=1):
        for j, token_b in enumerate(b, start=1):
            if token_a == token_b:
                table[i, j] = table[i - 1, j - 1] + 1
            else:
                table[i, j] = max(table[i - 1, j], table[i, j - 1])
    return int(table[len(a), len(b)])


def rouge_l_pair(candidate: Sentence, reference: Sentence, beta: float = ROUGE_BETA) -> float:
    cand, ref = _tokens(candidate), _tokens(reference)
    lcs = lcs_length(cand, ref)
    if lcs == 0:
        return 0.0
    precision, recall = lcs / len(cand), lcs / len(ref)
    return (1 + beta ** 2) * precision * recall / (recall + beta ** 2 * precision)


def rouge_l(candidates: Sequence[Sentence], references: Sequence[Sentence], beta: float = ROUGE_BETA) -> float:
    _check_pairs(candidates, references)
    if not candidates:
        return 0.0
    return sum(rouge_l_pair(c, r, beta) for c, r in zip(candidates, references)) / len(candidates)


# ============================================================================
# HIDDEN-SLOT METRICS
# ============================================================================

def masked_slot_accuracy(
    generated: Sequence[Sequence[str]],
    gold: Sequence[Sequence[str]],
    masks: Sequence[MaskPattern],
    template_tokens: Iterable[str] = (),
) -> Optional[float]:
    """
    Clipped content-token matches over hidden slots, divided by the larger
    of the generated and gold content-token counts. None without hidden slots.
    """
    template = list(template_tokens)
    matched = total = 0
    for story_generated, story_gold, mask in zip(generated, gold, masks):
        for slot in mask.hidden_slots:
            produced = Counter(content_tokens(story_generated[slot], template))
            expected = Counter(content_tokens(story_gold[slot], template))
            matched += sum(min(count, expected[token]) for token, count in produced.items())
            total += max(sum(produced.values()), sum(expected.values()))
    if total == 0:
        return None
    return matched / total


def interpolation_consistency(
    generated: Sequence[Sequence[str]],
    gold: Sequence[Sequence[str]],
    template_tokens: Iterable[str] = (),
) -> float:
    """
    Mean over inserted slots of the share of generated content tokens that
    appear in the gold sentences of the two real slots around it.
    """
    template = list(template_tokens)
    scores = []
    for story_generated, story_gold in zip(generated, gold):
        for index, sentence in enumerate(story_generated):
            if not is_inserted_slot(index):
                continue
            left, right = story_gold[(index - 1) // 2], story_gold[(index + 1) // 2]
            nearby = set(content_tokens(left, template)) | set(content_tokens(right, template))
            produced = content_tokens(sentence, template)
            scores.append(sum(token in nearby for token in produced) / len(produced) if produced else 0.0)
    return sum(scores) / len(scores) if scores else 0.0


# ============================================================================
# REPORT
# ============================================================================

class MetricReport(BaseModel):
    bleu_1: float = Field(..., ge=0.0, le=1.0)
    bleu_2: float = Field(..., ge=0.0, le=1.0)
    bleu_3: float = Field(..., ge=0.0, le=1.0)
    bleu_4: float = Field(..., ge=0.0, le=1.0)
    rouge_l: float = Field(..., ge=0.0, le=1.0)
    masked_slot_accuracy: Optional[float] = Field(None, ge=0.0, le=1.0)
    interpolation_consistency: Optional[float] = Field(None, ge=0.0, le=1.0)
    stories: int = Field(..., ge=0)
    sentences: int = Field(..., ge=0)


def score_stories(
    generated: Sequence[Sequence[str]],
    gold: Sequence[Sequence[str]],
    masks: Optional[Sequence[MaskPattern]] = None,
    template_tokens: Iterable[str] = (),
    smooth_bleu: bool = False,
) -> MetricReport:
    """Slotwise pairing, corpus pooling."""
    _check_pairs(generated, gold)
    candidates, references = [], []
    for index, (story_generated, story_gold) in enumerate(zip(generated, gold)):
        if len(story_generated) != len(story_gold):
            raise ValueError(f"story {index}: {len(story_generated)} sentences vs {len(story_gold)} references")
        candidates.extend(story_generated)
        references.extend(story_gold)
    b1, b2, b3, b4 = bleu(candidates, references, 4, smooth=smooth_bleu)
    accuracy = masked_slot_accuracy(generated, gold, masks, template_tokens) if masks else None
    return MetricReport(
        bleu_1=b1, bleu_2=b2, bleu_3=b3, bleu_4=b4,
        rouge_l=rouge_l(candidates, references),
        masked_slot_accuracy=accuracy,
        stories=len(generated),
        sentences=len(candidates),
    )


def _check_vocab(model: INetModel, vocab: Vocabulary) -> None:
    if len(vocab) != model.vocab_size:
        raise ValueError(f"vocabulary has {len(vocab)} ids but the model expects {model.vocab_size}")


def evaluate(
    model: INetModel,
    records: Sequence[StoryRecord],
    vocab: Vocabulary,
    options: EvaluationOptions,
) -> MetricReport:
    """Beam-decode every story (optionally with one seeded hidden slot) and score it."""
    _check_vocab(model, vocab)
    decoder = DecoderFactory.create(model, beam=options.beam, max_len=options.max_len,
                                    length_normalize=options.length_normalize)
    rng = np.random.default_rng(options.seed)
    generated, gold, masks = [], [], []
    for record in records:
        features = record.load_features()
        mask = None
        if options.hide_one_slot:
            mask = MaskPattern.hiding(features.shape[0], [int(rng.integers(features.shape[0]))])
            masks.append(mask)
        story = generate_story(model, features, mask, decoder)
        generated.append([decode(vocab, ids) for ids in story])
        gold.append([normalize(sentence) for sentence in record.sentences])
    return score_stories(generated, gold, masks or None, options.template_tokens, options.smooth_bleu)


def evaluate_interpolation(
    model: INetModel,
    records: Sequence[StoryRecord],
    vocab: Vocabulary,
    options: EvaluationOptions,
) -> float:
    """interpolation_consistency over every five-slot story in records."""
    _check_vocab(model, vocab)
    decoder = DecoderFactory.create(model, beam=options.beam, max_len=options.max_len,
                                    length_normalize=options.length_normalize)
    generated, gold = [], []
    for record in records:
        features = record.load_features()
        if features.shape[0] != 5:
            continue
        generated.append([decode(vocab, ids) for ids in interpolate_story(model, features, decoder)])
        gold.append([normalize(sentence) for sentence in record.sentences])
    return interpolation_consistency(generated, gold, options.template_tokens)


def format_report(report: MetricReport, fmt: str = "text") -> str:
    values: Dict[str, object] = {key: value for key, value in report.model_dump().items() if value is not None}
    if fmt == "json":
        return json.dumps(values, indent=2, sort_keys=True)
    if fmt != "text":
        raise ValueError(f"Unknown report format: {fmt}")
    lines = []
    for key, value in values.items():
        lines.append(f"{key}: {value:.6f}" if isinstance(value, float) else f"{key}: {value}")
    return "\n".join(lines)
