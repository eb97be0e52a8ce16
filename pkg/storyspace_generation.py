"""
Storyspace - Sentence Generation

Decoders for one slot (greedy, beam search) and story-level helpers:
- generate_story: hide -> imagine -> tell once, then decode every slot
- hiding_sweep: one generation per hidden slot (the hiding test)
- interpolate_story: insert blank slots between five photos, decode nine

Decoding never emits PAD or BOS; EOS, when reached, ends the sentence and
is kept as its last token. Candidates are ranked by total log-probability,
ties broken by the lexicographically smaller token sequence.
"""

import sys
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from storyspace_data import BOS_ID, EOS_ID
from storyspace_model import (
    INetModel,
    MaskPattern,
    decode_step,
    initial_state,
    one_hot,
    story_context,
)
from storyspace_tensor import Tensor, log_softmax_np, no_tape, take


INTERPOLATION_SLOTS = 5


@dataclass
class Hypothesis:
    tokens: Tuple[int, ...]
    log_prob: float
    state: Tensor
    finished: bool = False

    def normalized(self) -> float:
        return self.log_prob / max(1, len(self.tokens))


def _expand(model: INetModel, f_tell: Tensor, hyp: Hypothesis) -> List[Tuple[float, Tuple[int, ...], Tensor]]:
    previous = hyp.tokens[-1] if hyp.tokens else BOS_ID
    h, logits = decode_step(model, hyp.state, f_tell, one_hot(previous, model.vocab_size))
    log_probs = log_softmax_np(logits.data)
    return [(hyp.log_prob + float(log_probs[token]), hyp.tokens + (token,), h)
            for token in range(EOS_ID, model.vocab_size)]


def _rank(candidate) -> Tuple[float, Tuple[int, ...]]:
    return (-candidate[0], candidate[1])


def _max_len(model: INetModel, max_len: Optional[int]) -> int:
    limit = model.config.max_len if max_len is None else max_len
    if limit < 1:
        raise ValueError(f"max_len must be >= 1, got {limit}")
    return limit


def greedy_decode(
    model: INetModel,
    f_tell: Tensor,
    max_len: Optional[int] = None,
    stats: Optional[Dict[str, int]] = None,
) -> List[int]:
    """Best next token per step from BOS until EOS or max_len."""
    limit = _max_len(model, max_len)
    hyp = Hypothesis((), 0.0, initial_state(model))
    with no_tape():
        for _ in range(limit):
            score, tokens, h = min(_expand(model, f_tell, hyp), key=_rank)
            hyp = Hypothesis(tokens, score, h, finished=tokens[-1] == EOS_ID)
            if stats is not None:
                stats["expansions"] += 1
                stats["steps"] += 1
            if hyp.finished:
                break
    return list(hyp.tokens)


def beam_search(
    model: INetModel,
    f_tell: Tensor,
    beam: int = 3,
    max_len: Optional[int] = None,
    length_normalize: bool = False,
    stats: Optional[Dict[str, int]] = None,
) -> List[int]:
    """
    Length-synchronous beam search. Each step keeps the best `beam`
    extensions of all live hypotheses; those ending in EOS retire. Returns
    the best retired hypothesis, or the best live one if none finished.
    """
    if beam < 1:
        raise ValueError(f"beam must be >= 1, got {beam}")
    limit = _max_len(model, max_len)
    live = [Hypothesis((), 0.0, initial_state(model))]
    finished: List[Hypothesis] = []

    with no_tape():
        for _ in range(limit):
            candidates = []
            for hyp in live:
                candidates.extend(_expand(model, f_tell, hyp))
            candidates.sort(key=_rank)
            if stats is not None:
                stats["expansions"] += len(live)
                stats["steps"] += 1

            live = []
            for score, tokens, h in candidates[:beam]:
                hyp = Hypothesis(tokens, score, h, finished=tokens[-1] == EOS_ID)
                (finished if hyp.finished else live).append(hyp)
            if not live:
                break
            # log-probabilities only fall, so no live hypothesis can overtake
            if finished and not length_normalize and \
                    max(f.log_prob for f in finished) > live[0].log_prob:
                break

    pool = finished or live
    if length_normalize:
        best = min(pool, key=lambda hyp: (-hyp.normalized(), hyp.tokens))
    else:
        best = min(pool, key=lambda hyp: (-hyp.log_prob, hyp.tokens))
    return list(best.tokens)


# ============================================================================
# DECODER STRATEGIES
# ============================================================================

class BaseDecoder:
    """Base class for slot decoders; tracks decoding statistics."""

    def __init__(self, model: INetModel, max_len: Optional[int] = None):
        self.model = model
        self.max_len = max_len
        self.usage_stats = {"sentences": 0, "steps": 0, "expansions": 0}

    def decode(self, f_tell: Tensor) -> List[int]:
        """Decode one slot. Override in subclass."""
        raise NotImplementedError

    def decode_story(self, context: Tensor) -> List[List[int]]:
        return [self.decode(take(context, slot)) for slot in range(context.shape[0])]

    def get_stats(self) -> Dict[str, int]:
        return self.usage_stats.copy()


class GreedyDecoder(BaseDecoder):
    def decode(self, f_tell: Tensor) -> List[int]:
        self.usage_stats["sentences"] += 1
        return greedy_decode(self.model, f_tell, self.max_len, stats=self.usage_stats)


class BeamDecoder(BaseDecoder):
    def __init__(self, model: INetModel, beam: int = 3, max_len: Optional[int] = None,
                 length_normalize: bool = False):
        super().__init__(model, max_len)
        if beam < 1:
            raise ValueError(f"beam must be >= 1, got {beam}")
        self.beam = beam
        self.length_normalize = length_normalize

    def decode(self, f_tell: Tensor) -> List[int]:
        self.usage_stats["sentences"] += 1
        return beam_search(self.model, f_tell, self.beam, self.max_len,
                           self.length_normalize, stats=self.usage_stats)


class DecoderFactory:
    """Factory for creating slot decoders."""

    @staticmethod
    def create(
        model: INetModel,
        strategy: str = "beam",
        beam: int = 3,
        max_len: Optional[int] = None,
        length_normalize: bool = False,
    ) -> BaseDecoder:
        """
        Create a decoder.

        Args:
            model: Network to decode with
            strategy: "beam" or "greedy"
            beam: Beam width (beam strategy only)
            max_len: Sentence length limit (defaults to the model's max_len)
            length_normalize: Rank finished beams by mean log-probability

        Returns:
            Decoder instance
        """
        strategy = strategy.lower()
        if strategy == "beam":
            return BeamDecoder(model, beam=beam, max_len=max_len, length_normalize=length_normalize)
        elif strategy == "greedy":
            return GreedyDecoder(model, max_len=max_len)
        else:
            raise ValueError(f"Unknown decoding strategy: {strategy}")


# ============================================================================
# STORIES
# ============================================================================

def _as_features(features: Union[Tensor, np.ndarray]) -> Tensor:
    return features if isinstance(features, Tensor) else Tensor(features)


def generate_story(
    model: INetModel,
    features: Union[Tensor, np.ndarray],
    mask: Optional[MaskPattern] = None,
    decoder: Optional[BaseDecoder] = None,
    warn_slot_count: bool = True,
) -> List[List[int]]:
    """One sentence (token ids) per slot, hidden slots included."""
    features = _as_features(features)
    if warn_slot_count and features.shape[0] != model.config.n_slots:
        print(f"⚠️  story has {features.shape[0]} slots, model was configured for {model.config.n_slots}",
              file=sys.stderr)
    decoder = decoder or DecoderFactory.create(model)
    with no_tape():
        context = story_context(model, features, mask)
    return decoder.decode_story(context)


@dataclass
class HidingResult:
    hidden_slot: Optional[int]   # None = full input
    sentences: List[List[int]]


def hiding_sweep(
    model: INetModel,
    features: Union[Tensor, np.ndarray],
    decoder: Optional[BaseDecoder] = None,
) -> List[HidingResult]:
    """Full-input story followed by one story per single hidden slot."""
    features = _as_features(features)
    decoder = decoder or DecoderFactory.create(model)
    n_slots = features.shape[0]
    results = [HidingResult(None, generate_story(model, features, None, decoder))]
    for slot in range(n_slots):
        mask = MaskPattern.hiding(n_slots, [slot])
        results.append(HidingResult(slot, generate_story(model, features, mask, decoder)))
    return results


def interleave_blank_slots(features: Union[Tensor, np.ndarray]) -> np.ndarray:
    """5 x D -> 9 x D with an all-zero row between each consecutive pair."""
    values = np.asarray(getattr(features, "data", features))
    if values.ndim != 2 or values.shape[0] != INTERPOLATION_SLOTS:
        raise ValueError(f"interpolation needs {INTERPOLATION_SLOTS} slots, got shape {values.shape}")
    out = np.zeros((2 * INTERPOLATION_SLOTS - 1, values.shape[1]), dtype=values.dtype)
    out[0::2] = values
    return out


def is_inserted_slot(index: int) -> bool:
    """Inserted slots sit at odd 0-based positions of the interleaved stream."""
    return index % 2 == 1


def interpolate_story(
    model: INetModel,
    features: Union[Tensor, np.ndarray],
    decoder: Optional[BaseDecoder] = None,
) -> List[List[int]]:
    """Nine sentences: five real slots plus four inserted between them."""
    return generate_story(model, interleave_blank_slots(features), None, decoder, warn_slot_count=False)
