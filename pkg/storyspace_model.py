"""
Storyspace - Imagine-and-Tell Network

Pipeline per story:
    hide (zero 0-2 slot rows) -> imagine (BiGRU + non-local, reminding residual)
    -> tell (second BiGRU + non-local, unshared weights) -> per-slot decoder

The ablation variant (see storyspace_variants) switches stages off.
"""

import sys
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from storyspace_data import BOS_ID, EOS_ID, PAD_ID
from storyspace_inputs import ConfigError, INetConfig
from storyspace_layers import (
    BiGRU,
    GRUCell,
    ModelParameters,
    NonLocalBlock,
    OutputHead,
    ParameterSpec,
    bigru_forward,
    bigru_from,
    bigru_specs,
    gru_from,
    gru_specs,
    gru_step,
    head_from,
    head_specs,
    init_parameters,
    nonlocal_forward,
    nonlocal_from,
    nonlocal_specs,
    output_head,
)
from storyspace_tensor import (
    DegenerateBatchError,
    ShapeError,
    Tensor,
    concat,
    cross_entropy,
    mask_rows,
    matmul,
    selu,
)
from storyspace_variants import AblationVariant, get_ablation_variant


# ============================================================================
# CURRICULUM AND MASKING
# ============================================================================

def curriculum_level(epoch: int, alpha: int, beta: int) -> int:
    """Number of slots to hide: 0 before alpha, 1 before beta, 2 after."""
    if epoch < 0:
        raise ValueError(f"epoch must be non-negative, got {epoch}")
    if alpha > beta:
        raise ConfigError(f"alpha ({alpha}) must not exceed beta ({beta})")
    if epoch < alpha:
        return 0
    if epoch < beta:
        return 1
    return 2


def hidden_count(epoch: int, config: INetConfig) -> int:
    if config.curriculum == "fixed":
        return config.fixed_hidden
    return curriculum_level(epoch, config.alpha, config.beta)


@dataclass(frozen=True)
class MaskPattern:
    visible: Tuple[bool, ...]   # False = hidden slot

    @classmethod
    def all_visible(cls, n_slots: int) -> "MaskPattern":
        return cls(tuple([True] * n_slots))

    @classmethod
    def hiding(cls, n_slots: int, slots: Sequence[int]) -> "MaskPattern":
        for slot in slots:
            if not 0 <= slot < n_slots:
                raise ValueError(f"slot {slot} out of range for {n_slots} slots")
        return cls(tuple(i not in set(slots) for i in range(n_slots)))

    @property
    def n_slots(self) -> int:
        return len(self.visible)

    @property
    def hidden_slots(self) -> List[int]:
        return [i for i, shown in enumerate(self.visible) if not shown]

    @property
    def n_hidden(self) -> int:
        return len(self.hidden_slots)


def sample_mask(n_slots: int, b_total: int, rng: np.random.Generator) -> MaskPattern:
    """Hide b_total distinct slots chosen uniformly without replacement."""
    if b_total < 0 or b_total > n_slots:
        raise ValueError(f"cannot hide {b_total} of {n_slots} slots")
    if b_total == 0:
        return MaskPattern.all_visible(n_slots)
    hidden = rng.choice(n_slots, size=b_total, replace=False)
    return MaskPattern.hiding(n_slots, [int(i) for i in hidden])


def hide(features: Tensor, mask: MaskPattern) -> Tensor:
    if features.ndim != 2 or features.shape[0] != mask.n_slots:
        raise ShapeError(f"mask over {mask.n_slots} slots does not fit features {features.shape}")
    return mask_rows(features, mask.visible)


# ============================================================================
# MODEL
# ============================================================================

@dataclass
class RNNNLBlock:
    rnn: BiGRU
    relation: Optional[NonLocalBlock]   # None under the no_nonlocal ablation


def parameter_specs(config: INetConfig) -> List[ParameterSpec]:
    variant = get_ablation_variant(config.ablation)
    D, H = config.feature_dim, config.hidden
    word_dim = config.word_embedding or config.vocab_size
    stages = ["imagine"] + (["tell"] if variant.telling else [])

    specs: List[ParameterSpec] = []
    for stage in stages:
        specs += bigru_specs(f"{stage}.bigru", D, H)
        if variant.nonlocal_layers:
            specs += nonlocal_specs(f"{stage}.nonlocal", 2 * H, config.inner_dim)
    if config.word_embedding:
        specs.append(ParameterSpec("embed.W", (config.vocab_size, config.word_embedding), "xavier_uniform"))
    specs += gru_specs("decoder", D + word_dim, config.decoder_hidden)
    specs += head_specs("head", config.decoder_hidden, config.vocab_size)
    return specs


class INetModel:
    """Imagining block, telling block, decoder GRU and output head."""

    def __init__(
        self,
        config: INetConfig,
        params: Optional[ModelParameters] = None,
        rng: Optional[np.random.Generator] = None,
    ):
        self.config = config
        self.variant: AblationVariant = get_ablation_variant(config.ablation)
        specs = parameter_specs(config)
        if params is None:
            params = init_parameters(specs, rng if rng is not None else np.random.default_rng(0))
        else:
            expected = {spec.name: spec.shape for spec in specs}
            found = {name: tensor.shape for name, tensor in params.items()}
            if expected != found:
                raise ConfigError("parameters do not match the model configuration")
        self.params = params

        self.imagining = self._block("imagine")
        self.telling = self._block("tell") if self.variant.telling else None
        self.decoder: GRUCell = gru_from(params, "decoder")
        self.head: OutputHead = head_from(params, "head")
        self.embedding: Optional[Tensor] = params["embed.W"] if config.word_embedding else None

    def _block(self, stage: str) -> RNNNLBlock:
        relation = nonlocal_from(self.params, f"{stage}.nonlocal") if self.variant.nonlocal_layers else None
        return RNNNLBlock(bigru_from(self.params, f"{stage}.bigru"), relation)

    @property
    def vocab_size(self) -> int:
        return self.config.vocab_size

    def __repr__(self) -> str:
        return f"<INetModel {self.variant.label} D={self.config.feature_dim} V={self.vocab_size} params={self.params.count()}>"


def block_forward(block: RNNNLBlock, x: Tensor) -> Tensor:
    h = selu(bigru_forward(block.rnn, x))
    if block.relation is None:
        return h
    return nonlocal_forward(block.relation, h)


def _check_features(model: INetModel, features: Tensor) -> None:
    if features.ndim != 2 or features.shape[1] != model.config.feature_dim:
        raise ShapeError(f"expected N x {model.config.feature_dim} features, got {features.shape}")


def imagine(model: INetModel, blind: Tensor) -> Tensor:
    """F_reminded = F_blind + Z (reminding connection)."""
    _check_features(model, blind)
    return blind + block_forward(model.imagining, blind)


def tell(model: INetModel, reminded: Tensor) -> Tensor:
    _check_features(model, reminded)
    if model.telling is None:
        return reminded
    return block_forward(model.telling, reminded)


def story_context(model: INetModel, features: Union[Tensor, np.ndarray], mask: Optional[MaskPattern] = None) -> Tensor:
    """hide -> imagine -> tell; one telling vector per slot."""
    features = features if isinstance(features, Tensor) else Tensor(features)
    _check_features(model, features)
    if mask is not None:
        features = hide(features, mask)
    return tell(model, imagine(model, features))


# ============================================================================
# DECODER
# ============================================================================

def one_hot(token_ids: Union[int, Sequence[int]], vocab_size: int) -> Tensor:
    """One-hot vector for an id, or one row per id for a sequence."""
    ids = np.atleast_1d(np.asarray(token_ids, dtype=np.int64))
    if (ids < 0).any() or (ids >= vocab_size).any():
        raise ValueError(f"token ids must lie in [0, {vocab_size})")
    rows = np.zeros((ids.size, vocab_size))
    rows[np.arange(ids.size), ids] = 1.0
    return Tensor(rows[0] if np.ndim(token_ids) == 0 else rows)


def _check_one_hot(v: Tensor, vocab_size: int) -> None:
    rows = v.data.reshape(-1, v.shape[-1])
    if v.shape[-1] != vocab_size or v.ndim not in (1, 2):
        raise ShapeError(f"expected one-hot rows of width {vocab_size}, got {v.shape}")
    binary = np.all((rows == 0.0) | (rows == 1.0))
    if not binary or not np.all(rows.sum(axis=1) == 1.0):
        raise ValueError("previous-word input must be one-hot")


def decode_step(model: INetModel, h_prev: Tensor, f_tell: Tensor, v_prev: Tensor) -> Tuple[Tensor, Tensor]:
    """h = GRU(h_prev, [f_tell ; v_prev]); logits from the output head. Rows allowed."""
    _check_one_hot(v_prev, model.vocab_size)
    word = v_prev if model.embedding is None else matmul(v_prev, model.embedding)
    h = gru_step(model.decoder, h_prev, concat([f_tell, word], axis=f_tell.ndim - 1))
    return h, output_head(model.head, h)


def initial_state(model: INetModel, rows: Optional[int] = None) -> Tensor:
    width = model.config.decoder_hidden
    return Tensor.zeros((width,) if rows is None else (rows, width))


# ============================================================================
# LOSS
# ============================================================================

def _warn(message: str) -> None:
    print(f"⚠️  {message}", file=sys.stderr)


def _truncate(story_id: int, rows: Sequence[Sequence[int]], max_len: int) -> List[List[int]]:
    kept = []
    for slot, row in enumerate(rows):
        if len(row) > max_len:
            _warn(f"story {story_id} slot {slot}: sentence of {len(row)} tokens truncated to {max_len}")
            row = list(row[:max_len - 1]) + [EOS_ID]
        kept.append(list(row))
    return kept


def sentence_loss(
    model: INetModel,
    f_tell: Tensor,
    rows: Sequence[Sequence[int]],
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """
    Teacher-forced cross-entropy of every slot's sentence, all slots decoded
    together as rows. Mean over the non-pad tokens of all slots.
    """
    n_slots = f_tell.shape[0]
    if len(rows) != n_slots or any(len(row) == 0 for row in rows):
        raise ShapeError(f"need one non-empty sentence per slot ({n_slots}), got {len(rows)}")
    steps = max(len(row) for row in rows)
    targets = np.full((steps, n_slots), PAD_ID, dtype=np.int64)
    for slot, row in enumerate(rows):
        targets[:len(row), slot] = row
    padded = targets == PAD_ID
    sampling = model.config.scheduled_sampling

    h = initial_state(model, n_slots)
    previous = np.full(n_slots, BOS_ID, dtype=np.int64)
    step_logits = []
    for t in range(steps):
        h, logits = decode_step(model, h, f_tell, one_hot(previous, model.vocab_size))
        step_logits.append(logits)
        previous = targets[t].copy()
        if sampling > 0.0 and rng is not None:
            swap = (rng.random(n_slots) < sampling) & ~padded[t]
            previous[swap] = logits.data.argmax(axis=1)[swap]

    return cross_entropy(concat(step_logits, axis=0), targets.reshape(-1), padded.reshape(-1))


StoryExample = Tuple[np.ndarray, List[List[int]]]


def forward_loss(
    model: INetModel,
    batch: Sequence[StoryExample],
    epoch: int,
    rng: np.random.Generator,
) -> Tensor:
    """Batch mean of per-story losses (features, encoded sentences per slot)."""
    if len(batch) == 0:
        raise DegenerateBatchError("empty batch")
    b_total = hidden_count(epoch, model.config) if model.variant.blinding else 0

    losses = []
    for index, (features, rows) in enumerate(batch):
        features = features if isinstance(features, Tensor) else Tensor(features)
        _check_features(model, features)
        if len(rows) != features.shape[0]:
            raise ShapeError(f"story {index}: {features.shape[0]} slots but {len(rows)} sentences")
        rows = _truncate(index, rows, model.config.max_len)
        mask = sample_mask(features.shape[0], b_total, rng) if model.variant.blinding else None
        f_tell = story_context(model, features, mask)
        losses.append(sentence_loss(model, f_tell, rows, rng))

    total = losses[0]
    for loss in losses[1:]:
        total = total + loss
    return total * (1.0 / len(losses))
