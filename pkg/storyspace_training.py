"""
Storyspace - Training

Adam with bias correction, learning rate halved at each curriculum
transition, seeded epoch loop with checkpointing and divergence recovery.
"""

import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from storyspace_checkpoint import CheckpointRecord, load_checkpoint, save_checkpoint
from storyspace_data import StoryRecord, Vocabulary, encode
from storyspace_inputs import ConfigError, TrainConfig
from storyspace_layers import ModelParameters
from storyspace_model import INetModel, StoryExample, curriculum_level, forward_loss, hidden_count
from storyspace_tensor import (
    DegenerateBatchError,
    NonFiniteError,
    Tape,
    Tensor,
    get_precision,
    set_precision,
)


class DivergenceError(RuntimeError):
    """Raised when the loss stops being finite; the last good state has been saved."""


class NonFiniteGradientError(RuntimeError):
    """Raised before an optimizer step that would write non-finite values."""


# ============================================================================
# SCHEDULE
# ============================================================================

def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    """base_lr, halved at alpha and again at beta."""
    if epoch < 0:
        raise ValueError(f"epoch must be non-negative, got {epoch}")
    return cfg.base_lr * 0.5 ** curriculum_level(epoch, cfg.alpha, cfg.beta)


# ============================================================================
# ADAM
# ============================================================================

@dataclass
class AdamState:
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def create(cls, params: ModelParameters, cfg: Optional[TrainConfig] = None) -> "AdamState":
        cfg = cfg or TrainConfig()
        return cls(
            m={name: np.zeros_like(p.data) for name, p in params.items()},
            v={name: np.zeros_like(p.data) for name, p in params.items()},
            beta1=cfg.adam_beta1,
            beta2=cfg.adam_beta2,
            eps=cfg.adam_eps,
        )


def adam_step(state: AdamState, params: ModelParameters, grads: Dict[str, np.ndarray], lr: float) -> None:
    """
    In-place Adam update. A tensor whose gradient is identically zero is
    left untouched (moments included). Nothing is written if any gradient
    is non-finite.
    """
    for name, grad in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name}")
        if grad.shape != params[name].shape:
            raise ValueError(f"{name}: gradient shape {grad.shape} != parameter shape {params[name].shape}")
        if not np.isfinite(grad).all():
            bad = int((~np.isfinite(grad)).sum())
            raise NonFiniteGradientError(f"{bad} non-finite gradient values in {name} at step {state.t + 1}")

    state.t += 1
    correction1 = 1.0 - state.beta1 ** state.t
    correction2 = 1.0 - state.beta2 ** state.t
    for name, param in params.items():
        grad = grads.get(name)
        if grad is None or not grad.any():
            continue
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * grad
        v *= state.beta2
        v += (1.0 - state.beta2) * grad * grad
        m_hat = m / correction1
        v_hat = v / correction2
        param.data -= (lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(param.dtype, copy=False)


def clip_gradients(grads: Dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm; returns the norm before."""
    norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


# ============================================================================
# EPOCH LOOP
# ============================================================================

@dataclass
class EpochLog:
    epoch: int
    b_total: int
    lr: float
    loss: float
    steps: int


@dataclass
class TrainResult:
    model: INetModel
    history: List[EpochLog]
    step_losses: List[float] = field(default_factory=list)


def encode_corpus(records: Sequence[StoryRecord], vocab: Vocabulary) -> List[StoryExample]:
    return [(record.load_features(), [encode(vocab, s) for s in record.sentences]) for record in records]


def compute_gradients(
    model: INetModel,
    batch: Sequence[StoryExample],
    epoch: int,
    rng: np.random.Generator,
) -> Tuple[float, Dict[str, np.ndarray]]:
    with Tape() as tape:
        loss = forward_loss(model, batch, epoch, rng)
    tape.backward(loss)
    grads = {}
    for name, param in model.params.items():
        grad = tape.gradient(param)
        grads[name] = np.zeros_like(param.data) if grad is None else grad.data
    return loss.item(), grads


def training_record(
    model: INetModel,
    state: AdamState,
    rng: np.random.Generator,
    epoch: int,
    history: Sequence[EpochLog],
) -> CheckpointRecord:
    return CheckpointRecord(
        config=model.config,
        precision=get_precision(),
        params=model.params.arrays(),
        adam_m={name: m.copy() for name, m in state.m.items()},
        adam_v={name: v.copy() for name, v in state.v.items()},
        adam_t=state.t,
        adam_beta1=state.beta1,
        adam_beta2=state.beta2,
        adam_eps=state.eps,
        epoch=epoch,
        rng_state=rng.bit_generator.state,
        history=[asdict(log) for log in history],
    )


def model_from_checkpoint(record: CheckpointRecord) -> INetModel:
    """Rebuild the network from a checkpoint, switching to its precision."""
    set_precision(record.precision)
    params = ModelParameters()
    for name, values in record.params.items():
        params[name] = Tensor(values, requires_grad=True, name=name)
    return INetModel(record.config, params)


def load_model(path: Union[str, Path]) -> INetModel:
    return model_from_checkpoint(load_checkpoint(path))


def _log(message: str) -> None:
    print(message, file=sys.stderr)


def train(
    model: INetModel,
    examples: Sequence[StoryExample],
    cfg: TrainConfig,
    checkpoint_path: Optional[Union[str, Path]] = None,
    resume: Optional[CheckpointRecord] = None,
    verbose: bool = False,
) -> TrainResult:
    """
    Per epoch: shuffle with the seeded generator, hide slots per the
    curriculum, then forward / backward / Adam over minibatches at the
    scheduled learning rate. Checkpoints every `checkpoint_every` epochs
    and after the last one.
    """
    if not examples:
        raise DegenerateBatchError("cannot train on an empty corpus")
    if get_precision() != cfg.precision:
        raise ConfigError(f"run precision is {get_precision()} but the training config asks for {cfg.precision}")

    rng = np.random.default_rng(cfg.seed)
    state = AdamState.create(model.params, cfg)
    history: List[EpochLog] = []
    start = 0
    if resume is not None:
        model.params.load_arrays(resume.params)
        state = AdamState(
            m={name: values.copy() for name, values in resume.adam_m.items()},
            v={name: values.copy() for name, values in resume.adam_v.items()},
            t=resume.adam_t,
            beta1=resume.adam_beta1,
            beta2=resume.adam_beta2,
            eps=resume.adam_eps,
        )
        rng.bit_generator.state = resume.rng_state
        history = [EpochLog(**log) for log in resume.history]
        start = resume.epoch

    if verbose:
        _log("=" * 80)
        _log(f"TRAINING {model.variant.label}: {len(examples)} stories, epochs {start}..{cfg.epochs - 1}")
        _log("=" * 80)

    last_good = training_record(model, state, rng, start, history)
    step_losses: List[float] = []
    for epoch in range(start, cfg.epochs):
        b_total = hidden_count(epoch, model.config) if model.variant.blinding else 0
        lr = lr_schedule(epoch, cfg)
        order = rng.permutation(len(examples))
        losses = []
        for begin in range(0, len(examples), cfg.batch_size):
            batch = [examples[i] for i in order[begin:begin + cfg.batch_size]]
            try:
                loss, grads = compute_gradients(model, batch, epoch, rng)
                if not np.isfinite(loss):
                    raise NonFiniteError(f"loss became {loss}")
                if cfg.clip_norm is not None:
                    clip_gradients(grads, cfg.clip_norm)
                adam_step(state, model.params, grads, lr)
            except (NonFiniteError, NonFiniteGradientError) as e:
                where = "kept in memory"
                if checkpoint_path is not None:
                    save_checkpoint(last_good, checkpoint_path)
                    where = f"saved to {checkpoint_path}"
                raise DivergenceError(
                    f"diverged at epoch {epoch} step {len(losses)} ({e}); "
                    f"last good state (epoch {last_good.epoch}) {where}"
                ) from e
            losses.append(loss)
            step_losses.append(loss)

        log = EpochLog(epoch=epoch, b_total=b_total, lr=lr, loss=float(np.mean(losses)), steps=len(losses))
        history.append(log)
        completed = epoch + 1
        last_good = training_record(model, state, rng, completed, history)
        if checkpoint_path is not None and (completed % cfg.checkpoint_every == 0 or completed == cfg.epochs):
            save_checkpoint(last_good, checkpoint_path)
        if verbose:
            _log(f"  [{completed}/{cfg.epochs}] loss {log.loss:.4f}  hidden {b_total}  lr {lr:.1e}")

    if verbose:
        _log(f"✓ Training complete ({len(step_losses)} steps)")
    return TrainResult(model=model, history=history, step_losses=step_losses)
