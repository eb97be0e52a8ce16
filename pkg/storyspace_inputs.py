"""
Storyspace - Configuration Schemas

Every knob of a run lives in one of these pydantic models:
- INetConfig: network shape, ablation variant and curriculum
- TrainConfig: optimizer, schedule, seeding and checkpoint cadence
- SyntheticSpec: the deterministic-chain photo-stream generator
- EvaluationOptions: decoding and scoring switches
- RunConfig: the flat, merged view the command line works with

Config files are plain `key = value` text (read with python-dotenv);
command-line flags override file values.
"""

from pathlib import Path
from typing import Any, Dict, List, Literal, Optional

from dotenv import dotenv_values
from pydantic import BaseModel, Field, field_validator, model_validator


class ConfigError(ValueError):
    """Raised when a configuration value is unknown or inconsistent."""


def _normalise_ablation(value: Any) -> Any:
    if isinstance(value, str):
        value = value.strip().lower().replace("-", "_")
        from storyspace_variants import ABLATION_VARIANTS
        if value not in ABLATION_VARIANTS:
            raise ValueError(
                f"unknown ablation '{value}' (choose from {', '.join(ABLATION_VARIANTS)})"
            )
    return value


# ============================================================================
# MODEL
# ============================================================================

class INetConfig(BaseModel):
    """
    Shape and behaviour of the imagine-and-tell network.

    hidden, inner_dim and decoder_hidden are derived from feature_dim when
    left unset: H = D/2 (so the reminding addition is well formed),
    d_inner = D/2, H_dec = D.
    """

    n_slots: int = Field(5, ge=1, description="Photo slots per story (N)")
    feature_dim: int = Field(16, ge=2, description="Feature width (D)")
    hidden: Optional[int] = Field(None, ge=1, description="GRU hidden width (H), 2H == D")
    inner_dim: Optional[int] = Field(None, ge=1, description="Non-local inner width")
    decoder_hidden: Optional[int] = Field(None, ge=1, description="Decoder GRU width")
    vocab_size: int = Field(..., ge=4, description="Vocabulary size incl. reserved ids")
    max_len: int = Field(20, ge=1, description="Max sentence length (T_max)")
    ablation: str = Field("full", description="full | no_blinding | no_nonlocal | no_telling")
    alpha: int = Field(50, ge=0, description="Epoch where one slot starts being hidden")
    beta: int = Field(80, ge=0, description="Epoch where two slots start being hidden")
    curriculum: Literal["staged", "fixed"] = Field("staged", description="Hiding schedule")
    fixed_hidden: int = Field(0, ge=0, le=2, description="Hidden slots when curriculum=fixed")
    word_embedding: Optional[int] = Field(None, ge=1, description="Decoder word embedding width")
    scheduled_sampling: float = Field(0.0, ge=0.0, le=1.0, description="Prob. of feeding back predictions")

    @field_validator("ablation", mode="before")
    @classmethod
    def check_ablation(cls, value: Any) -> Any:
        return _normalise_ablation(value)

    @model_validator(mode="after")
    def derive_and_check(self) -> "INetConfig":
        if self.hidden is None:
            if self.feature_dim % 2:
                raise ValueError(f"feature_dim must be even to derive hidden (got {self.feature_dim})")
            self.hidden = self.feature_dim // 2
        if 2 * self.hidden != self.feature_dim:
            raise ValueError(
                f"2 * hidden must equal feature_dim for the reminding connection "
                f"(hidden={self.hidden}, feature_dim={self.feature_dim})"
            )
        if self.inner_dim is None:
            self.inner_dim = max(1, self.feature_dim // 2)
        if self.decoder_hidden is None:
            self.decoder_hidden = self.feature_dim
        if self.alpha > self.beta:
            raise ValueError(f"alpha ({self.alpha}) must not exceed beta ({self.beta})")
        return self


# ============================================================================
# TRAINING
# ============================================================================

class TrainConfig(BaseModel):
    """Optimizer and epoch-loop settings."""

    base_lr: float = Field(4e-4, gt=0.0, description="Learning rate before the first transition")
    alpha: int = Field(50, ge=0)
    beta: int = Field(80, ge=0)
    batch_size: int = Field(32, ge=1)
    epochs: int = Field(100, ge=1)
    seed: int = Field(0, ge=0)
    precision: Literal["f32", "f64"] = "f64"
    checkpoint_every: int = Field(10, ge=1, description="Save every k epochs (and at the end)")
    clip_norm: Optional[float] = Field(None, gt=0.0, description="Global gradient-norm clip")
    adam_beta1: float = Field(0.9, ge=0.0, lt=1.0)
    adam_beta2: float = Field(0.999, ge=0.0, lt=1.0)
    adam_eps: float = Field(1e-8, gt=0.0)

    @model_validator(mode="after")
    def check_schedule(self) -> "TrainConfig":
        if self.alpha > self.beta:
            raise ValueError(f"alpha ({self.alpha}) must not exceed beta ({self.beta})")
        return self


# ============================================================================
# SYNTHETIC DATA
# ============================================================================

class SyntheticSpec(BaseModel):
    """
    Deterministic-chain photo streams: slot i's topic is a fixed bijective
    function of slot i-1's, so a hidden slot is recoverable from either
    neighbour.
    """

    topics: int = Field(8, ge=1, description="Number of topics (K)")
    slots: int = Field(5, ge=2, description="Slots per story (N)")
    feature_dim: int = Field(16, ge=1, description="Feature width (D)")
    noise: float = Field(0.05, ge=0.0, description="Gaussian feature noise sigma")
    feature_scale: float = Field(2.0, gt=0.0, description="Norm of the topic direction")
    stories: int = Field(500, ge=1, description="Training stories")
    test_stories: int = Field(100, ge=0, description="Test stories")
    seed: int = Field(7, ge=0)

    @model_validator(mode="after")
    def check_projection(self) -> "SyntheticSpec":
        if self.topics > self.feature_dim:
            raise ValueError(
                f"topics ({self.topics}) exceed feature_dim ({self.feature_dim}); "
                "the topic projection would not be injective"
            )
        return self


# ============================================================================
# EVALUATION
# ============================================================================

class EvaluationOptions(BaseModel):
    beam: int = Field(3, ge=1)
    max_len: Optional[int] = Field(None, ge=1)
    hide_one_slot: bool = Field(False, description="Hide one seeded slot per story")
    seed: int = Field(0, ge=0)
    template_tokens: List[str] = Field(default_factory=list, description="Tokens ignored as content")
    smooth_bleu: bool = False
    length_normalize: bool = False


# ============================================================================
# RUN CONFIG (flat view used by the command line)
# ============================================================================

class RunConfig(BaseModel):
    """
    Everything a command needs, merged from the config file and flags.
    Dataset-derived sizes (slots, feature width, vocabulary) are filled in
    by the command once the corpus is read.
    """

    # shared
    seed: int = Field(0, ge=0)
    precision: Literal["f32", "f64"] = "f64"
    out: str = "outputs"

    # paths
    corpus: Optional[str] = None
    vocab: Optional[str] = None
    checkpoint: Optional[str] = None
    features: Optional[str] = None
    templates: Optional[str] = None

    # model
    hidden: Optional[int] = Field(None, ge=1)
    inner_dim: Optional[int] = Field(None, ge=1)
    decoder_hidden: Optional[int] = Field(None, ge=1)
    max_len: int = Field(20, ge=1)
    ablation: str = "full"
    curriculum: Literal["staged", "fixed"] = "staged"
    fixed_hidden: int = Field(0, ge=0, le=2)
    word_embedding: Optional[int] = Field(None, ge=1)
    scheduled_sampling: float = Field(0.0, ge=0.0, le=1.0)

    # training
    lr: float = Field(4e-4, gt=0.0)
    alpha: int = Field(50, ge=0)
    beta: int = Field(80, ge=0)
    batch_size: int = Field(32, ge=1)
    epochs: int = Field(100, ge=1)
    checkpoint_every: int = Field(10, ge=1)
    clip_norm: Optional[float] = Field(None, gt=0.0)
    min_count: int = Field(1, ge=1)

    # decoding / evaluation
    beam: int = Field(3, ge=1)
    length_normalize: bool = False
    smooth_bleu: bool = False

    # synthetic data
    topics: int = Field(8, ge=1)
    slots: int = Field(5, ge=2)
    stories: int = Field(500, ge=1)
    test_stories: int = Field(100, ge=0)
    feature_dim: int = Field(16, ge=1)
    noise: float = Field(0.05, ge=0.0)

    @field_validator("ablation", mode="before")
    @classmethod
    def check_ablation(cls, value: Any) -> Any:
        return _normalise_ablation(value)

    @model_validator(mode="after")
    def check_schedule(self) -> "RunConfig":
        if self.alpha > self.beta:
            raise ValueError(f"alpha ({self.alpha}) must not exceed beta ({self.beta})")
        return self

    def inet_config(self, n_slots: int, feature_dim: int, vocab_size: int) -> INetConfig:
        return INetConfig(
            n_slots=n_slots,
            feature_dim=feature_dim,
            hidden=self.hidden,
            inner_dim=self.inner_dim,
            decoder_hidden=self.decoder_hidden,
            vocab_size=vocab_size,
            max_len=self.max_len,
            ablation=self.ablation,
            alpha=self.alpha,
            beta=self.beta,
            curriculum=self.curriculum,
            fixed_hidden=self.fixed_hidden,
            word_embedding=self.word_embedding,
            scheduled_sampling=self.scheduled_sampling,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            base_lr=self.lr,
            alpha=self.alpha,
            beta=self.beta,
            batch_size=self.batch_size,
            epochs=self.epochs,
            seed=self.seed,
            precision=self.precision,
            checkpoint_every=self.checkpoint_every,
            clip_norm=self.clip_norm,
        )

    def synthetic_spec(self) -> SyntheticSpec:
        return SyntheticSpec(
            topics=self.topics,
            slots=self.slots,
            feature_dim=self.feature_dim,
            noise=self.noise,
            stories=self.stories,
            test_stories=self.test_stories,
            seed=self.seed,
        )

    def evaluation_options(self, template_tokens: List[str], hide_one_slot: bool) -> EvaluationOptions:
        return EvaluationOptions(
            beam=self.beam,
            max_len=self.max_len,
            hide_one_slot=hide_one_slot,
            seed=self.seed,
            template_tokens=template_tokens,
            smooth_bleu=self.smooth_bleu,
            length_normalize=self.length_normalize,
        )


# ============================================================================
# MERGING
# ============================================================================

def read_config_file(path: Optional[str]) -> Dict[str, str]:
    """Read a `key = value` file; blank values are dropped."""
    if not path:
        return {}
    if not Path(path).is_file():
        raise ConfigError(f"config file not found: {path}")
    values = dotenv_values(path)
    return {key.strip().lower().replace("-", "_"): value
            for key, value in values.items() if value not in (None, "")}


def prepare_config_with_defaults(file_values: Dict[str, Any], flag_values: Dict[str, Any]) -> Dict[str, Any]:
    """
    Merge config-file values and flags over the RunConfig defaults.
    Flags left unset (None) never shadow a file value.
    """
    unknown = sorted(set(file_values) - set(RunConfig.model_fields))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    flags = {key: value for key, value in flag_values.items()
             if value is not None and key in RunConfig.model_fields}
    return {**file_values, **flags}


def load_run_config(config_path: Optional[str], flag_values: Dict[str, Any]) -> RunConfig:
    merged = prepare_config_with_defaults(read_config_file(config_path), flag_values)
    return RunConfig(**merged)


def format_run_config(config: RunConfig) -> str:
    lines = []
    for key, value in config.model_dump().items():
        lines.append(f"{key} = {'' if value is None else value}")
    return "\n".join(lines)
