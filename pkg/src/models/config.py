"""
Typed configuration for stores, sequences, the model and training runs.

Every section is a frozen pydantic model with ``extra="forbid"`` so a typo in
an experiment file is a hard error rather than a silently ignored key.
"""
import copy
try:
    import tomllib
except ImportError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from src.utils.errors import ConfigError


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


# =========================================================
# MODEL
# =========================================================

class ConvEmbedderConfig(StrictModel):
    """Residual conv stack for raster exemplars."""
    widths: List[int] = Field(default_factory=lambda: [64, 128, 256])
    projection_out: Optional[int] = None  # None -> embed_dim


class ModelConfig(StrictModel):
    """Causal decoder over 2L+1 interleaved sample/label tokens."""
    layers: int = Field(12, ge=1)
    heads: int = Field(8, ge=1)
    embed_dim: int = Field(64, ge=1)
    label_vocab: Optional[int] = Field(None, ge=1)  # None -> resolved from the store
    pairs: int = Field(8, ge=1)
    embedder: Literal["conv-raster", "linear-vector"] = "linear-vector"
    exemplar_shape: Tuple[int, ...] = (32,)
    init_std: float = Field(0.02, gt=0)
    ln_eps: float = Field(1e-5, gt=0)
    conv: ConvEmbedderConfig = Field(default_factory=ConvEmbedderConfig)

    @property
    def token_count(self) -> int:
        return 2 * self.pairs + 1

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    def validate_for_init(self):
        """Checks that only matter once a model is actually built."""
        if self.embed_dim % self.heads:
            raise ConfigError(f"embed_dim {self.embed_dim} is not divisible by heads {self.heads}")
        if self.label_vocab is None:
            raise ConfigError("label_vocab is unresolved")
        if self.embedder == "linear-vector" and len(self.exemplar_shape) != 1:
            raise ConfigError(f"linear-vector embedder needs a 1-D exemplar shape, got {self.exemplar_shape}")
        if self.embedder == "conv-raster":
            if len(self.exemplar_shape) != 2:
                raise ConfigError(f"conv-raster embedder needs an H x W exemplar shape, got {self.exemplar_shape}")
            if self.conv.projection_out not in (None, self.embed_dim):
                raise ConfigError("conv projection_out must equal embed_dim")


# =========================================================
# DATA
# =========================================================

class SyntheticSpec(StrictModel):
    """Desk-scale stand-in for a handwritten-character dataset."""
    n_classes: int = 1600 + 23
    n_exemplars: int = 20
    kind: Literal["gaussian-prototype", "procedural-glyph"] = "gaussian-prototype"
    vector_dim: int = 32
    raster_size: Tuple[int, int] = (28, 28)
    noise: float = 0.1
    seed: int = 7


class ZipfSpec(StrictModel):
    coefficient: float = Field(0.0, ge=0)


class StoreConfig(StrictModel):
    """Where exemplars come from and how they are split and reshaped."""
    path: Optional[str] = None
    synthetic: Optional[SyntheticSpec] = None
    n_novel: int = Field(23, ge=0)
    split: Tuple[int, int] = (18, 2)
    split_seed: int = 42
    base_classes: Optional[int] = Field(None, ge=2)
    zipf: ZipfSpec = Field(default_factory=ZipfSpec)
    sample_budget: Optional[int] = Field(None, ge=1)
    budget_coefficient: float = Field(1.0, ge=0)
    instance_discrimination: bool = False

    @model_validator(mode="after")
    def _one_source(self):
        if (self.path is None) == (self.synthetic is None):
            raise ValueError("exactly one of store.path or store.synthetic must be set")
        return self


# =========================================================
# SEQUENCES
# =========================================================

class Recipe(StrictModel):
    """How in-context (bursty) training episodes are laid out."""
    variant: Literal["standard", "bursty"] = "bursty"
    query_class_reps: int = Field(3, ge=0)
    distractor_format: Optional[str] = None  # e.g. "3xQ-3xA-B-C"
    inst_copy: bool = False
    inst_copy_prob: float = Field(1.0, ge=0, le=1)

    @model_validator(mode="before")
    @classmethod
    def _standard_has_no_reps(cls, data: Any):
        if isinstance(data, dict) and data.get("variant") == "standard":
            data = dict(data)
            data.setdefault("query_class_reps", 0)
        return data

    @model_validator(mode="after")
    def _check(self):
        if self.variant == "standard" and self.query_class_reps != 0:
            raise ValueError("standard recipes have no query-class repetitions")
        if self.variant == "bursty" and self.query_class_reps < 1:
            raise ValueError("bursty recipes need at least one query-class repetition")
        if self.variant == "standard" and self.inst_copy:
            raise ValueError("inst_copy needs a bursty recipe")
        return self


# Swap rate for runs that enable label swapping.
DEFAULT_SWAP_RATE = 0.2


class TrainingMix(StrictModel):
    p_bursty: float = Field(0.9, ge=0, le=1)
    # off unless an experiment enables it, usually at DEFAULT_SWAP_RATE
    p_label_swap: float = Field(0.0, ge=0, le=1)
    batch_size: Optional[int] = Field(None, ge=1)  # None -> train.batch_size


class EvalTask(StrictModel):
    """k-way n-shot few-shot task over novel classes."""
    k_way: int = Field(ge=1)
    n_shot: int = Field(ge=1)

    @property
    def name(self) -> str:
        return f"icl-{self.k_way}w{self.n_shot}s"

    @classmethod
    def parse(cls, text: str) -> "EvalTask":
        """Accepts '2w4s', 'icl-2w4s' or 'icl:2:4'."""
        t = text.strip().lower()
        if t.startswith("icl:"):
            _, k, n = t.split(":")
            return cls(k_way=int(k), n_shot=int(n))
        t = t.removeprefix("icl-")
        try:
            k, n = t.rstrip("s").split("w")
            return cls(k_way=int(k), n_shot=int(n))
        except ValueError as exc:
            raise ConfigError(f"cannot parse eval task {text!r}") from exc


class EvalConfig(StrictModel):
    tasks: List[str] = Field(default_factory=lambda: ["2w4s", "4w2s"])
    suite_size: int = Field(10000, ge=1)
    suite_seed: int = 1234
    iwl: bool = True
    restrict_argmax: bool = True

    @property
    def eval_tasks(self) -> List[EvalTask]:
        return [EvalTask.parse(t) for t in self.tasks]


class ProbeConfig(StrictModel):
    every: int = Field(0, ge=0)  # 0 disables probing during training
    episodes: int = Field(256, ge=1)
    task: str = "2w4s"
    pre_softmax: bool = False
    all_image_mass: bool = False


# =========================================================
# TRAINING
# =========================================================

class TrainConfig(StrictModel):
    total_steps: int = Field(500_000, ge=1)
    warmup_steps: int = Field(15_000, ge=1)
    max_lr: float = Field(6e-4, gt=0)
    clip_norm: float = Field(1.0, gt=0)
    batch_size: int = Field(16, ge=1)
    eval_every: int = Field(5000, ge=1)
    seeds: List[int] = Field(default_factory=lambda: [0, 1, 2])
    adam_beta1: float = 0.9
    adam_beta2: float = 0.99
    adam_eps: float = 1e-8

    @model_validator(mode="after")
    def _check(self):
        if self.warmup_steps > self.total_steps:
            raise ValueError("warmup_steps exceeds total_steps")
        if not self.seeds:
            raise ValueError("at least one seed is required")
        return self


SWEEP_AXES = ("class-count", "swap-rate", "recipe", "zipf")


class SweepConfig(StrictModel):
    """Grid over named axes; one child run per grid point."""
    axes: Dict[str, List[Union[int, float, str]]]

    @model_validator(mode="after")
    def _check(self):
        unknown = set(self.axes) - set(SWEEP_AXES)
        if unknown:
            raise ValueError(f"unknown sweep axes {sorted(unknown)}; allowed: {SWEEP_AXES}")
        if any(not v for v in self.axes.values()):
            raise ValueError("sweep axes need at least one value")
        return self


class ExperimentConfig(StrictModel):
    """Fully resolved configuration of one experiment."""
    profile: Optional[str] = None
    name: str = "run"
    output_dir: str = "runs/run"
    store: StoreConfig
    model: ModelConfig = Field(default_factory=ModelConfig)
    recipe: Recipe = Field(default_factory=Recipe)
    mix: TrainingMix = Field(default_factory=TrainingMix)
    train: TrainConfig = Field(default_factory=TrainConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)
    probe: ProbeConfig = Field(default_factory=ProbeConfig)
    sweep: Optional[SweepConfig] = None

    @model_validator(mode="after")
    def _check(self):
        if self.mix.batch_size not in (None, self.train.batch_size):
            raise ValueError("mix.batch_size disagrees with train.batch_size")
        return self

    @property
    def batch_size(self) -> int:
        return self.train.batch_size


# =========================================================
# LOADING
# =========================================================

def deep_merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    """Recursively overlay override onto a copy of base."""
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def set_dotted(data: Dict[str, Any], dotted: str, value: Any) -> Dict[str, Any]:
    """Return a copy of data with 'a.b.c' set to value."""
    out = copy.deepcopy(data)
    node = out
    parts = dotted.split(".")
    for part in parts[:-1]:
        node = node.setdefault(part, {})
    node[parts[-1]] = value
    return out


def build_experiment(data: Dict[str, Any]) -> ExperimentConfig:
    """Resolve an optional named profile, then validate."""
    from src.data.profiles import get_profile_by_id

    name = data.get("profile")
    if name:
        profile = get_profile_by_id(name)
        if profile is None:
            raise ConfigError(f"unknown profile {name!r}")
        merged = deep_merge(profile.settings, data)
        # a file-level store path replaces the profile's synthetic store
        store = data.get("store", {})
        if "path" in store and "synthetic" not in store:
            merged["store"].pop("synthetic", None)
        data = merged
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(f"invalid experiment config:\n{exc}") from exc


def load_experiment_config(path: Optional[Union[str, Path]],
                           overrides: Optional[Dict[str, Any]] = None) -> ExperimentConfig:
    """
    Load a TOML experiment file.

    Args:
        path: TOML file, optionally naming a base ``profile``; None starts
            from an empty file, so the overrides must name a profile
        overrides: dotted-key overrides applied last

    Returns:
        Validated ExperimentConfig
    """
    data: Dict[str, Any] = {}
    if path is not None:
        try:
            with open(path, "rb") as fh:
                data = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    for key, value in (overrides or {}).items():
        data = set_dotted(data, key, value)
    return build_experiment(data)
