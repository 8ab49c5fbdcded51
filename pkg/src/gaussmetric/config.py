"""Training configuration and the on-disk run description.

A run is described by one JSON document holding the model architecture,
the Gaussian targets, the optimizer settings, the dataset path, and the
output directory. Parsing is strict: unknown keys are rejected so a typo
cannot silently fall back to a default.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError
from .model import ModelConfig
from .targets import TargetSpec


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer and loop settings.

    Adam moments/epsilon follow the standard defaults; weight decay is
    decoupled and touches weight matrices only. The learning rate decays
    as lr0 * decay_factor^floor(epoch / decay_every).

    ``identities_per_epoch`` identities are sampled per epoch (those with
    fewer than ``min_images`` images are excluded with a warning), and the
    candidate pair stream is capped at ``candidates_per_epoch`` to keep a
    full cross-product enumeration from dominating the step time.
    ``livelock_limit`` consecutive failed batch fills stop the run.
    """

    b: int = 20
    max_iterations: int = 2000
    lr0: float = 0.01
    decay_factor: float = 0.98
    decay_every: int = 5
    weight_decay: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    identities_per_epoch: int = 50
    min_images: int = 2
    candidates_per_epoch: int = 20000
    livelock_limit: int = 50
    checkpoint_every: int = 500
    allow_unequal_sigma: bool = False

    def __post_init__(self):
        if self.b < 4 or self.b % 2 != 0:
            # b/2 per class, and batch statistics need >= 2 samples a side
            raise ConfigError(f"b must be even and >= 4, got {self.b}")
        if self.max_iterations < 0:
            raise ConfigError(f"max_iterations must be >= 0, got {self.max_iterations}")
        if not self.lr0 > 0.0:
            raise ConfigError(f"lr0 must be positive, got {self.lr0}")
        if not (0.0 < self.decay_factor <= 1.0):
            raise ConfigError(f"decay_factor must be in (0, 1], got {self.decay_factor}")
        if self.decay_every < 1:
            raise ConfigError(f"decay_every must be >= 1, got {self.decay_every}")
        if self.weight_decay < 0.0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if not (0.0 <= self.beta1 < 1.0) or not (0.0 <= self.beta2 < 1.0):
            raise ConfigError(
                f"adam moments must be in [0, 1), got {self.beta1}, {self.beta2}"
            )
        if not self.eps > 0.0:
            raise ConfigError(f"eps must be positive, got {self.eps}")
        if self.identities_per_epoch < 1:
            raise ConfigError(
                f"identities_per_epoch must be >= 1, got {self.identities_per_epoch}"
            )
        if self.min_images < 2:
            # a matching pair needs two distinct images
            raise ConfigError(f"min_images must be >= 2, got {self.min_images}")
        if self.candidates_per_epoch < 1:
            raise ConfigError(
                f"candidates_per_epoch must be >= 1, got {self.candidates_per_epoch}"
            )
        if self.livelock_limit < 1:
            raise ConfigError(f"livelock_limit must be >= 1, got {self.livelock_limit}")
        if self.checkpoint_every < 1:
            raise ConfigError(
                f"checkpoint_every must be >= 1, got {self.checkpoint_every}"
            )

    def lr_at(self, epoch: int) -> float:
        """Step-function schedule: lr0 * decay_factor^floor(epoch/decay_every)."""
        if epoch < 0:
            raise ConfigError(f"epoch must be >= 0, got {epoch}")
        return self.lr0 * self.decay_factor ** (epoch // self.decay_every)


@dataclass(frozen=True)
class RunConfig:
    """Everything one training run needs, as a single document."""

    model: ModelConfig
    targets: TargetSpec
    train: TrainConfig
    dataset_path: str
    output_dir: str


_SECTIONS = {
    "model": ModelConfig,
    "targets": TargetSpec,
    "train": TrainConfig,
}


def _build_section(cls, payload: dict, section: str):
    if not isinstance(payload, dict):
        raise ConfigError(f"section '{section}' must be an object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(payload) - known
    if unknown:
        raise ConfigError(
            f"unknown keys in '{section}': {', '.join(sorted(unknown))}"
        )
    fixed = dict(payload)
    if "feature_widths" in fixed and fixed["feature_widths"] is not None:
        fixed["feature_widths"] = tuple(fixed["feature_widths"])
    try:
        return cls(**fixed)
    except TypeError as exc:
        raise ConfigError(f"section '{section}': {exc}") from exc


def run_config_from_dict(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("run configuration must be a JSON object")
    required = set(_SECTIONS) | {"dataset_path", "output_dir"}
    unknown = set(doc) - required
    if unknown:
        raise ConfigError(f"unknown top-level keys: {', '.join(sorted(unknown))}")
    missing = required - set(doc)
    if missing:
        raise ConfigError(f"missing top-level keys: {', '.join(sorted(missing))}")
    sections = {
        name: _build_section(cls, doc[name], name) for name, cls in _SECTIONS.items()
    }
    if not isinstance(doc["dataset_path"], str) or not isinstance(
        doc["output_dir"], str
    ):
        raise ConfigError("dataset_path and output_dir must be strings")
    return RunConfig(
        model=sections["model"],
        targets=sections["targets"],
        train=sections["train"],
        dataset_path=doc["dataset_path"],
        output_dir=doc["output_dir"],
    )


def run_config_to_dict(config: RunConfig) -> dict:
    doc = {
        name: dataclasses.asdict(getattr(config, name)) for name in _SECTIONS
    }
    doc["model"]["feature_widths"] = list(config.model.feature_widths)
    doc["dataset_path"] = config.dataset_path
    doc["output_dir"] = config.output_dir
    return doc


def sections_to_dict(
    model: ModelConfig, targets: TargetSpec, train: TrainConfig
) -> dict:
    """Serialize the three config sections (checkpoint metadata blob)."""
    doc = {
        "model": dataclasses.asdict(model),
        "targets": dataclasses.asdict(targets),
        "train": dataclasses.asdict(train),
    }
    doc["model"]["feature_widths"] = list(model.feature_widths)
    return doc


def sections_from_dict(doc: dict) -> tuple[ModelConfig, TargetSpec, TrainConfig]:
    if not isinstance(doc, dict) or set(doc) != set(_SECTIONS):
        raise ConfigError(
            f"expected exactly the sections {sorted(_SECTIONS)}, "
            f"got {sorted(doc) if isinstance(doc, dict) else type(doc).__name__}"
        )
    return tuple(
        _build_section(cls, doc[name], name) for name, cls in _SECTIONS.items()
    )


def load_run_config(path) -> RunConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"configuration file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    return run_config_from_dict(doc)


def save_run_config(config: RunConfig, path) -> None:
    Path(path).write_text(json.dumps(run_config_to_dict(config), indent=2) + "\n")
