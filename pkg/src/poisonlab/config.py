"""Experiment configuration: strict parsing, canonicalization, fingerprints.

A config is a nested key-value document (JSON on disk).  Parsing is strict:
unknown keys and wrong shapes are errors, so a typo cannot silently fall back
to a default.  Every config canonicalizes to a sorted plain-dict tree whose
JSON encoding is hashed into a short fingerprint; two configs with the same
fingerprint describe the same experiment.  Seeds for individual pipeline
stages are derived elsewhere from the single master seed, so the fingerprint
plus the master seed pin the whole run.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
import hashlib
import json

from . import craft, datapipe, defense, models, victim

_ARCHS = ("mlp-small", "convnet-tiny")
_SOURCES = ("synthetic", "cifar", "folder")


@dataclass
class DataSection:
    """Dataset source and shape.

    ``synthetic`` renders the multi-view shape task; ``cifar`` reads a binary
    batch file; ``folder`` loads target variants from PPM files next to a
    synthetic or cifar base set.
    """

    source: str = "synthetic"
    classes: int = 4
    per_class: int = 125
    val_per_class: int = 40
    image_size: int = 18
    channels: int = 3
    target_class: int = 0
    adversarial_class: int | None = None
    variant_count: int = 40
    known_count: int = 10
    known_mode: str = "interleaved"
    contiguous_start: int = 0
    noise: float = 0.10
    path: str | None = None          # cifar binary, when source == "cifar"
    variant_folder: str | None = None
    variant_label: int | None = None

    def __post_init__(self):
        if self.source not in _SOURCES:
            raise ValueError(f"data.source must be one of {_SOURCES}")
        if self.classes < 2:
            raise ValueError("data.classes must be at least 2")
        if self.per_class < 1 or self.val_per_class < 1:
            raise ValueError("data.per_class and data.val_per_class must be positive")
        if self.image_size < 6:
            raise ValueError("data.image_size must be at least 6")
        if not (0 <= self.target_class < self.classes):
            raise ValueError("data.target_class out of range")
        if self.adversarial_class is not None:
            if not (0 <= self.adversarial_class < self.classes):
                raise ValueError("data.adversarial_class out of range")
            if self.adversarial_class == self.target_class:
                raise ValueError("data.adversarial_class equals data.target_class")
        if not (1 <= self.known_count < self.variant_count):
            raise ValueError("need 1 <= data.known_count < data.variant_count")
        if self.known_mode not in ("interleaved", "contiguous"):
            raise ValueError("data.known_mode must be interleaved or contiguous")
        if not (0.0 <= self.noise <= 0.45):
            raise ValueError("data.noise must be in [0, 0.45]")
        if self.source == "cifar" and not self.path:
            raise ValueError("data.path is required when data.source is cifar")
        if self.source == "folder" and not self.variant_folder:
            raise ValueError("data.variant_folder is required when data.source is folder")


@dataclass
class ModelSection:
    arch: str = "convnet-tiny"

    def __post_init__(self):
        if self.arch not in _ARCHS:
            raise ValueError(f"model.arch must be one of {_ARCHS}")


@dataclass
class AugmentSection:
    """Crop-and-flip policy; disabled in the reference recipe.

    At this scale the victim generalizes a five-row instance carve-out only
    when it sees the rows verbatim each epoch, so the reference experiments
    train without augmentation and the switch exists for ablations.
    """

    enabled: bool = False
    flip_prob: float = 0.5
    pad: int = 4

    def policy(self) -> datapipe.AugmentPolicy:
        return datapipe.AugmentPolicy(enabled=self.enabled,
                                      flip_prob=self.flip_prob, pad=self.pad)


@dataclass
class TrainSection:
    epochs: int = 30
    batch: int = 64
    lr: float = 0.02
    drop_epochs: tuple = (18, 25)
    drop_factor: float = 0.1
    momentum: float = 0.9
    augment: AugmentSection = field(default_factory=AugmentSection)

    def __post_init__(self):
        self.drop_epochs = tuple(self.drop_epochs)
        self.recipe(seed=0)  # defer to the training config's own validation

    def recipe(self, seed: int) -> victim.TrainConfig:
        return victim.TrainConfig(
            epochs=self.epochs, batch=self.batch, lr=self.lr,
            drop_epochs=tuple(self.drop_epochs), drop_factor=self.drop_factor,
            momentum=self.momentum, augment=self.augment.policy(), seed=seed)


@dataclass
class CraftSection:
    enabled: bool = True
    loss: str = "mul"
    steps: int = 100
    retrain_count: int = 2
    eps: float = 16.0
    budget: float = 0.01
    step_size: float | None = None
    signed: bool = True
    selection: str = "adv-class"
    retrain_mode: str = "continue"
    retrain_epoch_frac: float = 0.25
    retrain_lr: float | None = None
    augment: AugmentSection = field(default_factory=AugmentSection)

    def __post_init__(self):
        self.config(seed=0)  # defer to the craft config's own validation

    def config(self, seed: int) -> craft.CraftConfig:
        return craft.CraftConfig(
            loss=self.loss, steps=self.steps, retrain_count=self.retrain_count,
            eps=self.eps, budget=self.budget, step_size=self.step_size,
            signed=self.signed, selection=self.selection,
            retrain_mode=self.retrain_mode,
            retrain_epoch_frac=self.retrain_epoch_frac,
            retrain_lr=self.retrain_lr, augment=self.augment.policy(),
            seed=seed)


@dataclass
class DefenseSection:
    kind: str = "none"
    sigma: float = 0.8
    radius: int = 2
    bits: int = 3

    def __post_init__(self):
        self.policy()  # defer to the policy's own validation

    def policy(self) -> defense.DefensePolicy:
        return defense.DefensePolicy(kind=self.kind, sigma=self.sigma,
                                     radius=self.radius, bits=self.bits)


@dataclass
class ExperimentConfig:
    """Top-level experiment description; see module docstring."""

    name: str = "experiment"
    data: DataSection = field(default_factory=DataSection)
    surrogate: ModelSection = field(default_factory=ModelSection)
    victim: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    craft: CraftSection = field(default_factory=CraftSection)
    defense: DefenseSection = field(default_factory=DefenseSection)
    repeats: int = 1
    out_dir: str = "runs"
    seed: int = 0

    def __post_init__(self):
        if self.repeats < 1:
            raise ValueError("repeats must be at least 1")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")
        if not self.name:
            raise ValueError("name must be non-empty")

    @property
    def transfer(self) -> bool:
        """True when the surrogate and victim architectures differ."""
        return self.surrogate.arch != self.victim.arch

    def surrogate_spec(self, seed: int) -> models.ModelSpec:
        shape = (self.data.image_size, self.data.image_size, self.data.channels)
        return models.ModelSpec(self.surrogate.arch, shape, self.data.classes,
                                seed=seed)

    def victim_spec(self, seed: int) -> models.ModelSpec:
        shape = (self.data.image_size, self.data.image_size, self.data.channels)
        return models.ModelSpec(self.victim.arch, shape, self.data.classes,
                                seed=seed)


_SECTION_TYPES = {
    "data": DataSection,
    "surrogate": ModelSection,
    "victim": ModelSection,
    "train": TrainSection,
    "craft": CraftSection,
    "defense": DefenseSection,
    "augment": AugmentSection,
}


def _build(cls, raw: dict, where: str):
    if not isinstance(raw, dict):
        raise ValueError(f"{where}: expected a mapping, got {type(raw).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(raw) - set(known))
    if unknown:
        raise ValueError(f"{where}: unknown keys {unknown}")
    kwargs = {}
    for key, value in raw.items():
        spot = f"{where}.{key}" if where else key
        f = known[key]
        if f.name in _SECTION_TYPES:
            kwargs[key] = _build(_SECTION_TYPES[f.name], value, spot)
        elif isinstance(value, list):
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ValueError(f"{where or 'config'}: {exc}") from exc


def from_dict(raw: dict) -> ExperimentConfig:
    """Strictly parse a plain dict; unknown keys raise ValueError."""
    return _build(ExperimentConfig, raw, "")


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: not valid JSON ({exc})") from exc
    return from_dict(raw)


def _plainify(value):
    if dataclasses.is_dataclass(value) and not isinstance(value, type):
        return {f.name: _plainify(getattr(value, f.name))
                for f in fields(value)}
    if isinstance(value, tuple):
        return [_plainify(v) for v in value]
    if isinstance(value, (list, dict)):
        raise TypeError("config fields hold scalars, tuples or sections only")
    return value


def canonical_dict(cfg: ExperimentConfig) -> dict:
    """Plain nested dict with every field present, ready for JSON."""
    return _plainify(cfg)


def canonical_json(cfg: ExperimentConfig) -> str:
    return json.dumps(canonical_dict(cfg), sort_keys=True,
                      separators=(",", ":"))


def fingerprint(cfg: ExperimentConfig) -> str:
    """Short stable hash of the canonicalized config (seed included)."""
    digest = hashlib.sha256(canonical_json(cfg).encode("utf-8")).hexdigest()
    return digest[:16]


def save_config(cfg: ExperimentConfig, path) -> None:
    with open(path, "w") as fh:
        json.dump(canonical_dict(cfg), fh, indent=2, sort_keys=True)
        fh.write("\n")
