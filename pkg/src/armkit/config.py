"""JSON configuration: parsing, validation, canonical serialization and hashing.

Every section rejects unknown keys. Invariant violations raise
:class:`ConfigError` naming the offending field(s).
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .arm import VARIANTS, ARMConfig
from .errors import ArmkitError, ConfigurationError
from .filter_bank import sample_bank
from .vit import ModelConfig


class ConfigError(ConfigurationError):
    def __init__(self, message: str, fields: tuple[str, ...] = ()):
        super().__init__(message)
        self.fields = fields


DEFAULT_BANK = {"seed": 0, "n": 8, "k": 3, "dog_count": None}


def _check_keys(section: str, data: dict, allowed) -> None:
    if not isinstance(data, dict):
        raise ConfigError(f"{section} must be a JSON object, got {type(data).__name__}", (section,))
    unknown = sorted(set(data) - set(allowed))
    if unknown:
        raise ConfigError(f"{section}: unknown key(s) {unknown}", tuple(f"{section}.{k}" for k in unknown))


def model_from_dict(data: dict) -> ModelConfig:
    names = [f.name for f in dataclasses.fields(ModelConfig)]
    _check_keys("model", data, names)
    try:
        return ModelConfig(**data)
    except ConfigurationError as exc:
        raise ConfigError(f"model: {exc}", _fields_in(str(exc), names, "model")) from exc
    except TypeError as exc:
        raise ConfigError(f"model: {exc}", ("model",)) from exc


def _fields_in(message: str, names, section: str) -> tuple[str, ...]:
    return tuple(f"{section}.{n}" for n in names if n in message)


def arm_from_dict(data: dict) -> ARMConfig:
    _check_keys("arm", data, ["variant", "k", "use_external_modulation", "bank"])
    variant = data.get("variant", "bank")
    if variant not in VARIANTS:
        raise ConfigError(f"arm.variant must be one of {VARIANTS}, got {variant!r}", ("arm.variant",))
    use_mod = bool(data.get("use_external_modulation", True))
    if variant != "bank":
        if "bank" in data:
            raise ConfigError("arm.bank is only valid with arm.variant == 'bank'", ("arm.bank", "arm.variant"))
        try:
            return ARMConfig(variant, None, int(data.get("k", 3)), use_mod)
        except ConfigurationError as exc:
            raise ConfigError(f"arm: {exc}", ("arm.k",)) from exc
    bank = dict(DEFAULT_BANK)
    bank_section = data.get("bank", {})
    _check_keys("arm.bank", bank_section, DEFAULT_BANK)
    bank.update(bank_section)
    if "k" in data and "k" in bank_section and int(data["k"]) != int(bank["k"]):
        raise ConfigError("arm.k and arm.bank.k disagree", ("arm.k", "arm.bank.k"))
    if "k" in data and "k" not in bank_section:
        bank["k"] = int(data["k"])
    try:
        fb = sample_bank(int(bank["seed"]), int(bank["n"]), int(bank["k"]), bank["dog_count"])
        return ARMConfig("bank", fb, fb.k, use_mod)
    except ConfigurationError as exc:
        raise ConfigError(f"arm.bank: {exc}", ("arm.bank",)) from exc


def arm_to_dict(arm: ARMConfig | None) -> dict | None:
    if arm is None:
        return None
    out: dict[str, Any] = {"variant": arm.variant, "k": arm.k, "use_external_modulation": arm.use_external_modulation}
    if arm.bank is not None:
        if arm.bank.seed is None:
            raise ArmkitError("only seeded banks can be serialized into a config")
        out["bank"] = {
            "seed": arm.bank.seed,
            "n": arm.bank.n,
            "k": arm.bank.k,
            "dog_count": arm.bank.composition["dog"],
        }
        if sample_bank(arm.bank.seed, arm.bank.n, arm.bank.k, arm.bank.composition["dog"]).stack().tobytes() != \
                arm.bank.stack().tobytes():
            raise ArmkitError("bank does not match the one regenerated from its seed")
    return out


@dataclass(frozen=True)
class DatasetSpec:
    kind: str = "texture"
    seed: int = 0
    count: int = 512
    size: int = 48
    classes: int = 2
    test_fraction: float = 0.25
    path: str | None = None

    def __post_init__(self):
        if self.kind not in ("texture", "folder"):
            raise ConfigError(f"dataset.kind must be 'texture' or 'folder', got {self.kind!r}", ("dataset.kind",))
        if self.kind == "folder" and not self.path:
            raise ConfigError("dataset.path is required when dataset.kind == 'folder'", ("dataset.path", "dataset.kind"))
        if self.size < 16:
            raise ConfigError(f"dataset.size must be >= 16, got {self.size}", ("dataset.size",))
        if self.count < 2 * self.classes:
            raise ConfigError(f"dataset.count must be >= 2 * classes, got {self.count}", ("dataset.count",))
        if not 0 < self.test_fraction < 1:
            raise ConfigError("dataset.test_fraction must lie in (0, 1)", ("dataset.test_fraction",))


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    seeds: tuple[int, ...] = (0,)
    epochs: int = 10
    batch_size: int = 32
    lr: float = 3e-4
    weight_decay: float = 0.05
    optimizer: str = "adamw"
    model: ModelConfig = field(default_factory=ModelConfig)
    arm: ARMConfig | None = None

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if not self.seeds:
            raise ConfigError("seeds must contain at least one seed", ("seeds",))
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}", ("epochs",))
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}", ("batch_size",))
        if self.optimizer not in ("adamw", "sgd"):
            raise ConfigError(f"optimizer must be 'adamw' or 'sgd', got {self.optimizer!r}", ("optimizer",))
        if (self.arm is None) != (self.model.arm_placement == "none"):
            raise ConfigError(
                "model.arm_placement and arm disagree: an arm section is required exactly when placement != 'none'",
                ("model.arm_placement", "arm"),
            )
        if self.dataset.size != self.model.image_size:
            raise ConfigError(
                f"dataset.size ({self.dataset.size}) != model.image_size ({self.model.image_size})",
                ("dataset.size", "model.image_size"),
            )
        if self.dataset.classes != self.model.num_classes:
            raise ConfigError("dataset.classes != model.num_classes", ("dataset.classes", "model.num_classes"))

    def to_dict(self) -> dict:
        return {
            "dataset": dataclasses.asdict(self.dataset),
            "seeds": list(self.seeds),
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "lr": self.lr,
            "weight_decay": self.weight_decay,
            "optimizer": self.optimizer,
            "model": self.model.to_dict(),
            "arm": arm_to_dict(self.arm),
        }

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def with_arm(self, placement: str, stages=None, arm: ARMConfig | None = None) -> "ExperimentConfig":
        """Same experiment with a different ARM placement / stage subset."""
        stages = self.model.arm_stages if stages is None else frozenset(stages)
        if placement == "none":
            model = dataclasses.replace(self.model, arm_placement="none", arm_stages=frozenset())
            return dataclasses.replace(self, model=model, arm=None)
        model = dataclasses.replace(self.model, arm_placement=placement, arm_stages=frozenset(stages))
        return dataclasses.replace(self, model=model, arm=arm or self.arm or ARMConfig.with_bank())


EXPERIMENT_KEYS = [f.name for f in dataclasses.fields(ExperimentConfig)]


def experiment_from_dict(data: dict) -> ExperimentConfig:
    _check_keys("experiment", data, EXPERIMENT_KEYS)
    kwargs: dict[str, Any] = {k: v for k, v in data.items() if k not in ("dataset", "model", "arm")}
    model_data = dict(data.get("model", {}))
    model = model_from_dict(model_data)
    dataset_data = dict(data.get("dataset", {}))
    _check_keys("dataset", dataset_data, [f.name for f in dataclasses.fields(DatasetSpec)])
    dataset_data.setdefault("size", model.image_size)
    dataset_data.setdefault("classes", model.num_classes)
    try:
        dataset = DatasetSpec(**dataset_data)
    except TypeError as exc:
        raise ConfigError(f"dataset: {exc}", ("dataset",)) from exc
    arm_data = data.get("arm")
    if arm_data is None and model.arm_placement != "none":
        arm_data = {}
    arm = arm_from_dict(arm_data) if arm_data is not None else None
    try:
        return ExperimentConfig(dataset=dataset, model=model, arm=arm, **kwargs)
    except TypeError as exc:
        raise ConfigError(f"experiment: {exc}", ("experiment",)) from exc


def load_json(source: str | Path) -> Any:
    """Read JSON from a path or an inline JSON string."""
    text = None
    if isinstance(source, Path) or not str(source).lstrip().startswith(("{", "[")):
        path = Path(source)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}", ("config",))
        text, where = path.read_text(), str(path)
    else:
        text, where = str(source), "<inline>"
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON in {where} at line {exc.lineno}, column {exc.colno}: {exc.msg}",
                          ("config",)) from exc


def parse_config(source, kind: str = "experiment"):
    """Parse an experiment (default), ``model`` or ``arm`` config from a path or inline JSON."""
    data = load_json(source)
    if kind == "experiment":
        return experiment_from_dict(data)
    if kind == "model":
        return model_from_dict(data)
    if kind == "arm":
        return arm_from_dict(data)
    raise ValueError(f"unknown config kind {kind!r}")


def canonical_json(data: Any) -> str:
    return json.dumps(data, sort_keys=True, separators=(",", ":"))


def config_hash(config) -> str:
    data = config.to_dict() if hasattr(config, "to_dict") else config
    return hashlib.sha256(canonical_json(data).encode()).hexdigest()[:16]


__all__ = [
    "ConfigError", "DatasetSpec", "ExperimentConfig", "arm_from_dict", "arm_to_dict", "canonical_json",
    "config_hash", "experiment_from_dict", "load_json", "model_from_dict", "parse_config",
]
