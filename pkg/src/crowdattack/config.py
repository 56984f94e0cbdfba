"""Configuration records for every stage of the pipeline.

All records are plain dataclasses. ``from_dict`` rejects unknown keys and
``validate`` raises :class:`ConfigError` before any work starts.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .errors import ConfigError


def _from_dict(cls, data: dict[str, Any] | None, section: str):
    data = dict(data or {})
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(unknown)}")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in data:
            continue
        value = data[f.name]
        sub = _NESTED.get((cls.__name__, f.name))
        if sub is not None and isinstance(value, dict):
            value = sub.from_dict(value, f"{section}.{f.name}")
        elif isinstance(value, list) and f.name in _TUPLE_FIELDS:
            value = tuple(value)
        kwargs[f.name] = value
    obj = cls(**kwargs)
    obj.validate()
    return obj


class _Record:
    @classmethod
    def from_dict(cls, data=None, section: str | None = None):
        return _from_dict(cls, data, section or cls.__name__)

    def to_dict(self) -> dict[str, Any]:
        return _plain(dataclasses.asdict(self))

    def validate(self) -> None:  # pragma: no cover - overridden
        pass


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ConfigError(msg)


@dataclass(frozen=True)
class LossWeights(_Record):
    """Weights and constants of the attack objective.

    ``beta``/``gamma``/``zeta``/``kappa`` weight the hinge, total-variation,
    frequency and attention terms. ``epsilon_num`` is the stability constant
    inside ``log(1 - s + eps)`` and is unrelated to the attack budget.
    """

    alpha_max: float = 10.0
    beta: float = 0.01
    gamma: float = 0.05
    zeta: float = 0.01
    kappa: float = 0.5
    eta_h: float = 0.5
    eta_p: float = 0.5
    c_sparse: float = 100.0
    tau_min: float = 0.3
    tau_max: float = 0.5
    nu: float = 0.2
    phi_prime: float = 0.5
    phi_zero: float = 0.01
    epsilon_num: float = 1e-8
    near_threshold_fraction: float = 0.8
    isolation_threshold: float = 0.7
    degenerate_floor: float = 1e-12

    def validate(self) -> None:
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            _require(isinstance(v, (int, float)) and not isinstance(v, bool),
                     f"loss weight {f.name} must be numeric, got {v!r}")
            _require(v >= 0, f"loss weight {f.name} must be nonnegative, got {v}")
        _require(self.tau_min <= self.tau_max, "tau_min must not exceed tau_max")
        _require(0 < self.tau_min and self.tau_max < 1, "thresholds must lie in (0, 1)")
        _require(0 < self.phi_prime <= 1, "phi_prime must lie in (0, 1]")
        _require(0 < self.phi_zero <= 1, "phi_zero must lie in (0, 1]")
        _require(self.epsilon_num > 0, "epsilon_num must be positive")
        _require(self.alpha_max >= 1.0, "alpha_max must be at least 1")
        _require(0 < self.near_threshold_fraction < 1, "near_threshold_fraction must lie in (0, 1)")


@dataclass(frozen=True)
class DataConfig(_Record):
    root: str = "data"
    num_train: int = 200
    num_test: int = 50
    height: int = 128
    width: int = 128
    min_count: int = 20
    max_count: int = 130
    blob_sigma: float = 2.0
    seed: int = 0

    def validate(self) -> None:
        _require(self.num_train >= 0 and self.num_test >= 0, "scene counts must be nonnegative")
        _require(self.height >= 32 and self.width >= 32, "image dimensions must be at least 32")
        _require(0 <= self.min_count <= self.max_count, "need 0 <= min_count <= max_count")
        _require(self.blob_sigma > 0, "blob_sigma must be positive")


@dataclass(frozen=True)
class SurrogateConfig(_Record):
    paradigm: str = "density_map"
    widths: tuple[int, ...] = (16, 32, 32, 64)
    epochs: int = 30
    batch_size: int = 8
    lr: float = 1e-3
    kernel_sigma: float = 3.0
    seed: int = 0

    def validate(self) -> None:
        _require(self.paradigm in ("density_map", "point_regression"),
                 f"paradigm must be density_map or point_regression, got {self.paradigm!r}")
        _require(len(self.widths) == 4 and all(int(w) > 0 for w in self.widths),
                 "surrogate widths must list 4 positive channel counts")
        _require(self.epochs >= 1 and self.batch_size >= 1, "epochs and batch_size must be >= 1")
        _require(self.lr > 0 and self.kernel_sigma > 0, "lr and kernel_sigma must be positive")


@dataclass(frozen=True)
class GeneratorConfig(_Record):
    epsilon: float = 8 / 255
    widths: tuple[int, ...] = (16, 32, 64)
    norm: str = "group"
    seed: int = 0

    def validate(self) -> None:
        _require(0 < self.epsilon <= 1, "epsilon must lie in (0, 1]")
        _require(len(self.widths) == 3 and all(int(w) > 0 for w in self.widths),
                 "generator widths must list 3 positive channel counts")
        _require(self.norm in ("group", "batch", "none"), "norm must be group, batch or none")


@dataclass(frozen=True)
class TrainConfig(_Record):
    epochs: int = 30
    lr: float = 1e-4
    batch_size: int = 4
    seed: int = 0
    sign_convention: str = "descent"
    checkpoint_every: int = 5
    surrogate: str = ""
    weights: LossWeights = field(default_factory=LossWeights)

    def validate(self) -> None:
        _require(self.epochs >= 1, "epochs must be >= 1")
        _require(self.lr > 0, "lr must be positive")
        _require(self.batch_size >= 1, "batch_size must be >= 1")
        _require(self.sign_convention in ("descent", "verbatim"),
                 "sign_convention must be 'descent' or 'verbatim'")
        _require(self.checkpoint_every >= 1, "checkpoint_every must be >= 1")
        if isinstance(self.weights, LossWeights):
            self.weights.validate()


@dataclass(frozen=True)
class EvalConfig(_Record):
    score_threshold: float = 0.5
    psnr_cap: float = 100.0
    mae_reference: str = "clean"
    visualize: int = 4
    plots: bool = True

    def validate(self) -> None:
        _require(0 < self.score_threshold < 1, "score_threshold must lie in (0, 1)")
        _require(self.mae_reference in ("clean", "ground_truth"),
                 "mae_reference must be 'clean' or 'ground_truth'")
        _require(self.visualize >= 0, "visualize must be >= 0")


@dataclass(frozen=True)
class AttackConfig(_Record):
    """Which generator to apply and to which model/split (attack, evaluate)."""

    generator: str = ""
    target: str = ""
    split: str = "test"

    def validate(self) -> None:
        _require(self.split in ("train", "test"), "split must be train or test")


@dataclass(frozen=True)
class TransferConfig(_Record):
    """Named surrogate checkpoints and the generator trained against each.

    ``models`` maps a model name to a surrogate checkpoint; ``generators``
    maps a subset of those names to the generator trained against it.
    """

    models: dict = field(default_factory=dict)
    generators: dict = field(default_factory=dict)
    split: str = "test"

    def validate(self) -> None:
        _require(isinstance(self.models, dict) and isinstance(self.generators, dict),
                 "transfer.models and transfer.generators must be mappings")
        missing = sorted(set(self.generators) - set(self.models))
        _require(not missing, f"transfer.generators names without a model: {missing}")
        _require(self.split in ("train", "test"), "split must be train or test")


@dataclass(frozen=True)
class RunConfig(_Record):
    """Whole-run configuration, one section per pipeline stage."""

    output: str = ""
    data: DataConfig = field(default_factory=DataConfig)
    surrogate: SurrogateConfig = field(default_factory=SurrogateConfig)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    attack: AttackConfig = field(default_factory=lambda: AttackConfig())
    transfer: TransferConfig = field(default_factory=lambda: TransferConfig())

    def validate(self) -> None:
        for name in ("data", "surrogate", "generator", "train", "eval", "attack", "transfer"):
            getattr(self, name).validate()

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


_NESTED = {
    ("TrainConfig", "weights"): LossWeights,
    ("RunConfig", "data"): DataConfig,
    ("RunConfig", "surrogate"): SurrogateConfig,
    ("RunConfig", "generator"): GeneratorConfig,
    ("RunConfig", "train"): TrainConfig,
    ("RunConfig", "eval"): EvalConfig,
    ("RunConfig", "attack"): AttackConfig,
    ("RunConfig", "transfer"): TransferConfig,
}
_TUPLE_FIELDS = {"widths"}


def _parse_scalar(text: str):
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError:
        return text


def apply_overrides(data: dict[str, Any], overrides: list[str]) -> dict[str, Any]:
    """Apply ``section.key=value`` overrides to a nested config mapping."""
    data = json.loads(json.dumps(data))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        key, raw = item.split("=", 1)
        parts = [p for p in key.strip().split(".") if p]
        if not parts:
            raise ConfigError(f"empty override key in {item!r}")
        node = data
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a scalar")
        node[parts[-1]] = _parse_scalar(raw)
    return data


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> RunConfig:
    data: dict[str, Any] = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            data = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"config {path} must be a mapping of sections")
    if overrides:
        data = apply_overrides(data, overrides)
    try:
        return RunConfig.from_dict(data, "config")
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
