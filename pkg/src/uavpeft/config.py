"""Flat ``key = value`` run configuration with typed fields.

Every field can be set in a config file, with ``--set key=value`` or with a
flag of the same name (``--lr 0.01``). Unknown keys are errors.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .augment import AugmentationPlan, AugmentationSpec
from .data import SynthConfig
from .dsp import FeatureConfig
from .models import CompactCnnConfig, SpecTransformerConfig
from .peft import FineTuneStrategy
from .train import OptimizerConfig, PlateauScheduler, TrainConfig

__all__ = ["ConfigError", "RunConfig", "load_config", "parse_value"]


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    manifest: str = ""
    out: str = ""
    feature_cache: str = ""
    # features
    sample_rate: int = 16000
    n_fft: int = 1024
    hop: int = 512
    n_mels: int = 64
    f_min: float = 0.0
    f_max: float = 8000.0
    log_offset: float = 1e-6
    # augmentation
    augs: int = 3
    stretch_min: float = 0.8
    stretch_max: float = 1.25
    distortion_min: float = 0.3
    distortion_max: float = 0.9
    # model
    model: str = "cnn"
    n_classes: int = 31
    input_frames: int = 157
    cnn_widths: tuple = (16, 32, 64)
    cnn_pool: str = "max"
    cnn_adaptive: int = 4
    cnn_hidden: int = 128
    dropout: float = 0.5
    tf_patch: int = 16
    tf_embed: int = 64
    tf_heads: int = 4
    tf_depth: int = 4
    tf_mlp_ratio: int = 4
    init_checkpoint: str = ""
    # fine-tuning
    strategy: str = "full"
    oft_blocks: int = 4
    ia3_query: bool = False
    # optimization
    optimizer: str = "auto"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    plateau_factor: float = 0.1
    plateau_patience: int = 3
    plateau_threshold: float = 1e-4
    min_lr: float = 1e-6
    batch_size: int = 8
    accumulation_steps: int = 2
    max_epochs: int = 50
    early_stop_patience: int = 10
    # cross validation
    folds: int = 5
    parallel_folds: int = 1
    # synthetic data
    synth_classes: int = 8
    synth_clips: int = 80
    synth_duration: float = 2.0
    synth_f0_base: float = 110.0
    synth_f0_step: float = 55.0
    synth_harmonics: int = 6
    synth_am_depth: float = 0.5
    synth_bp_min: float = 8.0
    synth_bp_max: float = 30.0
    synth_snr_min: float = 5.0
    synth_snr_max: float = 20.0

    # -- construction -----------------------------------------------------

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def update(self, key: str, raw: str) -> None:
        key = key.replace("-", "_")
        types = {f.name: f.type for f in fields(self)}
        if key not in types:
            raise ConfigError(f"unknown config key {key!r}")
        setattr(self, key, parse_value(types[key], raw, key))

    def dumps(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            elif isinstance(value, bool):
                value = str(value).lower()
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"

    # -- typed views ------------------------------------------------------

    def feature_config(self) -> FeatureConfig:
        return FeatureConfig(self.sample_rate, self.n_fft, self.hop, self.n_mels, self.f_min, self.f_max, self.log_offset)

    def augmentation_spec(self) -> AugmentationSpec:
        return AugmentationSpec((self.stretch_min, self.stretch_max), (self.distortion_min, self.distortion_max))

    def augmentation_plan(self) -> AugmentationPlan:
        return AugmentationPlan(self.augs, self.seed)

    def model_config(self, n_classes: int | None = None, input_frames: int | None = None):
        n_classes = n_classes or self.n_classes
        if self.model == "cnn":
            return CompactCnnConfig(
                block_widths=tuple(self.cnn_widths),
                pool_kind=self.cnn_pool,
                adaptive_pool_out=(self.cnn_adaptive, self.cnn_adaptive),
                hidden_fc=self.cnn_hidden,
                dropout_p=self.dropout,
                n_classes=n_classes,
            )
        if self.model == "transformer":
            return SpecTransformerConfig(
                n_mels=self.n_mels,
                input_frames=input_frames or self.input_frames,
                patch=self.tf_patch,
                embed_dim=self.tf_embed,
                heads=self.tf_heads,
                depth=self.tf_depth,
                mlp_ratio=self.tf_mlp_ratio,
                n_classes=n_classes,
            )
        raise ConfigError(f"model must be 'cnn' or 'transformer', got {self.model!r}")

    def strategy_config(self) -> FineTuneStrategy:
        return FineTuneStrategy.parse(self.strategy, oft_blocks=self.oft_blocks, ia3_query=self.ia3_query)

    def optimizer_config(self) -> OptimizerConfig:
        kind = self.optimizer
        if kind == "auto":
            kind = "adamw" if self.model == "transformer" else "adam"
        if kind not in ("adam", "adamw"):
            raise ConfigError(f"optimizer must be auto, adam or adamw, got {self.optimizer!r}")
        decay = self.weight_decay if kind == "adamw" else 0.0
        return OptimizerConfig(kind, self.lr, self.beta1, self.beta2, self.eps, decay)

    def scheduler(self) -> PlateauScheduler:
        return PlateauScheduler(
            lr=self.lr, factor=self.plateau_factor, patience=self.plateau_patience,
            threshold=self.plateau_threshold, min_lr=self.min_lr,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.batch_size, self.accumulation_steps, self.max_epochs, self.early_stop_patience, seed=self.seed)

    def synth_config(self) -> SynthConfig:
        return SynthConfig(
            n_classes=self.synth_classes,
            clips_per_class=self.synth_clips,
            duration=self.synth_duration,
            sample_rate=self.sample_rate,
            f0_base=self.synth_f0_base,
            f0_step=self.synth_f0_step,
            harmonics=self.synth_harmonics,
            am_depth=self.synth_am_depth,
            blade_pass_range=(self.synth_bp_min, self.synth_bp_max),
            snr_db_range=(self.synth_snr_min, self.synth_snr_max),
            seed=self.seed,
        )

    def validate(self) -> None:
        """Build every typed view once so bad values fail before any work starts."""
        try:
            self.feature_config()
            self.augmentation_spec()
            self.augmentation_plan()
            self.model_config()
            self.strategy_config()
            self.optimizer_config()
            if self.batch_size < 1 or self.accumulation_steps < 1 or self.max_epochs < 1:
                raise ValueError("batch_size, accumulation_steps and max_epochs must be >= 1")
            if self.folds < 2:
                raise ValueError("folds must be >= 2")
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc


def parse_value(kind, raw: str, key: str = "?"):
    raw = raw.strip()
    try:
        if kind in (bool, "bool"):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind in (int, "int"):
            return int(raw)
        if kind in (float, "float"):
            return float(raw)
        if kind in (tuple, "tuple"):
            return tuple(int(v) for v in raw.split(",") if v.strip())
        return raw
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot parse {raw!r} as {getattr(kind, '__name__', kind)}") from None


def load_config(path: str | Path | None = None, overrides: list[tuple[str, str]] = ()) -> RunConfig:
    cfg = RunConfig()
    if path:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, value = line.split("=", 1)
            try:
                cfg.update(key.strip(), value)
            except ConfigError as exc:
                raise ConfigError(f"{path}:{lineno}: {exc}") from None
    for key, value in overrides:
        cfg.update(key, value)
    return cfg


def replace(cfg: RunConfig, **changes) -> RunConfig:
    return dataclasses.replace(cfg, **changes)
