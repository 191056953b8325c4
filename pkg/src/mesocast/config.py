"""Run configuration: an INI file with sections mirroring the command
surfaces (data / model / training / evaluation), every field defaulted,
unknown keys rejected so config drift fails loudly."""

from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields

from .data import CorpusSizes, CtmConfig
from .losses import LossConfig
from .train import TrainConfig


@dataclass
class DataSection:
    seed: int = 0
    free_flow_mph: float = 70.0
    wave_speed_mph: float = 15.0
    jam_density: float = 110.0
    noise_std_mph: float = 1.5
    substeps_per_minute: int = 4
    train_days: int = 35
    easy_days: int = 6
    hard_windows: int = 4
    hard_minutes: int = 440
    train_csv: str = "train.csv"
    easy_csv: str = "easy.csv"
    hard_csv_prefix: str = "hard"


@dataclass
class ModelSection:
    kind: str = "sa-lstm"            # lstm | sa-lstm | all-at-once | nstep
    per_segment: bool = False        # plain LSTM variant with per-segment tokens
    s: int = 8
    hidden: int = 64
    attn_width: int = 16
    horizon: int = 3


@dataclass
class TrainingSection:
    lr: float = 0.01
    weight_decay: float = 1e-4
    plateau_patience: int = 3
    lr_decay_factor: float = 10.0
    epochs_per_stage: int = 48
    seed: int = 0
    full_batch: bool = True
    batch_size: int = 256
    validate_every: int = 4
    monitor: str = "easy"
    lap_depth: int = 3
    lap_weight: float = 1.0
    lap_padding: str = "zero"
    train_stride: int = 24
    val_stride: int = 8
    grad_chunk: int = 128
    finetune_lr_scale: float = 0.1
    model_out: str = "model.bin"
    checkpoint_out: str = "run.ckpt"
    metrics_csv: str = "metrics.csv"


@dataclass
class EvaluationSection:
    horizons: int = 3
    checkpoint: str = "model.bin"
    report_csv: str = "report.csv"
    budget_ms: float = 1.0
    warmup: int = 1000
    iters: int = 50000


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    evaluation: EvaluationSection = field(default_factory=EvaluationSection)

    def ctm_config(self) -> CtmConfig:
        return CtmConfig(
            free_flow_mph=self.data.free_flow_mph,
            wave_speed_mph=self.data.wave_speed_mph,
            jam_density=self.data.jam_density,
            noise_std_mph=self.data.noise_std_mph,
            substeps_per_minute=self.data.substeps_per_minute,
            seed=self.data.seed,
        )

    def corpus_sizes(self) -> CorpusSizes:
        return CorpusSizes(
            train_days=self.data.train_days,
            easy_days=self.data.easy_days,
            hard_windows=self.data.hard_windows,
            hard_minutes=self.data.hard_minutes,
        )

    def train_config(self) -> TrainConfig:
        t = self.training
        return TrainConfig(
            lr=t.lr, weight_decay=t.weight_decay,
            plateau_patience=t.plateau_patience, lr_decay_factor=t.lr_decay_factor,
            epochs_per_stage=t.epochs_per_stage, seed=t.seed,
            full_batch=t.full_batch, batch_size=t.batch_size,
            validate_every=t.validate_every, monitor=t.monitor,
            loss=LossConfig(pyramid_depth=t.lap_depth, lap_weight=t.lap_weight,
                            padding_mode=t.lap_padding),
            train_stride=t.train_stride, val_stride=t.val_stride,
            grad_chunk=t.grad_chunk, finetune_lr_scale=t.finetune_lr_scale,
        )

    def resolved(self) -> dict:
        return {
            "data": asdict(self.data),
            "model": asdict(self.model),
            "training": asdict(self.training),
            "evaluation": asdict(self.evaluation),
        }


_SECTIONS = {
    "data": DataSection,
    "model": ModelSection,
    "training": TrainingSection,
    "evaluation": EvaluationSection,
}


def _parse_value(raw: str, kind: type):
    if kind is bool:
        lowered = raw.strip().lower()
        if lowered in ("true", "1", "yes", "on"):
            return True
        if lowered in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    return kind(raw)


def load_config(path) -> RunConfig:
    """Parse an INI run config; unknown sections or keys are errors."""
    parser = configparser.ConfigParser()
    with open(path, encoding="utf-8") as fh:
        parser.read_file(fh)
    cfg = RunConfig()
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ValueError(f"unknown config section [{section}], "
                             f"expected one of {sorted(_SECTIONS)}")
        target = getattr(cfg, section)
        known = {f.name: f.type for f in fields(target)}
        types = {f.name: type(getattr(target, f.name)) for f in fields(target)}
        for key, raw in parser.items(section):
            if key not in known:
                raise ValueError(f"unknown key {key!r} in section [{section}]")
            try:
                setattr(target, key, _parse_value(raw, types[key]))
            except ValueError as exc:
                raise ValueError(f"bad value for {section}.{key}: {exc}") from None
    return cfg


def config_hash(cfg: RunConfig) -> str:
    """Hash of the fully resolved configuration, recorded in manifests."""
    canonical = json.dumps(cfg.resolved(), sort_keys=True)
    return hashlib.sha256(canonical.encode()).hexdigest()
