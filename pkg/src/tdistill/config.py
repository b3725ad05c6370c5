"""Declarative experiment configuration: one JSON document per run.

Validation collects every problem before reporting; fields that the
selected variant ignores produce warnings, never silent reinterpretation.
The fully-defaulted config is echoed into the output directory so a run
can be reproduced from its own artifacts.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .distill import DistillConfig
from .models import ARCHITECTURES, CnnSpec, make_spec
from .schedule import VARIANTS

OUTPUT_ROOT_ENV = "TDISTILL_OUTPUT_ROOT"


def build_model_spec(mc: "ModelConfig", role: str, num_classes: int, image_size: int) -> CnnSpec:
    return make_spec(mc.arch, role=role, num_classes=num_classes,
                     input_shape=(1, image_size, image_size),
                     stage_widths=tuple(mc.stage_widths) if mc.stage_widths else None,
                     blocks_per_stage=mc.blocks_per_stage)


@dataclass
class DatasetConfig:
    kind: str = "synthetic"  # "synthetic" | "idx"
    n_per_class: int = 150
    test_n_per_class: int = 50
    num_classes: int = 4
    image_size: int = 28
    noise: float = 0.15
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""


@dataclass
class ModelConfig:
    arch: str = "thin3"
    stage_widths: list[int] | None = None
    blocks_per_stage: int | None = None


@dataclass
class OptimizerConfig:
    lr: float = 0.05
    momentum: float = 0.9
    milestones: list[list[float]] = field(default_factory=list)  # [epoch, multiplier]


@dataclass
class LstmConfig:
    hidden_channels: int = 16
    kernel_size: int = 3
    lr: float = 1e-3


@dataclass
class TrainingConfig:
    epochs: int = 32
    warmup_epochs: int = 0
    batch_size: int = 64


@dataclass
class ProbeConfig:
    epochs: int = 40
    trace_epochs: int = 30
    horizon: int = 10
    hidden: int = 16
    lr: float = 0.05
    unit_index: int = 0
    probe_x: float = 0.5
    orders: list[int] = field(default_factory=lambda: [2, 1, 1])


@dataclass
class ExperimentConfig:
    seed: int = 0
    variant: str = "tskd"
    output_dir: str = "runs/experiment"
    teacher_checkpoint: str = ""
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    teacher: ModelConfig = field(default_factory=lambda: ModelConfig(arch="wide3"))
    student: ModelConfig = field(default_factory=lambda: ModelConfig(arch="thin3"))
    distill: DistillConfig = field(default_factory=DistillConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    lstm: LstmConfig = field(default_factory=LstmConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)

    # ------------------------------------------------------------------
    def resolved_output_dir(self) -> Path:
        root = os.environ.get(OUTPUT_ROOT_ENV, "")
        path = Path(self.output_dir)
        if root and not path.is_absolute():
            return Path(root) / path
        return path

    def to_dict(self) -> dict:
        out = asdict(self)
        out["distill"]["layer_pairs"] = [list(p) for p in self.distill.layer_pairs]
        return out

    def echo(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")

    # ------------------------------------------------------------------
    def validate(self, *, need_teacher_checkpoint: bool = False) -> tuple[list[str], list[str]]:
        """Returns (errors, warnings); an empty error list means usable."""
        errors: list[str] = []
        warns: list[str] = []
        if self.seed < 0:
            errors.append(f"seed must be >= 0, got {self.seed}")
        if self.variant not in VARIANTS:
            errors.append(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if not self.output_dir:
            errors.append("output_dir must be nonempty")

        d = self.dataset
        if d.kind not in ("synthetic", "idx"):
            errors.append(f"dataset.kind must be 'synthetic' or 'idx', got {d.kind!r}")
        elif d.kind == "synthetic":
            if d.num_classes < 2:
                errors.append(f"dataset.num_classes must be >= 2, got {d.num_classes}")
            if d.n_per_class < 1 or d.test_n_per_class < 1:
                errors.append("dataset.n_per_class and test_n_per_class must be >= 1")
            if d.image_size < 8:
                errors.append(f"dataset.image_size must be >= 8, got {d.image_size}")
        else:
            for attr in ("train_images", "train_labels", "test_images", "test_labels"):
                p = getattr(d, attr)
                if not p:
                    errors.append(f"dataset.{attr} is required for kind 'idx'")
                elif not Path(p).exists():
                    errors.append(f"dataset.{attr} does not exist: {p}")

        archs_ok = True
        for which, mc in (("teacher", self.teacher), ("student", self.student)):
            if mc.arch not in ARCHITECTURES:
                errors.append(f"{which}.arch {mc.arch!r} unknown; known: {sorted(ARCHITECTURES)}")
                archs_ok = False

        errors.extend(f"distill.{msg}" for msg in self.distill.validate())
        if archs_ok:
            s_taps = build_model_spec(self.student, "student", d.num_classes, d.image_size).tap_names
            t_taps = build_model_spec(self.teacher, "teacher", d.num_classes, d.image_size).tap_names
            for pair in self.distill.layer_pairs:
                if not (isinstance(pair, (list, tuple)) and len(pair) == 2):
                    errors.append(f"distill.layer_pairs entries must be [student_tap, teacher_tap], got {pair!r}")
                    continue
                if pair[0] not in s_taps:
                    errors.append(f"student tap {pair[0]!r} unknown; student declares {list(s_taps)}")
                if pair[1] not in t_taps:
                    errors.append(f"teacher tap {pair[1]!r} unknown; teacher declares {list(t_taps)}")
        if self.optimizer.lr <= 0:
            errors.append(f"optimizer.lr must be > 0, got {self.optimizer.lr}")
        if not 0.0 <= self.optimizer.momentum < 1.0:
            errors.append(f"optimizer.momentum must be in [0, 1), got {self.optimizer.momentum}")
        if self.training.epochs < 1:
            errors.append(f"training.epochs must be >= 1, got {self.training.epochs}")
        if self.training.batch_size < 1:
            errors.append(f"training.batch_size must be >= 1, got {self.training.batch_size}")
        if self.training.warmup_epochs < 0:
            errors.append(f"training.warmup_epochs must be >= 0, got {self.training.warmup_epochs}")
        if self.lstm.hidden_channels < 1:
            errors.append(f"lstm.hidden_channels must be >= 1, got {self.lstm.hidden_channels}")
        if self.lstm.kernel_size % 2 != 1:
            errors.append(f"lstm.kernel_size must be odd, got {self.lstm.kernel_size}")

        if need_teacher_checkpoint:
            if not self.teacher_checkpoint:
                errors.append("teacher_checkpoint is required for distillation")
            elif not Path(self.teacher_checkpoint).exists():
                errors.append(f"teacher_checkpoint does not exist: {self.teacher_checkpoint}")

        if self.variant == "tskd_fm" and self.distill.sequence_mode == "increments":
            errors.append("variant tskd_fm contradicts distill.sequence_mode='increments'; "
                          "drop one or set sequence_mode='feature_maps'")
        warns.extend(self._irrelevant_field_warnings())
        return errors, warns

    def _irrelevant_field_warnings(self) -> list[str]:
        defaults = DistillConfig()
        changed = {name for name in ("lam", "k", "delta", "sequence_mode", "normalize_maps",
                                     "detach_target", "kd_temperature", "kd_alpha", "at_beta")
                   if getattr(self.distill, name) != getattr(defaults, name)}
        if self.distill.layer_pairs != defaults.layer_pairs:
            changed.add("layer_pairs")
        relevant = {
            "vanilla": set(),
            "kd": {"kd_temperature", "kd_alpha"},
            "at": {"at_beta", "layer_pairs", "normalize_maps"},
            "tskd": {"lam", "k", "delta", "layer_pairs", "normalize_maps", "detach_target"},
            "tskd_fm": {"lam", "k", "delta", "layer_pairs", "normalize_maps", "detach_target",
                        "sequence_mode"},
        }.get(self.variant, set())
        return [f"distill.{name} is ignored by variant {self.variant!r}"
                for name in sorted(changed - relevant)]


def _build(cls, payload: dict, path: str, errors: list[str]):
    known = {f.name for f in cls.__dataclass_fields__.values()}  # type: ignore[attr-defined]
    kwargs = {}
    for key, value in payload.items():
        if key not in known:
            errors.append(f"unknown key {path}{key!r}")
            continue
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        errors.append(f"{path[:-1] or 'config'}: {exc}")
        return cls()


def config_from_dict(payload: dict) -> tuple[ExperimentConfig, list[str]]:
    """Build a config from a parsed JSON document, collecting problems."""
    errors: list[str] = []
    sections = {
        "dataset": DatasetConfig, "teacher": ModelConfig, "student": ModelConfig,
        "distill": DistillConfig, "optimizer": OptimizerConfig, "lstm": LstmConfig,
        "training": TrainingConfig, "probe": ProbeConfig,
    }
    kwargs = {}
    for key, value in payload.items():
        if key in sections:
            if not isinstance(value, dict):
                errors.append(f"section {key!r} must be an object")
                continue
            kwargs[key] = _build(sections[key], value, f"{key}.", errors)
        elif key in ("seed", "variant", "output_dir", "teacher_checkpoint"):
            kwargs[key] = value
        else:
            errors.append(f"unknown key {key!r}")
    try:
        cfg = ExperimentConfig(**kwargs)
    except TypeError as exc:
        errors.append(f"config: {exc}")
        cfg = ExperimentConfig()
    if isinstance(cfg.distill.layer_pairs, list):
        cfg.distill.layer_pairs = [tuple(p) for p in cfg.distill.layer_pairs]
    if isinstance(cfg.optimizer.milestones, list):
        cfg.optimizer.milestones = [list(m) for m in cfg.optimizer.milestones]
    return cfg, errors


def load_config(path) -> tuple[ExperimentConfig, list[str]]:
    try:
        payload = json.loads(Path(path).read_text())
    except FileNotFoundError:
        return ExperimentConfig(), [f"config file not found: {path}"]
    except json.JSONDecodeError as exc:
        return ExperimentConfig(), [f"config is not valid JSON: {exc}"]
    if not isinstance(payload, dict):
        return ExperimentConfig(), ["config root must be a JSON object"]
    return config_from_dict(payload)
