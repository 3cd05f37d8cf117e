"""Experiment configuration: YAML in, validated dataclasses out, plus a stable digest."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import yaml

from .data import DatasetSetting, SceneSpec
from .exceptions import ConfigurationError, ModelConstructionError
from .language import DEFAULT_CONTEXT_LENGTH, DEFAULT_TEMPLATE, DEFAULT_TEMPLATES
from .losses import LossWeights
from .model import ModelConfig
from .models import AdapterConfig
from .self_training import PseudoLabelConfig, TeacherConfig
from .training import (
    ADAPT,
    FINETUNE,
    PARADIGMS,
    PRETRAIN_ADAPT_FINETUNE,
    PRETRAIN_KINDS,
    SCHEDULES,
    ZEROING_LOSS,
    EpochBudget,
    StageConfig,
)


def _known(cls, d, section):
    if d is None:
        return {}
    if not isinstance(d, dict):
        raise ConfigurationError(f"section {section!r} must be a mapping")
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - names)
    if unknown:
        raise ConfigurationError(f"unknown keys in {section!r}: {unknown}")
    return dict(d)


@dataclass(frozen=True)
class DataSection:
    spec: dict = field(default_factory=dict)
    setting: str = "disjoint_normal"
    scale: int = 2  # disjoint_normal: (20, 10, 7) * scale labeled images
    per_task: int = 14  # disjoint_balance
    full_images: int = 37  # full
    num_test: int = 32
    split_seed: int = 0

    def scene_spec(self) -> SceneSpec:
        try:
            return SceneSpec(**self.spec) if self.spec else SceneSpec()
        except TypeError as exc:
            raise ConfigurationError(f"bad dataset.spec: {exc}") from exc

    def dataset_setting(self) -> DatasetSetting:
        if self.setting == "disjoint_normal":
            return DatasetSetting.disjoint_normal(self.scale)
        if self.setting == "disjoint_balance":
            return DatasetSetting.disjoint_balance(self.per_task)
        if self.setting == "full":
            return DatasetSetting.full(self.full_images)
        raise ConfigurationError(f"unknown dataset setting {self.setting!r}")


@dataclass(frozen=True)
class ModelSection:
    channels: int = 32
    base_width: int = 16
    blocks_per_stage: int = 2
    num_queries: int = 20
    seg_layers: int = 2
    num_proposals: int = 50
    det_stages: int = 2
    num_heads: int = 4
    adapter_variant: str = "fpn"
    residual_init: float = 0.001
    l2v_layers: int = 3


@dataclass(frozen=True)
class LanguageSection:
    prompt_mode: str = "none"
    template: str = DEFAULT_TEMPLATE
    templates: tuple = DEFAULT_TEMPLATES
    context_length: int = DEFAULT_CONTEXT_LENGTH
    text_seed: int = 0


@dataclass(frozen=True)
class PretrainSection:
    kind: str = "contrastive_toy"
    seed: int = 0
    steps: int = 200

    def __post_init__(self):
        if self.kind not in PRETRAIN_KINDS:
            raise ConfigurationError(f"unknown pretrain kind {self.kind!r}; expected {PRETRAIN_KINDS}")


@dataclass(frozen=True)
class StageSection:
    learning_rate: float | None = None
    weight_decay: float = 1e-4
    warmup_iters: int = 1000
    warmup_factor: float = 0.01
    scale_warmup: bool = True
    batch_size: int = 8
    grad_clip: float | None = 1.0


@dataclass(frozen=True)
class TrainingSection:
    paradigm: str = PRETRAIN_ADAPT_FINETUNE
    budget: tuple = (1, 35)
    schedule: str = ZEROING_LOSS
    loss_weights: dict = field(default_factory=lambda: {"det": 1.0, "sem": 0.7, "driv": 0.7})
    adapt: StageSection = field(default_factory=StageSection)
    finetune: StageSection = field(default_factory=StageSection)
    teacher_epochs: int = 4
    teacher_learning_rate: float = 1e-3
    box_score_threshold: float = 0.5
    mask_score_threshold: float = 0.3

    def __post_init__(self):
        if self.paradigm not in PARADIGMS:
            raise ConfigurationError(f"unknown paradigm {self.paradigm!r}; expected {PARADIGMS}")
        if self.schedule not in SCHEDULES:
            raise ConfigurationError(f"unknown schedule {self.schedule!r}; expected {SCHEDULES}")
        if len(tuple(self.budget)) != 2:
            raise ConfigurationError("training.budget must be [adapt_epochs, finetune_epochs]")
        object.__setattr__(self, "budget", tuple(int(b) for b in self.budget))
        self.epoch_budget()
        self.weights()

    def epoch_budget(self) -> EpochBudget:
        return EpochBudget(*self.budget)

    def weights(self) -> LossWeights:
        unknown = sorted(set(self.loss_weights) - {"det", "sem", "driv"})
        if unknown:
            raise ConfigurationError(f"unknown loss weight keys {unknown}")
        d = {"det": 1.0, "sem": 0.7, "driv": 0.7, **self.loss_weights}
        return LossWeights(float(d["det"]), float(d["sem"]), float(d["driv"]))

    def stage_config(self, stage) -> StageConfig:
        sec = self.adapt if stage == ADAPT else self.finetune
        return StageConfig(stage=stage, epochs=0, loss_weights=self.weights(), **asdict(sec))

    def pseudo(self) -> PseudoLabelConfig:
        return PseudoLabelConfig(self.box_score_threshold, self.mask_score_threshold)


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "experiment"
    dataset: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    language: LanguageSection = field(default_factory=LanguageSection)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    seeds: tuple = (0,)

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if not self.seeds:
            raise ConfigurationError("seeds must list at least one seed")
        # resolve everything once so bad names fail at load time
        try:
            self.model_config()
        except ModelConstructionError as exc:
            raise ConfigurationError(str(exc)) from exc
        self.dataset.scene_spec()
        self.dataset.dataset_setting()

    # construction

    @classmethod
    def from_dict(cls, d):
        d = _known(cls, d or {}, "config")
        sections = {
            "dataset": DataSection, "model": ModelSection, "language": LanguageSection,
            "pretrain": PretrainSection,
        }
        kw = {}
        for key, sec_cls in sections.items():
            if key in d:
                kw[key] = sec_cls(**_known(sec_cls, d[key], key))
        if "training" in d:
            t = _known(TrainingSection, d["training"], "training")
            for stage in (ADAPT, FINETUNE):
                if stage in t:
                    t[stage] = StageSection(**_known(StageSection, t[stage], f"training.{stage}"))
            kw["training"] = TrainingSection(**t)
        for key in ("name", "seeds"):
            if key in d:
                kw[key] = d[key]
        if "language" in kw:
            lang = kw["language"]
            kw["language"] = replace(lang, templates=tuple(lang.templates))
        return cls(**kw)

    @classmethod
    def load(cls, path):
        path = Path(path)
        if not path.exists():
            raise ConfigurationError(f"config file not found: {path}")
        try:
            data = yaml.safe_load(path.read_text(encoding="utf-8"))
        except yaml.YAMLError as exc:
            raise ConfigurationError(f"cannot parse {path}: {exc}") from exc
        return cls.from_dict(data)

    def to_dict(self):
        d = asdict(self)
        d["seeds"] = list(self.seeds)
        d["training"]["budget"] = list(self.training.budget)
        d["language"]["templates"] = list(self.language.templates)
        return d

    def dump(self, path=None):
        text = yaml.safe_dump(self.to_dict(), sort_keys=True)
        if path is not None:
            from .io.tensorfile import atomic_write_text

            atomic_write_text(path, text)
        return text

    @property
    def digest(self):
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def with_overrides(self, **sections):
        """``cfg.with_overrides(training={"paradigm": ...})`` merges into nested sections."""
        d = self.to_dict()
        for key, value in sections.items():
            if isinstance(value, dict) and isinstance(d.get(key), dict):
                for k, v in value.items():
                    if isinstance(v, dict) and isinstance(d[key].get(k), dict):
                        d[key][k] = {**d[key][k], **v}
                    else:
                        d[key][k] = v
            else:
                d[key] = value
        return ExperimentConfig.from_dict(d)

    # derived objects

    def model_config(self) -> ModelConfig:
        m, lang = self.model, self.language
        return ModelConfig(
            channels=m.channels, base_width=m.base_width, blocks_per_stage=m.blocks_per_stage,
            num_queries=m.num_queries, seg_layers=m.seg_layers, num_proposals=m.num_proposals,
            det_stages=m.det_stages, num_heads=m.num_heads,
            adapter=AdapterConfig(m.adapter_variant, m.residual_init),
            prompt_mode=lang.prompt_mode, templates=tuple(lang.templates), template=lang.template,
            context_length=lang.context_length, text_seed=lang.text_seed, l2v_layers=m.l2v_layers,
        )

    def teacher_config(self, seed) -> TeacherConfig:
        base = replace(self.model_config(), prompt_mode="none")
        stage = replace(self.training.stage_config(FINETUNE), epochs=self.training.teacher_epochs,
                        learning_rate=self.training.teacher_learning_rate)
        return TeacherConfig(base, stage, seed)


def desk_config(**overrides) -> ExperimentConfig:
    """Small defaults that finish a full pipeline in under a minute per seed.

    Learning rates are 40x the full-scale values (the 10:1 adapt:finetune
    ratio is kept) because a desk run takes only a few hundred steps.
    Teachers get 60 epochs so their box scores clear the 0.5 pseudo-label
    threshold at all.
    """
    base = ExperimentConfig(
        name="desk",
        dataset=DataSection(setting="disjoint_normal", scale=2, num_test=32),
        training=TrainingSection(
            budget=(1, 35),
            teacher_epochs=60,
            adapt=StageSection(learning_rate=1e-2),
            finetune=StageSection(learning_rate=1e-3),
        ),
    )
    return base.with_overrides(**overrides) if overrides else base
