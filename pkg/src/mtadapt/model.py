"""Shared backbone + pyramid adapter + per-task heads, with optional language guidance."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import torch
from torch import nn

from .exceptions import ConfigurationError
from .language import (
    DEFAULT_CONTEXT_LENGTH,
    DEFAULT_TEMPLATE,
    DEFAULT_TEMPLATES,
    L2VAdapter,
    NaivePromptFusion,
    PromptContext,
    TextEncoder,
    ensemble_prompt_features,
    handcrafted_prompt_features,
    task_prompt_features,
)
from .models import FPN, AdapterConfig, DetHead, SegHead, ToyResNet
from .tasks import DET, TASKS

PROMPT_MODES = ("none", "handcrafted", "ensemble", "learned", "naive_fusion")

# parameter-name prefixes
BACKBONE = "backbone."
NECK = "neck."
TEXT_ENCODER = "language.encoder."
PROMPTS = "language.prompts."
LV_ADAPTER = "language.adapter."
FUSION = "language.fusion."
HEAD_PREFIX = {t: f"heads.{t}." for t in TASKS}
ADAPTER_PREFIXES = (NECK, PROMPTS, LV_ADAPTER, FUSION)


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 32
    base_width: int = 16
    blocks_per_stage: int = 2
    num_queries: int = 20
    seg_layers: int = 2
    num_proposals: int = 50
    det_stages: int = 2
    num_heads: int = 4
    adapter: AdapterConfig = field(default_factory=AdapterConfig)
    prompt_mode: str = "none"
    templates: tuple = DEFAULT_TEMPLATES
    template: str = DEFAULT_TEMPLATE
    context_length: int = DEFAULT_CONTEXT_LENGTH
    text_dim: int = 32
    text_layers: int = 2
    text_seed: int = 0
    l2v_layers: int = 3

    def __post_init__(self):
        if self.prompt_mode not in PROMPT_MODES:
            raise ConfigurationError(f"unknown prompt mode {self.prompt_mode!r}; expected {PROMPT_MODES}")
        if isinstance(self.adapter, dict):
            object.__setattr__(self, "adapter", AdapterConfig(**self.adapter))
        object.__setattr__(self, "templates", tuple(self.templates))
        if self.channels % self.num_heads or self.channels % 4:
            raise ConfigurationError("channels must be divisible by num_heads and by 4")

    @property
    def language_enabled(self):
        return self.prompt_mode != "none"

    def to_dict(self):
        d = asdict(self)
        d["templates"] = list(self.templates)
        return d


class LanguageGuidance(nn.Module):
    """Turns a task's class names into text features and injects them into P5."""

    def __init__(self, cfg: ModelConfig, vocabularies: dict, tasks):
        super().__init__()
        self.mode = cfg.prompt_mode
        self.cfg = cfg
        self.vocabularies = {t: list(vocabularies[t]) for t in tasks}
        self.encoder = TextEncoder(cfg.text_dim, cfg.text_layers, cfg.num_heads, seed=cfg.text_seed)
        if self.mode in ("learned", "naive_fusion"):
            self.prompts = nn.ModuleDict(
                {t: PromptContext(t, cfg.context_length, cfg.text_dim) for t in tasks}
            )
        if self.mode in ("handcrafted", "ensemble", "learned"):
            self.adapter = L2VAdapter(cfg.channels, cfg.text_dim, cfg.l2v_layers, cfg.num_heads)
        if self.mode == "naive_fusion":
            self.fusion = nn.ModuleDict(
                {t: NaivePromptFusion(cfg.channels, cfg.text_dim, len(self.vocabularies[t])) for t in tasks}
            )

    def text_features(self, task):
        names = self.vocabularies[task]
        if self.mode == "handcrafted":
            with torch.no_grad():
                return handcrafted_prompt_features(self.encoder, self.cfg.template, names)
        if self.mode == "ensemble":
            with torch.no_grad():
                return ensemble_prompt_features(self.encoder, self.cfg.templates, names)
        return task_prompt_features(self.encoder, self.prompts[task], names)

    def forward(self, p5, task):
        b, c, h, w = p5.shape
        z5 = p5.flatten(2).transpose(1, 2)
        text = self.text_features(task)
        if self.mode == "naive_fusion":
            z = self.fusion[task](text, z5)
        else:
            z = self.adapter(text, z5)
        return z.transpose(1, 2).reshape(b, c, h, w)


class MultiTaskModel(nn.Module):
    """Hard parameter sharing: one backbone and neck, one head per task.

    ``forward(images, tasks)`` returns ``{task: prediction}`` for the requested tasks.
    """

    def __init__(self, vocabularies: dict, cfg: ModelConfig | None = None, tasks=TASKS, seed=0):
        super().__init__()
        self.cfg = cfg or ModelConfig()
        self.tasks = tuple(t for t in TASKS if t in tasks)
        if not self.tasks:
            raise ConfigurationError("model needs at least one task")
        self.vocabularies = {t: list(vocabularies[t]) for t in TASKS if t in vocabularies}
        self.seed = seed
        c = self.cfg
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.backbone = ToyResNet(c.base_width, c.blocks_per_stage)
            self.neck = FPN(self.backbone.channels, c.channels, c.adapter)
            heads = {}
            for t in self.tasks:
                k = len(self.vocabularies[t])
                if t == DET:
                    heads[t] = DetHead(c.channels, k, c.num_proposals, c.det_stages, c.num_heads)
                else:
                    heads[t] = SegHead(c.channels, k, c.num_queries, c.seg_layers, c.num_heads)
            self.heads = nn.ModuleDict(heads)
            self.language = LanguageGuidance(c, self.vocabularies, self.tasks) if c.language_enabled else None

    def features(self, images):
        return self.neck(self.backbone(images))

    def forward_task(self, pyr, task):
        """Head output for ``task`` on precomputed pyramid features."""
        if self.language is not None:
            pyr = pyr._replace(p5=self.language(pyr.p5, task))
        return self.heads[task](pyr)

    def forward(self, images, tasks=None):
        tasks = self.tasks if tasks is None else tuple(t for t in self.tasks if t in tasks)
        pyr = self.features(images)
        return {t: self.forward_task(pyr, t) for t in tasks}

    def num_classes(self, task):
        return len(self.vocabularies[task])


def parameter_group(name):
    """Coarse group of a parameter name (``backbone``, ``neck``, ``head.sem``, ...)."""
    for t, prefix in HEAD_PREFIX.items():
        if name.startswith(prefix):
            return f"head.{t}"
    for label, prefix in (("backbone", BACKBONE), ("neck", NECK), ("text_encoder", TEXT_ENCODER),
                          ("prompts", PROMPTS), ("lv_adapter", LV_ADAPTER), ("fusion", FUSION)):
        if name.startswith(prefix):
            return label
    return "other"


def is_adapter_param(name):
    return name.startswith(ADAPTER_PREFIXES)


def is_text_encoder_param(name):
    return name.startswith(TEXT_ENCODER)


def build_model(spec, cfg: ModelConfig | None = None, tasks=TASKS, seed=0):
    """Model with vocabularies taken from a :class:`~mtadapt.data.SceneSpec`."""
    vocab = {t: spec.vocabulary(t) for t in TASKS}
    return MultiTaskModel(vocab, cfg, tasks=tasks, seed=seed)

