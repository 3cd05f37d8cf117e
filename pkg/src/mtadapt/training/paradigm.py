"""Pretrain-finetune versus pretrain-adapt-finetune under a fixed epoch budget."""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import NamedTuple

from ..exceptions import ConfigurationError
from .stage import ADAPT, FINETUNE, StageConfig, run_stage, steps_per_epoch

PRETRAIN_FINETUNE = "pretrain_finetune"
PRETRAIN_ADAPT_FINETUNE = "pretrain_adapt_finetune"
PARADIGMS = (PRETRAIN_FINETUNE, PRETRAIN_ADAPT_FINETUNE)


@dataclass(frozen=True)
class EpochBudget:
    adapt_epochs: int = 1
    finetune_epochs: int = 35

    def __post_init__(self):
        if self.adapt_epochs < 0 or self.finetune_epochs < 0:
            raise ConfigurationError("epoch budget entries must be >= 0")

    @property
    def total(self):
        return self.adapt_epochs + self.finetune_epochs

    @classmethod
    def parse(cls, text):
        """``"1,35"`` -> ``EpochBudget(1, 35)``."""
        try:
            a, f = (int(x) for x in str(text).split(","))
        except ValueError as exc:
            raise ConfigurationError(f"budget must look like 'ADAPT,FINETUNE', got {text!r}") from exc
        return cls(a, f)


class ParadigmResult(NamedTuple):
    model: object
    log: list
    freezes: list
    optimizer_steps: int


def planned_steps(paradigm, budget: EpochBudget, num_images, batch_size):
    spe = steps_per_epoch(num_images, batch_size)
    if paradigm == PRETRAIN_FINETUNE:
        return budget.total * spe
    return budget.adapt_epochs * spe + budget.finetune_epochs * spe


def run_paradigm(model, dataset, paradigm, budget: EpochBudget, schedule, adapt_cfg: StageConfig | None = None,
                 finetune_cfg: StageConfig | None = None, seed=0, log_path=None) -> ParadigmResult:
    """Train ``model`` (already initialized from a pretrained checkpoint).

    ``pretrain_finetune`` runs one finetune stage of ``budget.total`` epochs;
    ``pretrain_adapt_finetune`` runs ``adapt_epochs`` of adapter-only training
    followed by ``finetune_epochs`` of full training.
    """
    if paradigm not in PARADIGMS:
        raise ConfigurationError(f"unknown paradigm {paradigm!r}; expected {PARADIGMS}")
    adapt_cfg = adapt_cfg or StageConfig(stage=ADAPT)
    finetune_cfg = finetune_cfg or StageConfig(stage=FINETUNE)
    if adapt_cfg.stage != ADAPT or finetune_cfg.stage != FINETUNE:
        raise ConfigurationError("stage configs passed in the wrong slots")
    stages = []
    if paradigm == PRETRAIN_FINETUNE:
        stages.append(replace(finetune_cfg, epochs=budget.total))
    else:
        stages.append(replace(adapt_cfg, epochs=budget.adapt_epochs))
        stages.append(replace(finetune_cfg, epochs=budget.finetune_epochs))
    history, freezes = [], []
    for cfg in stages:
        result = run_stage(model, dataset, cfg, schedule, seed=seed, step_offset=len(history), log_path=log_path)
        history += result.log
        freezes.append(result.freeze)
    return ParadigmResult(model, history, freezes, len(history))
