from .paradigm import (
    PARADIGMS,
    PRETRAIN_ADAPT_FINETUNE,
    PRETRAIN_FINETUNE,
    EpochBudget,
    ParadigmResult,
    planned_steps,
    run_paradigm,
)
from .pretrain import PRETRAIN_KINDS, info_nce, toy_pretrain
from .schedules import (
    ROUND_ROBIN,
    SCHEDULES,
    SELF_TRAINING,
    UNIFORM_SAMPLE,
    WEIGHTED_SAMPLE,
    ZEROING_LOSS,
    Batch,
    BatchComposer,
    collate,
    compose_batch,
    round_robin_task,
    task_probabilities,
)
from .stage import (
    ADAPT,
    FINETUNE,
    FreezeSpec,
    StageConfig,
    StageResult,
    batch_losses,
    effective_warmup,
    run_stage,
    steps_per_epoch,
    warmup_lr,
)
