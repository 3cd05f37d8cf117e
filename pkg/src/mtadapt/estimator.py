"""scikit-learn style wrapper around the whole training pipeline."""
from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .config import desk_config
from .data import ImageSample, PartialDataset, SceneSpec
from .evaluate import evaluate_model, mean_task_score, predict
from .exceptions import ConfigurationError
from .experiments import pretrained_checkpoint
from .io.checkpoint import load_into_model
from .model import build_model
from .self_training import merge_labels, train_teacher
from .tasks import TASKS
from .training import ADAPT, FINETUNE, SELF_TRAINING, run_paradigm


def check_images(X, spec: SceneSpec | None = None):
    """Validate an image batch: ``(N, H, W, 3)`` float in [0, 1], H and W divisible by 32."""
    X = np.asarray(X, dtype=np.float32)
    if X.ndim != 4 or X.shape[-1] != 3:
        raise ConfigurationError(f"images must have shape (N, H, W, 3), got {X.shape}")
    if X.shape[1] % 32 or X.shape[2] % 32:
        raise ConfigurationError(f"image size {X.shape[1:3]} not divisible by 32")
    if not np.all(np.isfinite(X)) or X.min() < 0 or X.max() > 1:
        raise ConfigurationError("image values must be finite and within [0, 1]")
    if spec is not None and tuple(X.shape[1:3]) != tuple(spec.image_size):
        raise ConfigurationError(f"image size {X.shape[1:3]} != configured {spec.image_size}")
    return X


def check_dataset(X, spec: SceneSpec | None = None) -> PartialDataset:
    """Accept a :class:`PartialDataset` or a list of :class:`ImageSample`; verify every sample."""
    if isinstance(X, PartialDataset):
        ds = X
    elif isinstance(X, (list, tuple)) and all(isinstance(s, ImageSample) for s in X):
        ds = PartialDataset(list(X), spec or SceneSpec())
    else:
        raise ConfigurationError("expected a PartialDataset or a list of ImageSample")
    if len(ds) == 0:
        raise ConfigurationError("empty dataset")
    for s in ds:
        s.check(ds.spec)
    check_images(np.stack([s.image for s in ds]), ds.spec)
    return ds


class MultiTaskTransfer(BaseEstimator):
    """Pretrained backbone -> adapt -> finetune on partially labeled scenes.

    ``fit`` takes a :class:`~mtadapt.data.PartialDataset`; ``predict`` returns
    per-task outputs for an image batch; ``transform`` gives pooled P5
    features; ``score`` is the mean of mIoU-SS, mIoU-DA and mAP on a fully
    labeled dataset.
    """

    def __init__(self, paradigm="pretrain_adapt_finetune", budget=(1, 35), schedule="zeroing_loss",
                 prompt_mode="none", pretrain_kind="contrastive_toy", pretrain_steps=200,
                 adapt_learning_rate=1e-2, finetune_learning_rate=1e-3, batch_size=8, random_state=0):
        self.paradigm = paradigm
        self.budget = budget
        self.schedule = schedule
        self.prompt_mode = prompt_mode
        self.pretrain_kind = pretrain_kind
        self.pretrain_steps = pretrain_steps
        self.adapt_learning_rate = adapt_learning_rate
        self.finetune_learning_rate = finetune_learning_rate
        self.batch_size = batch_size
        self.random_state = random_state

    def _config(self, spec: SceneSpec):
        stage = lambda lr: {"learning_rate": lr, "batch_size": self.batch_size}  # noqa: E731
        return desk_config(
            name="estimator",
            dataset={"spec": spec.to_dict()},
            language={"prompt_mode": self.prompt_mode},
            pretrain={"kind": self.pretrain_kind, "seed": int(self.random_state), "steps": self.pretrain_steps},
            training={"paradigm": self.paradigm, "budget": list(self.budget), "schedule": self.schedule,
                      "adapt": stage(self.adapt_learning_rate), "finetune": stage(self.finetune_learning_rate)},
        )

    def fit(self, X, y=None):
        ds = check_dataset(X)
        cfg = self._config(ds.spec)
        pretrained = pretrained_checkpoint(cfg)
        seed = int(self.random_state)
        if cfg.training.schedule == SELF_TRAINING:
            teachers = {t: train_teacher(t, ds.only_task(t), cfg.teacher_config(seed), init=pretrained)[0]
                        for t in TASKS}
            ds = merge_labels(ds, teachers, cfg.training.pseudo())
        model = build_model(ds.spec, cfg.model_config(), seed=seed)
        load_into_model(model, pretrained)
        tr = cfg.training
        res = run_paradigm(model, ds, tr.paradigm, tr.epoch_budget(), tr.schedule,
                           tr.stage_config(ADAPT), tr.stage_config(FINETUNE), seed=seed)
        self.model_ = model
        self.spec_ = ds.spec
        self.config_ = cfg
        self.n_steps_ = res.optimizer_steps
        self.training_log_ = res.log
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("call fit before using this estimator")

    def _images(self, X):
        if isinstance(X, (PartialDataset, list, tuple)) and len(X) and isinstance(X[0], ImageSample):
            X = np.stack([s.image for s in X])
        return check_images(X, self.spec_)

    def predict(self, X):
        """``{task: predictions}``: label maps for sem/driv, ``(R, 6)`` box arrays for det."""
        self._check_fitted()
        return predict(self.model_, self._images(X))

    @torch.no_grad()
    def transform(self, X):
        """Spatially averaged P5 features, ``(N, C)``."""
        self._check_fitted()
        x = torch.as_tensor(self._images(X)).permute(0, 3, 1, 2)
        self.model_.eval()
        return self.model_.features(x).p5.mean(dim=(2, 3)).numpy()

    def evaluate(self, X):
        self._check_fitted()
        ds = check_dataset(X, self.spec_)
        if not ds.availability_matrix().all():
            raise ConfigurationError("evaluation needs ground truth for all tasks")
        return evaluate_model(self.model_, ds.samples)

    def score(self, X, y=None):
        return mean_task_score(self.evaluate(X))
