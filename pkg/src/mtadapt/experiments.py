"""End-to-end pipeline runs, loss-weight sweeps, and comparison reports."""
from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .data import PartialDataset, generate_scenes, load_dataset, save_dataset, split_setting
from .evaluate import METRIC_KEYS, evaluate_model, mean_task_score
from .exceptions import ConfigurationError
from .io.checkpoint import Checkpoint, load_into_model, read_checkpoint, save_checkpoint
from .io.tensorfile import atomic_write_text
from .model import build_model
from .self_training import merge_labels, train_teacher
from .tasks import TASKS
from .training import ADAPT, FINETUNE, SELF_TRAINING, run_paradigm, toy_pretrain

log = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "MTADAPT_OUTPUT_ROOT"
TEST_INDEX_OFFSET = 1_000_000


def output_root(explicit=None) -> Path:
    """``explicit`` if given, else ``$MTADAPT_OUTPUT_ROOT``, else ``./mtadapt-output``."""
    if explicit is not None:
        return Path(explicit)
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "mtadapt-output"))


def _json(obj):
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


# data and pretraining


def build_datasets(cfg: ExperimentConfig):
    """``(train, test)``: the partially labeled training split and a fully labeled test set."""
    spec = cfg.dataset.scene_spec()
    setting = cfg.dataset.dataset_setting()
    pool = generate_scenes(spec, setting.num_images)
    train = split_setting(pool, setting, cfg.dataset.split_seed, spec)
    test = PartialDataset(generate_scenes(spec, cfg.dataset.num_test, start=TEST_INDEX_OFFSET), spec, None)
    return train, test


def write_datasets(cfg: ExperimentConfig, data_dir):
    data_dir = Path(data_dir)
    train, test = build_datasets(cfg)
    save_dataset(train, data_dir / "train")
    save_dataset(test, data_dir / "test")
    return data_dir


def read_datasets(data_dir):
    data_dir = Path(data_dir)
    for part in ("train", "test"):
        if not (data_dir / part / "manifest.json").exists():
            raise FileNotFoundError(f"dataset not found: {data_dir / part / 'manifest.json'}")
    return load_dataset(data_dir / "train"), load_dataset(data_dir / "test")


def pretrained_checkpoint(cfg: ExperimentConfig, cache_dir=None) -> Checkpoint:
    """Toy-pretrained backbone for ``cfg.pretrain``; cached on disk when ``cache_dir`` is given."""
    p = cfg.pretrain
    path = None
    if cache_dir is not None:
        path = Path(cache_dir) / f"{p.kind}-seed{p.seed}-steps{p.steps}.tensors"
        if path.exists():
            return read_checkpoint(path)
    ckpt = toy_pretrain(p.kind, p.seed, cfg.dataset.scene_spec(), steps=p.steps,
                        base_width=cfg.model.base_width, blocks_per_stage=cfg.model.blocks_per_stage)
    if path is not None:
        save_checkpoint(ckpt, path)
    return ckpt


# one run


def _data_digest(cfg: ExperimentConfig):
    return hashlib.sha256(json.dumps(cfg.to_dict()["dataset"], sort_keys=True).encode()).hexdigest()


def run_digest(cfg: ExperimentConfig):
    """Config digest with the seed list removed (identifies a method across seeds)."""
    d = cfg.to_dict()
    d.pop("seeds")
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


@dataclass
class RunResult:
    record: dict
    model: object
    log: list


def run_pipeline(cfg: ExperimentConfig, seed, train, test, pretrained: Checkpoint, out_dir=None) -> RunResult:
    """Pretrained checkpoint -> (optional pseudo labels) -> paradigm -> metrics.

    With ``out_dir`` the step log, final checkpoint and ``metrics.json`` are written there.
    """
    tr = cfg.training
    out_dir = Path(out_dir) if out_dir is not None else None
    log_path = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / "train_log.jsonl"
        log_path.unlink(missing_ok=True)
    digests = {"pretrained": pretrained.digest}
    if tr.schedule == SELF_TRAINING:
        teachers = {}
        for task in TASKS:
            teacher, _ = train_teacher(task, train.only_task(task), cfg.teacher_config(seed), init=pretrained)
            teachers[task] = teacher
            digests[f"teacher_{task}"] = teacher.digest
        train = merge_labels(train, teachers, tr.pseudo())
    model = build_model(train.spec, cfg.model_config(), seed=seed)
    load_into_model(model, pretrained)
    result = run_paradigm(
        model, train, tr.paradigm, tr.epoch_budget(), tr.schedule,
        tr.stage_config(ADAPT), tr.stage_config(FINETUNE), seed=seed, log_path=log_path,
    )
    final = Checkpoint.from_model(model, stage=tr.paradigm, config_digest=cfg.digest)
    digests["final"] = final.digest
    metrics = evaluate_model(model, test.samples)
    record = {
        "method": cfg.name,
        "paradigm": tr.paradigm,
        "schedule": tr.schedule,
        "prompt_mode": cfg.language.prompt_mode,
        "setting": cfg.dataset.setting,
        "seed": int(seed),
        "budget": list(tr.budget),
        "optimizer_steps": result.optimizer_steps,
        "metrics": metrics,
        "score": mean_task_score(metrics),
        "config_digest": cfg.digest,
        "run_digest": run_digest(cfg),
        "data_digest": _data_digest(cfg),
        "checkpoint_digests": digests,
    }
    if out_dir is not None:
        save_checkpoint(final, out_dir / "final.tensors")
        atomic_write_text(out_dir / "metrics.json", _json(record))
        cfg.dump(out_dir / "config.yaml")
    return RunResult(record, model, result.log)


def run_experiment(cfg: ExperimentConfig, root=None, data_dir=None, seeds=None, require_data=False):
    """Run every seed of ``cfg``; outputs land in ``<root>/runs/<name>/seed<k>/``.

    ``require_data`` makes a missing dataset directory an error instead of
    generating the data in memory.
    """
    root = output_root(root)
    seeds = cfg.seeds if seeds is None else tuple(seeds)
    if data_dir is not None or require_data:
        train, test = read_datasets(data_dir if data_dir is not None else root / "data")
    else:
        train, test = build_datasets(cfg)
    pretrained = pretrained_checkpoint(cfg, root / "pretrain")
    records = []
    for seed in seeds:
        out = root / "runs" / cfg.name / f"seed{seed}"
        records.append(run_pipeline(cfg, seed, train, test, pretrained, out).record)
        log.info("%s seed %d: score %s", cfg.name, seed, records[-1]["score"])
    return records


# sweeps


def parse_grid(text):
    """``"0.1:1.0:0.1"`` -> ``[0.1, 0.2, ..., 1.0]`` (inclusive, exact decimal steps)."""
    try:
        start, stop, step = (Fraction(x) for x in str(text).split(":"))
    except (ValueError, ZeroDivisionError) as exc:
        raise ConfigurationError(f"grid must look like START:STOP:STEP, got {text!r}") from exc
    if step <= 0 or stop < start:
        raise ConfigurationError(f"empty grid {text!r}")
    n = int((stop - start) // step)
    return [float(start + k * step) for k in range(n + 1)]


def sweep_plan(cfg: ExperimentConfig, grid, tasks=TASKS):
    """One config per (task, weight): that task's loss weight varies, the others keep their values."""
    base = cfg.training.weights().as_dict()
    plan = []
    for task in tasks:
        for value in grid:
            weights = {**base, task: value}
            name = f"{cfg.name}-w{task}{value:g}"
            plan.append((task, value, cfg.with_overrides(name=name, training={"loss_weights": weights})))
    return plan


# reporting

REPORT_COLUMNS = (
    ("mIoU-SS", "miou_ss"), ("pACC-SS", "pacc_ss"), ("mIoU-DA", "miou_da"), ("pACC-DA", "pacc_da"),
    ("mAP", "map"), ("AP50", "ap50"), ("AP75", "ap75"),
)


def collect_records(paths):
    records = []
    for p in paths:
        p = Path(p)
        files = [p] if p.is_file() else sorted(p.rglob("metrics.json"))
        for f in files:
            records.append(json.loads(f.read_text(encoding="utf-8")))
    if not records:
        raise ConfigurationError(f"no metrics.json found under {[str(p) for p in paths]}")
    return records


def _stat(values):
    vals = [v for v in values if v is not None]
    if not vals:
        return {"mean": None, "std": None, "n": 0}
    arr = np.array(vals, dtype=np.float64)
    std = float(arr.std(ddof=1)) if len(arr) > 1 else None
    return {"mean": float(arr.mean()), "std": std, "n": len(arr)}


def summarize(records):
    """Rows keyed by (method, setting) with mean/std per metric over seeds."""
    data = {r["data_digest"] for r in records}
    if len(data) > 1:
        raise ConfigurationError("records come from different dataset configurations")
    groups = {}
    for r in records:
        groups.setdefault((r["method"], r["setting"]), []).append(r)
    rows = []
    for (method, setting), rs in sorted(groups.items()):
        if len({r["run_digest"] for r in rs}) > 1:
            raise ConfigurationError(f"method {method!r} mixes incompatible configs")
        seeds = sorted(r["seed"] for r in rs)
        if len(set(seeds)) != len(seeds):
            raise ConfigurationError(f"method {method!r} has duplicate seeds")
        row = {"method": method, "setting": setting, "seeds": seeds}
        for _, key in REPORT_COLUMNS:
            row[key] = _stat([r["metrics"].get(key) for r in rs])
        row["score"] = _stat([r.get("score") for r in rs])
        row["config_digest"] = rs[0]["run_digest"]
        row["checkpoint_digests"] = {f"seed{r['seed']}": r["checkpoint_digests"] for r in rs}
        rows.append(row)
    return rows


def _cell(stat):
    if stat["mean"] is None:
        return "n/a"
    text = f"{100 * stat['mean']:.1f}"
    if stat["std"] is not None:
        text += f" ± {100 * stat['std']:.1f}"
    return text


def format_table(rows):
    header = ["method", "setting", "seeds"] + [label for label, _ in REPORT_COLUMNS]
    body = [[r["method"], r["setting"], str(len(r["seeds"]))] + [_cell(r[k]) for _, k in REPORT_COLUMNS]
            for r in rows]
    widths = [max(len(line[i]) for line in [header] + body) for i in range(len(header))]
    fmt = lambda line: "  ".join(c.ljust(w) for c, w in zip(line, widths)).rstrip()  # noqa: E731
    lines = [fmt(header), fmt(["-" * w for w in widths])] + [fmt(b) for b in body]
    return "\n".join(lines) + "\n"


def write_report(rows, out_dir):
    out_dir = Path(out_dir)
    atomic_write_text(out_dir / "report.txt", format_table(rows))
    atomic_write_text(out_dir / "report.json", _json(rows))
    return out_dir


# desk-scale directional comparison


def directional_experiment(cfg: ExperimentConfig, seeds=(0, 1, 2, 3, 4), root=None):
    """Paradigm comparison and learned-vs-handcrafted prompts on the same pretrained checkpoint.

    Returns ``{"records": ..., "paradigm": {...}, "prompts": {...}}`` with
    per-variant mean scores; nothing here is asserted.
    """
    train, test = build_datasets(cfg)
    pretrained = pretrained_checkpoint(cfg, None if root is None else Path(root) / "pretrain")
    variants = {
        "pretrain_finetune": cfg.with_overrides(name="pretrain_finetune",
                                                training={"paradigm": "pretrain_finetune"},
                                                language={"prompt_mode": "none"}),
        "pretrain_adapt_finetune": cfg.with_overrides(name="pretrain_adapt_finetune",
                                                      training={"paradigm": "pretrain_adapt_finetune"},
                                                      language={"prompt_mode": "none"}),
        "handcrafted": cfg.with_overrides(name="handcrafted", training={"paradigm": "pretrain_adapt_finetune"},
                                          language={"prompt_mode": "handcrafted"}),
        "learned": cfg.with_overrides(name="learned", training={"paradigm": "pretrain_adapt_finetune"},
                                      language={"prompt_mode": "learned"}),
    }
    records = {k: [] for k in variants}
    for name, vcfg in variants.items():
        for seed in seeds:
            out = None if root is None else Path(root) / "runs" / name / f"seed{seed}"
            records[name].append(run_pipeline(vcfg, seed, train, test, pretrained, out).record)
    mean = lambda name, key: float(np.mean([  # noqa: E731
        r["score"] if key == "score" else r["metrics"][key] for r in records[name]]))
    return {
        "records": records,
        "paradigm": {"pretrain_finetune": mean("pretrain_finetune", "score"),
                     "pretrain_adapt_finetune": mean("pretrain_adapt_finetune", "score")},
        "prompts": {"handcrafted": mean("handcrafted", "miou_ss"), "learned": mean("learned", "miou_ss")},
    }


__all__ = [
    "METRIC_KEYS", "OUTPUT_ROOT_ENV", "build_datasets", "collect_records", "directional_experiment",
    "format_table", "output_root", "parse_grid", "pretrained_checkpoint", "read_datasets", "run_experiment",
    "run_pipeline", "summarize", "sweep_plan", "write_datasets", "write_report",
]
