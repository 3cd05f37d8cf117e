"""Command-line entry point: ``mtadapt <subcommand> ...``.

Exit codes: 0 success, 2 configuration/input error, 3 invariant violation,
4 training aborted, 5 corrupt checkpoint.
"""
from __future__ import annotations

import argparse
import json
import logging
import subprocess
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import torch

from .config import ExperimentConfig, desk_config
from .exceptions import ConfigurationError, CorruptCheckpointError, InvariantViolationError, TrainingAbortError
from .io.checkpoint import Checkpoint, load_into_model, read_checkpoint, save_checkpoint
from .io.tensorfile import atomic_write_text
from .model import build_model
from .tasks import TASKS
from .training import ADAPT, FINETUNE, PARADIGMS, PRETRAIN_KINDS, SCHEDULES, EpochBudget, run_stage

log = logging.getLogger("mtadapt")

EXIT_OK, EXIT_CONFIG, EXIT_INVARIANT, EXIT_ABORT, EXIT_CORRUPT = 0, 2, 3, 4, 5


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else desk_config()
    overrides = {}
    if getattr(args, "paradigm", None):
        overrides.setdefault("training", {})["paradigm"] = args.paradigm
    if getattr(args, "budget", None):
        b = EpochBudget.parse(args.budget)
        overrides.setdefault("training", {})["budget"] = [b.adapt_epochs, b.finetune_epochs]
    if getattr(args, "schedule", None):
        overrides.setdefault("training", {})["schedule"] = args.schedule
    if getattr(args, "prompt_mode", None):
        overrides.setdefault("language", {})["prompt_mode"] = args.prompt_mode
    if getattr(args, "name", None):
        overrides["name"] = args.name
    return cfg.with_overrides(**overrides) if overrides else cfg


def _root(args):
    from .experiments import output_root

    return output_root(args.root)


def _seeds(args, cfg):
    return tuple(args.seed) if getattr(args, "seed", None) else cfg.seeds


def _require(path: Path, what="file"):
    if not path.exists():
        raise FileNotFoundError(f"{what} not found: {path}")
    return path


# subcommands


def cmd_gen_data(args):
    from .experiments import write_datasets

    cfg = _load_config(args)
    out = Path(args.out) if args.out else _root(args) / "data"
    write_datasets(cfg, out)
    print(f"wrote {out / 'train'} and {out / 'test'}")


def cmd_pretrain(args):
    from .training import toy_pretrain

    cfg = _load_config(args)
    ckpt = toy_pretrain(args.kind, args.seed, cfg.dataset.scene_spec(), steps=args.steps)
    out = Path(args.out) if args.out else _root(args) / "pretrain" / f"{args.kind}-seed{args.seed}-steps{args.steps}.tensors"
    save_checkpoint(ckpt, out)
    hist = ckpt.meta["loss_history"]
    if hist:
        print(f"loss {hist[0]:.4f} -> {hist[-1]:.4f}")
    print(f"wrote {out} (digest {ckpt.digest[:12]})")


def _pretrained(args, cfg):
    from .experiments import pretrained_checkpoint

    if args.init:
        return read_checkpoint(_require(Path(args.init), "checkpoint"))
    return pretrained_checkpoint(cfg, _root(args) / "pretrain")


def cmd_teach(args):
    from .data import load_dataset, save_dataset
    from .self_training import merge_labels, train_teacher

    cfg = _load_config(args)
    data = Path(args.data) if args.data else _root(args) / "data" / "train"
    train = load_dataset(_require(data / "manifest.json", "dataset manifest").parent)
    init = _pretrained(args, cfg)
    out = Path(args.out) if args.out else _root(args) / "teachers"
    teachers = {}
    for task in TASKS:
        teacher, hist = train_teacher(task, train.only_task(task), cfg.teacher_config(args.seed), init=init)
        teachers[task] = teacher
        save_checkpoint(teacher.checkpoint(), out / f"teacher_{task}.tensors")
        print(f"teacher {task}: {len(hist)} steps, loss {hist[0]['total']:.4f} -> {hist[-1]['total']:.4f}")
    merged = merge_labels(train, teachers, cfg.training.pseudo())
    save_dataset(merged, out / "merged")
    print(f"wrote merged dataset {out / 'merged'}")


def _cmd_stage(args, stage):
    from .data import load_dataset

    cfg = _load_config(args)
    data = Path(args.data) if args.data else _root(args) / "data" / "train"
    train = load_dataset(_require(data / "manifest.json", "dataset manifest").parent)
    model = build_model(train.spec, cfg.model_config(), seed=args.seed)
    init = _pretrained(args, cfg)
    for line in load_into_model(model, init).lines():
        print(line)
    budget = cfg.training.epoch_budget()
    epochs = args.epochs if args.epochs is not None else (
        budget.adapt_epochs if stage == ADAPT else budget.finetune_epochs)
    scfg = replace(cfg.training.stage_config(stage), epochs=epochs)
    out = Path(args.out) if args.out else _root(args) / "stages" / f"{stage}-seed{args.seed}.tensors"
    log_path = out.with_suffix(".jsonl")
    log_path.parent.mkdir(parents=True, exist_ok=True)
    log_path.unlink(missing_ok=True)
    result = run_stage(model, train, scfg, cfg.training.schedule, seed=args.seed, log_path=log_path)
    ckpt = Checkpoint.from_model(model, stage=stage, config_digest=cfg.digest, frozen_names=result.freeze.frozen_names)
    save_checkpoint(ckpt, out)
    print(f"{stage}: {len(result.log)} steps; frozen tensors unchanged: {len(result.freeze.frozen_names)}")
    print(f"wrote {out}")


def cmd_adapt(args):
    _cmd_stage(args, ADAPT)


def cmd_finetune(args):
    _cmd_stage(args, FINETUNE)


def cmd_run(args):
    from .experiments import run_experiment

    cfg = _load_config(args)
    root = _root(args)
    data_dir = Path(args.data) if args.data else root / "data"
    records = run_experiment(cfg, root, data_dir=data_dir, seeds=_seeds(args, cfg))
    for r in records:
        print(json.dumps({"method": r["method"], "seed": r["seed"], "steps": r["optimizer_steps"],
                          "score": r["score"], **r["metrics"]}, sort_keys=True))


def cmd_eval(args):
    from .data import load_dataset
    from .evaluate import evaluate_model

    cfg = _load_config(args)
    data = Path(args.data) if args.data else _root(args) / "data" / "test"
    test = load_dataset(_require(data / "manifest.json", "dataset manifest").parent)
    ckpt = read_checkpoint(_require(Path(args.checkpoint), "checkpoint"))
    model = build_model(test.spec, cfg.model_config())
    report = load_into_model(model, ckpt)
    if report.initialized_fresh:
        print(f"warning: {len(report.initialized_fresh)} tensors not in checkpoint", file=sys.stderr)
    metrics = evaluate_model(model, test.samples)
    text = json.dumps({"checkpoint_digest": ckpt.digest, "metrics": metrics}, indent=1, sort_keys=True) + "\n"
    if args.out:
        atomic_write_text(args.out, text)
    print(text, end="")


def cmd_sweep(args):
    from .experiments import parse_grid, sweep_plan

    cfg = _load_config(args)
    grid = parse_grid(args.grid)
    tasks = args.task or list(TASKS)
    plan = sweep_plan(cfg, grid, tasks)
    for task, value, _ in plan:
        print(f"{task}\t{value:g}")
    if args.dry_run:
        return
    root = _root(args)
    cfg_dir = root / "sweep" / "configs"
    cfg_dir.mkdir(parents=True, exist_ok=True)
    cmds = []
    for _, _, c in plan:
        path = cfg_dir / f"{c.name}.yaml"
        c.dump(path)
        cmd = [sys.executable, "-m", "mtadapt", "run", "--config", str(path), "--root", str(root)]
        if args.data:
            cmd += ["--data", args.data]
        cmds.append(cmd)

    def launch(cmd):
        return subprocess.run(cmd, capture_output=True, text=True).returncode

    with ThreadPoolExecutor(max_workers=max(1, args.jobs)) as pool:
        codes = list(pool.map(launch, cmds))
    failed = [c for c in codes if c != 0]
    if failed:
        raise TrainingAbortError(f"{len(failed)} of {len(cmds)} sweep runs failed")
    print(f"{len(cmds)} runs finished under {root / 'runs'}")


def cmd_report(args):
    from .experiments import collect_records, format_table, summarize, write_report

    paths = args.runs or [str(_root(args) / "runs")]
    rows = summarize(collect_records(paths))
    out = Path(args.out) if args.out else _root(args)
    write_report(rows, out)
    print(format_table(rows), end="")


# parser


def build_parser():
    p = argparse.ArgumentParser(prog="mtadapt", description=__doc__.splitlines()[0])
    p.add_argument("--root", help="output root (default: $MTADAPT_OUTPUT_ROOT or ./mtadapt-output)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="experiment YAML (default: built-in desk config)")
        sp.add_argument("--root", default=argparse.SUPPRESS, help=argparse.SUPPRESS)
        sp.set_defaults(fn=fn)
        return sp

    sp = add("gen-data", cmd_gen_data, "write the synthetic train/test datasets")
    sp.add_argument("--out")

    sp = add("pretrain", cmd_pretrain, "toy-pretrain a backbone checkpoint")
    sp.add_argument("--kind", choices=PRETRAIN_KINDS, default="contrastive_toy")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--steps", type=int, default=200)
    sp.add_argument("--out")

    sp = add("teach", cmd_teach, "train single-task teachers and merge pseudo labels")
    sp.add_argument("--data")
    sp.add_argument("--init", help="pretrained checkpoint")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out")

    for name, fn in (("adapt", cmd_adapt), ("finetune", cmd_finetune)):
        sp = add(name, fn, f"run a single {name} stage")
        sp.add_argument("--data")
        sp.add_argument("--init", help="checkpoint to start from")
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--schedule", choices=SCHEDULES)
        sp.add_argument("--prompt-mode", dest="prompt_mode")
        sp.add_argument("--out")

    sp = add("run", cmd_run, "full pipeline: pretrained checkpoint -> paradigm -> metrics")
    sp.add_argument("--paradigm", choices=PARADIGMS)
    sp.add_argument("--budget", help="ADAPT,FINETUNE epochs, e.g. 1,35")
    sp.add_argument("--schedule", choices=SCHEDULES)
    sp.add_argument("--prompt-mode", dest="prompt_mode")
    sp.add_argument("--name")
    sp.add_argument("--seed", type=int, action="append")
    sp.add_argument("--data", help="dataset directory holding train/ and test/ (default: <root>/data)")

    sp = add("eval", cmd_eval, "evaluate a checkpoint on a labeled dataset")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data")
    sp.add_argument("--out")

    sp = add("sweep", cmd_sweep, "loss-weight grid search, one OS process per run")
    sp.add_argument("--grid", default="0.1:1.0:0.1")
    sp.add_argument("--task", action="append", choices=TASKS)
    sp.add_argument("--jobs", type=int, default=1)
    sp.add_argument("--data")
    sp.add_argument("--dry-run", action="store_true")

    sp = add("report", cmd_report, "comparison table over finished runs")
    sp.add_argument("runs", nargs="*")
    sp.add_argument("--out")
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)
    try:
        args.fn(args)
    except (ConfigurationError, FileNotFoundError) as exc:
        print(f"error [config]: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InvariantViolationError as exc:
        print(f"error [invariant]: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except TrainingAbortError as exc:
        print(f"error [training]: {exc}", file=sys.stderr)
        return EXIT_ABORT
    except CorruptCheckpointError as exc:
        print(f"error [checkpoint]: {exc}", file=sys.stderr)
        return EXIT_CORRUPT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
