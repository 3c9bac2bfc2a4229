"""Command-line entry point: ``unimlm gen|pretrain|finetune|multitask|eval|zeroshot|report``.

Settings resolve as: built-in desk defaults, then the JSON file given by
``--config``, then command-line flags. The resolved document is written to
``run_config.json`` in the output directory next to every checkpoint and
report. Exit codes: 0 success, 1 generation failure, 2 configuration or
usage error, 3 numeric failure (non-finite loss).

Config file layout::

    {"seed": 0,
     "corpus": "corpus/",
     "model": {"dim": 64, "layers": 2, "heads": 4, "patch_h": 16, "patch_w": 16},
     "train": {"lr": 1e-3, "epochs": 10, "batch_size": 32}}

``LAVENDER_THREADS`` caps the worker threads used for inference scoring.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .data import Corpus, write_corpus
from .errors import ConfigError, GenerationError, NumericError
from .metrics import MetricsReport, meta_average
from .model import FusionModel, ModelConfig, load_checkpoint, param_count, save_checkpoint
from .synthgen import generate_corpus
from .tasks import TaskContext, TaskDecoration
from .trainer import (FINETUNE_TASKS, ZERO_SHOT_TASKS, History, TrainConfig, evaluate, finetune,
                      multitask, mt_to_st, oe_answer_vocab, pretrain)

log = logging.getLogger("unimlm")

CHECKPOINT = "checkpoint.lvck"
RUN_CONFIG = "run_config.json"
HISTORY = "history.jsonl"
METRICS = "metrics.json"
PREDICTIONS = "predictions.jsonl"

# Desk-scale defaults; the optimizer's own default lr (2e-5) suits large
# pretrained weights, not a from-scratch 2-layer model.
DESK_MODEL = {"dim": 64, "layers": 2, "heads": 4, "patch_h": 16, "patch_w": 16, "num_frames": 5,
              "max_text_len": 64}
DESK_TRAIN = {"lr": 1e-3, "batch_size": 32, "epochs": 10, "frames": 5, "eval_limit": 200}
# Pretraining needs far more passes than finetuning; it samples one frame fewer than
# downstream tasks, and small batches leave the VTM plateau sooner.
DESK_PRETRAIN = {"frames": 4, "batch_size": 16, "epochs": 100}

_MODEL_FLAGS = {"dim": int, "layers": int, "heads": int, "patch": int, "frames_table": int}
_TRAIN_FLAGS = {"lr": float, "epochs": int, "batch_size": int, "max_steps": int, "frames": int,
                "few_shot": float, "eval_limit": int, "weight_decay": float,
                "objective_mode": str}


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", "utf-8")


def _read_config(path) -> dict:
    if not path:
        return {}
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {p} not found")
    try:
        doc = json.loads(p.read_text("utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {p}: {e}") from e
    if not isinstance(doc, dict):
        raise ConfigError(f"config file {p} must hold an object")
    return doc


def resolve(args, command: str) -> dict:
    """Merge desk defaults, the config file and flags into one run document."""
    doc = _read_config(getattr(args, "config", None))
    run = {"version": __version__, "command": command,
           "seed": doc.get("seed", 0),
           "corpus": doc.get("corpus"),
           "model": {**DESK_MODEL, **doc.get("model", {})},
           "train": {**DESK_TRAIN, **doc.get("train", {})}}
    if command == "pretrain":
        run["train"].update({k: v for k, v in DESK_PRETRAIN.items() if k not in doc.get("train", {})})
    for key in ("task", "tasks", "variant", "init", "baseline", "mt_to_st"):
        if key in doc:
            run[key] = doc[key]
    if getattr(args, "seed", None) is not None:
        run["seed"] = args.seed
    if getattr(args, "corpus", None):
        run["corpus"] = args.corpus
    for flag in _MODEL_FLAGS:
        val = getattr(args, flag, None)
        if val is None:
            continue
        if flag == "patch":
            run["model"]["patch_h"] = run["model"]["patch_w"] = val
        elif flag == "frames_table":
            run["model"]["num_frames"] = val
        else:
            run["model"][flag] = val
    for flag in _TRAIN_FLAGS:
        val = getattr(args, flag, None)
        if val is not None:
            run["train"][flag] = val
    for key in ("task", "variant", "init"):
        val = getattr(args, key, None)
        if val is not None:
            run[key] = val
    if getattr(args, "tasks", None):
        run["tasks"] = args.tasks.split(",")
    if getattr(args, "baseline", False):
        run["baseline"] = True
    if getattr(args, "mt_to_st", False):
        run["mt_to_st"] = True
    run["train"]["seed"] = run["seed"]
    if "variant" in run:
        run["train"]["variant"] = run["variant"]
    if not run.get("corpus"):
        raise ConfigError("no corpus given (--corpus or \"corpus\" in the config file)")
    TrainConfig.from_dict(run["train"]).validate()
    return run


def _corpus(run: dict, model_cfg: dict | None = None) -> Corpus:
    m = model_cfg or run["model"]
    return Corpus.load(run["corpus"], patch=(m["patch_h"], m["patch_w"]))


def _ctx(corpus: Corpus, model: FusionModel, train: TrainConfig, variant: str = "none") -> TaskContext:
    return TaskContext(corpus.vocab, corpus, train.frames, TaskDecoration(variant),
                       model.config.max_text_len)


def _load_init(run: dict) -> tuple[FusionModel, dict]:
    path = Path(run["init"])
    if not path.exists():
        raise ConfigError(f"--init checkpoint {path} not found")
    return load_checkpoint(path)


def _new_model(run: dict, corpus: Corpus) -> FusionModel:
    cfg = dict(run["model"])
    cfg["vocab_size"] = len(corpus.vocab)
    if run.get("baseline"):
        answers = sorted(set(oe_answer_vocab(corpus.dataset("oe_qa"))) |
                         set(oe_answer_vocab(corpus.dataset("fib"))))
        cfg.update(baseline_heads=True, oe_answers=answers)
    return FusionModel(ModelConfig.from_dict(cfg), seed=run["seed"])


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _save(model: FusionModel, path: Path, run: dict, **meta) -> None:
    save_checkpoint(model, path, {"run": run["command"], "seed": run["seed"],
                                  "version": __version__, **meta})


def _write_predictions(path: Path, preds: list[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in preds:
            fh.write(json.dumps(p, sort_keys=True, ensure_ascii=False) + "\n")


# ---------------------------------------------------------------------------
# commands


def cmd_gen(args) -> None:
    fractions = tuple(float(x) for x in args.fractions.split(","))
    clips = generate_corpus(args.n, args.seed, fractions)
    out = write_corpus(clips, args.out)
    log.info("wrote %d clips to %s", len(clips), out)


def cmd_pretrain(args) -> None:
    run = resolve(args, "pretrain")
    out = _out(args)
    _write_json(out / RUN_CONFIG, run)
    corpus = _corpus(run)
    model = _load_init(run)[0] if run.get("init") else _new_model(run, corpus)
    train = TrainConfig.from_dict(run["train"])
    items = corpus.dataset("retrieval").train
    pretrain(items, model, _ctx(corpus, model, train), train, History(out / HISTORY))
    _save(model, out / CHECKPOINT, run, params=param_count(model))


def _evaluate_tasks(model, corpus, ctx, tasks, split, zero_shot=False):
    report, preds = MetricsReport(), []
    for task in tasks:
        items = getattr(corpus.dataset(task), split)
        metrics, p = evaluate(model, task, items, ctx, zero_shot=zero_shot)
        report.add(task, metrics)
        preds += p
    return report, preds


def cmd_finetune(args) -> None:
    run = resolve(args, "finetune")
    task = run.get("task")
    if task not in FINETUNE_TASKS:
        raise ConfigError(f"--task must be one of {FINETUNE_TASKS}, got {task!r}")
    out = _out(args)
    _write_json(out / RUN_CONFIG, run)
    if run.get("init"):
        model, _ = _load_init(run)
        corpus = _corpus(run, model.config.to_dict())
    else:
        corpus = _corpus(run)
        model = _new_model(run, corpus)
    train = TrainConfig.from_dict(run["train"])
    ctx = _ctx(corpus, model, train)
    dataset = corpus.dataset(task)
    history = History(out / HISTORY)
    best, _ = finetune(task, dataset, model, ctx, train, history)
    n_train = next(r["n"] for r in history.records if r.get("event") == "train_size")
    log.info("training-set size %d", n_train)
    _save(best, out / CHECKPOINT, run, task=task, train_size=n_train)
    report, preds = _evaluate_tasks(best, corpus, ctx, [task], "test")
    report.write(out / METRICS)
    _write_predictions(out / PREDICTIONS, preds)


def cmd_multitask(args) -> None:
    run = resolve(args, "multitask")
    tasks = run.get("tasks") or list(FINETUNE_TASKS)
    bad = [t for t in tasks if t not in FINETUNE_TASKS]
    if bad:
        raise ConfigError(f"unknown tasks {bad}")
    variant = run.setdefault("variant", "none")
    run["train"]["variant"] = variant
    out = _out(args)
    _write_json(out / RUN_CONFIG, run)
    if run.get("init"):
        model, _ = _load_init(run)
        corpus = _corpus(run, model.config.to_dict())
    else:
        corpus = _corpus(run)
        model = _new_model(run, corpus)
    train = TrainConfig.from_dict(run["train"])
    ctx = _ctx(corpus, model, train)
    datasets = {t: corpus.dataset(t) for t in tasks}
    res = multitask(datasets, model, ctx, train, History(out / HISTORY))
    _save(res.model, out / CHECKPOINT, run, variant=variant, tasks=tasks,
          params=param_count(res.model))
    _write_json(out / "filter_report.json", res.filter_report)
    (out / "best").mkdir(exist_ok=True)
    for t, m in sorted(res.best.items()):
        _save(m, out / "best" / f"{t}.lvck", run, variant=variant, task=t)
    dctx = _ctx(corpus, res.model, train, variant)
    report, preds = _evaluate_tasks(res.model, corpus, dctx, tasks, "test")
    report.write(out / METRICS)
    _write_predictions(out / PREDICTIONS, preds)
    if run.get("mt_to_st"):
        (out / "st").mkdir(exist_ok=True)
        st_ctx = _ctx(corpus, res.model, train, variant)
        tuned = mt_to_st(res.model, datasets, st_ctx, train)
        for t, m in sorted(tuned.items()):
            _save(m, out / "st" / f"{t}.lvck", run, variant=variant, task=t, ancestor=CHECKPOINT)


def _load_for_eval(args) -> tuple[FusionModel, dict, Corpus, TaskContext]:
    path = Path(args.checkpoint)
    if not path.exists():
        raise ConfigError(f"checkpoint {path} not found")
    model, meta = load_checkpoint(path)
    if args.head == "baseline" and not model.config.baseline_heads:
        raise ConfigError("checkpoint has no task-specific heads")
    if args.head == "unified" and model.config.baseline_heads:
        raise ConfigError("checkpoint uses task-specific heads, not the shared head")
    corpus = Corpus.load(args.corpus, patch=(model.config.patch_h, model.config.patch_w))
    if len(corpus.vocab) != model.config.vocab_size:
        raise ConfigError("corpus vocabulary does not match the checkpoint")
    variant = meta.get("meta", {}).get("variant", "none")
    ctx = TaskContext(corpus.vocab, corpus, args.frames or model.config.num_frames,
                      TaskDecoration(variant), model.config.max_text_len)
    return model, meta, corpus, ctx


def _finish_eval(args, command: str, tasks, zero_shot: bool) -> None:
    model, meta, corpus, ctx = _load_for_eval(args)
    out = _out(args)
    _write_json(out / RUN_CONFIG, {"version": __version__, "command": command,
                                   "checkpoint": str(args.checkpoint), "corpus": str(args.corpus),
                                   "tasks": list(tasks), "split": args.split, "head": args.head,
                                   "frames": ctx.frames, "seed": meta.get("meta", {}).get("seed")})
    report, preds = _evaluate_tasks(model, corpus, ctx, tasks, args.split, zero_shot)
    report.write(out / METRICS)
    _write_predictions(out / PREDICTIONS, preds)
    print(json.dumps(report.to_dict(), sort_keys=True))


def cmd_eval(args) -> None:
    tasks = list(FINETUNE_TASKS) if args.task == "all" else args.task.split(",")
    for t in tasks:
        if t not in FINETUNE_TASKS:
            raise ConfigError(f"unknown task {t!r}")
    _finish_eval(args, "eval", tasks, zero_shot=False)


def cmd_zeroshot(args) -> None:
    if args.task not in ZERO_SHOT_TASKS:
        raise ConfigError(f"zero-shot evaluation covers {', '.join(ZERO_SHOT_TASKS)} only; "
                          f"{args.task!r} needs finetuning")
    _finish_eval(args, "zeroshot", [args.task], zero_shot=True)


def cmd_report(args) -> None:
    combined = MetricsReport()
    for run_dir in args.runs:
        path = Path(run_dir) / METRICS
        if not path.exists():
            raise ConfigError(f"{path} not found")
        rep = MetricsReport.read(path)
        for name, entry in rep.entries.items():
            key = name if name not in combined.entries else f"{name}@{run_dir}"
            combined.entries[key] = entry
    if not combined.entries:
        raise ConfigError("no metrics to report")
    doc = combined.to_dict()
    doc["meta_ave"] = meta_average(combined.headlines())
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text, "utf-8")
    sys.stdout.write(text)


# ---------------------------------------------------------------------------
# parser


def _train_flags(p: argparse.ArgumentParser, model_flags: bool = False) -> None:
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--corpus", help="corpus directory written by `gen`")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--init", help="checkpoint to start from")
    for flag, typ in _TRAIN_FLAGS.items():
        p.add_argument("--" + flag.replace("_", "-"), dest=flag, type=typ)
    if model_flags:
        for flag, typ in _MODEL_FLAGS.items():
            p.add_argument("--" + flag.replace("_", "-"), dest=flag, type=typ)
    p.add_argument("--baseline", action="store_true", help="task-specific heads instead of the shared head")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="unimlm", description=__doc__.splitlines()[0])
    ap.add_argument("--verbose", "-v", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic corpus")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--fractions", default="0.8,0.1,0.1", help="train,val,test fractions")
    g.set_defaults(fn=cmd_gen)

    p = sub.add_parser("pretrain", help="MLM + VTM pretraining")
    _train_flags(p, model_flags=True)
    p.set_defaults(fn=cmd_pretrain)

    f = sub.add_parser("finetune", help="single-task finetuning")
    _train_flags(f, model_flags=True)
    f.add_argument("--task", choices=FINETUNE_TASKS)
    f.set_defaults(fn=cmd_finetune)

    m = sub.add_parser("multitask", help="multi-task finetuning")
    _train_flags(m, model_flags=True)
    m.add_argument("--tasks", help="comma-separated task list (default: all)")
    m.add_argument("--variant", choices=("none", "prompt", "token"))
    m.add_argument("--mt-to-st", dest="mt_to_st", action="store_true",
                   help="also finetune each task from the multitask model")
    m.set_defaults(fn=cmd_multitask)

    for name, fn, help_ in (("eval", cmd_eval, "evaluate a checkpoint"),
                            ("zeroshot", cmd_zeroshot, "zero-shot QA evaluation")):
        e = sub.add_parser(name, help=help_)
        e.add_argument("--checkpoint", required=True)
        e.add_argument("--corpus", required=True)
        e.add_argument("--task", required=True)
        e.add_argument("--split", default="test", choices=("train", "val", "test"))
        e.add_argument("--head", default="auto", choices=("auto", "unified", "baseline"))
        e.add_argument("--frames", type=int)
        e.add_argument("--out", required=True)
        e.set_defaults(fn=fn)

    r = sub.add_parser("report", help="combine metrics of several runs and compute Meta-Ave")
    r.add_argument("runs", nargs="+")
    r.add_argument("--out")
    r.set_defaults(fn=cmd_report)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.fn(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 3
    except GenerationError as e:
        print(f"generation failed: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
