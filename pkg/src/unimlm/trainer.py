"""AdamW, the warmup/decay schedule, and the training loops.

Loops: pretraining (MLM + VTM through the shared head, or MLM + binary VTM
head for the task-specific baseline), single-task finetuning with
per-epoch validation, few-shot subsetting, and multi-task finetuning with
uniform dataset sampling.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .data import TaskDataset
from .errors import ConfigError, NumericError
from .metrics import HEADLINE, accuracy, cider, meta_average, recall_at_k
from .model import FusionModel
from .tasks import (MaskedExample, TaskContext, TaskDecoration, baseline_logits,
                    build_baseline, build_caption_train, build_fib, build_mc, build_mlm, build_oe,
                    build_vtm, collate, decode_captions, decorate, encode_batch, group_losses,
                    infer_mc_many, infer_oe_many, rank_by_score, score_vtm_many, zero_shot_mc_many)
from .tensor import IGNORE, Tape, backward
from .text import tokenize
from .vision import sample_frames

log = logging.getLogger(__name__)

FINETUNE_TASKS = ("oe_qa", "mc_qa", "fib", "retrieval", "caption")
ZERO_SHOT_TASKS = ("mc_qa", "oe_qa", "fib")


@dataclass
class TrainConfig:
    lr: float = 2e-5
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    weight_decay: float = 1e-3
    warmup_ratio: float = 0.10
    batch_size: int = 32
    epochs: int = 1
    seed: int = 0
    max_steps: int | None = None  # caps total steps (0 or None: no cap)
    frames: int = 5  # frames sampled per clip
    frame_mode: str = "random"  # training-time sampling; evaluation always uses "even"
    mask_rate: float = 0.15
    mask_proportions: tuple = (0.8, 0.1, 0.1)
    vtm_weight: float = 1.0
    objective_mode: str = "mixed"  # mixed | alternating
    few_shot: float = 1.0
    retrieval_cartesian: bool = False
    eval_limit: int | None = None  # cap on validation items per epoch
    tasks: list = field(default_factory=list)  # multitask mixture
    variant: str = "none"  # decoration: none | prompt | token

    def __post_init__(self):
        self.mask_proportions = tuple(self.mask_proportions)
        self.tasks = list(self.tasks)

    def validate(self) -> None:
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if not 0.0 <= self.warmup_ratio < 1.0:
            raise ConfigError(f"warmup_ratio must be in [0, 1), got {self.warmup_ratio}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")
        if self.objective_mode not in ("mixed", "alternating"):
            raise ConfigError(f"unknown objective_mode {self.objective_mode!r}")
        if self.frame_mode not in ("even", "random"):
            raise ConfigError(f"unknown frame_mode {self.frame_mode!r}")
        if not 0.0 < self.few_shot <= 1.0:
            raise ConfigError(f"few_shot must be in (0, 1], got {self.few_shot}")
        TaskDecoration(self.variant)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mask_proportions"] = list(self.mask_proportions)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown training keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros(cls, params) -> "OptimState":
        return cls({n: np.zeros_like(p.data) for n, p in params.items()},
                   {n: np.zeros_like(p.data) for n, p in params.items()})


def no_decay(name: str) -> bool:
    """Biases and norm gains are exempt from weight decay."""
    return name.endswith(".b") or name.endswith(".g")


def adamw_step(params, grads, state: OptimState, config: TrainConfig, lr_t: float) -> None:
    """One in-place AdamW update with bias correction and decoupled weight decay.

    ``params`` maps names to Tensors; ``grads`` maps the same names to arrays.
    """
    state.step += 1
    t = state.step
    b1, b2 = config.beta1, config.beta2
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.data.shape or state.m[name].shape != p.data.shape:
            raise ValueError(f"{name}: grad {g.shape} / moment {state.m[name].shape} vs param {p.data.shape}")
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if config.weight_decay and not no_decay(name):
            p.data *= 1.0 - lr_t * config.weight_decay
        p.data -= lr_t * (m / c1) / (np.sqrt(v / c2) + config.eps)


def lr_schedule(step: int, total_steps: int, config: TrainConfig) -> float:
    """Linear warmup from 0 over ``warmup_ratio`` of the steps, then linear decay to 0."""
    if total_steps <= 0:
        return 0.0
    step = min(max(step, 0), total_steps)
    warm = config.warmup_ratio * total_steps
    if warm > 0 and step < warm:
        return config.lr * step / warm
    if total_steps == warm:
        return config.lr
    return config.lr * max(0.0, (total_steps - step) / (total_steps - warm))


# ---------------------------------------------------------------------------
# history


class History:
    """Line-delimited loss / metric records, optionally mirrored to a file."""

    def __init__(self, path=None):
        self.records: list[dict] = []
        self.path = Path(path) if path else None
        if self.path:
            self.path.write_text("", "utf-8")

    def add(self, **record) -> None:
        self.records.append(record)
        if self.path:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")

    def losses(self, task: str | None = None) -> list[dict]:
        return [r for r in self.records if "loss" in r and (task is None or r.get("task") == task)]


def _check_finite(losses: dict, step: int) -> None:
    for k, v in losses.items():
        if not math.isfinite(v):
            raise NumericError(f"non-finite {k} loss {v} at step {step}")


class Optimizer:
    def __init__(self, model: FusionModel, config: TrainConfig, total_steps: int):
        self.model = model
        self.config = config
        self.total = total_steps
        self.state = OptimState.zeros(model.params)

    def step(self, examples: list[MaskedExample], ctx: TaskContext, weights=None) -> dict[str, float]:
        model = self.model
        batch = collate(examples, ctx)
        model.training = True
        try:
            with Tape() as tape:
                hidden = encode_batch(model, batch)
                parts = group_losses(model, examples, batch, hidden)
                total = None
                for k, l in parts.items():
                    w = (weights or {}).get(k, 1.0)
                    term = l if w == 1.0 else l * w
                    total = term if total is None else total + term
        finally:
            model.training = False
        values = {k: float(v.data) for k, v in parts.items()}
        _check_finite(values, self.state.step)
        model.zero_grad()
        if tape.records:
            backward(total, tape)
        lr_t = lr_schedule(self.state.step, self.total, self.config)
        adamw_step(model.params, {n: p.grad for n, p in model.params.items()}, self.state,
                   self.config, lr_t)
        model.step += 1
        values["lr"] = lr_t
        return values


# ---------------------------------------------------------------------------
# example construction


def _frames(ctx: TaskContext, clip_id: str, config: TrainConfig, rng) -> np.ndarray:
    n = ctx.store.patches(clip_id).shape[0]
    return sample_frames(n, config.frames, config.frame_mode, rng)


def train_examples(task: str, items: list[dict], ctx: TaskContext, config: TrainConfig,
                   rng: np.random.Generator, baseline: bool = False,
                   answers: list[str] | None = None) -> list[MaskedExample]:
    """Training examples for one batch of items of ``task``."""
    vocab = ctx.vocab
    out: list[MaskedExample] = []
    texts = [it.get("caption") for it in items]
    for it in items:
        cid = it["clip_id"]
        if task == "mlm":
            exs = [build_mlm(tokenize(it["caption"], vocab), vocab, rng, config.mask_rate,
                             config.mask_proportions, clip_id=cid)]
        elif task in ("vtm", "retrieval"):
            if task == "vtm":
                forced = [None]
            elif config.retrieval_cartesian:
                forced = [True] + [False] * (len(set(texts)) - 1)
            else:
                forced = [True, False]  # one negative per positive
            exs = []
            others = [t for t in texts if t != it["caption"]]
            for j, f in enumerate(forced):
                if baseline:
                    positive = bool(rng.random() < 0.5) if f is None else f
                    text = it["caption"]
                    if not positive and others:
                        text = others[int(rng.integers(len(others)))]
                    positive = positive or not others
                    exs.append(build_baseline(task, it, vocab, positive=positive, text=text))
                elif config.retrieval_cartesian and f is False:
                    o = sorted(set(others))[j - 1]
                    exs.append(build_vtm(cid, it["caption"], [o], vocab, rng, force=False, task=task))
                else:
                    exs.append(build_vtm(cid, it["caption"], texts, vocab, rng, force=f, task=task))
        elif baseline and task in ("mc_qa", "oe_qa", "fib"):
            ex = build_baseline(task, it, vocab, answers)
            exs = [ex] if ex.target >= 0 else []
        elif task == "mc_qa":
            exs = [build_mc(it["question"], it["choices"], vocab, it["answer_index"], cid)]
        elif task == "oe_qa":
            ex = build_oe(it["question"], it["answer"], vocab, cid)
            exs = [ex] if ex.meta["trainable"] else []
        elif task == "fib":
            ex = build_fib(it["sentence"], it["answer"], vocab, cid)
            exs = [ex] if ex.meta["trainable"] else []
        elif task == "caption":
            exs = [build_caption_train(cid, it["caption"], vocab, rng, config.mask_rate,
                                       config.mask_proportions)]
        else:
            raise ConfigError(f"unknown task {task!r}")
        for ex in exs:
            ex.frames = _frames(ctx, cid, config, rng)
            ex.example_id = it.get("id", cid)
            out.append(decorate(ex, ctx.decoration, vocab) if ex.head == "mlm" else ex)
    return out


def _batches(n: int, size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i:i + size] for i in range(0, n, size)]


def _steps_for(n_items: int, config: TrainConfig) -> int:
    steps = config.epochs * math.ceil(n_items / config.batch_size)
    return min(steps, config.max_steps) if config.max_steps else steps


# ---------------------------------------------------------------------------
# pretraining


def pretrain(items: list[dict], model: FusionModel, ctx: TaskContext, config: TrainConfig,
             history: History | None = None) -> History:
    """MLM on true pairs plus VTM with a 0.5 swap; ``L = L_mlm + vtm_weight * L_vtm``.

    ``items`` are caption items (``clip_id`` and ``caption``). Baseline models
    route VTM through their binary head.
    """
    config.validate()
    if config.batch_size < 2:
        raise ConfigError("pretraining needs batch_size >= 2 to draw in-batch negatives")
    if not items:
        raise ConfigError("no pretraining items")
    history = history or History()
    rng = np.random.default_rng([config.seed, 11])
    baseline = model.config.baseline_heads
    total = _steps_for(len(items), config)
    opt = Optimizer(model, config, total)
    step = 0
    while step < total:
        for idx in _batches(len(items), config.batch_size, rng):
            if step >= total:
                break
            batch = [items[i] for i in idx]
            if len(batch) < 2:
                continue
            if config.objective_mode == "alternating":
                objectives = ["mlm"] if step % 2 == 0 else ["vtm"]
            else:
                objectives = ["mlm", "vtm"]
            examples = []
            for obj in objectives:
                examples += train_examples(obj, batch, ctx, config, rng, baseline=baseline)
            losses = opt.step(examples, ctx, weights={"vtm": config.vtm_weight})
            lr_t = losses.pop("lr")
            history.add(step=step, task="pretrain", loss=losses, lr=lr_t)
            step += 1
    return history


# ---------------------------------------------------------------------------
# evaluation


def _limit(items: list[dict], limit: int | None) -> list[dict]:
    return items if not limit or len(items) <= limit else items[:limit]


def evaluate(model: FusionModel, task: str, items: list[dict], ctx: TaskContext,
             answers: list[str] | None = None, zero_shot: bool = False) -> tuple[dict, list[dict]]:
    """Metrics and a prediction dump for ``items`` of ``task``."""
    baseline = model.config.baseline_heads and task != "caption"
    vocab = ctx.vocab
    preds: list[dict] = []
    if not items:
        raise ConfigError(f"no {task} items to evaluate")
    if task in ("oe_qa", "fib"):
        golds = [it["answer"] for it in items]
        if baseline:
            exs = [build_baseline(task, it, vocab, answers or model.config.oe_answers) for it in items]
            logits = baseline_logits(model, exs, ctx)
            table = answers or model.config.oe_answers
            guesses = [table[int(np.argmax(r))] for r in logits]
        else:
            builder = build_oe if task == "oe_qa" else build_fib
            key = "question" if task == "oe_qa" else "sentence"
            exs = [builder(it[key], None, vocab, it["clip_id"]) for it in items]
            guesses = infer_oe_many(model, exs, ctx)
        metrics = {"accuracy": accuracy(guesses, golds)}
        preds = [{"task": task, "id": it["id"], "prediction": p, "gold": g}
                 for it, p, g in zip(items, guesses, golds)]
    elif task == "mc_qa":
        golds = [it["answer_index"] for it in items]
        if zero_shot and not baseline:
            guesses = zero_shot_mc_many(model, items, ctx)
        elif zero_shot:
            guesses = baseline_zero_shot_mc(model, items, ctx)
        elif baseline:
            exs = [build_baseline(task, it, vocab) for it in items]
            logits = baseline_logits(model, exs, ctx)
            guesses = [int(np.argmax(r[:len(it["choices"])])) for r, it in zip(logits, items)]
        else:
            exs = [build_mc(it["question"], it["choices"], vocab, None, it["clip_id"]) for it in items]
            guesses = infer_mc_many(model, exs, ctx)
        metrics = {"accuracy": accuracy(guesses, golds)}
        preds = [{"task": task, "id": it["id"], "prediction": p, "gold": g}
                 for it, p, g in zip(items, guesses, golds)]
    elif task == "retrieval":
        clip_ids = [it["clip_id"] for it in items]
        pairs = [(c, it["caption"]) for it in items for c in clip_ids]
        if baseline:
            exs = [build_baseline(task, {"clip_id": c, "caption": t}, vocab) for c, t in pairs]
            scores = 1.0 / (1.0 + np.exp(-baseline_logits(model, exs, ctx)[:, 0]))
        else:
            scores = score_vtm_many(model, pairs, ctx)
        scores = scores.reshape(len(items), len(clip_ids))
        rankings = [rank_by_score(clip_ids, row) for row in scores]
        metrics = recall_at_k(rankings, clip_ids)
        metrics["recall_avg"] = metrics.pop("avg")
        preds = [{"task": task, "id": it["id"], "prediction": [c for c, _ in r[:10]],
                  "gold": it["clip_id"], "scores": [s for _, s in r[:10]]}
                 for it, r in zip(items, rankings)]
    elif task == "caption":
        clip_ids = [it["clip_id"] for it in items]
        tokens = decode_captions(model, clip_ids, ctx)
        texts = [" ".join(vocab.token(t) for t in seq) for seq in tokens]
        refs = [[it["caption"]] for it in items]
        metrics = {"cider": cider(texts, refs)}
        preds = [{"task": task, "id": it["id"], "prediction": t, "gold": it["caption"]}
                 for it, t in zip(items, texts)]
    else:
        raise ConfigError(f"cannot evaluate task {task!r}")
    metrics["n"] = len(items)
    return metrics, preds


def baseline_zero_shot_mc(model: FusionModel, items: list[dict], ctx: TaskContext) -> list[int]:
    """Rank answers by the binary head's matched probability of ``Q [SEP] A``."""
    exs, spans = [], []
    for it in items:
        spans.append(len(it["choices"]))
        for a in it["choices"]:
            ex = build_baseline("vtm", {"clip_id": it["clip_id"], "caption": it["question"]},
                                ctx.vocab)
            ids = list(ex.ids) + [ctx.vocab.id(w) for w in a.split()] + [ctx.vocab.sep_id]
            ex.ids = np.asarray(ids)
            ex.labels = np.full(len(ids), IGNORE)
            exs.append(ex)
    logits = baseline_logits(model, exs, ctx)[:, 0]
    out, at = [], 0
    for k in spans:
        out.append(int(np.argmax(logits[at:at + k])))
        at += k
    return out


def headline(task: str, metrics: dict) -> float:
    return float(metrics[HEADLINE[task]])


# ---------------------------------------------------------------------------
# finetuning


def oe_answer_vocab(dataset: TaskDataset) -> list[str]:
    """Closed answer vocabulary for the baseline OE head: every training answer."""
    return sorted({it["answer"] for it in dataset.train})


def _check_task(task: str, dataset: TaskDataset) -> None:
    if task not in FINETUNE_TASKS:
        raise ConfigError(f"unknown finetuning task {task!r}")
    if dataset.task != task:
        raise ConfigError(f"dataset holds {dataset.task!r} items, not {task!r}")


def finetune(task: str, dataset: TaskDataset, model: FusionModel, ctx: TaskContext,
             config: TrainConfig, history: History | None = None) -> tuple[FusionModel, History]:
    """Train on ``task`` and return the model with the best validation headline."""
    config.validate()
    _check_task(task, dataset)
    if config.few_shot < 1.0:
        dataset = dataset.few_shot(config.few_shot, config.seed)
        log.info("few-shot %s: %d training items", task, len(dataset.train))
    history = history or History()
    history.add(task=task, event="train_size", n=len(dataset.train))
    rng = np.random.default_rng([config.seed, 23])
    baseline = model.config.baseline_heads and task != "caption"
    answers = model.config.oe_answers if baseline else None
    total = _steps_for(len(dataset.train), config)
    opt = Optimizer(model, config, total)
    best, best_score = model.copy(), -math.inf
    step = 0
    for epoch in range(config.epochs):
        if step >= total:
            break
        for idx in _batches(len(dataset.train), config.batch_size, rng):
            if step >= total:
                break
            batch = [dataset.train[i] for i in idx]
            exs = train_examples(task, batch, ctx, config, rng, baseline, answers)
            if not exs:
                continue
            losses = opt.step(exs, ctx)
            lr_t = losses.pop("lr")
            history.add(step=step, task=task, loss=losses, lr=lr_t)
            step += 1
        if dataset.val:
            metrics, _ = evaluate(model, task, _limit(dataset.val, config.eval_limit), ctx, answers)
            history.add(epoch=epoch, task=task, split="val", metrics=metrics)
            score = headline(task, metrics)
            if score > best_score:
                best_score, best = score, model.copy()
    if not dataset.val or best_score == -math.inf:
        best = model.copy()
    return best, history


def train_baseline(task: str, dataset: TaskDataset, model: FusionModel, ctx: TaskContext,
                   config: TrainConfig, history: History | None = None) -> tuple[FusionModel, History]:
    """Task-specific-head training; captioning keeps the shared MLM path."""
    if not model.config.baseline_heads:
        raise ConfigError("train_baseline needs a model with baseline heads")
    return finetune(task, dataset, model, ctx, config, history)


def contamination_filter(train: list[dict], held_out) -> tuple[list[dict], dict]:
    """Drop training items whose clip appears in any held-out split of any dataset."""
    banned = {it["clip_id"] for split in held_out for it in split}
    kept = [it for it in train if it["clip_id"] not in banned]
    removed = [it.get("id", it["clip_id"]) for it in train if it["clip_id"] in banned]
    return kept, {"removed": removed, "n_removed": len(removed),
                  "clip_ids": sorted({it["clip_id"] for it in train} & banned)}


class DatasetSampler:
    """Picks a dataset uniformly at random each step."""

    def __init__(self, names, rng: np.random.Generator):
        self.names = list(names)
        if not self.names:
            raise ConfigError("no datasets to sample from")
        self.rng = rng

    def next(self) -> str:
        return self.names[int(self.rng.integers(len(self.names)))]


@dataclass
class MultitaskResult:
    model: FusionModel
    best: dict[str, FusionModel]
    best_scores: dict[str, float]
    history: History
    filter_report: dict


def multitask(datasets: dict[str, TaskDataset], model: FusionModel, ctx: TaskContext,
              config: TrainConfig, history: History | None = None) -> MultitaskResult:
    """One parameter set trained on batches from a uniformly chosen dataset per step.

    Returns the final (all-in-one) model plus, per task, the checkpoint with
    the best validation headline (selected once per epoch).
    """
    config.validate()
    if len(datasets) < 2:
        raise ConfigError("multitask training needs at least two datasets")
    for name, ds in datasets.items():
        _check_task(name, ds)
    history = history or History()
    held = [split for ds in datasets.values() for split in (ds.val, ds.test)]
    report = {}
    filtered = {}
    for name, ds in datasets.items():
        kept, rep = contamination_filter(ds.train, held)
        report[name] = rep
        filtered[name] = ds.with_train(kept)
        if config.few_shot < 1.0:
            filtered[name] = filtered[name].few_shot(config.few_shot, config.seed)
    ctx = TaskContext(ctx.vocab, ctx.store, ctx.frames, TaskDecoration(config.variant), ctx.max_text_len)
    rng = np.random.default_rng([config.seed, 31])
    sampler = DatasetSampler(sorted(filtered), rng)
    baseline = model.config.baseline_heads
    per_epoch = max(1, round(np.mean([math.ceil(len(d.train) / config.batch_size)
                                      for d in filtered.values()])))
    total = config.epochs * per_epoch
    if config.max_steps:
        total = min(total, config.max_steps)
    opt = Optimizer(model, config, total)
    orders = {n: iter(()) for n in filtered}
    best: dict[str, FusionModel] = {}
    best_scores: dict[str, float] = {}
    for step in range(total):
        name = sampler.next()
        ds = filtered[name]
        idx = []
        while len(idx) < min(config.batch_size, len(ds.train)):
            try:
                idx.append(next(orders[name]))
            except StopIteration:
                orders[name] = iter(rng.permutation(len(ds.train)).tolist())
        batch = [ds.train[i] for i in idx]
        use_base = baseline and name != "caption"
        exs = train_examples(name, batch, ctx, config, rng, use_base, model.config.oe_answers)
        if exs:
            losses = opt.step(exs, ctx)
            lr_t = losses.pop("lr")
            history.add(step=step, task=name, loss=losses, lr=lr_t)
        if (step + 1) % per_epoch == 0 or step + 1 == total:
            for n, d in filtered.items():
                if not d.val:
                    continue
                metrics, _ = evaluate(model, n, _limit(d.val, config.eval_limit), ctx)
                history.add(step=step, task=n, split="val", metrics=metrics)
                score = headline(n, metrics)
                if score > best_scores.get(n, -math.inf):
                    best_scores[n] = score
                    best[n] = model.copy()
    return MultitaskResult(model, best, best_scores, history, report)


def mt_to_st(mt_model: FusionModel, datasets: dict[str, TaskDataset], ctx: TaskContext,
             config: TrainConfig) -> dict[str, FusionModel]:
    """Further single-task finetuning of copies of one multitask model."""
    out = {}
    for name in sorted(datasets):
        tuned, _ = finetune(name, datasets[name], mt_model.copy(), ctx, config)
        out[name] = tuned
    return out


def evaluate_all(model: FusionModel, datasets: dict[str, TaskDataset], ctx: TaskContext,
                 split: str = "test", limit: int | None = None) -> dict[str, dict]:
    return {name: evaluate(model, name, _limit(getattr(ds, split), limit), ctx)[0]
            for name, ds in sorted(datasets.items())}


def meta_ave(results: dict[str, dict]) -> float:
    return meta_average({k: headline(k, v) for k, v in results.items()})
