"""Masked-input builders and inference rules for every task.

Every task is phrased as predicting tokens at ``[MASK]`` positions with the
one shared MLM head:

* ``mlm``        15% of word tokens corrupted (80% [MASK], 10% random, 10% kept)
* ``vtm`` / ``retrieval``  ``[CLS] text [SEP] [MASK]`` -> ``true`` / ``false``
* ``mc_qa``      ``[CLS] Q [SEP] A0 [SEP] ... Ak-1 [SEP] [MASK]`` -> digit of the answer index
* ``oe_qa``      ``[CLS] Q [SEP] [MASK]`` -> the answer word
* ``fib``        the blank replaced in place by ``[MASK]`` -> the missing word
* ``caption``    MLM corruption under the seq2seq causal mask; greedy
  mask-insertion decoding at inference

The appended ``[MASK]`` always follows the terminal ``[SEP]``.

Baseline (task-specific head) examples drop the appended mask and carry a
class target for a head applied to the ``[CLS]`` state.
"""
from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .data import PROMPTS, TASK_TOKEN
from .errors import ConfigError
from .model import AttentionMode, FusionModel
from .synthgen import BLANK
from .tensor import IGNORE, Tensor, binary_cross_entropy_with_logits, cross_entropy, log_softmax_np, take
from .text import TokenSeq, Vocabulary, split_words, tokenize, word_ids

log = logging.getLogger(__name__)

MLM_RATE = 0.15
MLM_PROPORTIONS = (0.8, 0.1, 0.1)
MAX_CAPTION_STEPS = 50
SCORE_CHUNK = 64


@dataclass
class MaskedExample:
    task: str
    clip_id: str
    ids: np.ndarray
    labels: np.ndarray
    mode: AttentionMode = AttentionMode.BIDIRECTIONAL
    mask_positions: tuple[int, ...] = ()
    frames: np.ndarray | None = None
    example_id: str = ""
    head: str = "mlm"  # "mlm" or a baseline head kind
    target: int = IGNORE  # class index for baseline heads
    decoration: dict | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.ids)


@dataclass(frozen=True)
class TaskDecoration:
    variant: str = "none"  # none | prompt | token
    prompts: dict = field(default_factory=lambda: dict(PROMPTS))
    tokens: dict = field(default_factory=lambda: dict(TASK_TOKEN))

    def __post_init__(self):
        if self.variant not in ("none", "prompt", "token"):
            raise ConfigError(f"unknown decoration variant {self.variant!r}")


NO_DECORATION = TaskDecoration()


@dataclass
class TaskContext:
    """What builders and inference need besides the model."""

    vocab: Vocabulary
    store: object  # anything with .patches(clip_id) -> (F, S, P)
    frames: int = 5
    decoration: TaskDecoration = NO_DECORATION
    max_text_len: int | None = None

    def eval_frames(self, clip_id: str) -> np.ndarray:
        from .vision import sample_frames
        return sample_frames(self.store.patches(clip_id).shape[0], self.frames, "even")


def _example(task, clip_id, ids, labels, mode=AttentionMode.BIDIRECTIONAL, **kw) -> MaskedExample:
    ids = np.asarray(ids, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    positions = kw.pop("mask_positions", None)
    if positions is None:
        positions = tuple(int(i) for i in np.nonzero(labels != IGNORE)[0])
    return MaskedExample(task, clip_id, ids, labels, AttentionMode(mode), tuple(positions), **kw)


# ---------------------------------------------------------------------------
# builders


def corrupt(ids: np.ndarray, eligible: np.ndarray, vocab: Vocabulary, rate: float,
            proportions, rng: np.random.Generator):
    """BERT-style corruption of the ``eligible`` positions of ``ids``."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"masking rate {rate} outside [0, 1]")
    proportions = np.asarray(proportions, dtype=float)
    if proportions.shape != (3,) or (proportions < 0).any() or abs(proportions.sum() - 1.0) > 1e-9:
        raise ValueError(f"mask/random/keep proportions must sum to 1, got {proportions}")
    ids = np.asarray(ids, dtype=np.int64)
    cand = np.nonzero(eligible)[0]
    # an empty selection is kept (zero loss); redrawing it would inflate the rate on short texts
    chosen = cand[rng.random(cand.size) < rate]
    out = ids.copy()
    labels = np.full(ids.shape, IGNORE, dtype=np.int64)
    labels[chosen] = ids[chosen]
    u = rng.random(chosen.size)
    words = vocab.word_ids()
    to_mask = chosen[u < proportions[0]]
    to_rand = chosen[(u >= proportions[0]) & (u < proportions[0] + proportions[1])]
    out[to_mask] = vocab.mask_id
    out[to_rand] = words[rng.integers(words.size, size=to_rand.size)]
    return out, labels, tuple(int(i) for i in chosen)


def build_mlm(seq: TokenSeq, vocab: Vocabulary, rng: np.random.Generator, rate: float = MLM_RATE,
              proportions=MLM_PROPORTIONS, clip_id: str = "", task: str = "mlm") -> MaskedExample:
    ids = np.asarray(seq.ids[:seq.length], dtype=np.int64)
    eligible = ~vocab.is_special(ids)
    out, labels, chosen = corrupt(ids, eligible, vocab, rate, proportions, rng)
    return _example(task, clip_id, out, labels, mask_positions=chosen)


def vtm_ids(parts: list[str], vocab: Vocabulary) -> list[int]:
    """``[CLS] p0 [SEP] p1 [SEP] ... [SEP] [MASK]``."""
    ids = [vocab.cls_id]
    for p in parts:
        ids += word_ids(p, vocab) + [vocab.sep_id]
    return ids + [vocab.mask_id]


def build_vtm(clip_id: str, text: str, batch_texts, vocab: Vocabulary, rng: np.random.Generator,
              force: bool | None = None, task: str = "vtm") -> MaskedExample:
    """Keep the paired text with probability 0.5 (label ``true``), else swap in another in-batch text."""
    positive = bool(rng.random() < 0.5) if force is None else bool(force)
    shown = text
    if not positive:
        others = sorted({t for t in batch_texts if t != text})
        if others:
            shown = others[int(rng.integers(len(others)))]
        else:
            log.warning("no negative text available for %s; using the positive pair", clip_id)
            positive = True
    ids = vtm_ids([shown], vocab)
    labels = [IGNORE] * len(ids)
    labels[-1] = vocab.true_id if positive else vocab.false_id
    return _example(task, clip_id, ids, labels, meta={"positive": positive, "text": shown})


def _check_choices(k: int) -> None:
    if not 1 <= k <= 10:
        raise ConfigError(f"{k} answer choices: indices must be single digits (1..10)")


def build_mc(question: str, answers, vocab: Vocabulary, answer_index: int | None = None,
             clip_id: str = "") -> MaskedExample:
    _check_choices(len(answers))
    ids = vtm_ids([question, *answers], vocab)
    labels = [IGNORE] * len(ids)
    if answer_index is not None:
        labels[-1] = vocab.digit_ids[answer_index]
    return _example("mc_qa", clip_id, ids, labels, mask_positions=(len(ids) - 1,),
                    meta={"k": len(answers), "answer_index": answer_index})


def single_word_id(answer: str, vocab: Vocabulary) -> int | None:
    words = split_words(answer)
    if len(words) != 1 or words[0] not in vocab:
        return None
    return vocab.id(words[0])


def build_oe(question: str, answer: str | None, vocab: Vocabulary, clip_id: str = "") -> MaskedExample:
    """One [MASK] after the question. Multi-word answers get no label (dropped from training)."""
    if not question.strip():
        raise ValueError("empty question")
    ids = vtm_ids([question], vocab)
    labels = [IGNORE] * len(ids)
    target = None if answer is None else single_word_id(answer, vocab)
    if target is not None:
        labels[-1] = target
    return _example("oe_qa", clip_id, ids, labels, mask_positions=(len(ids) - 1,),
                    meta={"answer": answer, "trainable": target is not None})


def build_fib(sentence: str, answer: str | None, vocab: Vocabulary, clip_id: str = "") -> MaskedExample:
    words = split_words(sentence)
    if words.count(BLANK) != 1:
        raise ValueError(f"fill-in-blank needs exactly one {BLANK!r}, got {words.count(BLANK)}")
    ids = [vocab.cls_id] + [vocab.mask_id if w == BLANK else vocab.id(w) for w in words] + [vocab.sep_id]
    pos = 1 + words.index(BLANK)
    labels = [IGNORE] * len(ids)
    target = None if answer is None else single_word_id(answer, vocab)
    if target is not None:
        labels[pos] = target
    return _example("fib", clip_id, ids, labels, mask_positions=(pos,),
                    meta={"answer": answer, "trainable": target is not None})


def build_caption_train(clip_id: str, caption: str, vocab: Vocabulary, rng: np.random.Generator,
                        rate: float = MLM_RATE, proportions=MLM_PROPORTIONS) -> MaskedExample:
    """Caption tokens corrupted like MLM, seq2seq causal attention.

    The terminal [SEP] is also eligible so the model learns when to stop.
    """
    if not caption.strip():
        raise ValueError("empty caption")
    ids = np.asarray(tokenize(caption, vocab).ids, dtype=np.int64)
    eligible = ~vocab.is_special(ids)
    eligible[-1] = True
    out, labels, chosen = corrupt(ids, eligible, vocab, rate, proportions, rng)
    return _example("caption", clip_id, out, labels, AttentionMode.SEQ2SEQ, mask_positions=chosen,
                    meta={"caption": caption})


def decorate(example: MaskedExample, decoration: TaskDecoration, vocab: Vocabulary) -> MaskedExample:
    """Insert a task prompt or task token right after [CLS]."""
    if decoration.variant == "none":
        return example
    task = example.task
    if decoration.variant == "prompt":
        if task not in decoration.prompts:
            return example
        words = split_words(decoration.prompts[task])
        missing = [w for w in words if w not in vocab]
        if missing:
            raise ConfigError(f"prompt words missing from vocabulary: {missing}")
        insert = [vocab.id(w) for w in words]
    else:
        if task not in decoration.tokens:
            return example
        tok = decoration.tokens[task]
        if tok not in vocab:
            raise ConfigError(f"task token {tok} absent from vocabulary")
        insert = [vocab.id(tok)]
    n = len(insert)
    ids = np.concatenate([example.ids[:1], insert, example.ids[1:]])
    labels = np.concatenate([example.labels[:1], np.full(n, IGNORE), example.labels[1:]])
    return replace(example, ids=ids, labels=labels,
                   mask_positions=tuple(p + n for p in example.mask_positions),
                   decoration={"variant": decoration.variant, "inserted": n})


# -- baseline (task-specific head) examples -------------------------------


def build_baseline(task: str, item: dict, vocab: Vocabulary, answers: list[str] | None = None,
                   positive: bool = True, text: str | None = None) -> MaskedExample:
    cid = item["clip_id"]
    if task in ("vtm", "retrieval"):
        shown = item["caption"] if text is None else text
        ids = tokenize(shown, vocab).ids
        return _example(task, cid, ids, [IGNORE] * len(ids), head="vtm", target=int(positive),
                        mask_positions=())
    if task == "mc_qa":
        _check_choices(len(item["choices"]))
        ids = vtm_ids([item["question"], *item["choices"]], vocab)[:-1]
        return _example(task, cid, ids, [IGNORE] * len(ids), head="mc",
                        target=item.get("answer_index", IGNORE), mask_positions=(),
                        meta={"k": len(item["choices"])})
    index = {a: i for i, a in enumerate(answers or [])}
    if task == "oe_qa":
        ids = tokenize(item["question"], vocab).ids
    elif task == "fib":
        ids = build_fib(item["sentence"], None, vocab).ids
    else:
        raise ConfigError(f"no baseline head for task {task!r}")
    target = index.get(item.get("answer"), IGNORE)
    return _example(task, cid, ids, [IGNORE] * len(ids), head="oe", target=target,
                    mask_positions=(), meta={"answer": item.get("answer")})


# ---------------------------------------------------------------------------
# batching and losses


@dataclass
class Batch:
    patches: np.ndarray  # (B, T, S, P)
    ids: np.ndarray  # (B, N)
    pad: np.ndarray  # (B, N) True at padding
    labels: np.ndarray  # (B, N)
    modes: list[AttentionMode]

    @property
    def video_len(self) -> int:
        return self.patches.shape[1] * self.patches.shape[2]


def collate(examples: list[MaskedExample], ctx: TaskContext) -> Batch:
    B = len(examples)
    N = max(len(e) for e in examples)
    if ctx.max_text_len is not None and N > ctx.max_text_len:
        raise ConfigError(f"text of {N} tokens exceeds max_text_len {ctx.max_text_len}")
    ids = np.full((B, N), ctx.vocab.pad_id, dtype=np.int64)
    labels = np.full((B, N), IGNORE, dtype=np.int64)
    pad = np.ones((B, N), dtype=bool)
    patches = []
    for b, e in enumerate(examples):
        n = len(e)
        ids[b, :n] = e.ids
        labels[b, :n] = e.labels
        pad[b, :n] = False
        frames = e.frames if e.frames is not None else ctx.eval_frames(e.clip_id)
        patches.append(ctx.store.patches(e.clip_id)[frames])
    return Batch(np.stack(patches), ids, pad, labels, [e.mode for e in examples])


def encode_batch(model: FusionModel, batch: Batch) -> Tensor:
    video = model.video_features(batch.patches)
    return model.encode(video, batch.ids, batch.pad, batch.modes)


def mask_logits(model: FusionModel, hidden: Tensor, rows, cols, video_len: int) -> Tensor:
    """Shared-head logits at text positions ``cols`` of batch rows ``rows``."""
    picked = take(hidden, (np.asarray(rows), np.asarray(cols) + video_len))
    return model.mlm_head(picked)


def group_losses(model: FusionModel, examples: list[MaskedExample], batch: Batch,
                 hidden: Tensor) -> dict[str, Tensor]:
    """One loss per (task, head) group present in the batch."""
    groups: dict[tuple[str, str], list[int]] = {}
    for b, e in enumerate(examples):
        groups.setdefault((e.task, e.head), []).append(b)
    V = batch.video_len
    out = {}
    for (task, head), rows in groups.items():
        rows = np.asarray(rows)
        if head == "mlm":
            lab = batch.labels[rows]
            r, c = np.nonzero(lab != IGNORE)
            if r.size == 0:
                out[task] = Tensor(0.0)
                continue
            logits = mask_logits(model, hidden, rows[r], c, V)
            out[task] = cross_entropy(logits, lab[r, c])
        else:
            cls = take(hidden, (rows, np.full(rows.size, V)))
            logits = model.baseline_head(cls, head)
            targets = np.array([examples[b].target for b in rows])
            if head == "vtm":
                out[task] = binary_cross_entropy_with_logits(
                    take(logits, (slice(None), 0)), targets.astype(float))
            else:
                out[task] = cross_entropy(logits, targets)
    return out


# ---------------------------------------------------------------------------
# inference


def _chunks(n: int, size: int):
    return [(i, min(i + size, n)) for i in range(0, n, size)]


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("LAVENDER_THREADS", "1")))
    except ValueError:
        return 1


def last_mask_logprobs(model: FusionModel, examples: list[MaskedExample], ctx: TaskContext,
                       chunk: int = SCORE_CHUNK) -> np.ndarray:
    """Log-probabilities over the full vocabulary at each example's (last) mask position.

    Scoring is split into fixed-size chunks; LAVENDER_THREADS workers may
    process chunks concurrently and results are merged in chunk order.
    """
    examples = [decorate(e, ctx.decoration, ctx.vocab) for e in examples]

    def run(span):
        lo, hi = span
        part = examples[lo:hi]
        batch = collate(part, ctx)
        hidden = encode_batch(model, batch)
        cols = [e.mask_positions[-1] for e in part]
        logits = mask_logits(model, hidden, np.arange(len(part)), cols, batch.video_len)
        return log_softmax_np(logits.data)

    spans = _chunks(len(examples), chunk)
    workers = min(_threads(), len(spans))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(run, spans))
    else:
        parts = [run(s) for s in spans]
    return np.concatenate(parts) if parts else np.zeros((0, len(ctx.vocab)))


def score_vtm_many(model: FusionModel, pairs, ctx: TaskContext, task: str = "retrieval") -> np.ndarray:
    """p(true) at the appended mask for each (clip_id, text-or-parts) pair."""
    examples = []
    for clip_id, text in pairs:
        parts = [text] if isinstance(text, str) else list(text)
        ids = vtm_ids(parts, ctx.vocab)
        examples.append(_example(task, clip_id, ids, [IGNORE] * len(ids),
                                 mask_positions=(len(ids) - 1,)))
    lp = last_mask_logprobs(model, examples, ctx)
    return np.exp(lp[:, ctx.vocab.true_id]) if len(examples) else np.zeros(0)


def score_vtm(model: FusionModel, clip_id: str, text, ctx: TaskContext) -> float:
    return float(score_vtm_many(model, [(clip_id, text)], ctx)[0])


def rank_by_score(ids, scores) -> list[tuple[str, float]]:
    """Descending score, ties broken by id ascending."""
    order = sorted(range(len(ids)), key=lambda i: (-scores[i], ids[i]))
    return [(ids[i], float(scores[i])) for i in order]


def rank_retrieval(model: FusionModel, query: str, candidates, ctx: TaskContext) -> list[tuple[str, float]]:
    """Rank candidate clips for a text query by p(true)."""
    candidates = list(candidates)
    if not candidates:
        raise ValueError("no retrieval candidates")
    scores = score_vtm_many(model, [(c, query) for c in candidates], ctx)
    return rank_by_score(candidates, scores)


def rank_texts(model: FusionModel, clip_id: str, texts, ctx: TaskContext) -> list[tuple[int, float]]:
    """Video-to-text direction: rank candidate texts for one clip (returns text indices)."""
    texts = list(texts)
    if not texts:
        raise ValueError("no candidate texts")
    scores = score_vtm_many(model, [(clip_id, t) for t in texts], ctx)
    return rank_by_score(list(range(len(texts))), scores)


def restricted_argmax(logits: np.ndarray, allowed_ids) -> int:
    """Index into ``allowed_ids`` of the largest logit; ties go to the lowest index."""
    vals = np.asarray(logits)[np.asarray(allowed_ids)]
    return int(np.argmax(vals))


def infer_mc_many(model: FusionModel, examples: list[MaskedExample], ctx: TaskContext) -> list[int]:
    lp = last_mask_logprobs(model, examples, ctx)
    out = []
    for row, e in zip(lp, examples):
        k = e.meta.get("k")
        _check_choices(k)
        out.append(restricted_argmax(row, ctx.vocab.digit_ids[:k]))
    return out


def infer_mc(model: FusionModel, example: MaskedExample, k: int, ctx: TaskContext) -> int:
    _check_choices(k)
    example = replace(example, meta={**example.meta, "k": k})
    return infer_mc_many(model, [example], ctx)[0]


def infer_oe_many(model: FusionModel, examples: list[MaskedExample], ctx: TaskContext) -> list[str]:
    lp = last_mask_logprobs(model, examples, ctx)
    return [ctx.vocab.token(int(np.argmax(row))) for row in lp]


def infer_oe(model: FusionModel, example: MaskedExample, ctx: TaskContext) -> str:
    return infer_oe_many(model, [example], ctx)[0]


def zero_shot_mc_many(model: FusionModel, items: list[dict], ctx: TaskContext) -> list[int]:
    pairs = [(it["clip_id"], [it["question"], a]) for it in items for a in it["choices"]]
    scores = score_vtm_many(model, pairs, ctx, task="vtm")
    out, at = [], 0
    for it in items:
        k = len(it["choices"])
        out.append(int(np.argmax(scores[at:at + k])))
        at += k
    return out


def zero_shot_mc(model: FusionModel, question: str, answers, clip_id: str, ctx: TaskContext) -> int:
    """Rank answers by p(true) of ``Q [SEP] A [MASK]``; ties go to the lowest index."""
    return zero_shot_mc_many(model, [{"clip_id": clip_id, "question": question,
                                      "choices": list(answers)}], ctx)[0]


def baseline_logits(model: FusionModel, examples: list[MaskedExample], ctx: TaskContext,
                    chunk: int = SCORE_CHUNK) -> np.ndarray:
    out = []
    for lo, hi in _chunks(len(examples), chunk):
        part = examples[lo:hi]
        batch = collate(part, ctx)
        hidden = encode_batch(model, batch)
        cls = take(hidden, (np.arange(len(part)), np.full(len(part), batch.video_len)))
        out.append(model.baseline_head(cls, part[0].head).data)
    return np.concatenate(out)


def decode_captions(model: FusionModel, clip_ids, ctx: TaskContext,
                    max_steps: int = MAX_CAPTION_STEPS) -> list[list[int]]:
    """Greedy mask-insertion decoding for several clips in lockstep.

    Step t feeds ``[CLS] y_1 .. y_{t-1} [MASK]`` under the seq2seq mask and
    commits the argmax at the mask; a clip stops on [SEP] or after
    ``max_steps`` tokens.
    """
    vocab = ctx.vocab
    clip_ids = list(clip_ids)
    n = len(clip_ids)
    generated: list[list[int]] = [[] for _ in range(n)]
    done = np.zeros(n, dtype=bool)
    prefix = np.full((n, 1), vocab.cls_id, dtype=np.int64)
    frames = [ctx.eval_frames(c) for c in clip_ids]
    for _ in range(max_steps):
        if done.all():
            break
        live = np.nonzero(~done)[0]
        ids = np.concatenate([prefix[live], np.full((live.size, 1), vocab.mask_id)], axis=1)
        examples = [MaskedExample("caption", clip_ids[i], ids[j], np.full(ids.shape[1], IGNORE),
                                  AttentionMode.SEQ2SEQ, (ids.shape[1] - 1,), frames[i])
                    for j, i in enumerate(live)]
        lp = last_mask_logprobs(model, examples, ctx)
        step_tokens = np.full(n, vocab.pad_id, dtype=np.int64)
        for j, i in enumerate(live):
            tok = int(np.argmax(lp[j]))
            step_tokens[i] = tok
            if tok == vocab.sep_id:
                done[i] = True
            else:
                generated[i].append(tok)
                if len(generated[i]) >= max_steps:
                    done[i] = True
        prefix = np.concatenate([prefix, step_tokens[:, None]], axis=1)
    return generated


def decode_caption(model: FusionModel, clip_id: str, ctx: TaskContext,
                   max_steps: int = MAX_CAPTION_STEPS) -> str:
    tokens = decode_captions(model, [clip_id], ctx, max_steps)[0]
    return " ".join(ctx.vocab.token(t) for t in tokens if t not in ctx.vocab.special_ids)
