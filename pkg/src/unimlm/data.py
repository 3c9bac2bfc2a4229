"""Corpus storage (manifest + clip files + vocabulary) and per-task item lists."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .synthgen import BLANK, AnnotatedClip, SceneSpec
from .text import Vocabulary, build_vocab
from .vision import VideoClip, load_clip, patchify_clip, save_clip

MANIFEST = "manifest.jsonl"
VOCAB_FILE = "vocab.txt"
TASKS = ("oe_qa", "mc_qa", "fib", "retrieval", "caption")

# Task prompts inserted after [CLS] by the prompt decoration variant.
PROMPTS = {
    "vtm": "is the video-text paired, true or false",
    "retrieval": "is the video-text paired, true or false",
    "mc_qa": "which answer choice is correct, choose from 0, 1, 2, 3, 4.",
    "oe_qa": "answer the question about the video.",
    "fib": "answer the question about the video.",
    "caption": "write a description about the video.",
}
TASK_TOKEN = {"vtm": "[VTM]", "retrieval": "[VTM]", "mc_qa": "[MC]", "oe_qa": "[OE]",
              "fib": "[OE]", "caption": "[CAP]"}


def record_of(c: AnnotatedClip, clip_file: str) -> dict:
    return {"clip_id": c.clip_id, "clip_file": clip_file, "split": c.split,
            "caption": c.caption, "qa": c.oe, "mc": c.mc, "fib": c.fib,
            "scene": c.scene.to_dict()}


def corpus_texts(records) -> list[str]:
    texts = []
    for r in records:
        texts.append(r["caption"])
        for qa in r["qa"]:
            texts += [qa["question"], qa["answer"]]
        texts.append(r["mc"]["question"])
        texts += r["mc"]["choices"]
        texts.append(r["fib"]["sentence"].replace(BLANK, " "))
    return texts + sorted(set(PROMPTS.values()))


def write_corpus(clips: list[AnnotatedClip], out_dir) -> Path:
    out = Path(out_dir)
    (out / "clips").mkdir(parents=True, exist_ok=True)
    records = []
    for c in clips:
        rel = f"clips/{c.clip_id}.vclp"
        save_clip(c.clip, out / rel)
        records.append(record_of(c, rel))
    with open(out / MANIFEST, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
    build_vocab(corpus_texts(records)).save(out / VOCAB_FILE)
    return out


@dataclass
class Corpus:
    records: list[dict]
    clips: dict[str, VideoClip]
    vocab: Vocabulary
    patch: tuple[int, int] = (8, 8)
    _patches: dict = field(default_factory=dict, repr=False)

    @classmethod
    def load(cls, path, patch=(8, 8)) -> "Corpus":
        root = Path(path)
        if not (root / MANIFEST).exists():
            raise ConfigError(f"no corpus manifest under {root}")
        records = [json.loads(line) for line in (root / MANIFEST).read_text("utf-8").splitlines() if line]
        clips = {r["clip_id"]: load_clip(root / r["clip_file"], r["clip_id"]) for r in records}
        return cls(records, clips, Vocabulary.load(root / VOCAB_FILE), tuple(patch))

    @classmethod
    def from_clips(cls, clips: list[AnnotatedClip], vocab: Vocabulary | None = None,
                   patch=(8, 8)) -> "Corpus":
        records = [record_of(c, f"clips/{c.clip_id}.vclp") for c in clips]
        vocab = vocab or build_vocab(corpus_texts(records))
        return cls(records, {c.clip_id: c.clip for c in clips}, vocab, tuple(patch))

    def patches(self, clip_id: str) -> np.ndarray:
        """All stored frames of a clip, patchified (F, S, P), cached."""
        p = self._patches.get(clip_id)
        if p is None:
            p = patchify_clip(self.clips[clip_id], *self.patch)
            self._patches[clip_id] = p
        return p

    def split(self, name: str) -> list[dict]:
        return [r for r in self.records if r["split"] == name]

    def scene(self, clip_id: str) -> SceneSpec:
        for r in self.records:
            if r["clip_id"] == clip_id:
                return SceneSpec.from_dict(r["scene"])
        raise KeyError(clip_id)

    def dataset(self, task: str) -> "TaskDataset":
        return TaskDataset(task, *(task_items(self.split(s), task) for s in ("train", "val", "test")))


def task_items(records: list[dict], task: str) -> list[dict]:
    """Flatten manifest records into one item per training/eval example."""
    items = []
    for r in records:
        cid = r["clip_id"]
        if task == "oe_qa":
            for j, qa in enumerate(r["qa"]):
                items.append({"id": f"{cid}/oe{j}", "clip_id": cid, "question": qa["question"],
                              "answer": qa["answer"], "kind": qa["kind"]})
        elif task == "mc_qa":
            mc = r["mc"]
            items.append({"id": f"{cid}/mc", "clip_id": cid, "question": mc["question"],
                          "choices": list(mc["choices"]), "answer_index": mc["answer_index"]})
        elif task == "fib":
            items.append({"id": f"{cid}/fib", "clip_id": cid, "sentence": r["fib"]["sentence"],
                          "answer": r["fib"]["answer"]})
        elif task in ("retrieval", "caption", "vtm", "mlm"):
            items.append({"id": f"{cid}/{task}", "clip_id": cid, "caption": r["caption"]})
        else:
            raise ConfigError(f"unknown task {task!r}")
    return items


@dataclass
class TaskDataset:
    task: str
    train: list[dict]
    val: list[dict]
    test: list[dict]

    def few_shot(self, fraction: float, seed: int) -> "TaskDataset":
        """Keep ``ceil(fraction * n)`` training items chosen by ``seed``."""
        if not 0.0 < fraction <= 1.0:
            raise ConfigError(f"few-shot fraction must be in (0, 1], got {fraction}")
        n = len(self.train)
        keep = math.ceil(fraction * n)
        if keep >= n:
            return self
        idx = np.sort(np.random.default_rng([seed, 1234]).choice(n, size=keep, replace=False))
        return TaskDataset(self.task, [self.train[i] for i in idx], self.val, self.test)

    def with_train(self, train: list[dict]) -> "TaskDataset":
        return TaskDataset(self.task, train, self.val, self.test)
