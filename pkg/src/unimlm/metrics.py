"""Accuracy, recall@k, CIDEr-D and Meta-Ave."""
from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

HEADLINE = {"oe_qa": "accuracy", "fib": "accuracy", "mc_qa": "accuracy",
            "retrieval": "recall_avg", "caption": "cider"}


def accuracy(predictions, golds) -> float:
    """Exact-match percentage. A multi-word gold can never match a one-word prediction."""
    predictions, golds = list(predictions), list(golds)
    if len(predictions) != len(golds):
        raise ValueError(f"{len(predictions)} predictions vs {len(golds)} golds")
    if not golds:
        return 0.0
    hits = sum(1 for p, g in zip(predictions, golds) if p == g)
    return 100.0 * hits / len(golds)


def recall_at_k(rankings, golds, ks=(1, 5, 10)) -> dict[str, float]:
    """``R@k`` percentages plus ``avg`` (mean of R@1, R@5, R@10 or of the given ks)."""
    rankings, golds = list(rankings), list(golds)
    if len(rankings) != len(golds):
        raise ValueError(f"{len(rankings)} rankings vs {len(golds)} golds")
    ranks = []
    for ranking, gold in zip(rankings, golds):
        ids = [r[0] if isinstance(r, tuple) else r for r in ranking]
        if gold not in ids:
            raise ValueError(f"gold {gold!r} is not among the candidates")
        ranks.append(ids.index(gold))
    ranks = np.asarray(ranks)
    n = max(len(ranks), 1)
    out = {f"R@{k}": 100.0 * float(np.sum(ranks < k)) / n for k in ks}
    out["avg"] = float(np.mean([out[f"R@{k}"] for k in ks]))
    return out


# -- CIDEr-D ---------------------------------------------------------------
#
# For each n in 1..4, a sentence becomes a vector g_n with entries
#   tf(w) * idf(w),   idf(w) = log(N) - log(max(1, df(w)))
# where N is the number of items and df(w) counts the items whose reference
# set contains w. Between candidate c and reference r:
#   sim_n = sum_w min(g_c(w), g_r(w)) * g_r(w) / (|g_c| |g_r|)
#           * exp(-(len_c - len_r)^2 / (2 sigma^2))
# CIDEr-D(c, R) = 10 * mean_n mean_r sim_n; the corpus score is the mean
# over items. Lengths are counted in words; tf uses raw counts.


def _ngrams(words: list[str], n_max: int) -> Counter:
    out: Counter = Counter()
    for n in range(1, n_max + 1):
        for i in range(len(words) - n + 1):
            out[tuple(words[i:i + n])] += 1
    return out


def _vector(counts: Counter, idf, n_max: int):
    vec = [{} for _ in range(n_max)]
    norm = [0.0] * n_max
    for gram, tf in counts.items():
        n = len(gram) - 1
        w = float(tf) * idf(gram)
        vec[n][gram] = w
        norm[n] += w * w
    return vec, [math.sqrt(x) for x in norm]


def _sim(vc, nc, lc, vr, nr, lr, n_max: int, sigma: float) -> np.ndarray:
    delta = float(lc - lr)
    out = np.zeros(n_max)
    for n in range(n_max):
        dot = sum(min(w, vr[n][g]) * vr[n][g] for g, w in vc[n].items() if g in vr[n])
        if nc[n] != 0 and nr[n] != 0:
            dot /= nc[n] * nr[n]
        out[n] = dot * math.exp(-(delta ** 2) / (2 * sigma ** 2))
    return out


def cider_items(candidates, references, n: int = 4, sigma: float = 6.0) -> np.ndarray:
    """Per-item CIDEr-D (on the x10 scale)."""
    candidates = list(candidates)
    references = [list(r) for r in references]
    if len(candidates) != len(references):
        raise ValueError(f"{len(candidates)} candidates vs {len(references)} reference sets")
    if any(len(r) == 0 for r in references):
        raise ValueError("every item needs at least one reference")
    ref_counts = [[_ngrams(r.split(), n) for r in refs] for refs in references]
    df: Counter = Counter()
    for refs in ref_counts:
        for gram in set(g for c in refs for g in c):
            df[gram] += 1
    log_n = math.log(float(len(candidates)))

    def idf(gram) -> float:
        return log_n - math.log(max(1.0, float(df.get(gram, 0))))

    scores = np.zeros(len(candidates))
    for i, (cand, refs) in enumerate(zip(candidates, ref_counts)):
        words = cand.split()
        vc, nc = _vector(_ngrams(words, n), idf, n)
        acc = np.zeros(n)
        for ref_text, rc in zip(references[i], refs):
            vr, nr = _vector(rc, idf, n)
            acc += _sim(vc, nc, len(words), vr, nr, len(ref_text.split()), n, sigma)
        scores[i] = float(np.mean(acc)) / len(refs) * 10.0
    return scores


def cider(candidates, references, n: int = 4, sigma: float = 6.0) -> float:
    """Corpus CIDEr-D reported x100 (so 1.5 on the x10 scale reads 150)."""
    items = cider_items(candidates, references, n, sigma)
    return float(np.mean(items)) * 100.0 if items.size else 0.0


def meta_average(entries) -> float:
    """Unweighted mean of headline metrics; accepts numbers or a name -> value mapping."""
    values = list(entries.values()) if isinstance(entries, dict) else list(entries)
    if not values:
        raise ValueError("meta average of no entries")
    return float(np.mean([float(v) for v in values]))


@dataclass
class MetricsReport:
    entries: dict[str, dict] = field(default_factory=dict)  # dataset -> metric dict

    def add(self, dataset: str, metrics: dict, task: str | None = None) -> None:
        task = task or dataset
        self.entries[dataset] = {"task": task, "headline": HEADLINE[task], **metrics}

    def headlines(self) -> dict[str, float]:
        return {k: float(v[v["headline"]]) for k, v in self.entries.items()}

    @property
    def meta_ave(self) -> float:
        return meta_average(self.headlines())

    def to_dict(self) -> dict:
        return {"datasets": self.entries, "meta_ave": self.meta_ave if self.entries else None}

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", "utf-8")

    @classmethod
    def read(cls, path) -> "MetricsReport":
        d = json.loads(Path(path).read_text("utf-8"))
        return cls(dict(d["datasets"]))
