import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from unimlm.metrics import (MetricsReport, accuracy, cider, cider_items, meta_average,
                            recall_at_k)


def test_accuracy_basic():
    assert accuracy(["a", "b"], ["a", "b"]) == 100.0
    assert accuracy(["", "b"], ["a", "b"]) == 50.0
    preds = list("aabbcdefgh")
    golds = list("abbbcxefgz")
    assert accuracy(preds, golds) == 70.0  # hand count: positions 1, 5, 9 differ
    with pytest.raises(ValueError):
        accuracy(["a"], ["a", "b"])


def test_accuracy_multiword_gold_is_wrong():
    assert accuracy(["red"], ["red square"]) == 0.0


@given(st.lists(st.tuples(st.sampled_from("abc"), st.sampled_from("abc")), min_size=1, max_size=30),
       st.randoms())
def test_accuracy_permutation_invariant(pairs, rnd):
    shuffled = list(pairs)
    rnd.shuffle(shuffled)
    a = accuracy(*zip(*pairs))
    b = accuracy(*zip(*shuffled))
    assert a == b


def test_recall_analytic():
    cands = [f"c{i}" for i in range(20)]
    assert recall_at_k([cands] * 3, ["c0"] * 3) == {"R@1": 100.0, "R@5": 100.0, "R@10": 100.0,
                                                   "avg": 100.0}
    r = recall_at_k([cands] * 4, ["c5"] * 4)
    assert (r["R@1"], r["R@5"], r["R@10"]) == (0.0, 0.0, 100.0)
    assert r["avg"] == pytest.approx(100 / 3)


def test_recall_accepts_scored_tuples_and_rejects_missing_gold():
    assert recall_at_k([[("x", 0.9), ("y", 0.1)]], ["y"], ks=(1, 2))["R@2"] == 100.0
    with pytest.raises(ValueError):
        recall_at_k([["x", "y"]], ["z"])


def test_recall_random_rankings_monte_carlo():
    rng = np.random.default_rng(0)
    n, m = 10_000, 100
    rankings = [rng.permutation(m).tolist() for _ in range(n)]
    r = recall_at_k(rankings, [0] * n)
    assert abs(r["R@1"] - 1.0) < 0.3


@given(st.lists(st.integers(0, 19), min_size=1, max_size=40))
def test_recall_monotone(gold_ranks):
    cands = list(range(20))
    rankings = [[g] + [c for c in cands if c != g] for g in range(20)]
    r = recall_at_k([list(reversed(rankings[g])) for g in gold_ranks], gold_ranks)
    assert r["R@1"] <= r["R@5"] <= r["R@10"]


def test_cider_no_overlap_is_zero():
    assert cider(["x y z"], [["a b c"]]) == 0.0
    assert cider([""], [["a b c"]]) == 0.0


def test_cider_hand_oracle():
    # refs "a b" / "a c": idf(a) = 0, idf(b) = idf(a b) = log 2; the identical candidate
    # has cosine 1 for n = 1, 2 and no 3-/4-grams, so item 1 is 10 * (1 + 1) / 4 = 5.
    items = cider_items(["a b", "q"], [["a b"], ["a c"]])
    assert items == pytest.approx([5.0, 0.0])
    assert cider(["a b", "q"], [["a b"], ["a c"]]) == pytest.approx(250.0)


def test_cider_length_penalty_and_clipping():
    # "a b a b" vs ref "a b": unigram cosine is clipped to 0.5, the bigram one is 1/sqrt(5),
    # and the 2-word length gap costs exp(-4 / 72)
    refs = [["a b"], ["a c"]]
    longer = cider_items(["a b a b", "q"], refs)[0]
    want = 10 * (0.5 + 1 / math.sqrt(5)) / 4 * math.exp(-4 / 72)
    assert longer == pytest.approx(want, rel=1e-12)
    assert longer < cider_items(["a b", "q"], refs)[0]


def test_cider_reference_order_and_duplication():
    cands = ["red square moves left", "blue circle", "green"]
    refs = [["red square moves left", "a red square"], ["blue circle stays still"], ["green star"]]
    base = cider(cands, refs)
    assert cider(cands, [list(reversed(r)) for r in refs]) == pytest.approx(base)
    assert cider(cands * 2, refs * 2) == pytest.approx(base)


def test_cider_errors():
    with pytest.raises(ValueError):
        cider(["a"], [[]])
    with pytest.raises(ValueError):
        cider(["a", "b"], [["a"]])


def test_meta_average():
    assert meta_average([42.0]) == 42.0
    assert meta_average({"a": 50, "b": 100}) == 75.0
    assert round(meta_average([95.8, 54.4, 68.2, 57.3]), 1) == 68.9
    with pytest.raises(ValueError):
        meta_average([])


def test_metrics_report_roundtrip(tmp_path):
    rep = MetricsReport()
    rep.add("oe_qa", {"accuracy": 80.0, "n": 10})
    rep.add("retrieval", {"R@1": 10.0, "recall_avg": 40.0, "n": 10})
    assert rep.headlines() == {"oe_qa": 80.0, "retrieval": 40.0}
    assert rep.meta_ave == 60.0
    rep.write(tmp_path / "m.json")
    back = MetricsReport.read(tmp_path / "m.json")
    assert back.to_dict() == rep.to_dict()
