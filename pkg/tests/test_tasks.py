import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from unimlm.data import PROMPTS, Corpus
from unimlm.errors import ConfigError
from unimlm.model import AttentionMode, FusionModel, ModelConfig
from unimlm.synthgen import generate_corpus
from unimlm.tasks import (IGNORE, MaskedExample, TaskContext, TaskDecoration, build_baseline,
                          build_caption_train, build_fib, build_mc, build_mlm, build_oe, build_vtm,
                          collate, corrupt, decode_caption, decode_captions, decorate, group_losses,
                          encode_batch, infer_mc, infer_oe, last_mask_logprobs, rank_by_score,
                          rank_retrieval, rank_texts, restricted_argmax, score_vtm, score_vtm_many,
                          vtm_ids, zero_shot_mc)
from unimlm.tensor import Tape, backward
from unimlm.text import tokenize, word_ids


@pytest.fixture(scope="module")
def corpus():
    return Corpus.from_clips(generate_corpus(30, 1), patch=(16, 16))


@pytest.fixture(scope="module")
def vocab(corpus):
    return corpus.vocab


@pytest.fixture(scope="module")
def ctx(corpus):
    return TaskContext(corpus.vocab, corpus, frames=2, max_text_len=64)


def tiny(vocab, seed=0, **kw):
    return FusionModel(ModelConfig(vocab_size=len(vocab), dim=16, layers=1, heads=2, num_frames=2,
                                   patch_h=16, patch_w=16, **kw), seed=seed)


def check_invariants(ex: MaskedExample, vocab, single: bool):
    labelled = np.nonzero(ex.labels != IGNORE)[0]
    assert set(labelled) <= set(ex.mask_positions)
    if single:
        assert len(ex.mask_positions) == 1
        assert ex.ids[ex.mask_positions[0]] == vocab.mask_id
    assert (ex.mode is AttentionMode.SEQ2SEQ) == (ex.task == "caption")


# -- builders ----------------------------------------------------------------


def test_mlm_rate_zero_is_identity(vocab):
    seq = tokenize("a red circle moves left", vocab)
    ex = build_mlm(seq, vocab, np.random.default_rng(0), rate=0.0)
    assert np.array_equal(ex.ids, seq.ids) and (ex.labels == IGNORE).all()


def test_mlm_deterministic_and_specials_untouched(vocab):
    seq = tokenize("a red circle moves left and a blue square stays still", vocab)
    a = build_mlm(seq, vocab, np.random.default_rng(7), rate=0.5)
    b = build_mlm(seq, vocab, np.random.default_rng(7), rate=0.5)
    assert np.array_equal(a.ids, b.ids) and np.array_equal(a.labels, b.labels)
    assert a.labels[0] == IGNORE and a.labels[-1] == IGNORE
    assert a.ids[0] == vocab.cls_id and a.ids[-1] == vocab.sep_id
    sel = a.labels != IGNORE
    assert np.array_equal(a.labels[sel], np.asarray(seq.ids)[sel])


def test_mlm_statistics(vocab):
    rng = np.random.default_rng(0)
    ids = np.full(100_000, vocab.id("red"))
    out, labels, chosen = corrupt(ids, np.ones(ids.size, bool), vocab, 0.15, (0.8, 0.1, 0.1), rng)
    chosen = np.asarray(chosen)
    assert abs(chosen.size / ids.size - 0.15) < 0.005
    masked = np.mean(out[chosen] == vocab.mask_id)
    kept = np.mean(out[chosen] == vocab.id("red"))
    assert abs(masked - 0.8) < 0.01
    # a random replacement can draw "red" itself, which reads as kept
    p_self = 1 / vocab.word_ids().size
    assert abs(kept - (0.1 + 0.1 * p_self)) < 0.01
    assert not np.isin(out[chosen], list(vocab.special_ids - {vocab.mask_id})).any()


def test_corrupt_errors(vocab):
    with pytest.raises(ValueError):
        corrupt(np.zeros(3, int), np.ones(3, bool), vocab, 1.5, (0.8, 0.1, 0.1), np.random.default_rng())
    with pytest.raises(ValueError):
        corrupt(np.zeros(3, int), np.ones(3, bool), vocab, 0.1, (0.8, 0.1), np.random.default_rng())


def test_vtm_forced_labels(vocab):
    rng = np.random.default_rng(0)
    pos = build_vtm("c", "a red circle", ["a red circle", "a blue square"], vocab, rng, force=True)
    neg = build_vtm("c", "a red circle", ["a red circle", "a blue square"], vocab, rng, force=False)
    assert pos.labels[-1] == vocab.true_id and neg.labels[-1] == vocab.false_id
    assert neg.meta["text"] == "a blue square"
    for ex in (pos, neg):
        assert ex.mask_positions == (len(ex.ids) - 1,)
        assert ex.ids[-2] == vocab.sep_id
        check_invariants(ex, vocab, True)


def test_vtm_negative_falls_back_without_other_texts(vocab, caplog):
    ex = build_vtm("c", "a red circle", ["a red circle"], vocab, np.random.default_rng(0), force=False)
    assert ex.labels[-1] == vocab.true_id and ex.meta["positive"]
    assert "no negative" in caplog.text


def test_vtm_swap_rate_and_uniform_negative(vocab):
    rng = np.random.default_rng(1)
    texts = ["a red circle", "a blue square", "a green triangle"]
    n = 6000
    pos, chosen = 0, {}
    for _ in range(n):
        ex = build_vtm("c", texts[0], texts, vocab, rng)
        pos += ex.meta["positive"]
        if not ex.meta["positive"]:
            chosen[ex.meta["text"]] = chosen.get(ex.meta["text"], 0) + 1
    assert abs(pos / n - 0.5) < 3 * np.sqrt(0.25 / n)
    assert set(chosen) == set(texts[1:])
    neg = n - pos
    assert abs(chosen[texts[1]] - neg / 2) < 3 * np.sqrt(neg / 4)


def test_mc_layout_oracle(vocab):
    q, answers = "what color is the circle ?", ["red", "blue", "green"]
    ex = build_mc(q, answers, vocab, answer_index=2)
    want = [vocab.cls_id] + word_ids(q, vocab) + [vocab.sep_id]
    for a in answers:
        want += word_ids(a, vocab) + [vocab.sep_id]
    want.append(vocab.mask_id)
    assert ex.ids.tolist() == want
    assert ex.labels[-1] == vocab.digit_ids[2]
    check_invariants(ex, vocab, True)
    with pytest.raises(ConfigError):
        build_mc(q, ["x"] * 11, vocab)
    with pytest.raises(ConfigError):
        build_mc(q, [], vocab)


def test_oe_and_multiword(vocab):
    ex = build_oe("what color is the circle ?", "red", vocab)
    assert ex.labels[-1] == vocab.id("red") and ex.meta["trainable"]
    check_invariants(ex, vocab, True)
    multi = build_oe("what color is the circle ?", "red blue", vocab)
    assert not multi.meta["trainable"] and (multi.labels == IGNORE).all()
    with pytest.raises(ValueError):
        build_oe("  ", "red", vocab)


def test_fib_placement_and_oe_equivalence(vocab):
    ex = build_fib("a ___ moves left", "circle", vocab)
    assert ex.mask_positions == (2,) and ex.ids[2] == vocab.mask_id
    assert ex.labels[2] == vocab.id("circle")
    first = build_fib("___ moves left", "a", vocab)
    last = build_fib("the circle moves ___", "left", vocab)
    assert first.mask_positions == (1,) and last.mask_positions == (len(last.ids) - 2,)
    q = "what color is the circle"
    fib = build_fib(q + " ___", None, vocab)
    oe = build_oe(q, None, vocab)
    # same tokens, except OE puts [SEP] before the appended mask and FiB after the in-place one
    assert fib.ids[:-2].tolist() == oe.ids[:-2].tolist()
    assert fib.ids[-2:].tolist() == [vocab.mask_id, vocab.sep_id]
    assert oe.ids[-2:].tolist() == [vocab.sep_id, vocab.mask_id]
    for bad in ("no blank here", "___ and ___"):
        with pytest.raises(ValueError):
            build_fib(bad, "x", vocab)


def test_caption_train_mode_and_sep(vocab):
    rng = np.random.default_rng(0)
    ex = build_caption_train("c", "a red circle moves left", vocab, rng, rate=1.0)
    assert ex.mode is AttentionMode.SEQ2SEQ
    assert ex.labels[-1] == vocab.sep_id and ex.labels[0] == IGNORE
    check_invariants(ex, vocab, False)
    with pytest.raises(ValueError):
        build_caption_train("c", " ", vocab, rng)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_builders_satisfy_invariants(seed):
    corpus = Corpus.from_clips(generate_corpus(6, seed % 50), patch=(16, 16))
    vocab = corpus.vocab
    rng = np.random.default_rng(seed)
    texts = [r["caption"] for r in corpus.records]
    for r in corpus.records:
        check_invariants(build_mlm(tokenize(r["caption"], vocab), vocab, rng), vocab, False)
        check_invariants(build_vtm(r["clip_id"], r["caption"], texts, vocab, rng), vocab, True)
        mc = r["mc"]
        check_invariants(build_mc(mc["question"], mc["choices"], vocab, mc["answer_index"]), vocab, True)
        for qa in r["qa"]:
            check_invariants(build_oe(qa["question"], qa["answer"], vocab), vocab, True)
        check_invariants(build_fib(r["fib"]["sentence"], r["fib"]["answer"], vocab), vocab, True)
        check_invariants(build_caption_train(r["clip_id"], r["caption"], vocab, rng), vocab, False)


# -- decoration ----------------------------------------------------------------


def test_decorate_variants(vocab):
    ex = build_vtm("c", "a red circle", [], vocab, np.random.default_rng(0), force=True)
    assert decorate(ex, TaskDecoration("none"), vocab) is ex
    p = decorate(ex, TaskDecoration("prompt"), vocab)
    n = len(PROMPTS["vtm"].split())
    assert p.ids[1:1 + n].tolist() == word_ids(PROMPTS["vtm"], vocab)
    assert p.mask_positions == (ex.mask_positions[0] + n,)
    assert p.labels[p.mask_positions[0]] == vocab.true_id
    t = decorate(ex, TaskDecoration("token"), vocab)
    assert t.ids[1] == vocab.id("[VTM]") and t.mask_positions == (ex.mask_positions[0] + 1,)
    with pytest.raises(ConfigError):
        decorate(ex, TaskDecoration("token", tokens={"vtm": "[NOPE]"}), vocab)
    with pytest.raises(ConfigError):
        TaskDecoration("fancy")


# -- scoring and inference ---------------------------------------------------


def zero_head(model):
    for n in ("head.dense.w", "head.out.w", "head.out.b"):
        model.params[n].data[...] = 0.0
    return model


def test_score_vtm_zero_weights_uniform(vocab, ctx, corpus):
    m = zero_head(tiny(vocab))
    p = score_vtm(m, corpus.records[0]["clip_id"], "a red circle", ctx)
    assert p == pytest.approx(1 / len(vocab), rel=1e-12)


def test_score_vtm_mass_and_monotone(vocab, ctx, corpus):
    m = tiny(vocab, seed=3)
    cid = corpus.records[0]["clip_id"]
    ex = build_vtm(cid, "a red circle", [], vocab, np.random.default_rng(0), force=True)
    lp = last_mask_logprobs(m, [ex], ctx)[0]
    assert np.exp(lp[vocab.true_id]) + np.exp(lp[vocab.false_id]) <= 1.0
    before = score_vtm(m, cid, "a red circle", ctx)
    m.params["head.out.b"].data[vocab.true_id] += 0.5
    assert score_vtm(m, cid, "a red circle", ctx) > before


def test_rank_by_score_ties():
    assert rank_by_score(["b", "a", "c"], [0.5, 0.5, 0.9]) == [("c", 0.9), ("a", 0.5), ("b", 0.5)]


def test_rank_retrieval_matches_brute_force(vocab, ctx, corpus):
    m = tiny(vocab, seed=4)
    cands = [r["clip_id"] for r in corpus.records[:8]]
    q = corpus.records[2]["caption"]
    got = rank_retrieval(m, q, cands, ctx)
    scores = {c: score_vtm(m, c, q, ctx) for c in cands}
    assert [c for c, _ in got] == sorted(cands, key=lambda c: (-scores[c], c))
    assert rank_retrieval(m, q, cands[:1], ctx)[0][0] == cands[0]
    with pytest.raises(ValueError):
        rank_retrieval(m, q, [], ctx)
    texts = [r["caption"] for r in corpus.records[:5]]
    by_text = rank_texts(m, cands[0], texts, ctx)
    ts = [score_vtm(m, cands[0], t, ctx) for t in texts]
    assert [i for i, _ in by_text] == sorted(range(5), key=lambda i: (-ts[i], i))


def test_restricted_argmax_prefers_allowed(vocab):
    logits = np.zeros(len(vocab))
    logits[vocab.digit_ids[7]] = 10.0
    logits[vocab.digit_ids[2]] = 5.0
    assert restricted_argmax(logits, vocab.digit_ids[:5]) == 2
    assert restricted_argmax(np.zeros(len(vocab)), vocab.digit_ids[:5]) == 0


def test_infer_mc_k1_and_bounds(vocab, ctx, corpus):
    m = tiny(vocab, seed=5)
    r = corpus.records[0]
    ex = build_mc(r["mc"]["question"], r["mc"]["choices"][:1], vocab, clip_id=r["clip_id"])
    assert infer_mc(m, ex, 1, ctx) == 0
    ex = build_mc(r["mc"]["question"], r["mc"]["choices"], vocab, clip_id=r["clip_id"])
    assert 0 <= infer_mc(m, ex, 5, ctx) < 5
    with pytest.raises(ConfigError):
        infer_mc(m, ex, 11, ctx)


def test_infer_oe_rigged(vocab, ctx, corpus):
    m = zero_head(tiny(vocab))
    m.params["head.out.b"].data[vocab.id("circle")] = 5.0
    ex = build_oe("what shape is the red object ?", None, vocab, corpus.records[0]["clip_id"])
    assert infer_oe(m, ex, ctx) == "circle"


def test_zero_shot_mc_oracle(vocab, ctx, corpus):
    m = tiny(vocab, seed=6)
    r = corpus.records[1]
    q, answers = r["mc"]["question"], r["mc"]["choices"]
    got = zero_shot_mc(m, q, answers, r["clip_id"], ctx)
    scores = [score_vtm(m, r["clip_id"], [q, a], ctx) for a in answers]
    assert got == int(np.argmax(scores))
    assert zero_shot_mc(m, q, answers[:1], r["clip_id"], ctx) == 0


def test_scoring_threads_do_not_change_results(vocab, ctx, corpus, monkeypatch):
    m = tiny(vocab, seed=7)
    pairs = [(r["clip_id"], r["caption"]) for r in corpus.records] * 5
    one = score_vtm_many(m, pairs, ctx)
    monkeypatch.setenv("LAVENDER_THREADS", "3")
    assert np.array_equal(one, score_vtm_many(m, pairs, ctx))


# -- decoding ----------------------------------------------------------------


def test_decode_stops_on_sep(vocab, ctx, corpus):
    m = zero_head(tiny(vocab))
    m.params["head.out.b"].data[vocab.sep_id] = 5.0
    assert decode_caption(m, corpus.records[0]["clip_id"], ctx) == ""


def test_decode_cap(vocab, ctx, corpus):
    m = zero_head(tiny(vocab))
    m.params["head.out.b"].data[vocab.id("red")] = 5.0
    tokens = decode_captions(m, [corpus.records[0]["clip_id"]], ctx)[0]
    assert tokens == [vocab.id("red")] * 50
    assert len(decode_captions(m, [corpus.records[0]["clip_id"]], ctx, max_steps=7)[0]) == 7


def test_decode_stepwise_oracle(vocab, ctx, corpus):
    m = tiny(vocab, seed=8)
    cids = [r["clip_id"] for r in corpus.records[:3]]
    batched = decode_captions(m, cids, ctx, max_steps=6)
    for cid, toks in zip(cids, batched):
        prefix = [vocab.cls_id]
        for t in toks:
            ids = np.array(prefix + [vocab.mask_id])
            ex = MaskedExample("caption", cid, ids, np.full(ids.size, IGNORE), AttentionMode.SEQ2SEQ,
                               (ids.size - 1,), ctx.eval_frames(cid))
            assert int(np.argmax(last_mask_logprobs(m, [ex], ctx)[0])) == t
            prefix.append(t)


def test_caption_loss_gradient_is_causal(vocab, ctx, corpus):
    # the loss at position i must not depend on tokens after i
    m = tiny(vocab, seed=9)
    cid = corpus.records[0]["clip_id"]
    ids = np.asarray(tokenize("a red circle moves left", vocab).ids)
    labels = np.full(ids.size, IGNORE)
    labels[2] = ids[2]
    grads = []
    for tail in (ids[4], vocab.id("blue")):
        x = ids.copy()
        x[2] = vocab.mask_id
        x[4] = tail
        ex = MaskedExample("caption", cid, x, labels, AttentionMode.SEQ2SEQ, (2,), ctx.eval_frames(cid))
        batch = collate([ex], ctx)
        m.zero_grad()
        with Tape() as tape:
            loss = group_losses(m, [ex], batch, encode_batch(m, batch))["caption"]
        backward(loss, tape)
        grads.append({n: p.grad.copy() for n, p in m.params.items()})
    for n in grads[0]:
        assert np.array_equal(grads[0][n], grads[1][n]), n


# -- baseline examples ---------------------------------------------------------


def test_baseline_examples(vocab):
    item = {"clip_id": "c", "caption": "a red circle", "question": "what color is the circle ?",
            "answer": "red", "choices": ["red", "blue"], "answer_index": 1}
    v = build_baseline("vtm", item, vocab, positive=False, text="a blue square")
    assert v.head == "vtm" and v.target == 0 and vocab.mask_id not in v.ids
    mc = build_baseline("mc_qa", item, vocab)
    assert mc.head == "mc" and mc.target == 1 and mc.ids[-1] == vocab.sep_id
    oe = build_baseline("oe_qa", item, vocab, answers=["blue", "red"])
    assert oe.head == "oe" and oe.target == 1
    oov = build_baseline("oe_qa", {**item, "answer": "green"}, vocab, answers=["blue", "red"])
    assert oov.target == IGNORE
    with pytest.raises(ConfigError):
        build_baseline("caption", item, vocab)


def test_vtm_ids_layout(vocab):
    assert vtm_ids(["red", "blue"], vocab) == [vocab.cls_id, vocab.id("red"), vocab.sep_id,
                                               vocab.id("blue"), vocab.sep_id, vocab.mask_id]
