import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from unimlm.errors import ConfigError
from unimlm.tensor import DimensionError, Tensor, grad_check, mul, tsum
from unimlm.vision import (STORED_FRAMES, VideoClip, embed_patches, load_clip, patchify,
                           patchify_clip, sample_frames, save_clip, unpatchify)


def test_even_full_is_identity():
    assert np.array_equal(sample_frames(32, 32, "even"), np.arange(32))


def test_even_formula_and_determinism():
    idx = sample_frames(32, 4, "even")
    assert idx.tolist() == [4, 12, 20, 28]  # floor((i + 0.5) * 32 / 4)
    assert np.array_equal(idx, sample_frames(32, 4, "even"))
    assert sample_frames(32, 5, "even").tolist() == [3, 9, 16, 22, 28]


@given(st.integers(1, 32))
def test_even_strictly_increasing(T):
    idx = sample_frames(32, T, "even")
    assert len(idx) == T and np.all(np.diff(idx) > 0) and idx[0] >= 0 and idx[-1] < 32


def test_random_reproducible_sorted_uniform():
    a = sample_frames(32, 4, "random", np.random.default_rng(5))
    b = sample_frames(32, 4, "random", np.random.default_rng(5))
    assert np.array_equal(a, b) and np.all(np.diff(a) > 0)
    rng = np.random.default_rng(0)
    counts = np.zeros(32)
    n = 10_000
    for _ in range(n):
        counts[sample_frames(32, 4, "random", rng)] += 1
    p = 4 / 32
    sigma = np.sqrt(n * p * (1 - p))
    assert np.all(np.abs(counts - n * p) < 3.5 * sigma)


def test_sample_frames_errors():
    with pytest.raises(ConfigError):
        sample_frames(32, 0)
    with pytest.raises(ConfigError):
        sample_frames(32, 33)
    with pytest.raises(ConfigError):
        sample_frames(32, 4, "random")


def test_whole_frame_patch():
    x = np.random.default_rng(0).random((2, 8, 8, 3))
    g = patchify(x, 8, 8)
    assert g.patches.shape == (2, 1, 192)
    assert np.array_equal(g.patches[1, 0], x[1].reshape(-1))


def test_hand_layout():
    x = np.zeros((1, 8, 8, 3))
    x[0, 7, 7, 2] = 1.0  # bottom-right pixel, blue channel
    x[0, 0, 4, 0] = 0.5  # top row, first pixel of the second patch column
    g = patchify(x, 4, 4)
    assert g.grid == (2, 2) and g.patches.shape == (1, 4, 48)
    # patch 3 = grid (1, 1); inside it pixel (3, 3), channel 2 -> 3*12 + 3*3 + 2
    assert g.patches[0, 3, 47] == 1.0 and g.patches.sum() == 1.5
    assert g.patches[0, 1, 0] == 0.5


@settings(max_examples=25)
@given(st.integers(1, 3), st.sampled_from([(8, 8, 4, 4), (16, 8, 8, 2), (6, 9, 3, 3), (4, 4, 4, 4)]),
       st.integers(0, 1000))
def test_patchify_inverse(T, dims, seed):
    H, W, h, w = dims
    x = np.random.default_rng(seed).random((T, H, W, 3))
    g = patchify(x, h, w)
    assert g.patches.shape == (T, (H // h) * (W // w), h * w * 3)
    assert np.array_equal(unpatchify(g), x)


def test_patchify_not_divisible():
    with pytest.raises(DimensionError):
        patchify(np.zeros((1, 10, 8, 3)), 4, 4)


def test_clip_validation_and_roundtrip(tmp_path):
    frames = np.random.default_rng(0).random((STORED_FRAMES, 8, 8, 3)).astype(np.float32)
    clip = VideoClip("c", frames)
    save_clip(clip, tmp_path / "c.vclp")
    raw = (tmp_path / "c.vclp").read_bytes()
    assert raw[:5] == b"VCLP1" and len(raw) == 17 + frames.size * 4
    back = load_clip(tmp_path / "c.vclp")
    assert back.clip_id == "c" and np.array_equal(back.frames, frames)
    with pytest.raises(ValueError):
        VideoClip("bad", frames * 2.0)


def _tables(rng, T, S, P, d, zero=False):
    mk = (lambda *s: Tensor(np.zeros(s), requires_grad=True)) if zero else \
        (lambda *s: Tensor(rng.normal(size=s), requires_grad=True))
    return mk(P, d), mk(d), mk(S, d), mk(T, d)


def test_embed_zero():
    rng = np.random.default_rng(0)
    out = embed_patches(np.zeros((2, 4, 12)), *_tables(rng, 2, 4, 12, 5, zero=True))
    assert out.shape == (8, 5) and not out.data.any()


def test_embed_formula():
    rng = np.random.default_rng(1)
    p = rng.random((3, 4, 12))
    w, b, sp, tp = _tables(rng, 5, 4, 12, 6)
    out = embed_patches(p, w, b, sp, tp).data.reshape(3, 4, 6)
    for t in range(3):
        for s in range(4):
            want = p[t, s] @ w.data + b.data + sp.data[s] + tp.data[t]
            assert np.allclose(out[t, s], want, atol=1e-12)


def test_frame_swap_with_zero_temporal_table():
    rng = np.random.default_rng(2)
    p = rng.random((3, 4, 12))
    w, b, sp, _ = _tables(rng, 3, 4, 12, 6)
    tp = Tensor(np.zeros((3, 6)))
    a = embed_patches(p, w, b, sp, tp).data.reshape(3, 4, 6)
    c = embed_patches(p[[2, 1, 0]], w, b, sp, tp).data.reshape(3, 4, 6)
    assert np.array_equal(a[[2, 1, 0]], c)


def test_embed_table_mismatch():
    rng = np.random.default_rng(3)
    w, b, sp, tp = _tables(rng, 2, 4, 12, 6)
    with pytest.raises(DimensionError):
        embed_patches(np.zeros((3, 4, 12)), w, b, sp, tp)  # T=3 > temporal rows
    with pytest.raises(DimensionError):
        embed_patches(np.zeros((2, 5, 12)), w, b, sp, tp)


@pytest.mark.parametrize("T", [1, 4, 5])
def test_temporal_extent_and_desk_length(T):
    frames = np.random.default_rng(0).random((STORED_FRAMES, 32, 32, 3)).astype(np.float32)
    patches = patchify_clip(VideoClip("x", frames), 8, 8)[sample_frames(32, T)]
    rng = np.random.default_rng(4)
    out = embed_patches(patches, *_tables(rng, 5, 16, 192, 8))
    assert out.shape == (T * 16, 8)


def test_projection_gradient():
    rng = np.random.default_rng(5)
    p = rng.random((2, 4, 12))
    w, b, sp, tp = _tables(rng, 2, 4, 12, 3)
    target = Tensor(rng.normal(size=(8, 3)))
    rep = grad_check(lambda xs: tsum(mul(embed_patches(p, *xs), target)) +
                     tsum(mul(embed_patches(p, *xs), embed_patches(p, *xs))), [w, b, sp, tp])
    assert rep.max_rel_err < 1e-4, rep
