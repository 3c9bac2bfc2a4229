import numpy as np
import pytest

from unimlm.errors import ConfigError, GenerationError
from unimlm.synthgen import (BLANK, COLORS, MOTIONS, SHAPES, ObjectSpec, SceneSpec, caption,
                             generate_corpus, make_qa, render, sample_scene, split_counts)


def one(shape="square", color="red", motion="still", speed=0.0, x0=16.0, y0=16.0, bg=0.25):
    return SceneSpec((ObjectSpec(shape, color, motion, speed, x0, y0),), bg)


def color_centroid(frame, rgb):
    mask = np.all(frame == np.asarray(rgb, dtype=np.float32), axis=-1)
    ys, xs = np.nonzero(mask)
    return xs.mean() + 0.5, ys.mean() + 0.5, mask.sum()


def test_still_object_frames_identical():
    clip = render(one())
    assert clip.frames.shape == (32, 32, 32, 3)
    assert all(np.array_equal(clip.frames[0], f) for f in clip.frames)


@pytest.mark.parametrize("motion,axis,sign", [("left", 0, -1), ("right", 0, 1), ("up", 1, -1), ("down", 1, 1)])
def test_centroid_moves_by_speed(motion, axis, sign):
    x0 = {"left": 24.0, "right": 8.0}.get(motion, 16.0)
    y0 = {"up": 24.0, "down": 8.0}.get(motion, 16.0)
    clip = render(one("square", "green", motion, 0.5, x0, y0))
    cents = [color_centroid(f, COLORS["green"])[axis] for f in clip.frames]
    steps = np.diff(cents)
    # integer rasterisation: per-frame steps average to the speed
    assert abs(np.mean(steps) - sign * 0.5) < 0.05
    assert abs((cents[-1] - cents[0]) - sign * 0.5 * 31) <= 1.0


def test_render_deterministic_and_in_range():
    scene = sample_scene(np.random.default_rng(3))
    a, b = render(scene), render(scene)
    assert np.array_equal(a.frames, b.frames)
    assert a.frames.min() >= 0 and a.frames.max() <= 1


def test_shape_areas_distinct():
    areas = {s: color_centroid(render(one(s)).frames[0], COLORS["red"])[2] for s in SHAPES}
    assert len(set(areas.values())) == 3


def test_escape_rejected():
    with pytest.raises(GenerationError):
        render(one(motion="right", speed=0.5, x0=20.0))


def test_duplicate_object_rejected():
    o = ObjectSpec("circle", "red", "still", 0.0, 8.0, 8.0)
    with pytest.raises(GenerationError):
        SceneSpec((o, ObjectSpec("circle", "red", "still", 0.0, 24.0, 24.0)), 0.25).validate()


def test_pixel_oracle_recovers_color_and_direction():
    rng = np.random.default_rng(11)
    for _ in range(30):
        scene = sample_scene(rng)
        clip = render(scene)
        for o in scene.objects:
            # the object's color occupies pixels in the first frame ...
            x_a, y_a, n = color_centroid(clip.frames[0], COLORS[o.color])
            assert n > 0
            if sum(1 for p in scene.objects if p.color == o.color) > 1:
                continue
            x_b, y_b, _ = color_centroid(clip.frames[-1], COLORS[o.color])
            dx, dy = x_b - x_a, y_b - y_a
            if o.motion == "still":
                assert abs(dx) < 1e-9 and abs(dy) < 1e-9
            else:
                ex, ey = MOTIONS[o.motion]
                assert dx * ex + dy * ey > 5.0  # at least 0.25 px/frame * 31 frames, minus rounding


def test_caption_mentions_every_object():
    scene = sample_scene(np.random.default_rng(4))
    text = caption(scene)
    for o in scene.objects:
        assert o.color in text and o.shape in text
        assert ("stays still" if o.motion == "still" else f"moves {o.motion}") in text


def test_make_qa_examples_and_invariants():
    scene = one("circle", "red")
    oe, mc, fib = make_qa(scene, np.random.default_rng(0))
    assert {"question": "what shape is the red object ?", "answer": "circle", "kind": "shape"} in oe
    assert len(oe) >= 3
    for qa in oe:
        assert len(qa["answer"].split()) == 1
    assert mc["choices"][mc["answer_index"]] not in [c for i, c in enumerate(mc["choices"])
                                                     if i != mc["answer_index"]]
    assert len(mc["choices"]) == 5 and len(set(mc["choices"])) == 5
    assert fib["sentence"].count(BLANK) == 1
    assert fib["answer"] in caption(scene).split()
    assert fib["sentence"].replace(BLANK, fib["answer"]) == caption(scene)


def test_mc_index_uniform():
    scene = SceneSpec((ObjectSpec("circle", "red", "still", 0.0, 8.0, 8.0),
                       ObjectSpec("square", "blue", "left", 0.25, 22.0, 22.0)), 0.25)
    rng = np.random.default_rng(0)
    n = 10_000
    counts = np.zeros(5)
    for _ in range(n):
        _, mc, _ = make_qa(scene, rng)
        counts[mc["answer_index"]] += 1
        assert mc["choices"].count(mc["choices"][mc["answer_index"]]) == 1
    sigma = np.sqrt(n * 0.2 * 0.8)
    assert np.all(np.abs(counts - n / 5) < 3 * sigma)


def test_split_counts():
    assert split_counts(100, (0.8, 0.1, 0.1)) == (80, 10, 10)
    with pytest.raises(ConfigError):
        split_counts(10, (0.5, 0.6, 0.1))
    with pytest.raises(ConfigError):
        split_counts(10, (0.5, 0.5))


@pytest.fixture(scope="module")
def corpus100():
    return generate_corpus(100, 7)


def test_generate_corpus_splits(corpus100):
    splits = [c.split for c in corpus100]
    assert (splits.count("train"), splits.count("val"), splits.count("test")) == (80, 10, 10)
    caps = [c.caption for c in corpus100]
    assert len(set(caps)) == len(caps)  # so no caption appears in two splits either
    by_split = {}
    for c in corpus100:
        by_split.setdefault(c.split, set()).add(c.caption)
    assert not (by_split["train"] & by_split["test"]) and not (by_split["train"] & by_split["val"])


def test_generate_corpus_deterministic(corpus100):
    again = generate_corpus(100, 7)
    for a, b in zip(corpus100, again):
        assert a.clip_id == b.clip_id and a.caption == b.caption and a.split == b.split
        assert a.oe == b.oe and a.mc == b.mc and a.fib == b.fib
        assert np.array_equal(a.clip.frames, b.clip.frames)


def test_single_clip_reproducible_alone(corpus100):
    # clip i depends only on (seed, i): a longer corpus shares its scenes
    longer = generate_corpus(101, 7)
    assert [c.caption for c in longer[:100]] == [c.caption for c in corpus100]


def test_insufficient_distinct_scenes():
    with pytest.raises(GenerationError):
        generate_corpus(2000, 0, max_attempts=1)


def test_bad_n():
    with pytest.raises(ConfigError):
        generate_corpus(0, 0)
