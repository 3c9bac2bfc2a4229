"""Procedural moving-shapes video corpus with templated captions and QA.

Rasterisation (pixel centres at ``(col + 0.5, row + 0.5)``, object centre
``(cx, cy)``, half extent ``r``, image y pointing down):

* circle:   ``(px - cx)**2 + (py - cy)**2 <= r**2``
* square:   ``|px - cx| <= r`` and ``|py - cy| <= r``
* triangle: apex up; ``cy - r <= py <= cy + r`` and
  ``|px - cx| <= (py - (cy - r)) / 2``

Object centres move by ``speed`` pixels per frame along the motion
direction. No anti-aliasing, so rendering is bit-exact.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, GenerationError
from .vision import STORED_FRAMES, VideoClip

SHAPES = ("circle", "square", "triangle")
COLORS = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
    "white": (1.0, 1.0, 1.0),
}
MOTIONS = {"left": (-1, 0), "right": (1, 0), "up": (0, -1), "down": (0, 1), "still": (0, 0)}
COUNT_WORDS = ("one", "two", "three")
SPEEDS = (0.25, 0.375, 0.5)
BACKGROUNDS = (0.25, 0.3125, 0.375, 0.4375)
RADIUS = 5.0
FRAME_SIZE = 32
MC_CHOICES = 5
BLANK = "___"
_GAP = 1.0


@dataclass(frozen=True)
class ObjectSpec:
    shape: str
    color: str
    motion: str
    speed: float
    x0: float
    y0: float

    def center(self, frame: int) -> tuple[float, float]:
        dx, dy = MOTIONS[self.motion]
        return self.x0 + dx * self.speed * frame, self.y0 + dy * self.speed * frame

    def swept_box(self, n_frames: int = STORED_FRAMES) -> tuple[float, float, float, float]:
        xa, ya = self.center(0)
        xb, yb = self.center(n_frames - 1)
        return (min(xa, xb) - RADIUS, min(ya, yb) - RADIUS,
                max(xa, xb) + RADIUS, max(ya, yb) + RADIUS)


@dataclass(frozen=True)
class SceneSpec:
    objects: tuple[ObjectSpec, ...]
    background: float
    size: int = FRAME_SIZE

    def validate(self) -> None:
        if not 1 <= len(self.objects) <= 3:
            raise GenerationError(f"scene has {len(self.objects)} objects")
        keys = [(o.shape, o.color) for o in self.objects]
        if len(set(keys)) != len(keys):
            raise GenerationError("two objects share shape and color")
        for o in self.objects:
            x0, y0, x1, y1 = o.swept_box()
            if x0 < 0 or y0 < 0 or x1 > self.size or y1 > self.size:
                raise GenerationError(f"{o.color} {o.shape} leaves the frame")

    def ordered(self) -> list[ObjectSpec]:
        """Objects in caption order: by color, then shape."""
        colors, shapes = list(COLORS), list(SHAPES)
        return sorted(self.objects, key=lambda o: (colors.index(o.color), shapes.index(o.shape)))

    def to_dict(self) -> dict:
        return {"background": self.background, "size": self.size,
                "objects": [asdict(o) for o in self.objects]}

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        return cls(tuple(ObjectSpec(**o) for o in d["objects"]), d["background"], d["size"])


@dataclass
class AnnotatedClip:
    clip_id: str
    scene: SceneSpec
    clip: VideoClip
    caption: str
    oe: list[dict]
    mc: dict
    fib: dict
    split: str = "train"
    extra: dict = field(default_factory=dict)


def _object_mask(o: ObjectSpec, frame: int, px: np.ndarray, py: np.ndarray) -> np.ndarray:
    cx, cy = o.center(frame)
    if o.shape == "circle":
        return (px - cx) ** 2 + (py - cy) ** 2 <= RADIUS ** 2
    if o.shape == "square":
        return (np.abs(px - cx) <= RADIUS) & (np.abs(py - cy) <= RADIUS)
    if o.shape == "triangle":
        rel = py - (cy - RADIUS)
        return (rel >= 0) & (rel <= 2 * RADIUS) & (np.abs(px - cx) <= rel / 2)
    raise GenerationError(f"unknown shape {o.shape!r}")


def render(scene: SceneSpec, clip_id: str = "clip", n_frames: int = STORED_FRAMES) -> VideoClip:
    scene.validate()
    size = scene.size
    py, px = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    frames = np.full((n_frames, size, size, 3), scene.background, dtype=np.float32)
    for f in range(n_frames):
        for o in scene.objects:
            frames[f][_object_mask(o, f, px, py)] = COLORS[o.color]
    return VideoClip(clip_id, frames)


def _boxes_overlap(a, b) -> bool:
    return not (a[2] + _GAP <= b[0] or b[2] + _GAP <= a[0]
                or a[3] + _GAP <= b[1] or b[3] + _GAP <= a[1])


def sample_scene(rng: np.random.Generator, size: int = FRAME_SIZE,
                 max_tries: int = 50) -> SceneSpec:
    n_obj = int(rng.integers(1, 4))
    pairs = [(s, c) for s in SHAPES for c in COLORS]
    chosen = rng.choice(len(pairs), size=n_obj, replace=False)
    objects: list[ObjectSpec] = []
    for k in chosen:
        shape, color = pairs[int(k)]
        motion = list(MOTIONS)[int(rng.integers(len(MOTIONS)))]
        speed = 0.0 if motion == "still" else float(SPEEDS[int(rng.integers(len(SPEEDS)))])
        dx, dy = MOTIONS[motion]
        travel = speed * (STORED_FRAMES - 1)
        for _ in range(max_tries):
            # start so that the whole trajectory stays inside the frame
            lo_x = RADIUS + (travel if dx < 0 else 0.0)
            hi_x = size - RADIUS - (travel if dx > 0 else 0.0)
            lo_y = RADIUS + (travel if dy < 0 else 0.0)
            hi_y = size - RADIUS - (travel if dy > 0 else 0.0)
            x0 = math.floor(rng.uniform(lo_x, hi_x) * 8) / 8
            y0 = math.floor(rng.uniform(lo_y, hi_y) * 8) / 8
            cand = ObjectSpec(shape, color, motion, speed, max(x0, lo_x), max(y0, lo_y))
            if all(not _boxes_overlap(cand.swept_box(), o.swept_box()) for o in objects):
                objects.append(cand)
                break
    if not objects:
        raise GenerationError("could not place any object")
    bg = float(BACKGROUNDS[int(rng.integers(len(BACKGROUNDS)))])
    scene = SceneSpec(tuple(objects), bg, size)
    scene.validate()
    return scene


def _clause(o: ObjectSpec) -> str:
    verb = "stays still" if o.motion == "still" else f"moves {o.motion}"
    return f"the {o.color} {o.shape} {verb}"


def caption(scene: SceneSpec) -> str:
    return " and ".join(_clause(o) for o in scene.ordered())


def _questions(scene: SceneSpec, o: ObjectSpec) -> dict[str, tuple[str, str]]:
    shapes = [x.shape for x in scene.objects]
    colors = [x.color for x in scene.objects]
    out = {"motion": (f"which way does the {o.color} {o.shape} move ?", o.motion)}
    if shapes.count(o.shape) == 1:
        out["color"] = (f"what color is the {o.shape} ?", o.color)
    if colors.count(o.color) == 1:
        out["shape"] = (f"what shape is the {o.color} object ?", o.shape)
    return out


def make_qa(scene: SceneSpec, rng: np.random.Generator, k: int = MC_CHOICES):
    """Open-ended questions, one multiple-choice question and one fill-in-blank.

    Every answer is a single word that is a function of the scene alone.
    """
    ordered = scene.ordered()
    oe = []
    for o in ordered:
        for kind, (q, a) in sorted(_questions(scene, o).items()):
            oe.append({"question": q, "answer": a, "kind": kind})
    oe.append({"question": "how many objects are there ?",
               "answer": COUNT_WORDS[len(scene.objects) - 1], "kind": "count"})

    # multiple choice: color (needs a unique shape) or motion; both domains have 5 values
    target = ordered[int(rng.integers(len(ordered)))]
    qs = _questions(scene, target)
    kinds = [kd for kd in ("color", "motion") if kd in qs]
    kind = kinds[int(rng.integers(len(kinds)))]
    question, truth = qs[kind]
    domain = list(COLORS) if kind == "color" else list(MOTIONS)
    if k > len(domain):
        raise ConfigError(f"{k} choices exceed the {kind} domain of {len(domain)}")
    others = [v for v in domain if v != truth]
    distractors = [others[int(i)] for i in rng.permutation(len(others))[:k - 1]]
    gt = int(rng.integers(k))
    choices = distractors[:gt] + [truth] + distractors[gt:]
    mc = {"question": question, "choices": choices, "answer_index": gt, "kind": kind}

    # fill in the blank: blank one attribute word of one object's clause
    target = ordered[int(rng.integers(len(ordered)))]
    attr = ("color", "shape", "motion")[int(rng.integers(3))]
    word = {"color": target.color, "shape": target.shape,
            "motion": "still" if target.motion == "still" else target.motion}[attr]
    clauses = []
    for o in ordered:
        words = _clause(o).split()
        if o is target:
            words[words.index(word)] = BLANK
        clauses.append(" ".join(words))
    fib = {"sentence": " and ".join(clauses), "answer": word, "kind": attr}
    return oe, mc, fib


def annotate(scene: SceneSpec, clip_id: str, rng: np.random.Generator) -> AnnotatedClip:
    oe, mc, fib = make_qa(scene, rng)
    return AnnotatedClip(clip_id, scene, render(scene, clip_id), caption(scene), oe, mc, fib)


def split_counts(n: int, fractions) -> tuple[int, int, int]:
    fr = [float(f) for f in fractions]
    if len(fr) != 3 or any(f < 0 for f in fr) or abs(sum(fr) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must be 3 non-negative values summing to 1, got {fractions}")
    n_train = int(round(fr[0] * n))
    n_val = min(int(round(fr[1] * n)), n - n_train)
    return n_train, n_val, n - n_train - n_val


def generate_corpus(n_clips: int, seed: int, fractions=(0.8, 0.1, 0.1),
                    max_attempts: int = 200) -> list[AnnotatedClip]:
    """Generate ``n_clips`` annotated clips with pairwise distinct captions.

    Clip ``i`` draws from generators seeded by ``(seed, i, attempt)``, so
    each clip is reproducible on its own.
    """
    if n_clips < 1:
        raise ConfigError("n_clips must be positive")
    counts = split_counts(n_clips, fractions)
    seen: set[str] = set()
    clips: list[AnnotatedClip] = []
    for i in range(n_clips):
        for attempt in range(max_attempts):
            rng = np.random.default_rng([seed, i, attempt])
            scene = sample_scene(rng)
            if caption(scene) not in seen:
                break
        else:
            raise GenerationError(f"no new distinct scene for clip {i} after {max_attempts} attempts")
        seen.add(caption(scene))
        clips.append(annotate(scene, f"clip{i:05d}", rng))
    order = np.random.default_rng([seed, n_clips, 7]).permutation(n_clips)
    names = ["train"] * counts[0] + ["val"] * counts[1] + ["test"] * counts[2]
    for pos, idx in enumerate(order):
        clips[int(idx)].split = names[pos]
    return clips
