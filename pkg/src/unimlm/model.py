"""Fusion transformer with one shared MLM head, plus the task-specific baseline heads.

Sequence layout is ``[video patches ..., text tokens ...]``. Blocks are
pre-norm: ``x + Attn(LN(x))`` then ``x + FFN(LN(x))``; there is no final
norm in the stack, so a zero-layer model returns its input embeddings.
"""
from __future__ import annotations

import dataclasses
import json
import math
import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .tensor import (DimensionError, Tensor, add, concat, dropout, embedding, gelu,
                     layer_norm, matmul, reshape, scale, softmax, take, transpose)
from .text import DIGITS, SPECIAL_TOKENS
from .vision import embed_patches

CHECKPOINT_MAGIC = b"LVCK1"
FORMAT_VERSION = 1
BASELINE_KINDS = ("vtm", "mc", "oe")


class AttentionMode(str, Enum):
    BIDIRECTIONAL = "bidirectional"
    SEQ2SEQ = "seq2seq_causal"


@dataclass
class ModelConfig:
    vocab_size: int
    dim: int = 64
    layers: int = 2
    heads: int = 4
    ffn_mult: int = 4
    num_frames: int = 5  # rows of the temporal position table (max T)
    height: int = 32
    width: int = 32
    patch_h: int = 8
    patch_w: int = 8
    vision_feature_dim: int | None = None
    max_text_len: int = 64
    tie_embeddings: bool = False
    baseline_heads: bool = False
    mc_choices: int = 5
    oe_answers: list[str] = field(default_factory=list)
    dropout: float = 0.0
    init_std: float = 0.02
    pixel_norm: bool = True  # feed (x - 0.5) / 0.5 instead of raw [0, 1] intensities

    def __post_init__(self):
        if self.vision_feature_dim is None:
            self.vision_feature_dim = self.dim
        self.oe_answers = list(self.oe_answers)
        self.validate()

    def validate(self) -> None:
        if self.dim % self.heads:
            raise ConfigError(f"width {self.dim} not divisible by {self.heads} heads")
        reserved = len(SPECIAL_TOKENS) + len(DIGITS) + 2
        if self.vocab_size < reserved:
            raise ConfigError(f"vocab_size {self.vocab_size} below reserved count {reserved}")
        if self.height % self.patch_h or self.width % self.patch_w:
            raise ConfigError("frame size not divisible by patch size")
        if self.vision_feature_dim != self.dim:
            raise ConfigError("vision_feature_dim must equal the fusion width here")
        if self.layers < 0 or self.num_frames < 1 or self.max_text_len < 2:
            raise ConfigError("bad layer/frame/text-length settings")

    @property
    def spatial_len(self) -> int:
        return (self.height // self.patch_h) * (self.width // self.patch_w)

    @property
    def patch_dim(self) -> int:
        return self.patch_h * self.patch_w * 3

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown model config keys {sorted(unknown)}")
        return cls(**d)


def build_attention_matrix(video_len: int, text_len: int, pad=None,
                           mode: AttentionMode | str = AttentionMode.BIDIRECTIONAL) -> np.ndarray:
    """Boolean ``allow[i, j]``: may position ``i`` attend to position ``j``."""
    pad = np.zeros(text_len, dtype=bool) if pad is None else np.asarray(pad, dtype=bool)
    causal = np.array([AttentionMode(mode) is AttentionMode.SEQ2SEQ])
    return attention_masks(video_len, pad[None], causal)[0]


def attention_masks(video_len: int, pad: np.ndarray, causal: np.ndarray) -> np.ndarray:
    """Batched allow matrices (B, L, L).

    Padded positions neither attend nor are attended. Under seq2seq_causal,
    video rows see video only and text row ``i`` sees all video plus text
    positions ``<= i``.
    """
    B, N = pad.shape
    L = video_len + N
    real = np.concatenate([np.ones((B, video_len), dtype=bool), ~pad], axis=1)
    allow = real[:, :, None] & real[:, None, :]
    if causal.any():
        i = np.arange(L)[:, None]
        j = np.arange(L)[None, :]
        pattern = (j < video_len) | ((i >= video_len) & (j <= i))
        allow = np.where(causal[:, None, None], allow & pattern, allow)
    return allow


def _normal(rng, shape, std):
    return rng.normal(0.0, std, size=shape)


class FusionModel:
    """Parameters plus the forward computations; all math goes through the tape ops."""

    def __init__(self, config: ModelConfig, seed: int = 0, params: dict[str, Tensor] | None = None):
        self.config = config
        self.training = False
        self.rng = np.random.default_rng([seed, 99])
        self.params = params if params is not None else self._init_params(np.random.default_rng(seed))
        self.step = 0

    # -- parameters -----------------------------------------------------
    def _shapes(self) -> list[tuple[str, tuple[int, ...], str]]:
        c = self.config
        d, V, F = c.dim, c.vocab_size, c.dim * c.ffn_mult
        s = [("text.tok", (V, d), "normal"), ("text.pos", (c.max_text_len, d), "normal"),
             ("video.proj.w", (c.patch_dim, d), "normal"), ("video.proj.b", (d,), "zeros"),
             ("video.spatial", (c.spatial_len, d), "normal"),
             ("video.temporal", (c.num_frames, d), "normal")]
        for i in range(c.layers):
            p = f"layers.{i}."
            s += [(p + "ln1.g", (d,), "ones"), (p + "ln1.b", (d,), "zeros")]
            for n in ("q", "k", "v", "o"):
                s += [(p + f"attn.{n}.w", (d, d), "normal"), (p + f"attn.{n}.b", (d,), "zeros")]
            s += [(p + "ln2.g", (d,), "ones"), (p + "ln2.b", (d,), "zeros"),
                  (p + "ffn.in.w", (d, F), "normal"), (p + "ffn.in.b", (F,), "zeros"),
                  (p + "ffn.out.w", (F, d), "normal"), (p + "ffn.out.b", (d,), "zeros")]
        s += [("head.dense.w", (d, d), "normal"), ("head.dense.b", (d,), "zeros"),
              ("head.ln.g", (d,), "ones"), ("head.ln.b", (d,), "zeros")]
        if not c.tie_embeddings:
            s.append(("head.out.w", (d, V), "normal"))
        s.append(("head.out.b", (V,), "zeros"))
        if c.baseline_heads:
            sizes = {"vtm": 1, "mc": c.mc_choices, "oe": max(len(c.oe_answers), 1)}
            for kind in BASELINE_KINDS:
                p = f"baseline.{kind}."
                s += [(p + "dense.w", (d, d), "normal"), (p + "dense.b", (d,), "zeros"),
                      (p + "out.w", (d, sizes[kind]), "normal"), (p + "out.b", (sizes[kind],), "zeros")]
        return s

    def _init_params(self, rng) -> dict[str, Tensor]:
        std = self.config.init_std
        out = {}
        for name, shape, kind in self._shapes():
            if kind == "normal":
                data = _normal(rng, shape, std)
            elif kind == "ones":
                data = np.ones(shape)
            else:
                data = np.zeros(shape)
            out[name] = Tensor(data, requires_grad=True, name=name)
        return out

    def param_list(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def copy(self) -> "FusionModel":
        params = {n: Tensor(p.data.copy(), requires_grad=True, name=n) for n, p in self.params.items()}
        m = FusionModel(self.config, params=params)
        m.step = self.step
        return m

    def load_state(self, other: "FusionModel") -> None:
        for n, p in self.params.items():
            p.data[...] = other.params[n].data

    # -- forward --------------------------------------------------------
    def video_features(self, patches: np.ndarray) -> Tensor:
        p = self.params
        if self.config.pixel_norm:
            patches = (getattr(patches, "patches", patches) - 0.5) / 0.5
        return embed_patches(patches, p["video.proj.w"], p["video.proj.b"],
                             p["video.spatial"], p["video.temporal"])

    def text_embeddings(self, ids: np.ndarray) -> Tensor:
        N = ids.shape[-1]
        if N > self.config.max_text_len:
            raise DimensionError(f"text length {N} exceeds max_text_len {self.config.max_text_len}")
        pos = self.params["text.pos"]
        pos = pos if N == pos.shape[0] else take(pos, slice(0, N))
        return add(embedding(self.params["text.tok"], ids), pos)

    def encode(self, video: Tensor, ids: np.ndarray, pad: np.ndarray | None = None,
               modes=AttentionMode.BIDIRECTIONAL) -> Tensor:
        """Hidden states (B, V+N, d) for a batch, or (V+N, d) for single inputs."""
        ids = np.asarray(ids, dtype=np.int64)
        single = ids.ndim == 1
        if single:
            ids = ids[None]
            video = reshape(video, (1,) + video.shape)
            pad = None if pad is None else np.asarray(pad)[None]
            modes = [modes]
        B, N = ids.shape
        if video.shape[0] != B or video.shape[-1] != self.config.dim:
            raise DimensionError(f"video features {video.shape} vs batch {B}, width {self.config.dim}")
        pad = np.zeros((B, N), dtype=bool) if pad is None else np.asarray(pad, dtype=bool)
        if isinstance(modes, (str, AttentionMode)):
            modes = [modes] * B
        causal = np.array([AttentionMode(m) is AttentionMode.SEQ2SEQ for m in modes])
        allow = attention_masks(video.shape[1], pad, causal)
        x = concat([video, self.text_embeddings(ids)], axis=1)
        for i in range(self.config.layers):
            x = self._block(x, allow, i)
        return reshape(x, x.shape[1:]) if single else x

    def _drop(self, x: Tensor) -> Tensor:
        return dropout(x, self.config.dropout, self.rng, self.training)

    def _linear(self, x: Tensor, prefix: str) -> Tensor:
        return add(matmul(x, self.params[prefix + ".w"]), self.params[prefix + ".b"])

    def _block(self, x: Tensor, allow: np.ndarray, i: int) -> Tensor:
        c, p = self.config, self.params
        pre = f"layers.{i}."
        B, L, d = x.shape
        H = c.heads
        dh = d // H
        h = layer_norm(x, p[pre + "ln1.g"], p[pre + "ln1.b"])
        q = transpose(reshape(self._linear(h, pre + "attn.q"), (B, L, H, dh)), (0, 2, 1, 3))
        k = transpose(reshape(self._linear(h, pre + "attn.k"), (B, L, H, dh)), (0, 2, 3, 1))
        v = transpose(reshape(self._linear(h, pre + "attn.v"), (B, L, H, dh)), (0, 2, 1, 3))
        att = softmax(scale(matmul(q, k), 1.0 / math.sqrt(dh)), axis=-1, mask=allow[:, None])
        o = reshape(transpose(matmul(att, v), (0, 2, 1, 3)), (B, L, d))
        x = add(x, self._drop(self._linear(o, pre + "attn.o")))
        h = layer_norm(x, p[pre + "ln2.g"], p[pre + "ln2.b"])
        h = self._linear(gelu(self._linear(h, pre + "ffn.in")), pre + "ffn.out")
        return add(x, self._drop(h))

    def mlm_head(self, hidden: Tensor) -> Tensor:
        """The shared head: dense -> gelu -> layer norm -> vocabulary logits."""
        p = self.params
        if hidden.shape[-1] != self.config.dim:
            raise DimensionError(f"mlm_head expects width {self.config.dim}, got {hidden.shape[-1]}")
        h = layer_norm(gelu(self._linear(hidden, "head.dense")), p["head.ln.g"], p["head.ln.b"])
        out_w = transpose(p["text.tok"], (1, 0)) if self.config.tie_embeddings else p["head.out.w"]
        return add(matmul(h, out_w), p["head.out.b"])

    def baseline_head(self, cls_hidden: Tensor, kind: str) -> Tensor:
        if not self.config.baseline_heads:
            raise ConfigError("baseline heads are disabled in this model")
        if kind not in BASELINE_KINDS:
            raise ConfigError(f"unknown baseline head {kind!r}")
        pre = f"baseline.{kind}"
        return self._linear(gelu(self._linear(cls_hidden, pre + ".dense")), pre + ".out")


def param_groups(names) -> dict[str, str]:
    out = {}
    for n in names:
        if n.startswith("head."):
            out[n] = "head"
        elif n.startswith("baseline."):
            out[n] = "baseline." + n.split(".")[1]
        else:
            out[n] = "backbone"
    return out


def param_count(model: FusionModel) -> dict:
    """Exact parameter counts: backbone P, shared head H, and each baseline head."""
    groups = param_groups(model.params)
    counts: dict[str, int] = {}
    for n, p in model.params.items():
        counts[groups[n]] = counts.get(groups[n], 0) + int(p.data.size)
    return {"backbone": counts.get("backbone", 0), "head": counts.get("head", 0),
            "baseline": {k: counts.get(f"baseline.{k}", 0) for k in BASELINE_KINDS
                         if f"baseline.{k}" in counts},
            "total": sum(counts.values())}


def head_param_formula(dim: int, vocab: int) -> int:
    return dim * dim + dim + 2 * dim + dim * vocab + vocab


# -- checkpoint file ------------------------------------------------------


def save_checkpoint(model: FusionModel, path, meta: dict | None = None) -> None:
    header = {"format_version": FORMAT_VERSION, "model": model.config.to_dict(),
              "step": model.step, "meta": meta or {}}
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", len(blob)), blob,
             struct.pack("<I", len(model.params))]
    for name, t in model.params.items():
        nb = name.encode("utf-8")
        parts += [struct.pack("<I", len(nb)), nb, struct.pack("<I", t.ndim),
                  struct.pack(f"<{t.ndim}I", *t.shape),
                  np.ascontiguousarray(t.data, dtype="<f8").tobytes()]
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> tuple[FusionModel, dict]:
    raw = Path(path).read_bytes()
    if raw[:5] != CHECKPOINT_MAGIC:
        raise ConfigError(f"{path}: not a checkpoint file")
    off = 5
    (n,) = struct.unpack_from("<I", raw, off)
    off += 4
    header = json.loads(raw[off:off + n].decode("utf-8"))
    off += n
    if header.get("format_version") != FORMAT_VERSION:
        raise ConfigError(f"{path}: unsupported format version {header.get('format_version')}")
    config = ModelConfig.from_dict(header["model"])
    (count,) = struct.unpack_from("<I", raw, off)
    off += 4
    params = {}
    for _ in range(count):
        (ln,) = struct.unpack_from("<I", raw, off)
        off += 4
        name = raw[off:off + ln].decode("utf-8")
        off += ln
        (nd,) = struct.unpack_from("<I", raw, off)
        off += 4
        shape = struct.unpack_from(f"<{nd}I", raw, off)
        off += 4 * nd
        size = int(np.prod(shape)) if nd else 1
        data = np.frombuffer(raw, dtype="<f8", count=size, offset=off).reshape(shape)
        off += 8 * size
        params[name] = Tensor(data.astype(np.float64), requires_grad=True, name=name)
    model = FusionModel(config, params=params)
    expected = {name: shape for name, shape, _ in model._shapes()}
    got = {name: t.shape for name, t in params.items()}
    if expected != got:
        raise ConfigError(f"{path}: tensors do not match the embedded config")
    model.params = {name: params[name] for name in expected}
    model.step = int(header.get("step", 0))
    return model, header.get("meta", {})
