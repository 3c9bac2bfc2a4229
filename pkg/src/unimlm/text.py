"""Vocabulary and whole-word tokenizer."""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError

PAD, UNK, CLS, SEP, MASK = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"
SPECIAL_TOKENS = (PAD, UNK, CLS, SEP, MASK)
TASK_TOKENS = ("[VTM]", "[MC]", "[OE]", "[CAP]")
DIGITS = tuple(str(i) for i in range(10))
TRUE, FALSE = "true", "false"

_HEADER = "#vocab v1"


class TextTooLong(ValueError):
    pass


def reserved_tokens(task_tokens: bool = True) -> tuple[str, ...]:
    return SPECIAL_TOKENS + (TASK_TOKENS if task_tokens else ()) + DIGITS + (TRUE, FALSE)


class Vocabulary:
    """Dense token <-> id table. Ids are line numbers of the vocab file."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if len(set(tokens)) != len(tokens):
            raise ConfigError("duplicate token in vocabulary")
        missing = [t for t in SPECIAL_TOKENS + DIGITS + (TRUE, FALSE) if t not in tokens]
        if missing:
            raise ConfigError(f"vocabulary lacks reserved tokens {missing}")
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}
        self.pad_id = self.index[PAD]
        self.unk_id = self.index[UNK]
        self.cls_id = self.index[CLS]
        self.sep_id = self.index[SEP]
        self.mask_id = self.index[MASK]
        self.true_id = self.index[TRUE]
        self.false_id = self.index[FALSE]
        self.digit_ids = tuple(self.index[d] for d in DIGITS)
        self.task_token_ids = {t: self.index[t] for t in TASK_TOKENS if t in self.index}
        self.special_ids = frozenset(
            [self.index[t] for t in SPECIAL_TOKENS] + list(self.task_token_ids.values()))
        self._special_mask = np.zeros(len(tokens), dtype=bool)
        self._special_mask[list(self.special_ids)] = True

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def id(self, token: str) -> int:
        return self.index.get(token, self.unk_id)

    def token(self, idx: int) -> str:
        if not 0 <= idx < len(self.tokens):
            raise IndexError(f"token id {idx} outside [0, {len(self.tokens)})")
        return self.tokens[idx]

    def is_special(self, ids) -> np.ndarray:
        return self._special_mask[np.asarray(ids)]

    def word_ids(self) -> np.ndarray:
        """Ids eligible as random MLM replacements (everything non-special)."""
        return np.nonzero(~self._special_mask)[0]

    def save(self, path) -> None:
        body = "\n".join([f"{_HEADER} {len(self.tokens)}"] + self.tokens) + "\n"
        Path(path).write_text(body, encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        head = lines[0].split()
        if lines[0].rsplit(" ", 1)[0] != _HEADER or len(head) != 3:
            raise ConfigError(f"{path}: not a vocab v1 file")
        size = int(head[2])
        tokens = lines[1:1 + size]
        if len(tokens) != size:
            raise ConfigError(f"{path}: header says {size} tokens, found {len(tokens)}")
        return cls(tokens)


def split_words(text: str) -> list[str]:
    return text.lower().split()


def build_vocab(corpus: Iterable[str], min_freq: int = 1, max_size: int | None = None,
                task_tokens: bool = True) -> Vocabulary:
    """Reserved tokens first, then words by descending frequency (ties lexicographic)."""
    reserved = reserved_tokens(task_tokens)
    if max_size is not None and max_size < len(reserved):
        raise ConfigError(f"max_size {max_size} smaller than reserved set ({len(reserved)})")
    counts: Counter[str] = Counter()
    n_texts = 0
    for text in corpus:
        n_texts += 1
        counts.update(split_words(text))
    if n_texts == 0:
        raise ConfigError("empty corpus")
    taken = set(reserved)
    ranked = sorted((w for w, c in counts.items() if c >= min_freq and w not in taken),
                    key=lambda w: (-counts[w], w))
    if max_size is not None:
        ranked = ranked[:max_size - len(reserved)]
    return Vocabulary(list(reserved) + ranked)


@dataclass(frozen=True)
class TokenSeq:
    """``[CLS] w_1 .. w_n [SEP]`` followed by optional padding."""

    ids: tuple[int, ...]
    length: int

    @property
    def padding(self) -> tuple[bool, ...]:
        return tuple(i >= self.length for i in range(len(self.ids)))

    def padded(self, size: int, pad_id: int) -> "TokenSeq":
        if size < self.length:
            raise ValueError(f"cannot pad length {self.length} to {size}")
        return TokenSeq(self.ids[:self.length] + (pad_id,) * (size - self.length), self.length)


def tokenize(text: str, vocab: Vocabulary, max_len: int | None = None) -> TokenSeq:
    ids = (vocab.cls_id, *(vocab.id(w) for w in split_words(text)), vocab.sep_id)
    if max_len is not None and len(ids) > max_len:
        raise TextTooLong(f"text needs {len(ids)} tokens, limit is {max_len}")
    return TokenSeq(ids, len(ids))


def word_ids(text: str, vocab: Vocabulary) -> list[int]:
    """Ids of the words of ``text`` without [CLS]/[SEP]."""
    return [vocab.id(w) for w in split_words(text)]


def detokenize(seq, vocab: Vocabulary) -> str:
    ids = seq.ids if isinstance(seq, TokenSeq) else seq
    words = []
    for i in ids:
        i = int(i)
        tok = vocab.token(i)
        if i == vocab.sep_id:
            break
        if i not in vocab.special_ids:
            words.append(tok)
    return " ".join(words)
