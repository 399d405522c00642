"""Frozen toy dual encoders standing in for a pretrained image/text model."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .autodiff import (
    Tensor,
    l2_normalize,
    linear,
    matmul,
    mean,
    relu,
    reshape,
    scale,
    softmax_lastdim,
    transpose,
)
from .errors import DimensionError, EmptyInputError, VocabularyError

PAD = "[PAD]"
UNK = "[UNK]"
CLASS = "[CLASS]"
RESERVED = (PAD, UNK, CLASS)

PROMPT_PHRASE = "a photo of a"


class Vocabulary:
    """Dense token -> id map; ids 0..2 are PAD, UNK and the class slot."""

    def __init__(self, tokens: Iterable[str]):
        self.tokens: list[str] = list(RESERVED)
        self.index: dict[str, int] = {t: i for i, t in enumerate(self.tokens)}
        for tok in tokens:
            if tok not in self.index:
                self.index[tok] = len(self.tokens)
                self.tokens.append(tok)

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, tok: str) -> bool:
        return tok in self.index

    @property
    def pad_id(self) -> int:
        return self.index[PAD]

    @property
    def unk_id(self) -> int:
        return self.index[UNK]

    @property
    def class_id(self) -> int:
        return self.index[CLASS]

    def id_of(self, tok: str) -> int:
        try:
            return self.index[tok]
        except KeyError:
            raise VocabularyError(f"token {tok!r} not in vocabulary") from None

    def save(self, path: str | Path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.tokens), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if tuple(lines[: len(RESERVED)]) != RESERVED:
            raise VocabularyError(f"{path}: first lines must be {RESERVED}")
        return cls(lines[len(RESERVED):])

    @classmethod
    def from_texts(cls, texts: Iterable[str]) -> "Vocabulary":
        seen: dict[str, None] = {}
        for t in PROMPT_PHRASE.split():
            seen.setdefault(t)
        for text in texts:
            for t in text.lower().split():
                seen.setdefault(t)
        return cls(seen)


def tokenize(caption: str, vocab: Vocabulary, max_len: int = 8) -> list[int]:
    """Lowercase, whitespace-split, map unknowns to UNK, cap and pad to ``max_len``."""
    words = caption.lower().split()
    if not words:
        raise EmptyInputError("cannot tokenize an empty caption")
    ids = [vocab.index.get(w, vocab.unk_id) for w in words[:max_len]]
    return ids + [vocab.pad_id] * (max_len - len(ids))


@dataclass
class TextEncoderParams:
    embedding: Tensor  # [V, d_e]
    wq: Tensor  # [d_e, d_e]
    wk: Tensor
    wv: Tensor
    wo: Tensor  # [d, d_e]

    @property
    def d_embed(self) -> int:
        return self.embedding.shape[1]

    @property
    def d_out(self) -> int:
        return self.wo.shape[0]

    def tensors(self) -> dict[str, Tensor]:
        return {"embedding": self.embedding, "wq": self.wq, "wk": self.wk, "wv": self.wv, "wo": self.wo}

    @classmethod
    def init(cls, rng: np.random.Generator, vocab_size: int, d_embed: int, d_out: int) -> "TextEncoderParams":
        def g(*shape, fan_in):
            return Tensor(rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape))

        # a lookup is a one-hot product: fan-in 1
        return cls(
            embedding=g(vocab_size, d_embed, fan_in=1),
            wq=g(d_embed, d_embed, fan_in=d_embed),
            wk=g(d_embed, d_embed, fan_in=d_embed),
            wv=g(d_embed, d_embed, fan_in=d_embed),
            wo=g(d_out, d_embed, fan_in=d_embed),
        )


@dataclass
class ImageEncoderParams:
    w1: Tensor  # [d_hidden, raw_dim]
    b1: Tensor
    w2: Tensor  # [d, d_hidden]
    b2: Tensor

    @property
    def raw_dim(self) -> int:
        return self.w1.shape[1]

    @property
    def d_out(self) -> int:
        return self.w2.shape[0]

    def tensors(self) -> dict[str, Tensor]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    @classmethod
    def init(cls, rng: np.random.Generator, raw_dim: int, d_hidden: int, d_out: int) -> "ImageEncoderParams":
        return cls(
            w1=Tensor(rng.normal(0.0, 1.0 / np.sqrt(raw_dim), size=(d_hidden, raw_dim))),
            b1=Tensor(np.zeros(d_hidden)),
            w2=Tensor(rng.normal(0.0, 1.0 / np.sqrt(d_hidden), size=(d_out, d_hidden))),
            b2=Tensor(np.zeros(d_out)),
        )


def embed_tokens(ids: Sequence[int] | np.ndarray, params: TextEncoderParams) -> Tensor:
    """Look up embedding rows; the result is a constant (the table is frozen)."""
    ids = np.asarray(ids, dtype=np.int64)
    v = params.embedding.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= v):
        raise VocabularyError(f"token id out of range [0, {v})")
    return Tensor(params.embedding.data[ids])


def encode_text_from_embeddings(seq: Tensor, params: TextEncoderParams) -> Tensor:
    """Self-attention, mean-pool, project, L2-normalize.

    ``seq`` is [..., L, d_e]; leading axes are batch axes. Gradients flow to
    ``seq`` only, since encoder parameters never require grad.
    """
    if seq.data.ndim < 2:
        raise DimensionError(f"text encoder needs [..., L, d_e], got {seq.shape}")
    if seq.shape[-2] == 0:
        raise EmptyInputError("text encoder got a zero-length sequence")
    d_e = params.d_embed
    if seq.shape[-1] != d_e:
        raise DimensionError(f"text encoder: embedding width {seq.shape[-1]} != {d_e}")
    q = matmul(seq, transpose(params.wq))
    k = matmul(seq, transpose(params.wk))
    v = matmul(seq, transpose(params.wv))
    attn = softmax_lastdim(scale(matmul(q, transpose(k)), 1.0 / np.sqrt(d_e)))
    pooled = mean(matmul(attn, v), axis=-2)
    lead = pooled.shape[:-1]
    flat = pooled if lead else _as_row(pooled)
    out = matmul(flat, transpose(params.wo))
    out = l2_normalize(out, axis=-1)
    return _from_row(out) if not lead else out


def _as_row(x: Tensor) -> Tensor:
    return reshape(x, (1,) + x.shape)


def _from_row(x: Tensor) -> Tensor:
    return reshape(x, x.shape[1:])


def encode_image(feat: Tensor, params: ImageEncoderParams) -> Tensor:
    """Linear -> ReLU -> linear -> L2-normalize over the last axis of ``feat``."""
    if feat.shape[-1:] != (params.raw_dim,):
        raise DimensionError(f"image encoder: feature shape {feat.shape} does not end in {params.raw_dim}")
    x = feat if feat.data.ndim > 1 else _as_row(feat)
    h = relu(linear(x, params.w1, params.b1))
    out = l2_normalize(linear(h, params.w2, params.b2), axis=-1)
    return out if feat.data.ndim > 1 else _from_row(out)
