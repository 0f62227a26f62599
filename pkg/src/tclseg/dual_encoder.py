"""Toy dual encoder: a small patch transformer for images and a bag-of-words text tower.

The image tower exposes two outputs. The global embedding is the mean of
the final tokens, projected and normalized. The dense features reuse the
same stack, but in the last block every patch token skips attention mixing
and only goes through the value and output projections.
"""
from __future__ import annotations

import math

import string
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import ModelConfig
from .params import ParamSet

PAD_ID = 0
UNK_ID = 1
PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"


class Vocabulary:
    def __init__(self, tokens: Sequence[str] = ()):
        self.token_to_id = {PAD_TOKEN: PAD_ID, UNK_TOKEN: UNK_ID}
        for t in tokens:
            self.add(t)

    def add(self, token: str) -> int:
        if token not in self.token_to_id:
            self.token_to_id[token] = len(self.token_to_id)
        return self.token_to_id[token]

    def __len__(self) -> int:
        return len(self.token_to_id)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def id(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    def save(self, path) -> None:
        lines = [f"{tok}\t{i}" for tok, i in sorted(self.token_to_id.items(), key=lambda kv: kv[1])]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        vocab = cls()
        vocab.token_to_id = {}
        for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            if not line:
                continue
            try:
                tok, idx = line.split("\t")
                vocab.token_to_id[tok] = int(idx)
            except ValueError:
                raise ValueError(f"{path}:{n}: malformed vocabulary line {line!r}") from None
        ids = sorted(vocab.token_to_id.values())
        if ids != list(range(len(ids))) or vocab.token_to_id.get(PAD_TOKEN) != PAD_ID:
            raise ValueError(f"{path}: vocabulary ids must be dense from 0 with {PAD_TOKEN} at 0")
        return vocab


def tokenize(caption: str, vocab: Vocabulary, max_len: int) -> tuple[np.ndarray, int]:
    """Lowercase, split on whitespace, strip edge punctuation, pad or truncate."""
    words = [w.strip(string.punctuation) for w in caption.lower().split()]
    words = [w for w in words if w]
    if not words:
        raise ValueError("tokenize: empty caption")
    ids = [vocab.id(w) for w in words][:max_len]
    out = np.full(max_len, PAD_ID, dtype=np.int64)
    out[:len(ids)] = ids
    return out, len(ids)


def tokenize_batch(captions: Sequence[str], vocab: Vocabulary, max_len: int):
    pairs = [tokenize(c, vocab, max_len) for c in captions]
    return np.stack([p[0] for p in pairs]), np.array([p[1] for p in pairs], dtype=np.int64)


def block_prefix(k: int) -> str:
    return f"img.blocks.{k}."


def init_encoder_params(cfg: ModelConfig, vocab_size: int, seed: int, dtype=np.float32) -> ParamSet:
    rng = np.random.default_rng([seed, 0xE1C])
    C, P = cfg.width, cfg.patch
    L = (cfg.image_size // P) ** 2
    hidden = C * cfg.mlp_ratio

    def lin(n_in, n_out):
        return (rng.standard_normal((n_in, n_out)) / np.sqrt(n_in)).astype(dtype)

    ps = ParamSet()
    ps.add("img.patch.w", lin(3 * P * P, C))
    ps.add("img.patch.b", np.zeros(C, dtype))
    ps.add("img.pos", (0.02 * rng.standard_normal((L, C))).astype(dtype))
    for k in range(cfg.blocks):
        pre = block_prefix(k)
        for ln in ("ln1", "ln2"):
            ps.add(pre + ln + ".g", np.ones(C, dtype))
            ps.add(pre + ln + ".b", np.zeros(C, dtype))
        for name in ("q", "k", "v", "o"):
            ps.add(pre + f"attn.{name}.w", lin(C, C))
            ps.add(pre + f"attn.{name}.b", np.zeros(C, dtype))
        ps.add(pre + "mlp.fc1.w", lin(C, hidden))
        ps.add(pre + "mlp.fc1.b", np.zeros(hidden, dtype))
        ps.add(pre + "mlp.fc2.w", lin(hidden, C))
        ps.add(pre + "mlp.fc2.b", np.zeros(C, dtype))
    ps.add("img.ln_f.g", np.ones(C, dtype))
    ps.add("img.ln_f.b", np.zeros(C, dtype))
    ps.add("img.proj", lin(C, C))
    ps.add("txt.emb", (rng.standard_normal((vocab_size, C))).astype(dtype))
    ps.add("txt.proj", lin(C, C))
    return ps


def _linear(x: Tensor, ps: ParamSet, name: str) -> Tensor:
    return ad.add(ad.matmul(x, ps[name + ".w"]), ps[name + ".b"])


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    B, Cc, H, W = images.shape
    g_h, g_w = H // patch, W // patch
    x = images.reshape(B, Cc, g_h, patch, g_w, patch)
    return x.transpose(0, 2, 4, 1, 3, 5).reshape(B, g_h * g_w, Cc * patch * patch)


def _patchify_t(images: Tensor, patch: int) -> Tensor:
    B, Cc, H, W = images.shape
    g_h, g_w = H // patch, W // patch
    x = ad.reshape(images, (B, Cc, g_h, patch, g_w, patch))
    x = ad.transpose(x, (0, 2, 4, 1, 3, 5))
    return ad.reshape(x, (B, g_h * g_w, Cc * patch * patch))


def _attention(x: Tensor, ps: ParamSet, pre: str, heads: int) -> Tensor:
    B, L, C = x.shape
    d = C // heads

    def split(t):
        return ad.transpose(ad.reshape(t, (B, L, heads, d)), (0, 2, 1, 3))

    q = split(_linear(x, ps, pre + "attn.q"))
    k = split(_linear(x, ps, pre + "attn.k"))
    v = split(_linear(x, ps, pre + "attn.v"))
    scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(d))
    mixed = ad.matmul(ad.softmax(scores, axis=-1), v)
    mixed = ad.reshape(ad.transpose(mixed, (0, 2, 1, 3)), (B, L, C))
    return _linear(mixed, ps, pre + "attn.o")


def _mlp(x: Tensor, ps: ParamSet, pre: str) -> Tensor:
    return _linear(ad.gelu(_linear(x, ps, pre + "mlp.fc1")), ps, pre + "mlp.fc2")


def _block(x: Tensor, ps: ParamSet, pre: str, heads: int, dense: bool) -> Tensor:
    h = ad.layer_norm(x, ps[pre + "ln1.g"], ps[pre + "ln1.b"])
    if dense:
        # per-token value + output projection, no token mixing
        mixed = _linear(_linear(h, ps, pre + "attn.v"), ps, pre + "attn.o")
    else:
        mixed = _attention(h, ps, pre, heads)
    x = ad.add(x, mixed)
    h = ad.layer_norm(x, ps[pre + "ln2.g"], ps[pre + "ln2.b"])
    return ad.add(x, _mlp(h, ps, pre))


def check_images(images, cfg: ModelConfig) -> None:
    shape = images.shape
    if len(shape) != 4 or shape[1] != 3:
        raise ValueError(f"encode_image: expected B×3×H×W images, got {shape}")
    if shape[2] % cfg.patch or shape[3] % cfg.patch:
        raise ValueError(f"encode_image: image size {shape[2]}×{shape[3]} not divisible "
                         f"by patch {cfg.patch}")


def positional_embedding(ps: ParamSet, cfg: ModelConfig, grid: tuple) -> Tensor:
    """Learned positions, bilinearly resampled when the patch grid differs from training."""
    pos = ps["img.pos"]
    side = cfg.image_size // cfg.patch
    if tuple(grid) == (side, side):
        return pos
    C = pos.shape[1]
    g = ad.reshape(ad.transpose(pos, (1, 0)), (1, C, side, side))
    g = ad.upsample(g, size=tuple(grid), mode="bilinear")
    return ad.transpose(ad.reshape(g, (C, grid[0] * grid[1])), (1, 0))


def encode_image(images, ps: ParamSet, cfg: ModelConfig, want_global: bool = True,
                 want_dense: bool = True):
    """Return ``(V^g B×C unit-norm, V^d B×L×C)``; either may be None if not requested."""
    if not isinstance(images, Tensor):
        images = Tensor(np.asarray(images))
    check_images(images, cfg)
    grid = (images.shape[2] // cfg.patch, images.shape[3] // cfg.patch)
    x = ad.matmul(_patchify_t(images, cfg.patch), ps["img.patch.w"])
    x = ad.add(ad.add(x, ps["img.patch.b"]), positional_embedding(ps, cfg, grid))
    for k in range(cfg.blocks - 1):
        x = _block(x, ps, block_prefix(k), cfg.heads, dense=False)
    last = block_prefix(cfg.blocks - 1)
    vg = vd = None
    if want_global:
        xg = _block(x, ps, last, cfg.heads, dense=False)
        xg = ad.layer_norm(xg, ps["img.ln_f.g"], ps["img.ln_f.b"])
        pooled = ad.mean(xg, axis=1)
        vg = ad.l2_normalize(ad.matmul(pooled, ps["img.proj"]), axis=-1)
    if want_dense:
        xd = _block(x, ps, last, cfg.heads, dense=True)
        xd = ad.layer_norm(xd, ps["img.ln_f.g"], ps["img.ln_f.b"])
        vd = ad.matmul(xd, ps["img.proj"])
    return vg, vd


def encode_text(token_ids: np.ndarray, lengths: np.ndarray, ps: ParamSet) -> Tensor:
    """Masked mean of token embeddings over valid positions, projected and normalized."""
    token_ids = np.asarray(token_ids)
    lengths = np.asarray(lengths)
    if (lengths <= 0).any():
        raise ValueError("encode_text: all-padding sequence")
    vocab_size = ps["txt.emb"].shape[0]
    if (token_ids >= vocab_size).any() or (token_ids < 0).any():
        raise ValueError("encode_text: token id outside vocabulary")
    L = token_ids.shape[1]
    dtype = ps["txt.emb"].dtype
    weights = (np.arange(L)[None, :] < lengths[:, None]).astype(dtype) / lengths[:, None].astype(dtype)
    emb = ad.take_rows(ps["txt.emb"], token_ids)                  # B, L, C
    pooled = ad.sum_(ad.mul(emb, Tensor(weights[..., None])), axis=1)
    return ad.l2_normalize(ad.matmul(pooled, ps["txt.proj"]), axis=-1)


@dataclass
class EmbeddingBundle:
    T: Tensor
    Vg: Tensor
    Vd: Tensor
    Vs: Tensor | None = None
