"""Grounding decoder and text-grounded mask head."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import ModelConfig
from .params import ParamSet

N_BLOCKS = 4
UPSAMPLE_AFTER = (1, 3)   # zero-based block indices followed by nearest 2x


@dataclass
class MaskSet:
    """Masks ``M[i, j]`` for image i and text j, with the pre-sigmoid logits."""
    masks: Tensor
    logits: Tensor
    binary: Optional[Tensor] = None

    @property
    def shape(self):
        return self.masks.shape

    def diagonal(self) -> Tensor:
        B = self.masks.shape[0]
        if self.masks.shape[1] != B:
            raise ValueError("positive masks need as many images as texts")
        return self.masks[np.arange(B), np.arange(B)]


def init_decoder_params(cfg: ModelConfig, seed: int, dtype=np.float32) -> ParamSet:
    rng = np.random.default_rng([seed, 0xDEC])
    C = cfg.width
    ps = ParamSet()
    for k in range(N_BLOCKS):
        std = np.sqrt(2.0 / (C * 9))
        ps.add(f"dec.{k}.w", (std * rng.standard_normal((C, C, 3, 3))).astype(dtype))
        ps.add(f"dec.{k}.b", np.zeros(C, dtype))
        ps.add(f"dec.{k}.gate", np.zeros((), dtype))
    ps.add("head.w", np.asarray(cfg.mask_w_init, dtype))
    ps.add("head.b", np.asarray(cfg.mask_b_init, dtype))
    return ps


def dense_to_grid(vd: Tensor, grid: Optional[tuple] = None) -> Tensor:
    """``B×L×C`` tokens to a ``B×C×h×w`` map; square unless ``grid`` is given."""
    B, L, C = vd.shape
    if grid is None:
        side = int(round(np.sqrt(L)))
        grid = (side, side)
    if grid[0] * grid[1] != L:
        raise ValueError(f"dense features: patch count {L} does not fill a {grid[0]}×{grid[1]} grid")
    return ad.reshape(ad.transpose(vd, (0, 2, 1)), (B, C) + tuple(grid))


def _size2(out_size) -> tuple:
    return (out_size, out_size) if np.isscalar(out_size) else tuple(out_size)


def gated_block(x: Tensor, w: Tensor, b: Tensor, gate: Tensor) -> Tensor:
    """``x + tanh(g) * Conv(x)`` with Conv = 3x3 conv over GELU(x), plus bias."""
    conv = ad.add(ad.conv2d(ad.gelu(x), w, padding=1), ad.reshape(b, (1, -1, 1, 1)))
    return ad.add(x, ad.mul(ad.tanh(gate), conv))


def decode_dense(vd: Tensor, ps: ParamSet, out_size, grid: Optional[tuple] = None) -> Tensor:
    """Dense features ``B×L×C`` to unit-norm pixel embeddings ``B×C×H×W``.

    ``out_size`` is an int (square) or ``(H, W)``.
    """
    x = dense_to_grid(vd, grid)
    for k in range(N_BLOCKS):
        x = gated_block(x, ps[f"dec.{k}.w"], ps[f"dec.{k}.b"], ps[f"dec.{k}.gate"])
        if k in UPSAMPLE_AFTER:
            x = ad.upsample(x, factor=2, mode="nearest")
    x = ad.upsample(x, size=_size2(out_size), mode="bilinear")
    return ad.l2_normalize(x, axis=1)


def compute_masks(vs: Tensor, T: Tensor, w: Tensor, b: Tensor) -> MaskSet:
    """``M[i,j,h,w] = sigmoid(w * <t_j, V^s[i,:,h,w]> + b)`` for every image/text pair."""
    B, C, H, W = vs.shape
    if T.shape[-1] != C:
        raise ValueError(f"compute_masks: text width {T.shape[-1]} != pixel width {C}")
    flat = ad.reshape(vs, (B, C, H * W))
    dots = ad.matmul(ad.reshape(T, (1,) + T.shape), flat)       # B, N, HW
    logits = ad.add(ad.mul(dots, w), b)
    logits = ad.reshape(logits, (B, T.shape[0], H, W))
    return MaskSet(ad.sigmoid(logits), logits)


def kp_masks(vd: Tensor, T: Tensor, w: Tensor, b: Tensor, out_size,
             grid: Optional[tuple] = None) -> MaskSet:
    """Parameter-free branch: upsample dense features, normalize, shared mask head."""
    grid = ad.upsample(dense_to_grid(vd, grid), size=_size2(out_size), mode="bilinear")
    return compute_masks(ad.l2_normalize(grid, axis=1), T, w, b)


def mix_masks(m: Tensor, m_kp: Tensor, w_kp: float) -> Tensor:
    md = m.data if isinstance(m, Tensor) else np.asarray(m)
    kd = m_kp.data if isinstance(m_kp, Tensor) else np.asarray(m_kp)
    if md.shape != kd.shape:
        raise ValueError(f"mix_masks: shape mismatch {md.shape} vs {kd.shape}")
    if not 0.0 <= w_kp <= 1.0:
        raise ValueError("mix_masks: w_kp must lie in [0, 1]")
    if w_kp == 0.0:
        return Tensor(md.copy())
    if w_kp == 1.0:
        return Tensor(kd.copy())
    return Tensor((1.0 - w_kp) * md + w_kp * kd)
