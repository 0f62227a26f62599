"""Text-grounded contrastive losses, area and smoothness priors."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .grounder import MaskSet


@dataclass(frozen=True)
class LossWeights:
    tcl: float = 0.1
    area: float = 0.4
    tv: float = 1.0
    p_pos: float = 0.4
    p_neg: float = 0.0

    def __post_init__(self):
        if min(self.tcl, self.area, self.tv) < 0:
            raise ValueError("loss weights must be nonnegative")
        if not (0 <= self.p_pos <= 1 and 0 <= self.p_neg <= 1):
            raise ValueError("area priors must lie in [0, 1]")


@dataclass(frozen=True)
class LossBreakdown:
    tcl_v: float
    tcl_f: float
    area: float
    tv: float
    total: float
    cl: float = 0.0

    def as_row(self):
        return [self.tcl_v, self.tcl_f, self.area, self.tv, self.total]


def weighted_total(tcl_v, tcl_f, area, tv, weights: LossWeights, cl=0.0):
    """The single arithmetic path for the total; works on floats and Tensors alike."""
    return weights.tcl * (tcl_v + tcl_f + cl) + weights.area * area + weights.tv * tv


def total_loss(tcl_v: float, tcl_f: float, area: float, tv: float,
               weights: LossWeights, cl: float = 0.0) -> LossBreakdown:
    parts = (tcl_v, tcl_f, area, tv, cl)
    if not all(math.isfinite(p) for p in parts):
        raise ad.NumericError(f"non-finite loss component in {parts}")
    tot = weighted_total(tcl_v, tcl_f, area, tv, weights, cl)
    return LossBreakdown(tcl_v, tcl_f, area, tv, tot, cl)


def _diag_mean(x: Tensor) -> Tensor:
    B = x.shape[0]
    return ad.mean(x[np.arange(B), np.arange(B)])


EXCLUDED_LOGIT = -1e4   # exp underflows to exactly 0 in float32 and float64


def duplicate_pairs(keys) -> np.ndarray:
    """Boolean ``B×B`` mask of off-diagonal pairs whose keys (rows) are equal.

    Used to drop same-caption pairs from the negatives: with a small caption
    vocabulary a batch routinely holds several copies of one caption, and
    contrasting them against each other only teaches the encoder to tell
    individual images apart.
    """
    k = np.asarray(keys)
    k = k.reshape(len(k), -1)
    same = (k[:, None, :] == k[None, :, :]).all(axis=-1)
    np.fill_diagonal(same, False)
    return same


def _check_exclude(exclude, B: int) -> Optional[np.ndarray]:
    if exclude is None:
        return None
    exclude = np.asarray(exclude, dtype=bool)
    if exclude.shape != (B, B) or exclude.diagonal().any():
        raise ValueError("exclude must be a B×B boolean mask with a false diagonal")
    return exclude if exclude.any() else None


def infonce_symmetric(S: Tensor, log_tau, exclude=None) -> Tensor:
    """Mean of row- and column-wise cross-entropy of ``S / tau`` against the diagonal.

    Off-diagonal entries flagged in ``exclude`` are left out of both softmaxes.
    """
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise ValueError(f"infonce_symmetric: square similarity matrix required, got {S.shape}")
    exclude = _check_exclude(exclude, S.shape[0])
    log_tau = ad.as_tensor(log_tau, S)
    logits = ad.mul(S, ad.exp(ad.mul(log_tau, -1.0)))
    if exclude is not None:
        logits = ad.add(logits, np.where(exclude, EXCLUDED_LOGIT, 0.0).astype(S.dtype))
    rows = _diag_mean(ad.log_softmax(logits, axis=1))
    cols = _diag_mean(ad.log_softmax(logits, axis=0))
    return ad.mul(ad.add(rows, cols), -0.5)


def image_level_tcl(images: Tensor, masks: MaskSet, T: Tensor, log_tau,
                    encode_global: Callable[[Tensor], Tensor], noise: np.ndarray,
                    hard: bool = True, exclude=None):
    """Re-encode each image under its own binarized positive mask.

    ``noise`` holds one frozen logistic sample per positive-mask pixel
    (shape ``B×H×W``). ``hard=False`` keeps the soft relaxation in the
    forward pass too (used for gradient checks). Returns ``(loss, S^m, masks)``.
    """
    B = images.shape[0]
    logits = masks.logits
    if logits.shape[-2:] != images.shape[-2:]:
        raise ValueError("image_level_tcl: mask and image resolutions differ")
    diag = logits[np.arange(B), np.arange(B)]                       # B, H, W
    mb = ad.gumbel_binarize_logits(diag, noise, hard=hard)
    masked = ad.mul(images, ad.reshape(mb, (B, 1) + mb.shape[1:]))
    vg = encode_global(masked)
    S = ad.matmul(vg, ad.transpose(T, (1, 0)))
    return infonce_symmetric(S, log_tau, exclude), S, mb


def grounded_embeddings(vs: Tensor, masks: Tensor, eps: Optional[float] = 1e-6) -> Tensor:
    """Unit-norm mask-pooled pixel embeddings ``v^f[i, j]``."""
    return ad.l2_normalize(ad.masked_mean_pool(vs, masks, eps=eps), axis=-1)


def feature_level_tcl(vs: Tensor, T: Tensor, masks: MaskSet, log_tau,
                      eps: Optional[float] = 1e-6, exclude=None):
    """Pool each image's pixel embeddings under every text's mask and contrast with the text.

    Returns ``(loss, S^f)``.
    """
    vf = grounded_embeddings(vs, masks.masks, eps)                 # B, B, C
    S = ad.sum_(ad.mul(vf, ad.reshape(T, (1,) + T.shape)), axis=-1)
    return infonce_symmetric(S, log_tau, exclude), S


def mask_areas(masks: Tensor) -> Tensor:
    return ad.mean(masks, axis=(2, 3))


def area_prior_loss(masks: MaskSet | Tensor, p_pos: float = 0.4, p_neg: float = 0.0,
                    exclude=None) -> Tensor:
    """``|p+ - mean positive area| + |p- - mean negative area|``.

    Negative pairs flagged in ``exclude`` do not count towards the negative mean.
    """
    m = masks.masks if isinstance(masks, MaskSet) else masks
    B = m.shape[0]
    if B < 2 or m.shape[1] != B:
        raise ValueError("area_prior_loss: needs a square batch with B >= 2")
    areas = mask_areas(m)
    eye = np.eye(B, dtype=m.dtype)
    negs = 1.0 - eye
    exclude = _check_exclude(exclude, B)
    if exclude is not None:
        negs[exclude] = 0.0
    pos = ad.mul(ad.sum_(ad.mul(areas, eye)), 1.0 / B)
    if negs.sum() == 0:
        return ad.abs_(ad.sub(p_pos, pos))
    neg = ad.mul(ad.sum_(ad.mul(areas, negs)), 1.0 / float(negs.sum()))
    return ad.add(ad.abs_(ad.sub(p_pos, pos)), ad.abs_(ad.sub(p_neg, neg)))


def anisotropic_tv(x: Tensor, normalize: bool = True) -> Tensor:
    """Sum of absolute vertical and horizontal neighbour differences over the last two axes.

    With ``normalize`` the sum is divided by the number of difference terms.
    """
    return ad.total_variation(x, normalize)


def smooth_prior_loss(masks: MaskSet | Tensor, vs: Tensor, scope: str = "all",
                      normalize: bool = True) -> Tensor:
    m = masks.masks if isinstance(masks, MaskSet) else masks
    if scope == "positive":
        B = m.shape[0]
        m = m[np.arange(B), np.arange(B)]
    elif scope != "all":
        raise ValueError(f"unknown tv scope {scope!r}")
    return ad.add(anisotropic_tv(m, normalize), anisotropic_tv(vs, normalize))


def attention_pool(vs: Tensor, ps) -> Tensor:
    """Single-head attention pooling of pixel embeddings (CL-objective ablation only).

    The query is a projection of the mean embedding; since keys are a linear
    map of the pixels, scores are computed as ``(W_k^T q) . v`` directly.
    """
    B, C, H, W = vs.shape
    flat = ad.reshape(vs, (B, C, H * W))
    q = ad.matmul(ad.mean(flat, axis=2), ps["pool.q"])               # B, C
    u = ad.matmul(q, ad.transpose(ps["pool.k"], (1, 0)))            # B, C
    scores = ad.mul(ad.matmul(ad.reshape(u, (B, 1, C)), flat), 1.0 / math.sqrt(C))
    attn = ad.softmax(scores, axis=-1)                               # B, 1, HW
    pooled = ad.reshape(ad.matmul(attn, ad.transpose(flat, (0, 2, 1))), (B, C))
    return ad.l2_normalize(ad.matmul(pooled, ps["pool.v"]), axis=-1)


def cl_loss(vs: Tensor, T: Tensor, log_tau, pool_params, exclude=None) -> Tensor:
    vg = attention_pool(vs, pool_params)
    return infonce_symmetric(ad.matmul(vg, ad.transpose(T, (1, 0))), log_tau, exclude)
