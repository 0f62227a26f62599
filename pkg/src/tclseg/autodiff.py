"""Tape-based reverse-mode differentiation over numpy arrays.

Operations executed inside an active :class:`Tape` append a record holding
their inputs and a vector-Jacobian closure. :func:`backward` replays the
records in reverse. Outside a tape nothing is recorded, which is how
inference and frozen-encoder forwards stay cheap.
"""
from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np


class NumericError(FloatingPointError):
    """A forward or backward pass produced NaN/Inf."""


class DegenerateMaskError(ValueError):
    pass


_state = threading.local()


def _tape_stack() -> list:
    if not hasattr(_state, "stack"):
        _state.stack = []
    return _state.stack


def active_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


@dataclass
class Record:
    op: str
    out: "Tensor"
    inputs: tuple
    vjp: Callable


@dataclass
class Tape:
    records: list = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _tape_stack().pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self.records)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _make(op: str, data: np.ndarray, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    tape = active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    # guard against silent upcasts from numpy scalar constants
    rt = np.result_type(*(t.dtype for t in inputs))
    if data.dtype != rt:
        data = data.astype(rt)
    out = Tensor(data, requires_grad=track)
    if track:
        tape.records.append(Record(op, out, tuple(inputs), vjp))
    return out


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    sa, sb = a.shape, b.shape
    return _make("add", a.data + b.data, (a, b),
                 lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    sa, sb = a.shape, b.shape
    return _make("sub", a.data - b.data, (a, b),
                 lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    ad, bd = a.data, b.data

    def vjp(g):
        ga = unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make("mul", ad * bd, (a, b), vjp)


def div(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    ad, bd = a.data, b.data
    out = ad / bd

    def vjp(g):
        ga = unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make("div", out, (a, b), vjp)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make("exp", out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _make("log", np.log(xd), (x,), lambda g: (g / xd,))


def sigmoid(x: Tensor) -> Tensor:
    # tanh form is overflow-free in both directions
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _make("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _make("tanh", out, (x,), lambda g: (g * (1.0 - out * out),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * (xd * xd * xd))
    th = np.tanh(inner)
    out = 0.5 * xd * (1.0 + th)

    def vjp(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * xd * xd)
        return (g * (0.5 * (1.0 + th) + 0.5 * xd * (1.0 - th * th) * dinner),)

    return _make("gelu", out, (x,), vjp)


def abs_(x: Tensor) -> Tensor:
    xd = x.data
    return _make("abs", np.abs(xd), (x,), lambda g: (g * np.sign(xd),))


def square(x: Tensor) -> Tensor:
    xd = x.data
    return _make("square", xd * xd, (x,), lambda g: (2.0 * g * xd,))


# ---------------------------------------------------------------- structural


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return _make("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return _make("transpose", np.transpose(x.data, axes), (x,),
                 lambda g: (np.transpose(g, inv),))


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, type(None))) or i is Ellipsis for i in items)


def getitem(x: Tensor, idx) -> Tensor:
    src_shape, dtype = x.shape, x.dtype
    basic = _is_basic_index(idx)

    def vjp(g):
        full = np.zeros(src_shape, dtype=dtype)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _make("getitem", x.data[idx], (x,), vjp)


def take_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Embedding lookup: ``table[ids]`` with scatter-add backward."""
    ids = np.asarray(ids)

    def vjp(g):
        full = np.zeros(table.shape, dtype=table.dtype)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (full,)

    return _make("take_rows", table.data[ids], (table,), vjp)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]
    return _make("concat", np.concatenate([x.data for x in xs], axis=axis), tuple(xs),
                 lambda g: tuple(np.split(g, splits, axis=axis)))


# ---------------------------------------------------------------- reductions


def sum_(x: Tensor, axis=None, keepdims=False) -> Tensor:
    src = x.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src),)

    return _make("sum", np.sum(x.data, axis=axis, keepdims=keepdims), (x,), vjp)


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum_(x, axis, keepdims), 1.0 / n)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ValueError("matmul expects operands with ndim >= 2")

    def vjp(g):
        ga = gb = None
        if a.requires_grad:
            ga = unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
        if b.requires_grad:
            gb = unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return ga, gb

    return _make("matmul", np.matmul(ad, bd), (a, b), vjp)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    shifted = xd - xd.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)
    return _make("log_softmax", out, (x,),
                 lambda g: (g - soft * g.sum(axis=axis, keepdims=True),))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    e = np.exp(xd - xd.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)
    return _make("softmax", out, (x,),
                 lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    gd = gamma.data
    n = xd.shape[-1]

    def vjp(g):
        gx = ggam = gbet = None
        if gamma.requires_grad:
            ggam = (g * xhat).reshape(-1, n).sum(axis=0)
        if beta.requires_grad:
            gbet = g.reshape(-1, n).sum(axis=0)
        if x.requires_grad:
            gh = g * gd
            gx = rstd * (gh - gh.mean(axis=-1, keepdims=True)
                         - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, ggam, gbet

    return _make("layer_norm", xhat * gd + beta.data, (x, gamma, beta), vjp)


# ---------------------------------------------------------------- vision primitives


def total_variation(x: Tensor, normalize: bool = True) -> Tensor:
    """Anisotropic L1 total variation over the last two axes as one fused op.

    With ``normalize`` the sum is divided by the number of difference terms.
    """
    xd = x.data
    if xd.ndim < 2 or (xd.shape[-2] < 2 and xd.shape[-1] < 2):
        raise ValueError("total_variation: spatial extent must be at least 2")
    dv = np.subtract(xd[..., 1:, :], xd[..., :-1, :])
    dh = np.subtract(xd[..., :, 1:], xd[..., :, :-1])
    scale = 1.0 / (dv.size + dh.size) if normalize else 1.0
    total = float(np.abs(dv).sum()) + float(np.abs(dh).sum())
    out = np.asarray(total * scale, dtype=xd.dtype)
    np.sign(dv, out=dv)     # only the signs are needed from here on
    np.sign(dh, out=dh)

    def vjp(g):
        c = float(g) * scale
        gx = np.zeros_like(xd)
        gx[..., 1:, :] += dv
        gx[..., :-1, :] -= dv
        gx[..., :, 1:] += dh
        gx[..., :, :-1] -= dh
        if c != 1.0:
            gx *= c
        return (gx,)

    return _make("total_variation", out, (x,), vjp)


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12, strict: bool = False) -> Tensor:
    """Unit L2 norm along ``axis``; norms below ``eps`` are clamped (or rejected when strict)."""
    xd = x.data
    norm = np.sqrt((xd * xd).sum(axis=axis, keepdims=True))
    small = norm < eps
    if strict and small.any():
        raise ValueError("l2_normalize: norm below epsilon in strict mode")
    denom = np.maximum(norm, eps)
    out = xd / denom

    def vjp(g):
        proj = (g * out).sum(axis=axis, keepdims=True)
        gx = (g - out * proj) / denom
        if small.any():
            gx = np.where(small, g / eps, gx)
        return (gx,)

    return _make("l2_normalize", out, (x,), vjp)


def conv2d(x: Tensor, kernel: Tensor, padding: int = 0) -> Tensor:
    """Cross-correlation of ``B×Cin×H×W`` input with ``Cout×Cin×k×k`` kernel (zero padding)."""
    xd, wd = x.data, kernel.data
    if xd.ndim != 4 or wd.ndim != 4:
        raise ValueError("conv2d expects 4-d input and kernel")
    B, Cin, H, W = xd.shape
    Cout, Cin_k, kh, kw = wd.shape
    if Cin != Cin_k:
        raise ValueError(f"conv2d channel mismatch: input {Cin}, kernel {Cin_k}")
    p = padding
    xp = np.pad(xd, ((0, 0), (0, 0), (p, p), (p, p))) if p else xd
    Ho, Wo = H + 2 * p - kh + 1, W + 2 * p - kw + 1
    if Ho <= 0 or Wo <= 0:
        raise ValueError("conv2d: kernel larger than padded input")
    # cols: B, Ho, Wo, Cin, kh, kw
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(B * Ho * Wo, Cin * kh * kw)
    wmat = wd.reshape(Cout, -1)
    out = (cols @ wmat.T).reshape(B, Ho, Wo, Cout).transpose(0, 3, 1, 2)

    def vjp(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, Cout)
        gw = gx = None
        if kernel.requires_grad:
            gw = (g2.T @ cols).reshape(wd.shape)
        if x.requires_grad:
            # scatter back one kernel tap at a time, channels-last to keep copies contiguous
            dcols = (g2 @ wmat).reshape(B, Ho, Wo, Cin, kh, kw)
            gxp = np.zeros((B, Ho + kh - 1, Wo + kw - 1, Cin), dtype=dcols.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i:i + Ho, j:j + Wo, :] += dcols[..., i, j]
            gxp = gxp.transpose(0, 3, 1, 2)
            gx = gxp[:, :, p:p + H, p:p + W] if p else gxp
        return gx, gw

    return _make("conv2d", np.ascontiguousarray(out), (x, kernel), vjp)


def _bilinear_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    """Row i holds the align-corners-false interpolation weights for output sample i."""
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, None)
    i0 = np.minimum(np.floor(src).astype(int), n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    lam = src - i0
    A = np.zeros((n_out, n_in), dtype=dtype)
    rows = np.arange(n_out)
    np.add.at(A, (rows, i0), 1.0 - lam)
    np.add.at(A, (rows, i1), lam)
    return A


def _target_size(shape, factor, size):
    H, W = shape[-2:]
    if size is not None:
        th, tw = (size, size) if np.isscalar(size) else size
    else:
        if factor is None or factor < 1:
            raise ValueError("upsample factor must be >= 1")
        th, tw = int(round(H * factor)), int(round(W * factor))
    if th <= 0 or tw <= 0:
        raise ValueError("upsample target size must be positive")
    return int(th), int(tw)


def upsample(x: Tensor, factor=None, size=None, mode: str = "nearest") -> Tensor:
    """Resize the trailing two axes of ``x`` by ``factor`` or to ``size``."""
    xd = x.data
    th, tw = _target_size(xd.shape, factor, size)
    H, W = xd.shape[-2:]
    if mode == "nearest":
        ri = np.floor(np.arange(th) * (H / th)).astype(int)
        ci = np.floor(np.arange(tw) * (W / tw)).astype(int)
        if th % H == 0 and tw % W == 0:
            fh, fw = th // H, tw // W
            out = xd.repeat(fh, axis=-2).repeat(fw, axis=-1)

            def vjp(g):
                s = g.shape[:-2]
                return (g.reshape(*s, H, fh, W, fw).sum(axis=(-3, -1)),)
        else:
            out = xd[..., ri, :][..., ci]

            def vjp(g):
                full = np.zeros(xd.shape, dtype=xd.dtype)
                tmp = np.zeros(xd.shape[:-2] + (H, tw), dtype=xd.dtype)
                np.add.at(tmp, (Ellipsis, ri, slice(None)), g)
                np.add.at(full, (Ellipsis, slice(None), ci), tmp)
                return (full,)
        return _make("upsample_nearest", out, (x,), vjp)
    if mode == "bilinear":
        Ah = _bilinear_matrix(H, th, xd.dtype)
        Aw = _bilinear_matrix(W, tw, xd.dtype)
        out = np.matmul(np.matmul(Ah, xd), Aw.T)
        return _make("upsample_bilinear", out, (x,),
                     lambda g: (np.matmul(np.matmul(Ah.T, g), Aw),))
    raise ValueError(f"unknown upsample mode {mode!r}")


def masked_mean_pool(features: Tensor, mask: Tensor, eps: Optional[float] = None) -> Tensor:
    """Mask-weighted spatial mean.

    ``features`` is ``C×H×W`` with ``mask`` ``H×W``, or batched: features
    ``B×C×H×W`` with masks ``B×K×H×W`` giving ``B×K×C``. When ``eps`` is
    None a mask sum at or below 1e-12 raises; otherwise the denominator is
    clamped at ``eps``.
    """
    single = features.ndim == 3
    F = features.data[None] if single else features.data
    Md = mask.data[None, None] if single else mask.data
    B, C = F.shape[:2]
    K = Md.shape[1]
    P = F.shape[2] * F.shape[3]
    if Md.shape[0] != B or Md.shape[2:] != F.shape[2:]:
        raise ValueError("masked_mean_pool: mask/feature shape mismatch")
    Fm = F.reshape(B, C, P)
    Mm = Md.reshape(B, K, P)
    num = np.matmul(Mm, Fm.transpose(0, 2, 1))           # B, K, C
    den = Mm.sum(axis=-1)                                 # B, K
    if eps is None:
        if (den <= 1e-12).any():
            raise DegenerateMaskError("masked_mean_pool: mask sum is ~0")
        den_c = den
        clamped = np.zeros_like(den, dtype=bool)
    else:
        clamped = den < eps
        den_c = np.maximum(den, eps)
    out = num / den_c[..., None]

    def vjp(g):
        g = g[None] if single else g
        gnum = g / den_c[..., None]
        gf = gm = None
        if features.requires_grad:
            gf = np.matmul(gnum.transpose(0, 2, 1), Mm).reshape(F.shape)
            gf = gf[0] if single else gf
        if mask.requires_grad:
            gden = -(g * out).sum(axis=-1) / den_c
            gden = np.where(clamped, 0.0, gden)
            gm = (np.matmul(gnum, Fm) + gden[..., None]).reshape(Md.shape)
            gm = gm[0, 0] if single else gm
        return gf, gm

    return _make("masked_mean_pool", out[0, 0] if single else out, (features, mask), vjp)


# ---------------------------------------------------------------- straight-through binarization

_U_CLIP = 1e-7


def gumbel_noise(shape, seed) -> np.ndarray:
    """Difference of two standard Gumbel samples (a logistic sample), per element.

    Uniforms are clipped to [1e-7, 1-1e-7] so the magnitude is bounded by ~19.
    """
    rng = np.random.default_rng(seed)
    u = np.clip(rng.random((2,) + tuple(shape)), _U_CLIP, 1.0 - _U_CLIP)
    g = -np.log(-np.log(u))
    return g[0] - g[1]


def gumbel_binarize_logits(logits: Tensor, noise: np.ndarray, hard: bool = True,
                           temperature: float = 1.0) -> Tensor:
    """Two-class Gumbel-softmax on ``sigmoid(logits)``; hard forward, soft backward."""
    z = (logits.data + noise.astype(logits.dtype)) / temperature
    soft = 0.5 * (1.0 + np.tanh(0.5 * z))
    out = (z > 0).astype(logits.dtype) if hard else soft
    return _make("gumbel_binarize", out, (logits,),
                 lambda g: (g * soft * (1.0 - soft) / temperature,))


def gumbel_binarize(probabilities: Tensor, noise_seed=None, hard: bool = True,
                    noise: Optional[np.ndarray] = None, temperature: float = 1.0) -> Tensor:
    """Binarize probabilities in (0,1) with the Gumbel-Max trick.

    Either ``noise_seed`` or a pre-drawn ``noise`` array (from
    :func:`gumbel_noise`) fixes the sample.
    """
    pd = probabilities.data
    if not ((pd > 0) & (pd < 1)).all():
        raise ValueError("gumbel_binarize: probabilities must lie strictly inside (0, 1)")
    if noise is None:
        noise = gumbel_noise(pd.shape, noise_seed)
    logits = log(probabilities) - log(1.0 - probabilities)
    return gumbel_binarize_logits(logits, noise, hard=hard, temperature=temperature)


# ---------------------------------------------------------------- backward & checking


def backward(loss: Tensor, tape: Tape, check_finite: bool = True) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf."""
    if loss.size != 1:
        raise ValueError(f"backward expects a scalar loss, got shape {loss.shape}")
    grads = {id(loss): np.ones_like(loss.data)}
    produced = {id(r.out) for r in tape.records}
    leaves = {}
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.out), None)
        if g is None:
            continue
        in_grads = rec.vjp(g)
        for inp, gi in zip(rec.inputs, in_grads):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key not in produced:
                leaves[key] = inp
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    for key, t in leaves.items():
        g = grads.get(key)
        if g is None:
            continue
        g = np.asarray(g, dtype=t.dtype).reshape(t.shape)
        if check_finite and not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for {t.name or 'leaf'}")
        t.grad = g.copy() if t.grad is None else t.grad + g


def grad_check(fn: Callable[[Tensor], Tensor], point, step: float = 1e-5,
               n_coords: Optional[int] = None, seed: int = 0) -> float:
    """Max relative error between the tape gradient and central differences.

    The error per coordinate is ``|a - n| / max(1, |a|, |n|)``. With
    ``n_coords`` only that many randomly chosen coordinates are compared.
    """
    base = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    x = Tensor(base.copy(), requires_grad=True)
    with Tape() as tape:
        out = fn(x)
    if not np.isfinite(out.data).all():
        raise NumericError("grad_check: non-finite function value")
    if out.requires_grad:
        backward(out, tape)
    analytic = x.grad if x.grad is not None else np.zeros_like(base)

    flat = base.reshape(-1)
    idx = np.arange(flat.size)
    if n_coords is not None and n_coords < flat.size:
        idx = np.random.default_rng(seed).choice(flat.size, n_coords, replace=False)
    worst = 0.0
    for i in idx:
        plus, minus = flat.copy(), flat.copy()
        plus[i] += step
        minus[i] -= step
        fp = fn(Tensor(plus.reshape(base.shape))).data
        fm = fn(Tensor(minus.reshape(base.shape))).data
        if not (np.isfinite(fp).all() and np.isfinite(fm).all()):
            raise NumericError("grad_check: non-finite function value")
        num = float((fp - fm) / (2 * step))
        a = float(analytic.reshape(-1)[i])
        err = abs(a - num) / max(1.0, abs(a), abs(num))
        worst = max(worst, err)
    return worst
