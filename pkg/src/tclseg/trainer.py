"""Two-stage optimization: contrastive pretraining of the dual encoder, then
grounding-decoder training with the text-grounded objective."""
from __future__ import annotations

import logging
import math
import struct
import zlib
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .config import ModelConfig, PretrainConfig, TrainConfig
from .dual_encoder import (Vocabulary, block_prefix, encode_image, encode_text,
                           init_encoder_params, tokenize_batch)
from .grounder import compute_masks, decode_dense, init_decoder_params
from .losses import (LossWeights, area_prior_loss, cl_loss, duplicate_pairs, feature_level_tcl,
                     image_level_tcl, infonce_symmetric, smooth_prior_loss, total_loss,
                     weighted_total)
from .params import ParamSet

log = logging.getLogger(__name__)

BETA1, BETA2, ADAM_EPS = 0.9, 0.999, 1e-8


# ---------------------------------------------------------------- optimizer


@dataclass
class OptimizerState:
    m: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    v: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    t: "OrderedDict[str, int]" = field(default_factory=OrderedDict)


def default_decay(name: str, p: Tensor) -> bool:
    """Matrices and kernels decay; biases, norms, gates and scalars do not."""
    return p.ndim >= 2


def adamw_step(params: ParamSet, state: OptimizerState, lr: float, wd: float,
               decay: Callable[[str, Tensor], bool] = lambda n, p: True) -> None:
    """Decoupled weight decay followed by a bias-corrected Adam update.

    Only parameters with ``requires_grad`` are touched. A non-finite gradient
    aborts the whole step before any parameter changes.
    """
    if lr < 0:
        raise ValueError("adamw_step: negative learning rate")
    live = [(k, p) for k, p in params.items() if p.requires_grad and p.grad is not None]
    for k, p in live:
        if p.grad.shape != p.shape:
            raise ValueError(f"adamw_step: gradient shape mismatch for {k}")
        if not np.isfinite(p.grad).all():
            raise ad.NumericError(f"adamw_step: non-finite gradient for {k}")
    for k, p in live:
        if k not in state.m:
            state.m[k] = np.zeros_like(p.data)
            state.v[k] = np.zeros_like(p.data)
            state.t[k] = 0
        g = p.grad
        state.t[k] += 1
        t = state.t[k]
        m = state.m[k] = np.asarray(BETA1 * state.m[k] + (1 - BETA1) * g)
        v = state.v[k] = np.asarray(BETA2 * state.v[k] + (1 - BETA2) * g * g)
        mhat = m / (1 - BETA1 ** t)
        vhat = v / (1 - BETA2 ** t)
        data = p.data
        if wd and decay(k, p):
            data = data - lr * wd * data
        p.data = (data - lr * mhat / (np.sqrt(vhat) + ADAM_EPS)).astype(p.dtype, copy=False)


def clip_grad_norm(params: ParamSet, max_norm: float) -> float:
    grads = [p.grad for p in params.values() if p.requires_grad and p.grad is not None]
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params.values():
            if p.requires_grad and p.grad is not None:
                p.grad = (p.grad * scale).astype(p.dtype, copy=False)
    return total


def lr_at(step: int, total: int, warmup: int, peak: float) -> float:
    """Linear warmup from 0 to ``peak`` then cosine decay to 0 at ``total``."""
    if not 0 <= step <= total:
        raise ValueError(f"lr_at: step {step} outside [0, {total}]")
    if step < warmup:
        return peak * step / warmup
    progress = (step - warmup) / max(1, total - warmup)
    return peak * 0.5 * (1.0 + math.cos(math.pi * progress))


def batch_indices(seed: int, step: int, batch: int, n: int) -> np.ndarray:
    """Positions ``step*batch .. +batch`` of an endless stream of seeded epoch permutations."""
    start = step * batch
    out = []
    while len(out) < batch:
        pos = start + len(out)
        epoch, offset = divmod(pos, n)
        perm = np.random.default_rng([seed, epoch, 0xDA7A]).permutation(n)
        take = min(batch - len(out), n - offset)
        out.extend(perm[offset:offset + take].tolist())
    return np.asarray(out, dtype=np.int64)


def augment_batch(images: np.ndarray, seed: int, step: int, max_shift: int = 0) -> np.ndarray:
    """Seeded per-image quarter turns, horizontal flips (square images only) and
    integer translations of up to ``max_shift`` pixels with edge padding."""
    rng = np.random.default_rng([seed, step, 0xA06])
    turns = rng.integers(0, 4, len(images))
    flips = rng.integers(0, 2, len(images))
    shifts = rng.integers(-max_shift, max_shift + 1, (len(images), 2))
    out = np.empty_like(images)
    H, W = images.shape[-2:]
    s = max_shift
    for i, img in enumerate(images):
        img = np.rot90(img, turns[i], axes=(1, 2))
        img = img[:, :, ::-1] if flips[i] else img
        if s:
            padded = np.pad(img, ((0, 0), (s, s), (s, s)), mode="edge")
            dy, dx = shifts[i]
            img = padded[:, s - dy:s - dy + H, s - dx:s - dx + W]
        out[i] = img
    return out


def gumbel_seed(seed: int, step: int, position: int):
    return [seed, step, position, 0x6B]


# ---------------------------------------------------------------- checkpoints

MAGIC = b"TCLCKPT\x00"
VERSION = 1
_DTYPES = {0: np.float32, 1: np.float64, 2: np.int64}
_CODES = {np.dtype(v): k for k, v in _DTYPES.items()}


class CheckpointError(RuntimeError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    step: int
    seed: int
    stage: str
    params: ParamSet
    opt: OptimizerState = field(default_factory=OptimizerState)


def save_checkpoint(path, ckpt: Checkpoint, version: int = VERSION) -> None:
    entries = [(k, p.data) for k, p in ckpt.params.items()]
    entries += [(f"opt.m/{k}", v) for k, v in ckpt.opt.m.items()]
    entries += [(f"opt.v/{k}", v) for k, v in ckpt.opt.v.items()]
    entries += [(f"opt.t/{k}", np.asarray(v, dtype=np.int64)) for k, v in ckpt.opt.t.items()]
    stage = ckpt.stage.encode()
    parts = [MAGIC, struct.pack("<IQQ", version, ckpt.step, ckpt.seed),
             struct.pack("<H", len(stage)), stage, struct.pack("<I", len(entries))]
    for name, arr in entries:
        arr = np.asarray(arr)   # keep 0-d arrays 0-d (ascontiguousarray would make them 1-d)
        nb = name.encode()
        parts.append(struct.pack("<H", len(nb)) + nb)
        parts.append(struct.pack("<BB", _CODES[arr.dtype], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        parts.append(struct.pack("<Q", len(raw)) + raw)
    body = b"".join(parts)
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(body + struct.pack("<I", zlib.crc32(body)))
    tmp.replace(path)


def load_checkpoint(path, trainable: Optional[set] = None) -> Checkpoint:
    data = Path(path).read_bytes()
    if len(data) < len(MAGIC) + 24 or data[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic or truncated)")
    version, step, seed = struct.unpack_from("<IQQ", data, len(MAGIC))
    if version != VERSION:
        raise CheckpointVersionError(f"{path}: checkpoint version {version}, expected {VERSION}")
    body, crc = data[:-4], data[-4:]
    if len(crc) < 4 or struct.unpack("<I", crc)[0] != zlib.crc32(body):
        raise CheckpointError(f"{path}: checksum mismatch (truncated or corrupted)")
    pos = len(MAGIC) + 20
    try:
        (slen,) = struct.unpack_from("<H", data, pos)
        pos += 2
        stage = data[pos:pos + slen].decode()
        pos += slen
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        params, opt = ParamSet(), OptimizerState()
        for _ in range(n):
            (nl,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos:pos + nl].decode()
            pos += nl
            code, ndim = struct.unpack_from("<BB", data, pos)
            pos += 2
            shape = struct.unpack_from(f"<{ndim}I", data, pos)
            pos += 4 * ndim
            (nbytes,) = struct.unpack_from("<Q", data, pos)
            pos += 8
            arr = np.frombuffer(data[pos:pos + nbytes], dtype=np.dtype(_DTYPES[code]).newbyteorder("<"))
            arr = arr.astype(_DTYPES[code]).reshape(shape)
            pos += nbytes
            if name.startswith("opt.m/"):
                opt.m[name[6:]] = arr
            elif name.startswith("opt.v/"):
                opt.v[name[6:]] = arr
            elif name.startswith("opt.t/"):
                opt.t[name[6:]] = int(arr.item())
            else:
                params.add(name, arr, trainable is not None and name in trainable)
    except (struct.error, KeyError, ValueError) as e:
        raise CheckpointError(f"{path}: malformed checkpoint ({e})") from None
    return Checkpoint(step, seed, stage, params, opt)


# ---------------------------------------------------------------- logging helpers


class StepLog:
    """Tab-separated per-step log; floats written with ``repr`` so they round-trip."""

    def __init__(self, path: Optional[Path], header: list, append: bool = False):
        self.path = path
        self.fh = None
        if path is not None:
            exists = Path(path).exists()
            self.fh = open(path, "a" if append else "w", encoding="utf-8")
            if not (append and exists):
                self.fh.write("\t".join(header) + "\n")

    def write(self, values: list) -> None:
        if self.fh is not None:
            self.fh.write("\t".join(repr(v) if isinstance(v, float) else str(v) for v in values) + "\n")
            self.fh.flush()

    def close(self) -> None:
        if self.fh is not None:
            self.fh.close()


# ---------------------------------------------------------------- stage 1: contrastive pretraining


def retrieval_top1(params: ParamSet, mcfg: ModelConfig, vocab: Vocabulary, images: np.ndarray,
                   captions: list, chunk: int = 100) -> float:
    """Caption-to-image top-1 accuracy; a hit is any image whose caption equals the query."""
    vg = np.concatenate([encode_image(images[i:i + chunk], params, mcfg, want_dense=False)[0].data
                         for i in range(0, len(images), chunk)])
    uniq = sorted(set(captions))
    ids, lens = tokenize_batch(uniq, vocab, mcfg.text_len)
    T = encode_text(ids, lens, params).data
    best = np.argmax(T @ vg.T, axis=1)
    hit = {c: captions[best[k]] == c for k, c in enumerate(uniq)}
    return float(np.mean([hit[c] for c in captions]))


def pretrain_dual_encoder(images: np.ndarray, captions: list, vocab: Vocabulary,
                          mcfg: ModelConfig, pcfg: PretrainConfig, seed: int,
                          log_path: Optional[Path] = None, val=None,
                          progress: Optional[Callable] = None):
    """Symmetric InfoNCE on global image and text embeddings; returns (params, history)."""
    dtype = np.float32
    params = init_encoder_params(mcfg, len(vocab), seed, dtype)
    params.add("clip.log_tau", np.asarray(math.log(mcfg.tau_init), dtype))
    ids_all, lens_all = tokenize_batch(captions, vocab, mcfg.text_len)
    state = OptimizerState()
    slog = StepLog(log_path, ["step", "lr", "loss"])
    history = []
    n = len(images)
    try:
        for step in range(pcfg.iterations):
            idx = batch_indices(seed, step, pcfg.batch, n)
            lr = lr_at(step, pcfg.iterations, pcfg.warmup, pcfg.lr)
            params.zero_grad()
            with Tape() as tape:
                T = encode_text(ids_all[idx], lens_all[idx], params)
                batch = augment_batch(images[idx], seed, step, pcfg.max_shift) if pcfg.augment else images[idx]
                vg, _ = encode_image(batch, params, mcfg, want_dense=False)
                S = ad.matmul(vg, ad.transpose(T, (1, 0)))
                excl = duplicate_pairs(ids_all[idx]) if pcfg.exclude_duplicates else None
                loss = infonce_symmetric(S, params["clip.log_tau"], excl)
            value = loss.item()
            if not math.isfinite(value):
                raise ad.NumericError(f"pretraining diverged at step {step}")
            ad.backward(loss, tape)
            clip_grad_norm(params, pcfg.clip_norm)
            adamw_step(params, state, lr, pcfg.weight_decay, default_decay)
            history.append(value)
            if step % pcfg.log_every == 0:
                slog.write([step, lr, value])
            if progress:
                progress(step, value)
    finally:
        slog.close()
    metrics = {"final_loss": history[-1] if history else float("nan")}
    if val is not None:
        metrics["val_top1"] = retrieval_top1(params, mcfg, vocab, *val)
    return params, history, metrics


# ---------------------------------------------------------------- stage 2: grounder training


TRAIN_LOG_HEADER = ["step", "lr", "tcl_v", "tcl_f", "area", "tv", "total"]


def tcl_trainable_prefixes(objective: str) -> tuple:
    prefixes = ("dec.", "head.", "tcl.")
    if "cl" in objective.split("+"):
        prefixes += ("pool.",)
    return prefixes


def init_grounder_state(encoder: ParamSet, mcfg: ModelConfig, tcfg: TrainConfig, seed: int) -> ParamSet:
    """Frozen encoder copy plus freshly initialized decoder, head, temperature (and CL pool)."""
    dtype = np.float32
    params = ParamSet()
    for k, p in encoder.items():
        if not k.startswith("clip."):
            params.add(k, p.data.astype(dtype), trainable=False)
    for k, p in init_decoder_params(mcfg, seed, dtype).items():
        params.add(k, p.data, trainable=True)
    params.add("tcl.log_tau", np.asarray(math.log(mcfg.tau_init), dtype))
    if "cl" in tcfg.objective.split("+"):
        rng = np.random.default_rng([seed, 0x9001])
        C = mcfg.width
        for name in ("q", "k", "v"):
            params.add(f"pool.{name}", (rng.standard_normal((C, C)) / np.sqrt(C)).astype(dtype))
    return params


def unfreeze_step(tcfg: TrainConfig) -> int:
    return int(round(tcfg.unfreeze_fraction * tcfg.iterations))


def set_stage_trainable(params: ParamSet, step: int, mcfg: ModelConfig, tcfg: TrainConfig) -> None:
    params.set_trainable(False)
    params.set_trainable(True, tcl_trainable_prefixes(tcfg.objective))
    if step >= unfreeze_step(tcfg):
        params.set_trainable(True, (block_prefix(mcfg.blocks - 1),))


def tcl_step_losses(params: ParamSet, images: np.ndarray, ids: np.ndarray, lens: np.ndarray,
                    mcfg: ModelConfig, tcfg: TrainConfig, noise: np.ndarray):
    """Forward pass of one grounder-training step; returns (loss tensor, breakdown, stats)."""
    weights = LossWeights(tcfg.lambda_tcl, tcfg.lambda_area, tcfg.lambda_tv, tcfg.p_pos, tcfg.p_neg)
    objectives = set(tcfg.objective.split("+"))
    X = Tensor(images)
    T = encode_text(ids, lens, params)
    _, vd = encode_image(X, params, mcfg, want_global=False)
    vs = decode_dense(vd, params, mcfg.image_size)
    ms = compute_masks(vs, T, params["head.w"], params["head.b"])
    log_tau = params["tcl.log_tau"]
    excl = duplicate_pairs(ids) if tcfg.exclude_duplicates else None
    zero = Tensor(np.zeros((), images.dtype))
    lv = lf = lcl = zero
    if "tcl" in objectives:
        if tcfg.use_tcl_v:
            lv, _, _ = image_level_tcl(X, ms, T, log_tau,
                                       lambda x: encode_image(x, params, mcfg, want_dense=False)[0],
                                       noise, exclude=excl)
        if tcfg.use_tcl_f:
            lf, _ = feature_level_tcl(vs, T, ms, log_tau, eps=tcfg.pool_eps, exclude=excl)
    if "cl" in objectives:
        lcl = cl_loss(vs, T, log_tau, params, exclude=excl)
    la = area_prior_loss(ms, tcfg.p_pos, tcfg.p_neg, exclude=excl)
    ltv = smooth_prior_loss(ms, vs, tcfg.tv_scope)
    loss = weighted_total(lv, lf, la, ltv, weights, cl=lcl)
    parts = [float(t.item()) for t in (lv, lf, la, ltv, lcl)]
    breakdown = total_loss(*parts[:4], weights, cl=parts[4])
    B = images.shape[0]
    areas = ms.masks.data.mean(axis=(2, 3))
    diag = np.trace(areas) / B
    stats = {"pos_area": float(diag), "neg_area": float((areas.sum() - np.trace(areas)) / (B * (B - 1)))}
    return loss, breakdown, stats


def train_grounder(images: np.ndarray, captions: list, vocab: Vocabulary, encoder: ParamSet,
                   mcfg: ModelConfig, tcfg: TrainConfig, seed: int,
                   out_dir: Optional[Path] = None, resume: Optional[Checkpoint] = None,
                   stop_at: Optional[int] = None, progress: Optional[Callable] = None):
    """Train the grounding decoder (and, late, the final image block).

    Returns ``(params, history)`` where history holds one dict per step.
    ``stop_at`` ends the run early (used to exercise resume).
    """
    if resume is not None:
        params, state, start = resume.params, resume.opt, resume.step
        if resume.seed != seed:
            raise CheckpointError("resume: seed differs from checkpoint")
    else:
        params, state, start = init_grounder_state(encoder, mcfg, tcfg, seed), OptimizerState(), 0
    ids_all, lens_all = tokenize_batch(captions, vocab, mcfg.text_len)
    objectives = set(tcfg.objective.split("+"))
    header = TRAIN_LOG_HEADER + (["cl"] if "cl" in objectives else [])
    slog = StepLog(out_dir / "train.log" if out_dir else None, header, append=resume is not None)
    stat_log = StepLog(out_dir / "train_stats.tsv" if out_dir else None,
                       ["step", "pos_area", "neg_area", "grad_norm"], append=resume is not None)
    ckpt_path = out_dir / "grounder.ckpt" if out_dir else None
    last_good = None
    history = []
    n = len(images)
    end = tcfg.iterations if stop_at is None else min(stop_at, tcfg.iterations)
    try:
        for step in range(start, end):
            set_stage_trainable(params, step, mcfg, tcfg)
            idx = batch_indices(seed, step, tcfg.batch, n)
            lr = lr_at(step, tcfg.iterations, tcfg.warmup, tcfg.lr)
            H = mcfg.image_size
            noise = np.stack([ad.gumbel_noise((H, H), gumbel_seed(seed, step, p))
                              for p in range(len(idx))]).astype(images.dtype)
            params.zero_grad()
            with Tape() as tape:
                loss, bd, stats = tcl_step_losses(params, images[idx], ids_all[idx], lens_all[idx],
                                                  mcfg, tcfg, noise)
            if not math.isfinite(loss.item()):
                raise ad.NumericError(f"loss is not finite at step {step}; last good checkpoint: {last_good}")
            ad.backward(loss, tape)
            gnorm = clip_grad_norm(params, tcfg.clip_norm)
            adamw_step(params, state, lr, tcfg.weight_decay, default_decay)
            row = [step, lr, *bd.as_row()] + ([bd.cl] if "cl" in objectives else [])
            slog.write(row)
            stat_log.write([step, stats["pos_area"], stats["neg_area"], gnorm])
            history.append({"step": step, "lr": lr, "breakdown": bd, **stats})
            if progress:
                progress(step, bd, stats)
            done = step + 1
            if ckpt_path and (done % tcfg.checkpoint_every == 0 or done == end):
                save_checkpoint(ckpt_path, Checkpoint(done, seed, "tcl", params, state))
                last_good = ckpt_path
    finally:
        slog.close()
        stat_log.close()
    set_stage_trainable(params, min(end, tcfg.iterations), mcfg, tcfg)
    return params, history, state
