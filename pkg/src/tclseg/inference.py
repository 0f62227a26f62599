"""Zero-shot segmentation from class prompts, mask refinement and mIoU evaluation."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .config import EvalConfig, ModelConfig
from .corpus import DatasetManifest, class_names, read_pgm, read_ppm, write_ppm
from .dual_encoder import Vocabulary, encode_image, encode_text, tokenize_batch
from .grounder import compute_masks, decode_dense, kp_masks, mix_masks
from .params import ParamSet

BACKGROUND = -1


@dataclass(frozen=True)
class ClassPromptSet:
    names: tuple
    template: str = "a {label}"

    def __post_init__(self):
        names = tuple(n.strip() for n in self.names)
        if not names:
            raise ValueError("empty prompt set")
        if any(not n for n in names):
            raise ValueError("class names must be non-empty")
        seen = set()
        for n in names:
            if n.lower() in seen:
                raise ValueError(f"duplicate class {n!r}")
            seen.add(n.lower())
        if "{label}" not in self.template:
            raise ValueError("prompt template must contain '{label}'")
        object.__setattr__(self, "names", names)

    def __len__(self):
        return len(self.names)

    def prompts(self) -> list:
        return [self.template.format(label=n) for n in self.names]


def build_class_embeddings(prompts: ClassPromptSet, vocab: Vocabulary, params: ParamSet,
                           mcfg: ModelConfig) -> np.ndarray:
    """Unit-norm text embeddings ``N×C`` for the templated class names, in order."""
    for name in prompts.names:
        if not any(w.strip(".,;:!?").lower() in vocab for w in name.split()):
            warnings.warn(f"class {name!r} has no in-vocabulary token; encoding as unknown",
                          stacklevel=2)
    ids, lens = tokenize_batch(prompts.prompts(), vocab, mcfg.text_len)
    return encode_text(ids, lens, params).data


# ---------------------------------------------------------------- resizing


def resize_image(image: np.ndarray, size: tuple) -> np.ndarray:
    """Bilinear (half-pixel centres) resize of a ``3×H×W`` float image."""
    if tuple(image.shape[-2:]) == tuple(size):
        return image
    return ad.upsample(ad.Tensor(image), size=tuple(size), mode="bilinear").data


def short_side_size(h: int, w: int, short: int, multiple: int = 1) -> tuple:
    """Target size with the shorter side equal to ``short``.

    The longer side keeps the aspect ratio, rounded to a multiple of
    ``multiple`` so the result tiles into patches.
    """
    scale = short / min(h, w)

    def snap(n):
        return max(multiple, int(round(n * scale / multiple)) * multiple)

    return snap(h), snap(w)


def as_float_image(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.dtype == np.uint8:
        return image.astype(np.float32) / 255.0
    return image.astype(np.float32, copy=False)


# ---------------------------------------------------------------- refinement


def _neighbour_offsets(radii: Sequence[int]) -> list:
    offs = [(0, 0)]
    for r in radii:
        if r <= 0:
            raise ValueError("pamr radii must be positive")
        for dy in (-r, 0, r):
            for dx in (-r, 0, r):
                if (dy, dx) != (0, 0):
                    offs.append((dy, dx))
    return offs


def _shifted(x: np.ndarray, offsets: list, pad: int) -> np.ndarray:
    """Stack of ``x`` sampled at each offset with edge replication: ``K×...×H×W``."""
    H, W = x.shape[-2:]
    widths = [(0, 0)] * (x.ndim - 2) + [(pad, pad), (pad, pad)]
    xp = np.pad(x, widths, mode="edge")
    return np.stack([xp[..., pad + dy:pad + dy + H, pad + dx:pad + dx + W] for dy, dx in offsets])


def pamr_affinity(image: np.ndarray, radii: Sequence[int] = (1, 2),
                  temperature: float = 0.1) -> tuple:
    """Per-pixel softmax weights over the neighbour set, shape ``K×H×W``."""
    offsets = _neighbour_offsets(radii)
    pad = max(radii)
    nb = _shifted(image.astype(np.float64), offsets, pad)          # K, 3, H, W
    std = nb.std(axis=0)                                             # 3, H, W
    diff = np.abs(nb - image[None].astype(np.float64))
    logits = -(diff / (temperature * (std[None] + 1e-8))).mean(axis=1)   # K, H, W
    logits -= logits.max(axis=0, keepdims=True)
    w = np.exp(logits)
    return w / w.sum(axis=0, keepdims=True), offsets


def pamr_refine(scores: np.ndarray, image: np.ndarray, iterations: int = 10,
                radii: Sequence[int] = (1, 2), temperature: float = 0.1) -> np.ndarray:
    """Propagate mask scores ``N×H×W`` with colour-affinity weighted neighbour averages.

    Every iteration is a convex combination, so values stay inside the input range.
    """
    if iterations < 0:
        raise ValueError("pamr iterations must be nonnegative")
    if iterations == 0:
        return scores
    image = as_float_image(image)
    if image.shape[-2:] != scores.shape[-2:]:
        raise ValueError("pamr_refine: image and score sizes differ")
    aff, offsets = pamr_affinity(image, radii, temperature)
    pad = max(radii)
    out = scores.astype(np.float64)
    lo, hi = scores.min(), scores.max()
    for _ in range(iterations):
        nb = _shifted(out, offsets, pad)                             # K, N, H, W
        out = np.einsum("knhw,khw->nhw", nb, aff)
    # guard against last-ulp excursions from the weighted sums
    return np.clip(out, lo, hi).astype(scores.dtype)


# ---------------------------------------------------------------- segmentation


def argmax_labels(scores: np.ndarray, background: bool = True, threshold: float = 0.5) -> np.ndarray:
    """Per-pixel argmax over classes; low-confidence pixels become background if enabled."""
    labels = np.argmax(scores, axis=0).astype(np.int64)
    if background:
        labels[scores.max(axis=0) < threshold] = BACKGROUND
    return labels


@dataclass
class Segmentation:
    labels: np.ndarray          # H×W int, BACKGROUND for unassigned pixels
    scores: np.ndarray          # N×H×W mixed (and refined) mask scores
    decoder_scores: np.ndarray = field(repr=False, default=None)
    kp_scores: np.ndarray = field(repr=False, default=None)


def segment_image(image: np.ndarray, T: np.ndarray, params: ParamSet, mcfg: ModelConfig,
                  ecfg: EvalConfig) -> Segmentation:
    """Segment one ``3×H×W`` image against class embeddings ``T`` (N×C)."""
    T = np.asarray(T)
    if T.ndim != 2 or T.shape[0] == 0:
        raise ValueError("segment_image: empty prompt set")
    image = as_float_image(image)
    H, W = image.shape[-2:]
    size = short_side_size(H, W, ecfg.short_side, mcfg.patch)
    x = resize_image(image, size)
    grid = (size[0] // mcfg.patch, size[1] // mcfg.patch)
    _, vd = encode_image(x[None], params, mcfg, want_global=False)
    # scores in float64: a float32 sigmoid rounds to exactly 1 for logits above ~17
    vd = ad.Tensor(vd.data.astype(np.float64))
    Tt = ad.Tensor(T.astype(np.float64))
    w, b = params["head.w"], params["head.b"]
    vs = decode_dense(vd, params, size, grid)
    m_dec = compute_masks(vs, Tt, w, b).masks.data[0]
    m_kp = kp_masks(vd, Tt, w, b, size, grid).masks.data[0]
    mixed = mix_masks(m_dec, m_kp, ecfg.w_kp).data
    if ecfg.refine and ecfg.pamr_iterations > 0:
        mixed = pamr_refine(mixed, x, ecfg.pamr_iterations, ecfg.pamr_radii, ecfg.pamr_temperature)
    if size != (H, W):
        mixed = np.clip(resize_image(mixed, (H, W)), 0.0, 1.0)
    labels = argmax_labels(mixed, ecfg.background, ecfg.bg_threshold)
    return Segmentation(labels, mixed, m_dec, m_kp)


# ---------------------------------------------------------------- mIoU


MIOU_POLICY = "mean over object classes present in gt or pred; background excluded"


@dataclass
class IoUReport:
    classes: list
    intersection: np.ndarray
    union: np.ndarray
    gt_pixels: Optional[np.ndarray] = None
    pred_pixels: Optional[np.ndarray] = None
    policy: str = MIOU_POLICY

    @property
    def present(self) -> np.ndarray:
        return self.union > 0

    @property
    def iou(self) -> np.ndarray:
        out = np.full(len(self.classes), np.nan)
        p = self.present
        out[p] = self.intersection[p] / self.union[p]
        return out

    @property
    def miou(self) -> float:
        p = self.present
        if not p.any():
            return float("nan")
        return float(np.mean(self.intersection[p] / self.union[p]))

    def to_tsv(self) -> str:
        lines = []
        for k, name in enumerate(self.classes):
            if self.present[k]:
                lines.append(f"{name}\t{int(self.intersection[k])}\t{int(self.union[k])}\t"
                             f"{float(self.iou[k])!r}")
        lines.append(f"miou\t{self.miou!r}")
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.to_tsv(), encoding="utf-8")


class IoUAccumulator:
    """Dataset-level intersections and unions, summed before any division."""

    def __init__(self, classes: Sequence[str]):
        self.classes = list(classes)
        n = len(self.classes)
        self.intersection = np.zeros(n, dtype=np.int64)
        self.union = np.zeros(n, dtype=np.int64)
        self.gt_pixels = np.zeros(n, dtype=np.int64)
        self.pred_pixels = np.zeros(n, dtype=np.int64)

    def add(self, pred: np.ndarray, gt: np.ndarray) -> None:
        pred, gt = np.asarray(pred), np.asarray(gt)
        if pred.shape != gt.shape:
            raise ValueError(f"compute_miou: shape mismatch {pred.shape} vs {gt.shape}")
        n = len(self.classes)
        for name, arr in (("pred", pred), ("gt", gt)):
            if arr.size and (arr.min() < BACKGROUND or arr.max() >= n):
                raise ValueError(f"compute_miou: {name} class id outside [-1, {n})")
        p = pred.ravel() + 1
        g = gt.ravel() + 1
        conf = np.bincount(g * (n + 1) + p, minlength=(n + 1) ** 2).reshape(n + 1, n + 1)
        tp = np.diag(conf)[1:]
        self.intersection += tp
        self.gt_pixels += conf.sum(axis=1)[1:]
        self.pred_pixels += conf.sum(axis=0)[1:]
        self.union += conf.sum(axis=0)[1:] + conf.sum(axis=1)[1:] - tp

    def report(self) -> IoUReport:
        return IoUReport(self.classes, self.intersection.copy(), self.union.copy(),
                         self.gt_pixels.copy(), self.pred_pixels.copy())


def compute_miou(pred: np.ndarray, gt: np.ndarray, num_classes: int,
                 classes: Optional[Sequence[str]] = None) -> IoUReport:
    acc = IoUAccumulator(classes or [str(k) for k in range(num_classes)])
    acc.add(pred, gt)
    return acc.report()


def described_maps(labels: np.ndarray, mask: np.ndarray, class_id: int) -> tuple:
    """Ground truth labels only the described instance, so other predicted classes count as background."""
    gt = np.where(mask > 0, class_id, BACKGROUND)
    pred = np.where(labels == class_id, class_id, BACKGROUND)
    return pred, gt


def evaluate_dataset(man: DatasetManifest, split: str, params: ParamSet, vocab: Vocabulary,
                     mcfg: ModelConfig, ecfg: EvalConfig, classes: Optional[Sequence[str]] = None,
                     overlay_dir: Optional[Path] = None) -> IoUReport:
    """Described-object mIoU over a split with the full class vocabulary as prompts."""
    classes = list(classes or class_names())
    prompts = ClassPromptSet(tuple(classes), ecfg.template)
    T = build_class_embeddings(prompts, vocab, params, mcfg)
    index = {c: k for k, c in enumerate(classes)}
    acc = IoUAccumulator(classes)
    records = man.split(split)
    if not records:
        raise ValueError(f"evaluate_dataset: split {split!r} is empty")
    for r in records:
        label = r.caption.split(" ", 1)[1] if r.caption.startswith("a ") else r.caption
        if label not in index:
            raise ValueError(f"evaluate_dataset: caption {r.caption!r} has no matching class")
        image = read_ppm(man.root / r.image_file)
        mask = read_pgm(man.root / r.mask_file)
        seg = segment_image(image, T, params, mcfg, ecfg)
        pred, gt = described_maps(seg.labels, mask, index[label])
        acc.add(pred, gt)
        if overlay_dir is not None:
            write_ppm(Path(overlay_dir) / f"{r.id}.ppm", overlay(image, seg.labels))
    return acc.report()


# ---------------------------------------------------------------- artifacts


def palette(n: int) -> np.ndarray:
    """Deterministic, well-spread colours for ``n`` classes (uint8 n×3)."""
    hues = (np.arange(n) * 0.618033988749895) % 1.0
    h6 = hues * 6.0
    x = 1.0 - np.abs(h6 % 2.0 - 1.0)
    sector = h6.astype(int) % 6
    table = np.array([[1, 0, 0], [0, 1, 0], [0, 0, 1]], dtype=float)
    rgb = np.zeros((n, 3))
    order = [(0, 1), (1, 0), (1, 2), (2, 1), (2, 0), (0, 2)]   # (full, partial) channels per sector
    for k in range(n):
        full, part = order[sector[k]]
        rgb[k] = table[full] + x[k] * table[part]
    return (rgb * 255).round().astype(np.uint8)


def overlay(image: np.ndarray, labels: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    """Blend class colours over the image; background pixels are left untouched."""
    img = np.asarray(image)
    if img.dtype != np.uint8:
        img = (np.clip(img, 0, 1) * 255).round().astype(np.uint8)
    n = int(labels.max()) + 1 if labels.size else 0
    out = img.astype(np.float64).copy()
    if n > 0:
        colors = palette(n).astype(np.float64)
        fg = labels >= 0
        col = colors[np.clip(labels, 0, None)].transpose(2, 0, 1)
        out[:, fg] = (1 - alpha) * out[:, fg] + alpha * col[:, fg]
    return out.round().astype(np.uint8)


def write_scores(out_dir, names: Sequence[str], scores: np.ndarray) -> list:
    """One 8-bit PGM per class holding its mask score, plus the raw float32 array."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, s in zip(names, scores):
        p = out_dir / f"score_{name.replace(' ', '_')}.pgm"
        _write_gray(p, (np.clip(s, 0, 1) * 255).round().astype(np.uint8))
        paths.append(p)
    np.save(out_dir / "scores.npy", scores.astype(np.float32))
    return paths


def _write_gray(path, img: np.ndarray) -> None:
    h, w = img.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + img.tobytes())
