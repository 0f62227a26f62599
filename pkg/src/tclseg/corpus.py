"""Deterministic colored-shape scenes with captions and ground-truth masks.

Images are stored as binary PPM (P6), masks as binary PGM (P5), and the
manifest as tab-separated lines. Training code reads only images and
captions through :func:`read_captioned_images`; masks are reachable only via
:func:`read_masks`.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
import numpy as np

from .dual_encoder import Vocabulary

CANVAS = 64
KINDS = ("circle", "square", "triangle")
COLORS = {
    "red": (230, 30, 30),
    "green": (30, 190, 40),
    "blue": (30, 60, 230),
    "yellow": (235, 225, 30),
    "purple": (150, 30, 200),
    "orange": (250, 140, 0),
}
COLOR_NAMES = tuple(COLORS)
AREA_RANGE = (0.08, 0.6)
DESCRIBED_AREA = (0.1, 0.45)
DISTRACTOR_AREA = (0.03, 0.08)
MAX_BOX_OVERLAP = 0.2
TEXTURE_AMPLITUDE = 0.1
MANIFEST = "manifest.tsv"
VOCAB = "vocab.txt"
SPLITS = ("train", "val")


class CorpusError(RuntimeError):
    pass


class ManifestError(CorpusError):
    pass


@dataclass(frozen=True)
class Shape:
    kind: str
    color: str
    cx: float
    cy: float
    size: float        # circumradius in pixels
    rotation: float    # radians

    def bbox(self):
        """Tight pixel bounding box of the rasterized footprint (x0, y0, x1, y1)."""
        fp = footprint(self)
        ys, xs = np.nonzero(fp)
        return (xs.min(), ys.min(), xs.max() + 1, ys.max() + 1)


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    background: tuple      # base RGB in [0, 1]
    texture_seed: int
    shapes: tuple
    described: int

    @property
    def target(self) -> Shape:
        return self.shapes[self.described]


@dataclass
class Sample:
    id: str
    image: np.ndarray          # uint8, 3×H×W
    caption: str
    mask: np.ndarray           # uint8 in {0, 1}, H×W
    split: str

    def image_float(self, dtype=np.float32) -> np.ndarray:
        return self.image.astype(dtype) / 255.0


def class_names() -> list:
    return [f"{c} {k}" for c in COLOR_NAMES for k in KINDS]


def build_vocabulary() -> Vocabulary:
    return Vocabulary(["a", *COLOR_NAMES, *KINDS])


def _area_to_size(kind: str, area_px: float) -> float:
    # circumradius giving the requested area
    if kind == "circle":
        return float(np.sqrt(area_px / np.pi))
    if kind == "square":
        return float(np.sqrt(area_px / 2.0))
    return float(np.sqrt(area_px / (3.0 * np.sqrt(3.0) / 4.0)))


def _overlap(a, b) -> float:
    """Intersection of two boxes as a fraction of the smaller box."""
    ax0, ay0, ax1, ay1 = a
    bx0, by0, bx1, by1 = b
    iw = max(0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0, min(ay1, by1) - max(ay0, by0))
    smaller = min((ax1 - ax0) * (ay1 - ay0), (bx1 - bx0) * (by1 - by0))
    return iw * ih / smaller


def _place(rng, kind, color, area_frac) -> Shape:
    size = _area_to_size(kind, area_frac * CANVAS * CANVAS)
    lo, hi = size, CANVAS - size
    if lo >= hi:
        lo = hi = CANVAS / 2
    return Shape(kind, color, float(rng.uniform(lo, hi)), float(rng.uniform(lo, hi)),
                 size, float(rng.uniform(0, 2 * np.pi)))


def generate_scene(seed: int, max_retries: int = 200) -> SceneSpec:
    """Sample a scene as a pure function of ``seed``.

    The described shape is the largest; 0-2 smaller distractors, each with a
    color and kind both different from the described one, are placed by
    rejection sampling and dropped when they do not fit.
    """
    rng = np.random.default_rng([int(seed), 0x5CE7E])
    bg_level = rng.uniform(0.3, 0.7)
    background = tuple(float(np.clip(bg_level + rng.uniform(-0.06, 0.06), 0, 1)) for _ in range(3))
    texture_seed = int(rng.integers(2 ** 31))
    n_distractors = int(rng.choice(3, p=(0.2, 0.4, 0.4)))

    for _ in range(max_retries):
        kind = KINDS[rng.integers(len(KINDS))]
        color = COLOR_NAMES[rng.integers(len(COLOR_NAMES))]
        target = _place(rng, kind, color, rng.uniform(*DESCRIBED_AREA))
        area = footprint(target).mean()
        if AREA_RANGE[0] <= area <= AREA_RANGE[1]:
            break
    else:
        raise CorpusError(f"seed {seed}: could not place the described shape")

    used = {(kind, color)}
    distractors = []
    boxes = [target.bbox()]
    for _ in range(n_distractors):
        for _ in range(max_retries):
            dk = KINDS[rng.integers(len(KINDS))]
            dc = COLOR_NAMES[rng.integers(len(COLOR_NAMES))]
            if (dk, dc) in used or dk == kind or dc == color:
                continue
            frac = min(rng.uniform(*DISTRACTOR_AREA), 0.6 * area)
            cand = _place(rng, dk, dc, frac)
            box = cand.bbox()
            if all(_overlap(box, b) <= MAX_BOX_OVERLAP for b in boxes):
                distractors.append(cand)
                boxes.append(box)
                used.add((dk, dc))
                break
    # described shape drawn last so its footprint is fully visible
    shapes = tuple(distractors) + (target,)
    return SceneSpec(int(seed), background, texture_seed, shapes, len(shapes) - 1)


def footprint(shape: Shape, canvas: int = CANVAS) -> np.ndarray:
    """Hard rasterization at pixel centres; returns a bool H×W array."""
    ys, xs = np.mgrid[0:canvas, 0:canvas] + 0.5
    dx, dy = xs - shape.cx, ys - shape.cy
    c, s = np.cos(shape.rotation), np.sin(shape.rotation)
    u, v = c * dx + s * dy, -s * dx + c * dy
    r = shape.size
    if shape.kind == "circle":
        return dx * dx + dy * dy <= r * r
    if shape.kind == "square":
        half = r / np.sqrt(2.0)
        return (np.abs(u) <= half) & (np.abs(v) <= half)
    if shape.kind == "triangle":
        inside = np.ones_like(u, dtype=bool)
        for k in range(3):
            ang = 2 * np.pi * k / 3 + np.pi / 2
            # inward half-plane of the edge opposite vertex k
            nx, ny = np.cos(ang), np.sin(ang)
            inside &= (u * nx + v * ny) >= -r / 2.0
        return inside
    raise ValueError(f"unknown shape kind {shape.kind!r}")


def _value_noise(seed: int, canvas: int = CANVAS, grid: int = 8) -> np.ndarray:
    rng = np.random.default_rng([seed, 0x7E7])
    coarse = rng.uniform(-1.0, 1.0, (grid + 1, grid + 1))
    t = np.linspace(0, grid, canvas, endpoint=False) + 0.5 * grid / canvas
    i0 = np.floor(t).astype(int)
    f = t - i0
    f = f * f * (3 - 2 * f)
    i1 = np.minimum(i0 + 1, grid)
    top = coarse[i0][:, i0] * (1 - f)[None] + coarse[i0][:, i1] * f[None]
    bot = coarse[i1][:, i0] * (1 - f)[None] + coarse[i1][:, i1] * f[None]
    return top * (1 - f)[:, None] + bot * f[:, None]


def caption_of(spec: SceneSpec) -> str:
    t = spec.target
    return f"a {t.color} {t.kind}".lower()


def render(spec: SceneSpec, sample_id: str = "", split: str = "train") -> Sample:
    noise = _value_noise(spec.texture_seed)
    base = np.asarray(spec.background)[:, None, None]
    img = np.clip(base + TEXTURE_AMPLITUDE * noise[None], 0.0, 1.0)
    img = np.round(img * 255.0).astype(np.uint8)
    mask = None
    for shape in spec.shapes:
        fp = footprint(shape)
        img[:, fp] = np.asarray(COLORS[shape.color], dtype=np.uint8)[:, None]
        mask = fp
    return Sample(sample_id, img, caption_of(spec), mask.astype(np.uint8), split)


def scene_seed(gen_seed: int, split: str, index: int) -> int:
    ss = np.random.SeedSequence([int(gen_seed), SPLITS.index(split), int(index)])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def generate_samples(gen_seed: int, split: str, count: int) -> list:
    out = []
    for i in range(count):
        spec = generate_scene(scene_seed(gen_seed, split, i))
        out.append(render(spec, f"{split}_{i:05d}", split))
    return out


# ---------------------------------------------------------------- netpbm io


def write_ppm(path, image: np.ndarray) -> None:
    """``image`` is uint8 3×H×W."""
    _, h, w = image.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(image.transpose(1, 2, 0)).tobytes())


def write_pgm(path, mask: np.ndarray) -> None:
    h, w = mask.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write((mask.astype(np.uint8) * 255).tobytes())


def _read_netpbm(path, magic: bytes):
    with open(path, "rb") as f:
        data = f.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise CorpusError(f"{path}: truncated netpbm header")
        tokens.append(data[start:pos])
    pos += 1
    if tokens[0] != magic:
        raise CorpusError(f"{path}: expected {magic!r} file, got {tokens[0]!r}")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise CorpusError(f"{path}: only 8-bit netpbm supported")
    return data[pos:], w, h


def read_ppm(path) -> np.ndarray:
    body, w, h = _read_netpbm(path, b"P6")
    if len(body) != w * h * 3:
        raise CorpusError(f"{path}: pixel data truncated")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3).transpose(2, 0, 1).copy()


def read_pgm(path) -> np.ndarray:
    body, w, h = _read_netpbm(path, b"P5")
    if len(body) != w * h:
        raise CorpusError(f"{path}: pixel data truncated")
    return (np.frombuffer(body, dtype=np.uint8).reshape(h, w) > 127).astype(np.uint8)


# ---------------------------------------------------------------- manifest


@dataclass
class ManifestRecord:
    id: str
    caption: str
    image_file: str
    mask_file: str
    split: str


@dataclass
class DatasetManifest:
    root: Path
    seed: int
    counts: dict
    vocab_file: str = VOCAB
    records: list = field(default_factory=list)
    content_sha256: str = ""

    def split(self, name: str) -> list:
        return [r for r in self.records if r.split == name]


def _content_digest(root: Path, records) -> str:
    h = hashlib.sha256()
    for r in records:
        for name in (r.image_file, r.mask_file):
            p = root / name
            if not p.exists():
                raise CorpusError(f"missing corpus file {p}")
            h.update(p.read_bytes())
    return h.hexdigest()


def write_corpus(root, gen_seed: int, n_train: int, n_val: int) -> DatasetManifest:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    records = []
    for split, n in (("train", n_train), ("val", n_val)):
        for s in generate_samples(gen_seed, split, n):
            img_f, mask_f = f"images/{s.id}.ppm", f"masks/{s.id}.pgm"
            write_ppm(root / img_f, s.image)
            write_pgm(root / mask_f, s.mask)
            records.append(ManifestRecord(s.id, s.caption, img_f, mask_f, split))
    build_vocabulary().save(root / VOCAB)
    man = DatasetManifest(root, gen_seed, {"train": n_train, "val": n_val}, VOCAB, records)
    man.content_sha256 = _content_digest(root, records)
    lines = [f"# seed\t{gen_seed}", f"# counts\ttrain={n_train}\tval={n_val}",
             f"# vocab\t{VOCAB}", f"# content_sha256\t{man.content_sha256}"]
    lines += ["\t".join((r.id, r.caption, r.image_file, r.mask_file, r.split)) for r in records]
    (root / MANIFEST).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return man


def manifest_checksum(root) -> str:
    return hashlib.sha256((Path(root) / MANIFEST).read_bytes()).hexdigest()


def read_manifest(root, verify: bool = False) -> DatasetManifest:
    root = Path(root)
    path = root / MANIFEST
    if not path.exists():
        raise CorpusError(f"missing manifest {path}")
    seed, counts, vocab, digest, records = None, {}, VOCAB, "", []
    for n, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        cols = line.split("\t")
        if line.startswith("#"):
            key = cols[0][1:].strip()
            try:
                if key == "seed":
                    seed = int(cols[1])
                elif key == "counts":
                    counts = {k: int(v) for k, v in (c.split("=") for c in cols[1:])}
                elif key == "vocab":
                    vocab = cols[1]
                elif key == "content_sha256":
                    digest = cols[1]
                else:
                    raise ValueError(key)
            except (ValueError, IndexError):
                raise ManifestError(f"{path}:{n}: malformed header line {line!r}") from None
            continue
        if len(cols) != 5 or cols[4] not in SPLITS or not all(cols):
            raise ManifestError(f"{path}:{n}: malformed record line {line!r}")
        records.append(ManifestRecord(*cols))
    if seed is None:
        raise ManifestError(f"{path}: missing seed header")
    man = DatasetManifest(root, seed, counts, vocab, records, digest)
    for r in records:
        for name in (r.image_file, r.mask_file):
            if not (root / name).exists():
                raise CorpusError(f"missing corpus file {root / name}")
    if verify and _content_digest(root, records) != digest:
        raise CorpusError(f"{path}: checksum mismatch")
    return man


def read_captioned_images(man: DatasetManifest, split: str):
    """Images (float32 B×3×H×W) and captions; never touches mask files."""
    recs = man.split(split)
    images = np.stack([read_ppm(man.root / r.image_file) for r in recs]).astype(np.float32) / 255.0
    return [r.id for r in recs], [r.caption for r in recs], images


def read_masks(man: DatasetManifest, split: str) -> np.ndarray:
    return np.stack([read_pgm(man.root / r.mask_file) for r in man.split(split)])


def read_samples(man: DatasetManifest, split: str) -> list:
    return [Sample(r.id, read_ppm(man.root / r.image_file), r.caption,
                   read_pgm(man.root / r.mask_file), r.split) for r in man.split(split)]
