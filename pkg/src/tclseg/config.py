"""Run configuration: dataclass sections plus a strict ``key = value`` parser."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterable, Optional


class ConfigError(ValueError):
    pass


# Reference values of the full-scale recipe; kept for documentation only.
PAPER_SCALE = {
    "batch": 1024,
    "lr": 7.5e-5,
    "iterations": 50_000,
    "warmup": 15_000,
    "weight_decay": 0.05,
    "unfreeze_step": 30_000,
    "eval_short_side": 448,
}


@dataclass
class ModelConfig:
    image_size: int = 64
    patch: int = 8
    width: int = 64
    blocks: int = 2
    heads: int = 4
    mlp_ratio: int = 4
    text_len: int = 8
    mask_w_init: float = 10.0
    mask_b_init: float = 0.0
    tau_init: float = 0.07


@dataclass
class CorpusConfig:
    n_train: int = 2000
    n_val: int = 200
    seed: int = 0


@dataclass
class PretrainConfig:
    batch: int = 64
    iterations: int = 3000
    warmup: int = 150
    lr: float = 3e-3
    weight_decay: float = 0.05
    clip_norm: float = 1.0
    log_every: int = 1
    augment: bool = True    # random flips / quarter turns / shifts; captions are invariant to all
    max_shift: int = 0      # translation range of the augmentation, pixels
    exclude_duplicates: bool = False  # same-caption pairs are not negatives


@dataclass
class TrainConfig:
    batch: int = 32
    iterations: int = 2000
    warmup: int = 600
    lr: float = 2e-3
    weight_decay: float = 0.05
    unfreeze_fraction: float = 0.6
    objective: str = "tcl"            # tcl | cl | cl+tcl (ablations)
    lambda_tcl: float = 0.1
    lambda_area: float = 0.4
    lambda_tv: float = 1.0
    p_pos: float = 0.4
    p_neg: float = 0.0
    tv_scope: str = "all"             # all | positive
    use_tcl_v: bool = True
    use_tcl_f: bool = True
    clip_norm: float = 1.0
    checkpoint_every: int = 500
    pool_eps: float = 1e-6
    exclude_duplicates: bool = True   # same-caption pairs are not negatives


@dataclass
class EvalConfig:
    short_side: int = 64
    refine: bool = True
    pamr_iterations: int = 10
    pamr_radii: tuple = (1, 2)
    pamr_temperature: float = 0.1
    w_kp: float = 0.3
    background: bool = True
    bg_threshold: float = 0.5
    template: str = "a {label}"


@dataclass
class RunConfig:
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> None:
        t = self.train
        for name, sec in (("pretrain", self.pretrain), ("train", t)):
            if not 0 <= sec.warmup < sec.iterations:
                raise ConfigError(f"{name}: warmup must satisfy 0 <= warmup < iterations")
            if sec.lr <= 0 or sec.batch <= 0:
                raise ConfigError(f"{name}: lr and batch must be positive")
        if t.objective not in ("tcl", "cl", "cl+tcl"):
            raise ConfigError(f"train.objective: unknown value {t.objective!r}")
        if t.tv_scope not in ("all", "positive"):
            raise ConfigError(f"train.tv_scope: unknown value {t.tv_scope!r}")
        if min(t.lambda_tcl, t.lambda_area, t.lambda_tv) < 0:
            raise ConfigError("train: loss weights must be nonnegative")
        if not (0 <= t.p_pos <= 1 and 0 <= t.p_neg <= 1):
            raise ConfigError("train: area priors must lie in [0, 1]")
        if not 0 <= self.eval.w_kp <= 1:
            raise ConfigError("eval.w_kp must lie in [0, 1]")
        if self.eval.background and not 0 < self.eval.bg_threshold < 1:
            raise ConfigError("eval.bg_threshold must lie in (0, 1)")
        if self.eval.short_side <= 0:
            raise ConfigError("eval.short_side must be positive")
        m = self.model
        if m.image_size % m.patch or m.width % m.heads:
            raise ConfigError("model: image_size must divide by patch and width by heads")


def _coerce(raw: str, current, key: str):
    raw = raw.strip()
    try:
        if isinstance(current, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
        if isinstance(current, tuple):
            return tuple(int(p) for p in raw.split(",") if p.strip())
        return raw
    except ValueError:
        raise ConfigError(f"type mismatch for key {key!r}: cannot parse {raw!r} "
                          f"as {type(current).__name__}") from None


def _assign(cfg: RunConfig, key: str, raw: str) -> None:
    parts = key.strip().split(".")
    if len(parts) == 1 and parts[0] == "seed":
        cfg.seed = _coerce(raw, cfg.seed, key)
        return
    if len(parts) != 2:
        raise ConfigError(f"unknown config key {key!r}")
    section, name = parts
    sec = getattr(cfg, section, None)
    if sec is None or not dataclasses.is_dataclass(sec) or section == "seed":
        raise ConfigError(f"unknown config key {key!r}")
    if name not in {f.name for f in fields(sec)}:
        raise ConfigError(f"unknown config key {key!r}")
    setattr(sec, name, _coerce(raw, getattr(sec, name), key))


def _split_line(line: str, where: str):
    if "=" not in line:
        raise ConfigError(f"{where}: expected 'key = value', got {line!r}")
    k, v = line.split("=", 1)
    return k.strip(), v.strip()


def parse_config(path: Optional[Path] = None, overrides: Iterable[str] = ()) -> RunConfig:
    """Defaults, then the file, then ``key=value`` overrides (which win)."""
    cfg = RunConfig()
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError(f"cannot read config file {path}: {e}") from None
        for n, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if line:
                _assign(cfg, *_split_line(line, f"{path}:{n}"))
    for ov in overrides:
        _assign(cfg, *_split_line(ov, "override"))
    cfg.validate()
    return cfg


def dump_config(cfg: RunConfig) -> str:
    lines = [f"seed = {cfg.seed}"]
    for f in fields(cfg):
        sec = getattr(cfg, f.name)
        if not dataclasses.is_dataclass(sec):
            continue
        for sf in fields(sec):
            v = getattr(sec, sf.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{f.name}.{sf.name} = {v}")
    return "\n".join(lines) + "\n"
