"""End-to-end desk experiment: corpus, pretraining, then several grounder
runs trained and evaluated side by side.

Every stage is a separate ``tclseg`` CLI process, so the runs after
pretraining can proceed in parallel (one process per core).
"""
from __future__ import annotations

import os
import subprocess
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

DEFAULT_RUNS = {
    "tcl": (),
    "cl": ("train.objective=cl",),
}
COLLAPSE_RUN = {"tcl-noarea": ("train.lambda_area=0",)}


@dataclass
class RunResult:
    name: str
    miou: float
    final_pos_area: float
    final_neg_area: float
    train_seconds: float
    eval_seconds: float


@dataclass
class DeskResult:
    work: Path
    manifest_sha256: str
    val_top1: float
    stage_seconds: dict = field(default_factory=dict)
    runs: dict = field(default_factory=dict)
    wall_seconds: float = 0.0

    def summary(self) -> str:
        lines = [f"manifest_sha256\t{self.manifest_sha256}", f"val_top1\t{self.val_top1!r}"]
        for k, v in self.stage_seconds.items():
            lines.append(f"seconds_{k}\t{v:.1f}")
        for r in self.runs.values():
            lines.append(f"run\t{r.name}\tmiou={r.miou!r}\tpos_area={r.final_pos_area:.4f}\t"
                         f"neg_area={r.final_neg_area:.4f}\ttrain_s={r.train_seconds:.1f}\t"
                         f"eval_s={r.eval_seconds:.1f}")
        lines.append(f"wall_seconds\t{self.wall_seconds:.1f}")
        return "\n".join(lines) + "\n"


def _cli(args: Sequence[str], work: Path, overrides: Sequence[str], log) -> float:
    cmd = [sys.executable, "-m", "tclseg.cli", *args, "--out", str(work)]
    for ov in overrides:
        cmd += ["--set", ov]
    env = dict(os.environ)
    env.setdefault("TCL_THREADS", "1")
    t0 = time.time()
    proc = subprocess.run(cmd, env=env, capture_output=True, text=True)
    if log is not None:
        log.write(f"$ {' '.join(cmd)}\n{proc.stdout}{proc.stderr}")
        log.flush()
    if proc.returncode != 0:
        raise RuntimeError(f"{' '.join(args)} failed with exit code {proc.returncode}:\n{proc.stderr}")
    return time.time() - t0


def final_areas(stats_path: Path, last: int = 100) -> tuple:
    """Mean positive / negative mask area over the last ``last`` logged training steps."""
    rows = [line.split("\t") for line in stats_path.read_text().splitlines()[1:] if line]
    rows = rows[-last:]
    pos = sum(float(r[1]) for r in rows) / len(rows)
    neg = sum(float(r[2]) for r in rows) / len(rows)
    return pos, neg


def read_miou(report: Path) -> float:
    last = report.read_text().splitlines()[-1].split("\t")
    return float(last[1])


def run_desk(work, common: Sequence[str] = (), runs: Optional[dict] = None,
             jobs: Optional[int] = None, log_path=None, reuse_pretrain: bool = False) -> DeskResult:
    """Run the whole pipeline in ``work`` and collect the headline numbers.

    ``runs`` maps run names to extra overrides; ``jobs`` caps the number of
    concurrent training processes (default: CPU count).
    """
    from .corpus import manifest_checksum

    work = Path(work)
    work.mkdir(parents=True, exist_ok=True)
    runs = dict(DEFAULT_RUNS if runs is None else runs)
    jobs = jobs or os.cpu_count() or 1
    log = open(log_path, "a", encoding="utf-8") if log_path else None
    t_start = time.time()
    seconds = {}
    try:
        have = (work / "pretrain" / "encoder.ckpt").exists() and (work / "corpus" / "manifest.tsv").exists()
        if not (reuse_pretrain and have):
            seconds["gen_data"] = _cli(["gen-data"], work, common, log)
            seconds["pretrain"] = _cli(["pretrain"], work, common, log)

        def one(item):
            name, extra = item
            ov = list(common) + list(extra)
            t_train = _cli(["train", "--run-name", name], work, ov, log)
            t_eval = _cli(["eval", "--run-name", name], work, ov, log)
            pos, neg = final_areas(work / f"train-{name}" / "train_stats.tsv")
            return RunResult(name, read_miou(work / f"eval-{name}" / "report.tsv"), pos, neg,
                             t_train, t_eval)

        t0 = time.time()
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(one, runs.items()))
        seconds["grounder_runs"] = time.time() - t0
    finally:
        if log is not None:
            log.close()
    metrics = dict(line.split("\t") for line in
                   (work / "pretrain" / "metrics.tsv").read_text().splitlines() if line)
    return DeskResult(work, manifest_checksum(work / "corpus"), float(metrics["val_top1"]),
                      seconds, {r.name: r for r in results}, time.time() - t_start)
