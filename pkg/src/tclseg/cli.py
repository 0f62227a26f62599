"""Command-line entry point: ``tclseg {gen-data,pretrain,train,eval,infer}``.

All stages share one workspace directory (``--out``)::

    WORK/corpus/              gen-data
    WORK/pretrain/            pretrain   (encoder.ckpt, pretrain.log, metrics.tsv)
    WORK/train-<name>/        train      (grounder.ckpt, train.log, train_stats.tsv)
    WORK/eval-<name>/         eval       (report.tsv)
    WORK/infer-<name>/        infer      (overlay.ppm, score_*.pgm, scores.npy)

``<name>`` is ``--run-name`` and defaults to the training objective.
Every stage directory also gets ``config.resolved``, ``seed`` and ``run.log``.
"""
from __future__ import annotations

import argparse
import os
import sys
import time
from pathlib import Path

# Thread caps must be in place before numpy loads its BLAS.
_THREADS = os.environ.get("TCL_THREADS", "1")
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, _THREADS)

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC = 0, 1, 2, 3, 4


class MissingPrerequisite(RuntimeError):
    pass


def _stage_dir(work: Path, name: str) -> Path:
    d = work / name
    d.mkdir(parents=True, exist_ok=True)
    return d


def _snapshot(stage: Path, cfg) -> None:
    from .config import dump_config
    (stage / "config.resolved").write_text(dump_config(cfg), encoding="utf-8")
    (stage / "seed").write_text(f"{cfg.seed}\n", encoding="utf-8")


def _require(path: Path, what: str, hint: str) -> Path:
    if not path.exists():
        raise MissingPrerequisite(f"missing {what}: {path} (run `{hint}` first)")
    return path


def _log(stage: Path, msg: str) -> None:
    line = f"{time.strftime('%Y-%m-%d %H:%M:%S')}\t{msg}"
    print(msg, flush=True)
    with open(stage / "run.log", "a", encoding="utf-8") as fh:
        fh.write(line + "\n")


# ---------------------------------------------------------------- stages


def cmd_gen_data(args, cfg) -> int:
    from .corpus import manifest_checksum, write_corpus
    stage = _stage_dir(args.out, "corpus")
    _snapshot(stage, cfg)
    write_corpus(stage, cfg.corpus.seed, cfg.corpus.n_train, cfg.corpus.n_val)
    _log(stage, f"corpus written: {cfg.corpus.n_train} train / {cfg.corpus.n_val} val, "
                f"manifest sha256 {manifest_checksum(stage)}")
    return EXIT_OK


def _load_corpus(work: Path):
    from .corpus import read_manifest
    from .dual_encoder import Vocabulary
    root = _require(work / "corpus" / "manifest.tsv", "corpus", "tclseg gen-data").parent
    man = read_manifest(root)
    return man, Vocabulary.load(root / man.vocab_file)


def cmd_pretrain(args, cfg) -> int:
    from .corpus import read_captioned_images
    from .trainer import Checkpoint, pretrain_dual_encoder, save_checkpoint
    man, vocab = _load_corpus(args.out)
    stage = _stage_dir(args.out, "pretrain")
    _snapshot(stage, cfg)
    _, caps, imgs = read_captioned_images(man, "train")
    _, vcaps, vimgs = read_captioned_images(man, "val")
    params, history, metrics = pretrain_dual_encoder(
        imgs, caps, vocab, cfg.model, cfg.pretrain, cfg.seed,
        log_path=stage / "pretrain.log", val=(vimgs, vcaps))
    save_checkpoint(stage / "encoder.ckpt", Checkpoint(cfg.pretrain.iterations, cfg.seed,
                                                      "pretrain", params))
    (stage / "metrics.tsv").write_text("".join(f"{k}\t{v!r}\n" for k, v in metrics.items()),
                                       encoding="utf-8")
    _log(stage, f"pretrain done: final loss {metrics['final_loss']:.4f}, "
                f"val top-1 {metrics['val_top1']:.3f}")
    return EXIT_OK


def _load_ckpt(path: Path, what: str, hint: str):
    from .trainer import load_checkpoint
    return load_checkpoint(_require(path, what, hint))


def cmd_train(args, cfg) -> int:
    from .corpus import read_captioned_images
    from .trainer import train_grounder
    man, vocab = _load_corpus(args.out)
    enc = _load_ckpt(args.out / "pretrain" / "encoder.ckpt", "pretrained encoder", "tclseg pretrain")
    stage = _stage_dir(args.out, f"train-{_run_name(args, cfg)}")
    _snapshot(stage, cfg)
    _, caps, imgs = read_captioned_images(man, "train")

    def progress(step, bd, stats):
        if step % 100 == 0 or step == cfg.train.iterations - 1:
            _log(stage, f"step {step}: total {bd.total:.4f} pos_area {stats['pos_area']:.3f}")

    train_grounder(imgs, caps, vocab, enc.params, cfg.model, cfg.train, cfg.seed,
                   out_dir=stage, progress=progress)
    return EXIT_OK


def _run_name(args, cfg) -> str:
    return args.run_name or cfg.train.objective


def _grounder(args, cfg):
    name = _run_name(args, cfg)
    ck = _load_ckpt(args.out / f"train-{name}" / "grounder.ckpt", "grounder checkpoint",
                    f"tclseg train --run-name {name}")
    return ck.params


def cmd_eval(args, cfg) -> int:
    from .inference import evaluate_dataset
    man, vocab = _load_corpus(args.out)
    params = _grounder(args, cfg)
    stage = _stage_dir(args.out, f"eval-{_run_name(args, cfg)}")
    _snapshot(stage, cfg)
    report = evaluate_dataset(man, args.split, params, vocab, cfg.model, cfg.eval)
    report.write(stage / "report.tsv")
    _log(stage, f"{args.split} mIoU {report.miou:.4f}")
    return EXIT_OK


def cmd_infer(args, cfg) -> int:
    from .corpus import read_ppm, write_ppm
    from .inference import (ClassPromptSet, build_class_embeddings, overlay, segment_image,
                            write_scores)
    _, vocab = _load_corpus(args.out)
    params = _grounder(args, cfg)
    image_path = _require(Path(args.image), "input image", "an existing PPM path")
    names = tuple(n for n in args.classes.split(","))
    try:
        prompts = ClassPromptSet(names, cfg.eval.template)
    except ValueError as e:
        raise _ConfigProblem(str(e)) from None
    stage = _stage_dir(args.out, f"infer-{_run_name(args, cfg)}")
    _snapshot(stage, cfg)
    image = read_ppm(image_path)
    T = build_class_embeddings(prompts, vocab, params, cfg.model)
    seg = segment_image(image, T, params, cfg.model, cfg.eval)
    write_ppm(stage / "overlay.ppm", overlay(image, seg.labels))
    write_scores(stage, prompts.names, seg.scores)
    (stage / "labels.tsv").write_text(
        "".join(f"{k}\t{n}\n" for k, n in enumerate(prompts.names)) + "-1\tbackground\n",
        encoding="utf-8")
    counts = {n: int((seg.labels == k).sum()) for k, n in enumerate(prompts.names)}
    _log(stage, f"pixels per class: {counts}, background {int((seg.labels < 0).sum())}")
    return EXIT_OK


class _ConfigProblem(ValueError):
    pass


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "eval": cmd_eval,
    "infer": cmd_infer,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="line-oriented 'key = value' config file")
    common.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="config override; repeatable, wins over --config")
    common.add_argument("--out", type=Path, default=Path("work"), help="workspace directory")
    common.add_argument("--seed", type=int, help="run seed (same as --set seed=N)")
    common.add_argument("--run-name", help="name of the train/eval/infer run directories "
                                           "(default: the training objective)")
    p = argparse.ArgumentParser(prog="tclseg", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="generate the synthetic corpus")
    sub.add_parser("pretrain", parents=[common], help="contrastive dual-encoder pretraining")
    sub.add_parser("train", parents=[common], help="train the grounding decoder")
    ev = sub.add_parser("eval", parents=[common], help="described-object mIoU on a split")
    ev.add_argument("--split", default="val", choices=("train", "val"))
    inf = sub.add_parser("infer", parents=[common], help="segment one image")
    inf.add_argument("image", help="PPM image path")
    inf.add_argument("--classes", required=True, help="comma-separated class names")
    return p


def main(argv=None) -> int:
    from .autodiff import NumericError
    from .config import ConfigError, parse_config
    from .corpus import CorpusError
    from .trainer import CheckpointError

    args = build_parser().parse_args(argv)
    try:
        overrides = list(args.overrides)
        if args.seed is not None:
            overrides.append(f"seed={args.seed}")
        cfg = parse_config(args.config, overrides)
        args.out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](args, cfg)
    except (ConfigError, _ConfigProblem) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingPrerequisite as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_MISSING
    except NumericError as e:
        print(f"numeric abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CorpusError, CheckpointError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
