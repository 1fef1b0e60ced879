"""``rdvq`` command line: train, encode, decode, eval, analyze, make-corpus.

Exit codes: 0 success, 2 usage or contract error, 3 stream/bundle mismatch.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import analysis, data
from .coder import Bitstream, DecodeError
from .config import Config, ConfigError
from .entropy_model import ContractError
from .pipeline import (BundleMismatchError, ModelBundle, StageOrderError, TrainRun, UntrainedBundleError,
                       baseline_zero_pad, compress, decompress, train_stage)

log = logging.getLogger("rdvq")

EXIT_OK, EXIT_USAGE, EXIT_MISMATCH = 0, 2, 3


def _load_bundle(path) -> ModelBundle:
    return ModelBundle.load(path)


def _training_images(cfg: Config, corpus_dir: str | None) -> np.ndarray:
    c = cfg.corpus
    if corpus_dir is not None or c.kind == "dir":
        directory = corpus_dir or c.path
        if not directory:
            raise ConfigError("corpus.kind is 'dir' but no corpus.path is set")
        _, images = data.load_corpus(directory)
        if not images:
            raise ConfigError(f"no images in {directory}")
        if len({im.shape for im in images}) > 1:
            raise ConfigError("training images must all have the same size")
        return np.stack(images)
    if c.kind != "synthetic":
        raise ConfigError(f"unknown corpus.kind {c.kind!r}")
    return data.toy_corpus(c.size, c.image_size, c.seed)


def cmd_train(args) -> int:
    out = Path(args.out)
    if args.stage == 1:
        cfg = Config.load(args.config) if args.config else Config()
        bundle = ModelBundle.create(cfg, args.seed)
    else:
        bundle = _load_bundle(args.bundle or args.out)
        if args.config:
            cfg = Config.load(args.config)
            if cfg.to_dict()["tokenizer"] != bundle.config.to_dict()["tokenizer"] or \
                    cfg.to_dict()["entropy_model"] != bundle.config.to_dict()["entropy_model"]:
                raise BundleMismatchError("config architecture differs from the bundle's")
            bundle.config = cfg
        cfg = bundle.config
        if bundle.stage < args.stage - 1:
            raise StageOrderError(f"stage {args.stage} needs a bundle trained through stage {args.stage - 1}; "
                                  f"this bundle is at stage {bundle.stage}")
    resolved = cfg.dumps()
    log.info("resolved config:\n%s", resolved)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"stage{args.stage}_config.json").write_text(resolved + "\n")
    run = TrainRun.from_config(cfg, args.stage, args.seed, args.lam)
    log.info("stage %d: %d steps, lr %g, lam %g, tau %g", run.stage, run.steps, run.lr, run.lam, run.tau)
    images = _training_images(cfg, args.corpus)
    bundle, rows = train_stage(run, bundle, images, out / f"stage{args.stage}_log.csv")
    bundle.save(out)
    last = rows[-1] if rows else {}
    print(f"stage {args.stage} done; model hash {bundle.model_hash():016x}; "
          + " ".join(f"{k}={v:.4g}" for k, v in last.items() if k in ("mse", "bpp", "loss")))
    return EXIT_OK


def cmd_encode(args) -> int:
    bundle = _load_bundle(args.bundle)
    image = data.load_image(args.inp)
    stream = compress(image, bundle, args.prefix)
    raw = stream.to_bytes()
    Path(args.out).write_bytes(raw)
    h, w = image.shape[1:]
    print(f"{8.0 * len(raw) / (h * w):.6f}")
    return EXIT_OK


def cmd_decode(args) -> int:
    bundle = _load_bundle(args.bundle)
    raw = Path(args.inp).read_bytes()
    stream = Bitstream.from_bytes(raw)
    rec = decompress(stream, bundle) if args.mode == "complete" else baseline_zero_pad(stream, bundle)
    data.save_image(args.out, rec)
    print(f"{8.0 * len(raw) / (stream.orig_h * stream.orig_w):.6f}")
    return EXIT_OK


def _corpus(directory):
    ids, images = data.load_corpus(directory)
    if not images:
        raise ConfigError(f"no images in {directory}")
    return ids, images


def cmd_eval(args) -> int:
    bundle = _load_bundle(args.bundle)
    ids, images = _corpus(args.corpus)
    modes = analysis.MODES if args.mode == "both" else (args.mode,)
    rows = analysis.eval_sweep(ids, images, bundle, sweep=args.sweep_prefix, modes=modes)
    analysis.write_csv(args.out, analysis.EVAL_COLUMNS, rows)
    print(f"{len(rows)} rows -> {args.out}")
    return EXIT_OK


def cmd_analyze(args) -> int:
    bundle = _load_bundle(args.bundle)
    ids, images = _corpus(args.corpus)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    usage, entropy = analysis.usage_rows(images, bundle)
    analysis.write_csv(out / "usage.csv", analysis.USAGE_COLUMNS, usage)
    analysis.write_csv(out / "pca.csv", analysis.PCA_COLUMNS, analysis.pca_rows(ids, images, bundle))
    print(f"normalized usage entropy {entropy:.6f}")
    return EXIT_OK


def cmd_make_corpus(args) -> int:
    paths = data.write_corpus(args.out, data.toy_corpus(args.count, args.size, args.seed))
    print(f"{len(paths)} images -> {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rdvq", description="Rate-distortion optimized VQ image codec.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run one training stage")
    t.add_argument("--stage", type=int, required=True, choices=(1, 2, 3))
    t.add_argument("--config", help="JSON config (stage 1 default: built-in defaults)")
    t.add_argument("--out", required=True, help="bundle output directory")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--bundle", help="input bundle for stages 2 and 3 (default: --out)")
    t.add_argument("--lam", type=float, help="stage-3 rate weight; must be a scheduled value")
    t.add_argument("--corpus", help="train on the images in this directory instead of the configured corpus")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("encode", help="compress one image")
    e.add_argument("--in", dest="inp", required=True)
    e.add_argument("--bundle", required=True)
    e.add_argument("--prefix", type=float, default=1.0)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_encode)

    d = sub.add_parser("decode", help="decompress one stream")
    d.add_argument("--in", dest="inp", required=True)
    d.add_argument("--bundle", required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--mode", choices=analysis.MODES, default="complete")
    d.set_defaults(func=cmd_decode)

    v = sub.add_parser("eval", help="rate/MSE/PSNR table over a corpus")
    v.add_argument("--corpus", required=True)
    v.add_argument("--bundle", required=True)
    v.add_argument("--sweep-prefix", action="store_true", help="one row per decoding level")
    v.add_argument("--mode", choices=analysis.MODES + ("both",), default="complete")
    v.add_argument("--out", required=True)
    v.set_defaults(func=cmd_eval)

    a = sub.add_parser("analyze", help="codebook usage and feature PCA tables")
    a.add_argument("--bundle", required=True)
    a.add_argument("--corpus", required=True)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_analyze)

    m = sub.add_parser("make-corpus", help="write the synthetic toy corpus as PNG files")
    m.add_argument("--out", required=True)
    m.add_argument("--count", type=int, default=20)
    m.add_argument("--size", type=int, default=16)
    m.add_argument("--seed", type=int, default=123)
    m.set_defaults(func=cmd_make_corpus)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (BundleMismatchError, DecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except (StageOrderError, UntrainedBundleError, ConfigError, ContractError, FileNotFoundError,
            KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
