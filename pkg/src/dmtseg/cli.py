"""Command line: synth, train, predict, eval and render.

Exit status: 0 on success, 1 on runtime failure, 2 on usage or config errors.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import dmt, evalkit, synthgen
from .config import ConfigError, RunConfig, load_config
from .features import patch_layout, superpixel_layout
from .grid import (FormatError, LabelMap, MultiChannelImage, ProbabilityMap, read_mdi, save_png,
                   to_gray, to_rgb_labels, write_mdi)
from .oversegment import SlicParams, slic
from .srf import ContractError

log = logging.getLogger("dmtseg")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _setup_logging():
    level = os.environ.get("DMT_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level not in levels:
        raise UsageError(f"DMT_LOG must be one of {', '.join(levels)}, got {level!r}")
    logging.basicConfig(level=levels[level], format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def _run_config(path: str | None) -> RunConfig:
    return load_config(path) if path else RunConfig()


def _read(path: str, kind):
    obj = read_mdi(path)
    if not isinstance(obj, kind):
        raise UsageError(f"{path}: expected a {kind.__name__} file, found {type(obj).__name__}")
    return obj


# --- subcommands -----------------------------------------------------------------------------

def cmd_synth(args) -> int:
    params = synthgen.PhantomParams(size=args.size, subjects=args.subjects, rng_seed=args.seed,
                                    boundary_irregularity=args.irregularity, noise_sigma=args.noise_sigma,
                                    mimics=args.mimics)
    data = synthgen.generate(params)
    path = synthgen.write_dataset(args.out, data, params)
    print(f"wrote {len(data)} subjects to {path.parent}")
    return EXIT_OK


def cmd_train(args) -> int:
    rc = _run_config(args.config)
    method = args.method or rc.method
    if method not in dmt.METHODS:
        raise UsageError(f"unknown method {method!r}; expected one of {', '.join(dmt.METHODS)}")
    data = synthgen.read_dataset(args.data)
    log.info("training %s on %d subjects from %s", method, len(data), args.data)
    trainer = dmt.method_trainer(method, rc.dmt, rc.spec, rc.schedule)
    model = trainer(data, dmt.FitCache())
    out = Path(args.out)
    dmt.save_model(model, out)
    if args.dump_feature_layout:
        channels = data[0][0].channels
        cfg = rc.dmt.features
        lines = ["# patch features, no context"] + list(patch_layout(cfg, channels))
        lines += ["# patch features, with context"] + list(patch_layout(cfg.with_context(True), channels))
        lines += ["# superpixel features"] + list(superpixel_layout(cfg, channels))
        (out / "feature_layout.txt").write_text("\n".join(lines) + "\n")
    print(f"trained {method} on {len(data)} subjects; model in {out}")
    return EXIT_OK


def cmd_predict(args) -> int:
    model = dmt.load_model(args.model)
    img = _read(args.image, MultiChannelImage)
    log.info("predicting %s with the model in %s", args.image, args.model)
    labels, probs = model.predict(img)
    prefix = args.out
    Path(prefix).parent.mkdir(parents=True, exist_ok=True)
    write_mdi(f"{prefix}_labels.mdi", labels)
    write_mdi(f"{prefix}_probs.mdi", probs)
    if args.png:
        save_png(f"{prefix}_labels.png", to_rgb_labels(labels))
    print(f"wrote {prefix}_labels.mdi and {prefix}_probs.mdi")
    return EXIT_OK


def cmd_eval(args) -> int:
    rc = _run_config(args.config)
    names = [m.strip() for m in args.methods.split(",") if m.strip()]
    if not names:
        raise UsageError("--methods needs at least one method")
    for n in names:
        if n not in dmt.METHODS:
            raise UsageError(f"unknown method {n!r}; expected one of {', '.join(dmt.METHODS)}")
    data = synthgen.read_dataset(args.data)
    methods = [evalkit.Method(n, dmt.method_trainer(n, rc.dmt, rc.spec, rc.schedule)) for n in names]
    report = evalkit.run_cv(data, methods, evalkit.default_regions(), jobs=args.jobs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "scores.csv").write_text(report.to_csv())
    (out / "summary.csv").write_text(report.summary_csv())
    (out / "pvalues.csv").write_text(report.pvalue_csv())
    (out / "summary.txt").write_text(report.table() + "\n")
    print(report.table())
    if not report.ok:
        for (m, f), msg in sorted(report.failures.items()):
            print(f"fold {f} failed for {m}: {msg}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_render(args) -> int:
    if args.labels:
        pixels = to_rgb_labels(_read(args.labels, LabelMap))
    elif args.probmap:
        pm = _read(args.probmap, ProbabilityMap)
        if args.cls is None or not 0 <= args.cls < pm.n_classes:
            raise UsageError(f"--class must be given and lie in [0, {pm.n_classes})")
        pixels = np.round(pm.values[args.cls] * 255).astype(np.uint8)
    else:
        img = _read(args.edgemap, MultiChannelImage)
        em = slic(img, args.channel, SlicParams(target_superpixels=args.superpixels))
        gray = to_gray(img.data[args.channel])
        pixels = np.repeat(gray[..., None], 3, axis=2)
        a = em.assignment
        edge = np.zeros(a.shape, dtype=bool)
        edge[:, :-1] |= a[:, :-1] != a[:, 1:]
        edge[:-1, :] |= a[:-1, :] != a[1:, :]
        pixels[edge] = (255, 0, 0)
    save_png(args.out, pixels)
    print(f"wrote {args.out}")
    return EXIT_OK


# --- argument parsing -------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dmtseg", description="Multiscale tree segmentation of multichannel images.")
    p.add_argument("--jobs", type=int, default=1, help="worker processes for cross-validation folds")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic phantom dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--subjects", type=int, default=20)
    s.add_argument("--seed", type=int, default=42)
    s.add_argument("--size", type=int, default=128)
    s.add_argument("--noise-sigma", type=float, default=0.05)
    s.add_argument("--irregularity", type=float, default=0.3)
    s.add_argument("--mimics", type=int, default=0, help="lesion-free background blobs per subject")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train a model on a dataset")
    s.add_argument("--config")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--method", help=f"override the configured method ({', '.join(dmt.METHODS)})")
    s.add_argument("--dump-feature-layout", action="store_true", help="also write feature_layout.txt")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("predict", help="segment one image with a trained model")
    s.add_argument("--model", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--out", required=True, help="output prefix")
    s.add_argument("--png", action="store_true")
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("eval", help="leave-one-subject-out comparison of methods")
    s.add_argument("--config")
    s.add_argument("--data", required=True)
    s.add_argument("--methods", default="dmt,srf,bn,srf-srf,bn-bn,srf-bn")
    s.add_argument("--out", default="eval_out")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("render", help="write a PNG of a label map, probability map or superpixel edges")
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--labels")
    src.add_argument("--probmap")
    src.add_argument("--edgemap", help="image file; draws superpixel boundaries")
    s.add_argument("--class", dest="cls", type=int)
    s.add_argument("--channel", type=int, default=0)
    s.add_argument("--superpixels", type=int, default=1000)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_render)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    try:
        _setup_logging()
        if args.jobs < 1:
            raise UsageError("--jobs must be >= 1")
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"dmtseg: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, FormatError, ContractError, ValueError, RuntimeError) as exc:
        print(f"dmtseg: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
