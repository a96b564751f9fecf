"""Command-line interface: synth, train, eval, report-gap, predict, toy-sampler.

Exit codes: 0 success, 1 usage/config error, 2 runtime/numerical error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import checkpoint, config as cfg, harness, metrics, netpbm, predictive, synth
from .sampler import NumericalError, ToyConfig, toy_sampler_check

log = logging.getLogger("uncseg")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


def _load_config(args) -> cfg.ExperimentConfig:
    conf = cfg.load(args.config) if args.config else cfg.ExperimentConfig()
    if args.seed is not None:
        conf = replace(conf, seed=args.seed)
    return conf


def cmd_synth(args) -> int:
    conf = _load_config(args)
    spec = conf.corpus if args.seed is None else replace(conf.corpus, seed=args.seed)
    out = Path(args.out or conf.data_root)
    entries = synth.generate_corpus(spec, out)
    print(f"wrote {len(entries)} pairs to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    conf = _load_config(args)
    if args.out:
        conf = replace(conf, output=args.out)
    if args.data:
        conf = replace(conf, data_root=args.data)

    def progress(rec):
        log.info("epoch %3d cycle %d %-11s lr=%.4f loss=%.4f val_dice=%.4f M=%d",
                 rec.epoch, rec.cycle, rec.phase, rec.lr, rec.mean_loss, rec.val_dice, rec.snapshots)

    try:
        ensemble, history, info = harness.train_experiment(conf, on_epoch=progress)
    except NumericalError as exc:
        raise NumericalError(f"{exc} (loss.grad_clip={conf.loss.grad_clip}, "
                             f"loss.clip_unweighted={conf.loss.clip_unweighted})") from None
    harness.write_training_outputs(conf.output, conf, ensemble, history, info)
    print(f"{conf.method}: M={len(ensemble)} best_val_dice={history.best_val_dice:.4f} "
          f"(epoch {history.best_val_epoch}) final_val_dice={info['final_val_dice']:.4f} "
          f"-> {conf.output}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ensemble, header = checkpoint.load(args.checkpoint)
    if args.config:
        conf = cfg.load(args.config)
        if conf.arch != ensemble.arch:
            raise UsageError(f"checkpoint architecture {ensemble.arch} does not match "
                             f"config architecture {conf.arch}")
    reports, rows = [], []
    for split_dir in args.splits:
        split_dir = Path(split_dir)
        if not split_dir.is_dir():
            raise UsageError(f"split directory {split_dir} does not exist")
        try:
            images, labels, paths = synth.load_dir(split_dir)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        report, records = harness.evaluate_split(ensemble, images, labels, split_dir.name)
        reports.append(report)
        rows += [(split_dir.name, p.relative_to(split_dir).with_suffix("").as_posix(), r)
                 for p, r in zip(paths, records)]
    out = Path(args.out or Path(args.checkpoint).parent)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.csv").write_text(metrics.reports_to_csv(reports))
    (out / "report.md").write_text(metrics.reports_to_markdown(reports))
    if args.per_image:
        (out / "per_image.csv").write_text(harness.per_image_csv(rows))
    print(f"method={header.get('method')} M={len(ensemble)}")
    print(metrics.reports_to_markdown(reports), end="")
    return EXIT_OK


def _parse_pair(text: str):
    a, sep, b = text.partition(":")
    if not sep or not a or not b:
        raise UsageError(f"pair must look like SPLIT_A:SPLIT_B, got {text!r}")
    return a, b


def cmd_report_gap(args) -> int:
    reports = {}
    for item in args.report:
        method, sep, path = item.partition("=")
        if not sep:
            raise UsageError(f"--report expects METHOD=CSV, got {item!r}")
        try:
            reports[method] = metrics.reports_from_csv(Path(path).read_text())
        except OSError as exc:
            raise UsageError(f"cannot read {path}: {exc.strerror}") from None
    pairs = [_parse_pair(p) for p in args.pair]
    baseline = args.baseline or next(iter(reports))
    try:
        rows = metrics.gap_report(reports, baseline, pairs)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    md = metrics.gap_to_markdown(rows, baseline)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "gap.csv").write_text(metrics.gap_to_csv(rows, baseline))
        (out / "gap.md").write_text(md)
    print(md, end="")
    return EXIT_OK


def cmd_predict(args) -> int:
    ensemble, _ = checkpoint.load(args.checkpoint)
    failed = 0
    for path in map(Path, args.images):
        try:
            rgb = netpbm.read_ppm(path)
            image = rgb.transpose(2, 0, 1).astype(np.float32) / np.float32(255)
            (result,) = predictive.predict(ensemble, image[None])
        except (OSError, ValueError) as exc:
            print(f"error: {path}: {exc}", file=sys.stderr)
            failed += 1
            continue
        out = Path(args.out) if args.out else path.parent
        out.mkdir(parents=True, exist_ok=True)
        netpbm.write_pgm(out / f"{path.stem}.mask.pgm", predictive.mask_raster(result.mask))
        netpbm.write_pgm(out / f"{path.stem}.sigma.pgm", predictive.sigma_raster(result.sigma.foreground))
    return EXIT_RUNTIME if failed else EXIT_OK


def _floats(text: str, n: int, name: str):
    try:
        vals = [float(v) for v in text.split(",")]
    except ValueError:
        raise UsageError(f"{name}: expected {n} comma-separated numbers") from None
    if len(vals) != n:
        raise UsageError(f"{name}: expected {n} comma-separated numbers")
    return vals


def cmd_toy_sampler(args) -> int:
    toy = ToyConfig(lr=args.lr, alpha=args.alpha, noise=not args.no_noise,
                    samples=args.samples, burn_in=args.burn_in, thin=args.thin,
                    seed=args.seed if args.seed is not None else 0)
    if args.mean or args.cov:
        mean = _floats(args.mean or "0,0", 2, "--mean")
        cov = np.reshape(_floats(args.cov or "1,0,0,1", 4, "--cov"), (2, 2))
        targets = [(mean, cov)]
    else:
        targets = [((0.0, 0.0), np.eye(2)), ((2.0, -1.0), np.diag([1.0, 0.25]))]
    ok = True
    for mean, cov in targets:
        try:
            result = toy_sampler_check(mean, cov, toy)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        print(result.report())
        ok &= result.passed
    return EXIT_OK if ok else EXIT_RUNTIME


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value experiment config")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--deterministic", action="store_true",
                        help="single-threaded, fixed-order reductions")
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="uncseg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate the synthetic corpus")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="train one method variant")
    p.add_argument("--data", help="corpus root (overrides data.root)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on split dirs")
    p.add_argument("checkpoint")
    p.add_argument("splits", nargs="+", help="split directories, e.g. corpus/test-C6-SEQ")
    p.add_argument("--per-image", action="store_true", help="also write per_image.csv")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report-gap", parents=[common], help="cross-split gap table")
    p.add_argument("--report", action="append", required=True, metavar="METHOD=CSV")
    p.add_argument("--baseline", help="baseline method (default: first --report)")
    p.add_argument("--pair", action="append", required=True, metavar="SPLIT_A:SPLIT_B")
    p.set_defaults(func=cmd_report_gap)

    p = sub.add_parser("predict", parents=[common], help="mask and sigma rasters for images")
    p.add_argument("checkpoint")
    p.add_argument("images", nargs="+")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("toy-sampler", parents=[common], help="sampler check on 2-D Gaussians")
    p.add_argument("--mean", help="m1,m2")
    p.add_argument("--cov", help="s11,s12,s21,s22")
    p.add_argument("--lr", type=float, default=ToyConfig.lr)
    p.add_argument("--alpha", type=float, default=ToyConfig.alpha)
    p.add_argument("--no-noise", action="store_true")
    p.add_argument("--samples", type=int, default=ToyConfig.samples)
    p.add_argument("--burn-in", type=int, default=ToyConfig.burn_in)
    p.add_argument("--thin", type=int, default=ToyConfig.thin)
    p.set_defaults(func=cmd_toy_sampler)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s", stream=sys.stderr)
    try:
        with harness.reproducible(args.deterministic):
            return args.func(args)
    except (UsageError, cfg.ConfigError, checkpoint.CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
