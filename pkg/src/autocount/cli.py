"""Command line entry point: ``autocount run | eval | synth``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import metrics
from .config import ConfigError, load_config
from .pipeline import EmptyDataset, read_counts, run_pipeline
from .synthgen import SceneSpec, write_dataset

EXIT_OK = 0
EXIT_USAGE = 2


def _channel_arg(value: str):
    if value.strip().lower() == "auto":
        return "auto"
    try:
        return int(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"--channel must be an integer or 'auto', got {value!r}")


def cmd_run(args) -> int:
    try:
        cfg = load_config(args.config).with_overrides(channel=args.channel, seed=args.seed, jobs=args.jobs)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        manifest = run_pipeline(args.dataset, cfg, args.out)
    except EmptyDataset as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    n = len(manifest.images)
    print(f"counted {n} images; channel {manifest.channel['selected']}, "
          f"a={manifest.watershed['a']} b={manifest.watershed['b']:g}; results in {args.out}")
    return EXIT_OK


def format_table(name: str, scores: dict) -> str:
    header = f"{'':<12}{'MAE':>8}{'RMSE':>8}{'R2':>8}"
    r2 = scores["R2"]
    r2s = f"{r2:>8.2f}" if r2 is not None else f"{'n/a':>8}"
    return f"{header}\n{name:<12}{scores['MAE']:>8.2f}{scores['RMSE']:>8.2f}{r2s}"


def cmd_eval(args) -> int:
    try:
        pred = read_counts(args.pred)
        truth = read_counts(args.truth)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    missing_truth = sorted(set(pred) - set(truth))
    missing_pred = sorted(set(truth) - set(pred))
    if missing_truth or missing_pred:
        if missing_truth:
            print("error: missing from truth: " + ", ".join(missing_truth), file=sys.stderr)
        if missing_pred:
            print("error: missing from predictions: " + ", ".join(missing_pred), file=sys.stderr)
        return EXIT_USAGE
    keys = sorted(truth)
    y = [truth[k] for k in keys]
    yhat = [pred[k] for k in keys]
    scores = {"MAE": metrics.mae(y, yhat), "RMSE": metrics.rmse(y, yhat)}
    try:
        scores["R2"] = metrics.r_squared(y, yhat)
    except ValueError:
        scores["R2"] = None
    print(format_table(args.name, scores))
    return EXIT_OK


def load_scene_spec(path) -> SceneSpec:
    """Read a ``key = value`` scene description; keys are SceneSpec field names."""
    spec = SceneSpec()
    if path is None:
        return spec
    changes = {}
    defaults = {k: getattr(spec, k) for k in spec.__dataclass_fields__}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in defaults:
            raise ConfigError(f"{path}:{lineno}: unknown scene key {key!r}")
        default = defaults[key]
        try:
            if isinstance(default, tuple):
                changes[key] = tuple(float(v) for v in value.split(","))
            elif isinstance(default, bool):
                changes[key] = value.lower() in ("1", "true", "yes")
            elif isinstance(default, str):
                changes[key] = value
            else:
                changes[key] = type(default)(value)
        except ValueError as exc:
            raise ConfigError(f"{path}:{lineno}: bad value for {key}: {exc}") from exc
    try:
        return spec.replace(**changes)
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def cmd_synth(args) -> int:
    try:
        spec = load_scene_spec(args.spec)
        if args.seed is not None:
            spec = spec.replace(seed=args.seed)
        rows = write_dataset(spec, args.out, args.n)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    print(f"wrote {len(rows)} scenes to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="autocount", description="Unsupervised organ counting")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="count objects in a directory of images")
    run.add_argument("--dataset", required=True)
    run.add_argument("--config")
    run.add_argument("--out", required=True)
    run.add_argument("--channel", type=_channel_arg)
    run.add_argument("--seed", type=int)
    run.add_argument("--jobs", type=int)
    run.set_defaults(func=cmd_run)

    ev = sub.add_parser("eval", help="compare predicted and annotated counts")
    ev.add_argument("--pred", required=True)
    ev.add_argument("--truth", required=True)
    ev.add_argument("--name", default="AutoCount")
    ev.set_defaults(func=cmd_eval)

    syn = sub.add_parser("synth", help="generate a synthetic dataset with known counts")
    syn.add_argument("--spec")
    syn.add_argument("--out", required=True)
    syn.add_argument("--n", type=int, required=True)
    syn.add_argument("--seed", type=int)
    syn.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(asctime)s %(name)s %(levelname)s %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
