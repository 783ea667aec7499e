"""Command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure
(a JSON failure manifest is written next to the requested output).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from .datagen import DataError, read_bundle_csv, write_bundle_csv
from .diffcore import NoiseStream
from .effects import ModelStateError, estimate_effects, write_effects_csv
from .evaluate import read_metrics_csv, write_metrics_csv
from .harness import (
    ConfigError,
    aggregate,
    covariate_table,
    emit_report,
    evaluate_model,
    load_config,
    make_bundle,
    parse_config,
    split_indices,
    sweep,
    train,
    write_outputs,
)
from .models import MODEL_KINDS, load_checkpoint, save_checkpoint

log = logging.getLogger("fcvae")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad arguments; 2 is reserved for runtime failures here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _config(args):
    cfg = load_config(args.config) if getattr(args, "config", None) else None
    overrides = "\n".join(getattr(args, "set", None) or [])
    return parse_config(overrides, cfg) if overrides or cfg is None else cfg


def _input(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"no such file: {p}")
    return p


def _manifest(path, failures) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(failures, indent=1) + "\n")
    return path


def cmd_generate(args):
    cfg = _config(args)
    try:
        cfg.gen_config(args.removed, args.seed)
        covariate_table(cfg)
    except DataError as exc:
        raise UsageError(str(exc)) from None
    out = Path(args.out)
    try:
        bundle = make_bundle(cfg, args.seed, args.removed)
    except DataError as exc:
        # e.g. an exponential outcome surface overflowing for this seed
        m = _manifest(out.with_name(out.name + ".failures.json"),
                      [{"seed": args.seed, "removed": args.removed, "error": str(exc)}])
        print(f"generation failed: {exc}; manifest at {m}", file=sys.stderr)
        return EXIT_RUNTIME
    out.parent.mkdir(parents=True, exist_ok=True)
    write_bundle_csv(bundle, out)
    print(f"wrote {bundle.n} rows x {bundle.d} features to {out}")
    return EXIT_OK


def cmd_train(args):
    cfg = _config(args)
    bundle = read_bundle_csv(_input(args.bundle))
    removed = len(bundle.removed)
    split = split_indices(bundle.n, cfg.train.validation_fraction, NoiseStream(args.seed, f"split/{removed}"))
    noise = NoiseStream(args.seed, f"model/{removed}/{args.model}")
    params, rec = train(args.model, bundle, cfg, noise, *split, seed=args.seed, removed=removed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if rec.failed:
        m = _manifest(out.with_name(out.name + ".failures.json"),
                      [{"seed": rec.seed, "model": rec.model, "removed": removed, "error": rec.error}])
        print(f"training failed: {rec.error}; manifest at {m}", file=sys.stderr)
        return EXIT_RUNTIME
    save_checkpoint(params, out)
    print(f"{args.model}: stopped at epoch {rec.stop_epoch}, best epoch {rec.best_epoch}, "
          f"{rec.duration:.1f}s; checkpoint {out}")
    return EXIT_OK


def _load_pair(args):
    bundle = read_bundle_csv(_input(args.bundle))
    try:
        params = load_checkpoint(_input(args.checkpoint))
    except (ValueError, KeyError) as exc:
        raise UsageError(f"bad checkpoint: {exc}") from None
    if params.d_x != bundle.d:
        raise UsageError(f"checkpoint expects {params.d_x} features, bundle has {bundle.d}")
    return bundle, params


def _runtime_guard(fn, out, seed, kind, removed):
    try:
        return fn()
    except (ModelStateError, FloatingPointError, ValueError) as exc:
        m = _manifest(Path(str(out) + ".failures.json"),
                      [{"seed": seed, "model": kind, "removed": removed, "error": str(exc)}])
        print(f"runtime failure: {exc}; manifest at {m}", file=sys.stderr)
        return None


def cmd_effects(args):
    cfg = _config(args)
    bundle, params = _load_pair(args)
    removed = len(bundle.removed)
    est = _runtime_guard(lambda: estimate_effects(
        params, bundle, cfg.eval.n_posterior_samples, NoiseStream(args.seed, f"eval/{removed}/{params.kind}"),
        reencode=cfg.eval.reencode_flipped_a, ay_mode=cfg.eval.ay_mode), args.out, args.seed, params.kind, removed)
    if est is None:
        return EXIT_RUNTIME
    write_effects_csv(est, args.out)
    print(f"wrote {est.n} rows of effect estimates to {args.out}")
    return EXIT_OK


def cmd_evaluate(args):
    cfg = _config(args)
    bundle, params = _load_pair(args)
    removed = len(bundle.removed)
    row = _runtime_guard(lambda: evaluate_model(
        params, bundle, cfg, args.seed, removed, NoiseStream(args.seed, f"eval/{removed}/{params.kind}")),
        args.out, args.seed, params.kind, removed)
    if row is None:
        return EXIT_RUNTIME
    write_metrics_csv([row], args.out)
    print(", ".join(f"{k}={getattr(row, k)}" for k in ("pehe_at", "pehe_ty", "pehe_ay", "regret", "acc_gap")))
    return EXIT_OK


def cmd_experiment(args):
    cfg = _config(args)
    covariate_table(cfg)  # bad covariate input is a usage error, not a per-seed failure
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text("".join(f"{k} = {v}\n" for k, v in cfg.as_pairs()))
    start = time.perf_counter()

    def progress(seed, recs):
        log.info("seed %d done (%d runs, %.0fs elapsed)", seed, len(recs), time.perf_counter() - start)

    records = sweep(cfg, progress=progress)
    paths = write_outputs(records, out)
    print(f"{len(records)} runs in {time.perf_counter() - start:.0f}s; report at {paths['report_md']}")
    if "failures" in paths:
        n_failed = sum(r.failed for r in records)
        print(f"{n_failed} runs failed; manifest at {paths['failures']}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_report(args):
    rows = []
    for p in args.metrics:
        try:
            rows += read_metrics_csv(_input(p))
        except (ValueError, KeyError) as exc:
            raise UsageError(f"{p}: {exc}") from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = aggregate(rows)
    emit_report(report, "csv", out / "report.csv")
    emit_report(report, "markdown", out / "report.md")
    print(f"aggregated {len(rows)} rows into {out / 'report.csv'} and {out / 'report.md'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fcvae", description="Fair causal VAE experiments on semi-synthetic data.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def with_config(p):
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        return p

    p = with_config(sub.add_parser("generate", help="write one semi-synthetic bundle as CSV"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--removed", type=int, choices=(0, 1, 2), default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = with_config(sub.add_parser("train", help="fit one model on a bundle and save a checkpoint"))
    p.add_argument("--bundle", required=True)
    p.add_argument("--model", required=True, choices=MODEL_KINDS)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    for name, func, what in (("effects", cmd_effects, "per-row effect estimates CSV"),
                             ("evaluate", cmd_evaluate, "one metrics row CSV")):
        p = with_config(sub.add_parser(name, help=f"checkpoint + bundle -> {what}"))
        p.add_argument("--bundle", required=True)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", required=True)
        p.set_defaults(func=func)

    p = with_config(sub.add_parser("experiment", help="full seed sweep -> metrics and report files"))
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("report", help="re-aggregate existing metrics CSVs")
    p.add_argument("metrics", nargs="+", help="metrics.csv files")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, DataError) as exc:
        print(f"fcvae: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"fcvae: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
