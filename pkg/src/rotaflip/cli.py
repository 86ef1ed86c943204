"""Command line for rotaflip experiments: gen, train, sweep, eval, gradcheck.

Exit codes: 0 success, 1 failed gradient check, 2 configuration/validation
error, 3 training divergence, 4 I/O error.
"""
import argparse
import logging
import sys
from pathlib import Path

from . import config as config_io
from .data import read_dataset, write_dataset
from .errors import ConfigError, DivergenceError, PNMParseError, ShapeError
from .experiment import (
    SWEEP_PARAMETERS,
    class_counts,
    load_checkpoint,
    load_samples,
    make_splits,
    run_directory,
    run_sweep,
    run_training,
)
from .metrics import eval_orbit, write_orbits_csv
from .training import evaluate

EXIT_OK, EXIT_FAILED, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 1, 2, 3, 4


def _common(p):
    p.add_argument("--config", type=Path, help="key=value config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key (repeatable)")
    p.add_argument("--seed", type=int, help="override the root seed")
    p.add_argument("--out", type=Path, help="override output.dir")
    p.add_argument("--precision", choices=("single", "double"), help="override the float precision")


def build_parser():
    parser = argparse.ArgumentParser(prog="rotaflip", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log every epoch")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="write a synthetic dataset as PNM files plus manifest.csv")
    _common(p)

    p = sub.add_parser("train", help="train one configured model")
    _common(p)

    p = sub.add_parser("sweep", help="one training run per regularizer rate")
    _common(p)
    p.add_argument("--parameter", choices=SWEEP_PARAMETERS, default="rotaflip_rate")
    p.add_argument("--values", required=True, help="comma-separated rates, e.g. 0,0.05,0.1")
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")

    p = sub.add_parser("eval", help="score a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True, help="checkpoint directory")
    p.add_argument("--data", type=Path, help="dataset directory (default: the test split of the run)")
    p.add_argument("--protocol", choices=("single", "orbit8"), default="orbit8")

    p = sub.add_parser("gradcheck", help="finite-difference check of every layer and both models")
    p.add_argument("--seeds", type=int, default=30)
    p.add_argument("--tol", type=float, default=1e-5)
    return parser


def _config(args):
    cfg = config_io.load(args.config) if args.config else config_io.ExperimentConfig()
    config_io.apply_overrides(cfg, args.overrides)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.output.dir = str(args.out)
    if args.precision is not None:
        cfg.precision = args.precision
    return cfg.validate()


def cmd_gen(args):
    cfg = _config(args)
    if cfg.data.source == "manifest":
        raise ConfigError("data.source: gen needs a generator (motif or voronoi)")
    samples = load_samples(cfg)
    directory = run_directory(cfg)
    write_dataset(samples, directory)
    counts = class_counts(samples)
    print(f"wrote {len(samples)} images to {directory}")
    for label, count in counts.items():
        print(f"class {label}: {count}")
    return EXIT_OK


def cmd_train(args):
    cfg = _config(args)
    s = run_training(cfg)
    print(f"run directory: {s.directory}")
    print(f"epochs: {len(s.records)}")
    print(f"last-10 mean eval accuracy: {s.last10_accuracy:.2f}  agreement: {s.last10_agreement:.2f}")
    if s.best_epoch is not None:
        print(f"best epoch {s.best_epoch}: eval accuracy {s.best_accuracy:.2f}")
    if s.test_best is not None:
        print(f"test (best checkpoint, 8 versions): accuracy {s.test_best.accuracy:.2f}")
    return EXIT_OK


def cmd_sweep(args):
    cfg = _config(args)
    try:
        values = [float(v) for v in args.values.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"--values: expected comma-separated numbers, got {args.values!r}") from None
    if args.jobs < 1:
        raise ConfigError("--jobs must be at least 1")
    path = run_sweep(cfg, args.parameter, values, jobs=args.jobs)
    print(path.read_text(), end="")
    print(f"summary: {path}")
    return EXIT_OK


def cmd_eval(args):
    model, cfg = load_checkpoint(args.checkpoint)
    if args.data is not None:
        images = read_dataset(args.data)
    else:
        images = make_splits(cfg).test
    if not images:
        raise ConfigError("no images to evaluate")
    if args.protocol == "orbit8":
        report, orbits = eval_orbit(model, images)
    else:
        report, orbits = evaluate(model, images, "single"), None
    out = Path(args.out) if args.out is not None else Path(args.checkpoint)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"eval_{args.protocol}.txt").write_text(report.to_text())
    if orbits is not None and model.task == "classification":
        write_orbits_csv(orbits, out / "orbits.csv")
    print(report.to_text(), end="")
    return EXIT_OK


def cmd_gradcheck(args):
    from .checks import run_gradchecks

    results = run_gradchecks(range(args.seeds))
    failed = False
    for name, report in results.items():
        ok = report.passed(args.tol)
        failed |= not ok
        print(f"{'PASS' if ok else 'FAIL'} {name}: max relative error {report.max_error:.3e}"
              f" ({report.redrawn} directions redrawn, {report.skipped} probes skipped)")
    return EXIT_FAILED if failed else EXIT_OK


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "sweep": cmd_sweep, "eval": cmd_eval, "gradcheck": cmd_gradcheck}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        for v in exc.violations:
            print(f"config error: {v}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, PNMParseError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ShapeError as exc:
        print(f"shape error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
