"""Command line: ``trajrobust {generate,train,attack,matrix,report,pipeline}``.

Exit codes: 0 success, 1 unexpected failure, 2 invalid configuration or
arguments, 3 missing input file, 4 unreadable data or checkpoint, 5 numeric
failure (NaN during training or an attack).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import pipeline as pl
from .attacks import AttackError
from .autodiff import NumericError
from .evaluation import MatrixError
from .models import CheckpointError
from .state import DatasetFormatError
from .training import ConfigError, TrainingError

EXIT_OK, EXIT_FAILURE, EXIT_CONFIG, EXIT_MISSING, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3, 4, 5


class MissingInput(FileNotFoundError):
    pass


def _require(*paths) -> None:
    missing = [str(p) for p in paths if p is not None and not Path(p).exists()]
    if missing:
        raise MissingInput("missing input file(s): " + ", ".join(missing))


def _config(path) -> dict:
    if path is None:
        return {}
    _require(path)
    return pl.load_json(path)


def _seed(value: str) -> int:
    seed = int(value, 0)
    if not 0 <= seed < 1 << 64:
        raise argparse.ArgumentTypeError(f"seed must be an unsigned 64-bit integer, got {value}")
    return seed


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="trajrobust", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_help):
        p.add_argument("--config", help=config_help)
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=_seed, help="overrides the seed in --config")
        p.add_argument("--jobs", type=int, default=1, help="worker processes where cells are independent")

    p = sub.add_parser("generate", help="synthesize a dataset")
    common(p, "generator config JSON")

    p = sub.add_parser("train", help="train one policy")
    common(p, "training config JSON (kind, epochs, ...)")
    p.add_argument("--dataset", required=True)

    p = sub.add_parser("attack", help="attack a dataset with one checkpoint")
    common(p, "attack config JSON (kind, epsilon, alpha, steps, loss_space)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)

    p = sub.add_parser("matrix", help="crossing x model x attack robustness matrix")
    common(p, "matrix config JSON (attacks, eval_samples_per_crossing)")
    p.add_argument("--checkpoints", nargs="+", required=True)
    p.add_argument("--datasets", nargs="+", required=True, help="held-out datasets, split by crossing")

    p = sub.add_parser("report", help="CSV/JSON report and top-k failure plot data")
    common(p, "unused")
    p.add_argument("--matrix", required=True, help="output directory of the matrix command")
    p.add_argument("-k", type=int, default=9, help="number of failure cases")

    p = sub.add_parser("pipeline", help="generate, train all models, matrix and report")
    common(p, "pipeline config JSON")
    return parser


def dispatch(args) -> None:
    cmd = args.command
    if args.jobs < 1:
        raise ConfigError([f"jobs: must be >= 1, got {args.jobs}"])
    if cmd == "generate":
        cfg = pl.generator_config(_config(args.config), args.seed)
        ds = pl.run_generate(cfg, args.out)
        print(f"wrote {len(ds)} samples to {Path(args.out) / pl.DATASET_FILE}")
    elif cmd == "train":
        _require(args.dataset)
        cfg = pl.train_config(_config(args.config), args.seed)
        _, report = pl.run_train(args.dataset, cfg, args.out)
        print(f"trained {cfg.kind} for {cfg.epochs} epochs in {report['wall_time']:.1f} s")
    elif cmd == "attack":
        _require(args.checkpoint, args.dataset)
        summary = pl.run_attack_cmd(args.checkpoint, args.dataset, pl.attack_config(_config(args.config)), args.out)
        print(f"{summary['kind']}: ADE {summary['ade_clean']:.3f} -> {summary['ade_adv']:.3f}, "
              f"FDE {summary['fde_clean']:.3f} -> {summary['fde_adv']:.3f}")
    elif cmd == "matrix":
        _require(*args.checkpoints, *args.datasets)
        cfg = pl.MatrixConfig.from_dict(_config(args.config))
        results = pl.run_matrix_cmd(args.checkpoints, args.datasets, cfg, args.out, jobs=args.jobs)
        print(f"wrote {len(results)} rows to {Path(args.out) / 'matrix.csv'}")
    elif cmd == "report":
        _require(args.matrix)
        if args.k < 1:
            raise ConfigError([f"k: must be >= 1, got {args.k}"])
        failures, truncated = pl.run_report(args.matrix, args.k, args.out)
        note = " (fewer samples than k)" if truncated else ""
        print(f"wrote {len(failures)} failure cases{note} to {args.out}")
    elif cmd == "pipeline":
        doc = _config(args.config)
        if args.seed is not None:
            doc["seed"] = args.seed
        cfg = pl.PipelineConfig.from_dict(doc)
        paths = pl.run_pipeline(cfg, args.out, jobs=args.jobs)
        print(f"report in {paths['report']}")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        dispatch(args)
    except ConfigError as exc:
        for err in exc.errors:
            print(f"error[config]: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (MissingInput, FileNotFoundError) as exc:
        print(f"error[missing]: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (DatasetFormatError, CheckpointError) as exc:
        print(f"error[data]: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingError, AttackError, NumericError) as exc:
        print(f"error[numeric]: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except MatrixError as exc:
        print(f"error[matrix]: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
