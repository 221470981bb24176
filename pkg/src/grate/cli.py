"""Command-line front-end: ``grate {train,evaluate,ablate,gridsearch,synth,export}``.

Exit status: 0 success, 1 usage error, 2 data error, 3 numerical failure.
Every command writes ``manifest.json`` under ``--out``; wall-clock timings go
to a separate ``timing.json`` so that repeated runs give identical manifests.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

from . import __version__
from .config import LINKS, PRESETS, SgdConfig, TrainConfig
from .data import (
    DataError,
    Dataset,
    checksum,
    export_knowledge,
    export_qmatrix,
    generate,
    load,
    save,
    spec_dict,
    synthetic_spec,
    write_json,
    write_predictions,
)
from .data import PRESETS as SYNTH_PRESETS
from .evaluation import CSV_HEADER, DEFAULT_GRID, ablation_suite, cross_validate, grid_search
from .model import ModelParams
from .optimizer import NumericalError
from .tensor import AggregationMap, SparseTensor
from .trainer import run_online

log = logging.getLogger("grate")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _model_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model")
    g.add_argument("--config-preset", choices=sorted(PRESETS), help="start from a published hyper-parameter row")
    g.add_argument("--k", type=int, help="student ability dimensions (default 3)")
    g.add_argument("--c", type=int, help="latent concepts (default 9)")
    g.add_argument("--lambda-s", type=float, help="L2 weight on S (default 0.001)")
    g.add_argument("--lambda-a", type=float, help="L2 weight on A (default 0.001)")
    g.add_argument("--eta", type=float, help="rank penalty weight (default 0.1)")
    g.add_argument("--link", choices=LINKS, help="default: logistic for 0/1 scores, identity otherwise")
    g.add_argument("--no-agg", action="store_true", help="disable attempt aggregation")
    g.add_argument("--no-rank", action="store_true", help="disable the rank penalty (eta=0)")
    g.add_argument("--pair-strategy", choices=("full", "window", "sampled"))
    g.add_argument("--utility-epochs", type=int)
    g.add_argument("--utility-rotations", type=int)
    g.add_argument("--lr0", type=float, help="initial learning rate (default 0.005)")
    g.add_argument("--epochs", type=int, help="epoch budget per refit (default 60)")
    g.add_argument("--batch-size", type=int)
    g.add_argument("--tol", type=float)


def _data_flags(p: argparse.ArgumentParser, required: bool = True) -> None:
    p.add_argument("--dataset", required=required, help="student,attempt,problem,score CSV")
    p.add_argument("--attempt-mode", choices=("per-student", "global"), default="per-student")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="grate-out", help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="grate", description="Rank-constrained tensor factorization for knowledge tracing.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="fit on every student online and save a checkpoint")
    _data_flags(p)
    _model_flags(p)
    _common(p)

    for name, text in (("evaluate", "student-stratified cross-validation"), ("ablate", "GRATE vs W/O-Agg vs W/O-Rank")):
        p = sub.add_parser(name, help=text)
        _data_flags(p)
        _model_flags(p)
        _common(p)
        p.add_argument("--folds", type=int, default=5)
        p.add_argument("--jobs", type=int, default=1)
        p.add_argument("--audit", action="store_true", help="count leakage violations while predicting")

    p = sub.add_parser("gridsearch", help="pick hyper-parameters on a 25%% validation split")
    _data_flags(p)
    _model_flags(p)
    _common(p)
    p.add_argument("--grid", help="JSON file mapping config fields to value lists (default: the full grid)")
    p.add_argument("--val-frac", type=float, default=0.25)
    p.add_argument("--jobs", type=int, default=1)

    p = sub.add_parser("synth", help="write a synthetic record file")
    p.add_argument("--preset", choices=sorted(SYNTH_PRESETS), default="guess-slip")
    for f in ("M", "N", "T", "K", "C"):
        p.add_argument(f"--{f}", type=int, dest=f"synth_{f}")
    p.add_argument("--guess", type=float)
    p.add_argument("--slip", type=float)
    _common(p)

    p = sub.add_parser("export", help="write knowledge states and the Q-matrix from a checkpoint")
    p.add_argument("--model", required=True, help="model.json written by train")
    _common(p)
    return parser


def resolve_config(args, binary: bool = False) -> TrainConfig:
    """Preset, then explicit flags; unspecified fields keep their defaults."""
    base = dict(PRESETS[args.config_preset]) if args.config_preset else {}
    flags = {
        "k": args.k,
        "c": args.c,
        "lambda_s": args.lambda_s,
        "lambda_a": args.lambda_a,
        "eta": args.eta,
        "link": args.link,
        "pair_strategy": args.pair_strategy,
        "utility_epochs": args.utility_epochs,
        "utility_rotations": args.utility_rotations,
    }
    base.update({k: v for k, v in flags.items() if v is not None})
    base.setdefault("link", "logistic" if binary else "identity")
    sgd = {"lr0": args.lr0, "max_epochs": args.epochs, "batch_size": args.batch_size, "tol": args.tol}
    cfg = TrainConfig(**base, seed=args.seed, sgd=SgdConfig(**{k: v for k, v in sgd.items() if v is not None}))
    if args.no_agg:
        cfg = cfg.without_aggregation()
    if args.no_rank:
        cfg = cfg.without_rank()
    return cfg


def _load(args) -> tuple[Dataset, dict]:
    path = Path(args.dataset)
    if not path.is_file():
        raise DataError(f"dataset not found: {path}")
    ds = load(path, args.attempt_mode)
    info = {
        "path": str(args.dataset),
        "sha256": checksum(path),
        "attempt_mode": args.attempt_mode,
        "dims": list(ds.tensor.dims),
        "records": len(ds.tensor),
        "score_range": list(ds.score_range) if ds.score_range else None,
    }
    return ds, info


def _manifest(args, argv, **extra) -> dict:
    return {"command": args.command, "argv": list(argv), "version": __version__, "seed": args.seed, **extra}


def _write_report_csv(rows, path: Path) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        w.writerows(rows)


def cmd_train(args, argv, out: Path) -> dict:
    ds, info = _load(args)
    cfg = resolve_config(args, ds.binary)
    empty = SparseTensor(ds.tensor.dims, {})
    res = run_online(ds.tensor, empty, cfg)
    st = res.state
    ckpt = {
        "params": st.params.to_json_dict(),
        "wmap": st.wmap.to_list(),
        "students": ds.students,
        "problems": ds.problems,
        "config": cfg.to_dict(),
    }
    write_json(ckpt, out / "model.json")
    print(f"trained {len(ds.tensor)} records into {st.wmap.agg_len} slices from {st.wmap.raw_len} attempts")
    return {
        "manifest": _manifest(args, argv, config=cfg.to_dict(), input=info, wmap=st.wmap.to_list(), merged=st.merged),
        "timing": {"run_online": res.seconds},
    }


def cmd_evaluate(args, argv, out: Path) -> dict:
    ds, info = _load(args)
    cfg = resolve_config(args, ds.binary)
    cv = cross_validate(ds.tensor, cfg, args.folds, args.seed, jobs=args.jobs, audit=args.audit)
    rep = cv.report
    write_json(rep.to_dict(), out / "report.json")
    _write_report_csv(rep.csv_rows(), out / "report.csv")
    write_predictions(cv.predictions, out / "predictions.csv", ds)
    print(f"{rep.metric} {rep.mean:.4f} +/- {rep.ci95_halfwidth:.4f} over {len(rep.per_fold)} folds")
    runs = [{k: v for k, v in r.manifest().items() if k != "seconds"} for r in cv.runs]
    return {
        "manifest": _manifest(args, argv, config=cfg.to_dict(), input=info, folds=args.folds, runs=runs),
        "timing": {"folds": [r.seconds for r in cv.runs]},
    }


def cmd_ablate(args, argv, out: Path) -> dict:
    ds, info = _load(args)
    cfg = resolve_config(args, ds.binary)
    res = ablation_suite(ds.tensor, cfg, args.folds, args.seed, jobs=args.jobs)
    table = res.table()
    write_json({"table": table, "reports": {v: r.to_dict() for v, r in res.reports.items()}}, out / "ablation.json")
    _write_report_csv([row for r in res.reports.values() for row in r.csv_rows()], out / "ablation.csv")
    for row in table:
        print(f"{row['variant']:<9} {row['metric']} {row['mean']:.4f} +/- {row['ci95']:.4f}")
    variants = {v: r.config for v, r in res.reports.items()}
    return {
        "manifest": _manifest(args, argv, config=cfg.to_dict(), input=info, folds=args.folds, variants=variants),
        "timing": {v: [run.seconds for run in r.runs] for v, r in res.results.items()},
    }


def cmd_gridsearch(args, argv, out: Path) -> dict:
    ds, info = _load(args)
    cfg = resolve_config(args, ds.binary)
    if args.grid:
        try:
            grid = json.loads(Path(args.grid).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read grid {args.grid}: {exc}") from None
    else:
        grid = DEFAULT_GRID
    students = sorted({u for u, _, _ in ds.tensor})
    start = time.perf_counter()
    res = grid_search(grid, ds.tensor, students, cfg, val_frac=args.val_frac, seed=args.seed, jobs=args.jobs)
    best = res.best.to_dict()
    write_json({"best": best, "table": [{"point": p, "value": v} for p, v in res.table]}, out / "gridsearch.json")
    print("best " + " ".join(f"{k}={best[k]}" for k in ("k", "c", "lambda_s", "lambda_a", "eta")))
    return {
        "manifest": _manifest(args, argv, config=cfg.to_dict(), input=info, grid=grid, val_frac=args.val_frac),
        "timing": {"grid": time.perf_counter() - start},
    }


def cmd_synth(args, argv, out: Path) -> dict:
    over = {f: getattr(args, f"synth_{f}") for f in ("M", "N", "T", "K", "C")}
    over.update(guess_prob=args.guess, slip_prob=args.slip, seed=args.seed)
    try:
        spec = synthetic_spec(args.preset, **over)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    syn = generate(spec)
    path = save(syn.dataset(), out / "records.csv")
    write_json(syn.params.to_json_dict(), out / "planted.json")
    print(f"wrote {len(syn.tensor)} records to {path}")
    return {"manifest": _manifest(args, argv, spec=spec_dict(spec), preset=args.preset, sha256=checksum(path))}


def cmd_export(args, argv, out: Path) -> dict:
    path = Path(args.model)
    try:
        ckpt = json.loads(path.read_text())
        params = ModelParams.from_json_dict(ckpt["params"])
        wmap = AggregationMap(ckpt["wmap"])
        students, problems = ckpt["students"], ckpt["problems"]
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from None
    files = export_knowledge(params, wmap, out, students)
    files["qmatrix"] = export_qmatrix(params, problems, out / "qmatrix.csv")
    print("wrote " + ", ".join(str(p) for p in files.values()))
    return {"manifest": _manifest(args, argv, model=str(path), sha256=checksum(path))}


COMMANDS = {
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "gridsearch": cmd_gridsearch,
    "synth": cmd_synth,
    "export": cmd_export,
}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        result = COMMANDS[args.command](args, argv, out)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        # invalid flag values surface as config validation errors
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    write_json(result["manifest"], out / "manifest.json")
    if "timing" in result:
        write_json(result["timing"], out / "timing.json")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
