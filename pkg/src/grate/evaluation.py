"""Student-stratified cross-validation, grid search and ablations."""
from __future__ import annotations

import itertools
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .config import TrainConfig
from .metrics import UndefinedMetricError, auc, rmse
from .tensor import SparseTensor
from .trainer import OnlineResult, PredictionRecord, run_online

log = logging.getLogger(__name__)

DEFAULT_GRID = {
    "k": list(range(3, 20, 2)),
    "c": list(range(3, 20, 2)),
    "lambda_s": [0.001, 0.005, 0.01, 0.05, 0.1],
    "lambda_a": [0.001, 0.005, 0.01, 0.05, 0.1],
    "eta": [0.001, 0.01, 0.1, 0.2, 0.3],
}

VARIANTS = ("GRATE", "W/O-Agg", "W/O-Rank")


def stratified_folds(students: Sequence[int], k: int = 5, seed: int = 0) -> list[tuple[list[int], list[int]]]:
    """Shuffle students and split them into ``k`` near-equal test groups."""
    students = list(students)
    if k < 2:
        raise ValueError("need at least 2 folds")
    if len(students) < k:
        raise ValueError(f"{len(students)} students cannot fill {k} folds")
    order = np.random.default_rng(seed).permutation(len(students))
    groups = [sorted(students[j] for j in g) for g in np.array_split(order, k)]
    out = []
    for f, test in enumerate(groups):
        train = sorted(s for g, grp in enumerate(groups) if g != f for s in grp)
        out.append((train, test))
    return out


def metric_name(config: TrainConfig) -> str:
    return "auc" if config.binary else "rmse"


def score(records: Iterable[PredictionRecord], metric: str) -> float:
    pairs = [(r.predicted, r.actual) for r in records]
    return auc(pairs) if metric == "auc" else rmse(pairs)


def better(a: float, b: float, metric: str) -> bool:
    return a > b if metric == "auc" else a < b


@dataclass
class FoldResult:
    fold: int
    value: float
    n: int


@dataclass
class EvalReport:
    metric: str
    per_fold: list[FoldResult]
    mean: float
    ci95_halfwidth: float
    per_attempt: dict[int, float] = field(default_factory=dict)
    variant: str = "GRATE"
    config: dict = field(default_factory=dict)
    averaging: str = "micro"

    @classmethod
    def from_predictions(
        cls, records: Sequence[PredictionRecord], metric: str, variant: str = "GRATE", config: dict | None = None
    ) -> "EvalReport":
        folds = sorted({r.fold for r in records})
        per_fold = []
        for f in folds:
            rs = [r for r in records if r.fold == f]
            per_fold.append(FoldResult(f, score(rs, metric), len(rs)))
        values = np.array([fr.value for fr in per_fold])
        mean = float(np.mean(values)) if values.size else math.nan
        sd = float(np.std(values, ddof=1)) if values.size > 1 else 0.0
        half = 1.96 * sd / math.sqrt(values.size) if values.size else math.nan
        per_attempt = {}
        for t in sorted({r.attempt for r in records}):
            try:
                per_attempt[t + 1] = score([r for r in records if r.attempt == t], metric)
            except UndefinedMetricError:
                continue
        return cls(metric, per_fold, mean, half, per_attempt, variant, config or {})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_attempt"] = {str(k): v for k, v in self.per_attempt.items()}
        return d

    def csv_rows(self) -> list[list]:
        return [[self.variant, fr.fold, self.metric, fr.value, fr.n] for fr in self.per_fold]


CSV_HEADER = ["variant", "fold", "metric", "value", "n_predictions"]


def _fold_job(args) -> OnlineResult:
    tensor, train, test, config, fold, audit = args
    return run_online(tensor.restrict(train), tensor.restrict(test), config, fold=fold, audit=audit)


def _map(fn, jobs_args: list, jobs: int) -> list:
    if jobs > 1 and len(jobs_args) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            return list(ex.map(fn, jobs_args))
    return [fn(a) for a in jobs_args]


@dataclass
class CvResult:
    report: EvalReport
    predictions: list[PredictionRecord]
    runs: list[OnlineResult]


def cross_validate(
    tensor: SparseTensor,
    config: TrainConfig,
    folds: int = 5,
    seed: int = 0,
    *,
    jobs: int = 1,
    audit: bool = False,
    variant: str = "GRATE",
    fold_ids: Sequence[int] | None = None,
) -> CvResult:
    """Outer student-stratified CV: online prediction of each test group."""
    students = sorted({u for u, _, _ in tensor})
    splits = stratified_folds(students, folds, seed)
    chosen = range(folds) if fold_ids is None else fold_ids
    args = [(tensor, splits[f][0], splits[f][1], config, f, audit) for f in chosen]
    runs = _map(_fold_job, args, jobs)
    preds = [r for run in runs for r in run.predictions]
    report = EvalReport.from_predictions(preds, metric_name(config), variant, config.to_dict())
    return CvResult(report, preds, runs)


def expand_grid(grid: dict, base: TrainConfig) -> list[TrainConfig]:
    keys = sorted(grid)
    out = []
    for combo in itertools.product(*(grid[k] for k in keys)):
        out.append(replace(base, **dict(zip(keys, combo))))
    return out


def _tiebreak(c: TrainConfig) -> tuple:
    return (c.k, c.c, c.lambda_s, c.lambda_a, c.eta)


def _grid_job(args):
    tensor, fit_students, val_students, cfg = args
    run = run_online(tensor.restrict(fit_students), tensor.restrict(val_students), cfg)
    try:
        return score(run.predictions, metric_name(cfg))
    except UndefinedMetricError:
        return math.nan


@dataclass
class GridResult:
    best: TrainConfig
    table: list[tuple[dict, float]]


def grid_search(
    grid: dict | Sequence[TrainConfig],
    tensor: SparseTensor,
    train_students: Sequence[int],
    config: TrainConfig,
    *,
    val_frac: float = 0.25,
    seed: int = 0,
    jobs: int = 1,
) -> GridResult:
    """Pick the configuration with the best validation metric.

    ``val_frac`` of the training students (seeded) are held out and predicted
    online. Ties go to the lexicographically smaller (K, C, lambda_s,
    lambda_a, eta).
    """
    cands = expand_grid(grid, config) if isinstance(grid, dict) else list(grid)
    if not cands:
        raise ValueError("empty grid")
    students = sorted(train_students)
    order = np.random.default_rng(seed).permutation(len(students))
    n_val = max(1, int(round(val_frac * len(students))))
    val = sorted(students[j] for j in order[:n_val])
    fit_s = sorted(students[j] for j in order[n_val:])
    values = _map(_grid_job, [(tensor, fit_s, val, c) for c in cands], jobs)
    metric = metric_name(config)
    best, best_v = None, None
    for c, v in sorted(zip(cands, values), key=lambda cv: _tiebreak(cv[0])):
        if math.isnan(v):
            continue
        if best is None or better(v, best_v, metric):
            best, best_v = c, v
    if best is None:
        raise ValueError("no grid point produced a defined validation metric")
    table = [({"k": c.k, "c": c.c, "lambda_s": c.lambda_s, "lambda_a": c.lambda_a, "eta": c.eta}, v)
             for c, v in zip(cands, values)]
    return GridResult(best, table)


def variant_config(config: TrainConfig, variant: str) -> TrainConfig:
    if variant == "GRATE":
        return config
    if variant == "W/O-Agg":
        return config.without_aggregation()
    if variant == "W/O-Rank":
        return config.without_rank()
    raise ValueError(f"unknown variant {variant!r}")


@dataclass
class AblationResult:
    reports: dict[str, EvalReport]
    results: dict[str, CvResult]

    def table(self) -> list[dict]:
        return [
            {"variant": v, "metric": r.metric, "mean": r.mean, "ci95": r.ci95_halfwidth, "eta": r.config.get("eta"),
             "aggregate": r.config.get("aggregate")}
            for v, r in self.reports.items()
        ]


def ablation_suite(
    tensor: SparseTensor,
    config: TrainConfig,
    folds: int = 5,
    seed: int = 0,
    *,
    jobs: int = 1,
    variants: Sequence[str] = VARIANTS,
) -> AblationResult:
    """Full model and its two ablations on shared folds and seeds."""
    results = {}
    for v in variants:
        results[v] = cross_validate(tensor, variant_config(config, v), folds, seed, jobs=jobs, variant=v)
    return AblationResult({v: r.report for v, r in results.items()}, results)
