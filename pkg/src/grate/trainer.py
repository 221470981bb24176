"""Online attempt-by-attempt training with utility-driven slice aggregation."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np

from .config import TrainConfig
from .metrics import UndefinedMetricError, auc, rmse
from .model import ModelParams, append_slice, init_params, predict_many
from .optimizer import fit
from .tensor import AggregationMap, SparseTensor, apply_aggregation, confidence_weights, unit_weights

log = logging.getLogger(__name__)

MIN_UTILITY_ENTRIES = 10


@dataclass
class OnlineState:
    raw: SparseTensor
    agg: SparseTensor
    wmap: AggregationMap
    params: ModelParams
    round: int = 0
    merged: list[bool] = field(default_factory=list)

    @property
    def next_attempt(self) -> int:
        return self.wmap.raw_len

    @property
    def last_slice(self) -> int:
        return self.wmap.agg_len - 1


@dataclass(frozen=True)
class PredictionRecord:
    fold: int
    student: int
    attempt: int
    problem: int
    actual: float
    predicted: float
    slice: int


@dataclass
class OnlineResult:
    predictions: list[PredictionRecord]
    state: OnlineState
    seconds: float
    audit: dict | None = None

    def manifest(self) -> dict:
        return {
            "wmap": self.state.wmap.to_list(),
            "merged": self.state.merged,
            "rounds": self.state.round,
            "n_predictions": len(self.predictions),
            "seconds": self.seconds,
            "audit": self.audit,
        }


def _hash01(seed: int, u: np.ndarray, i: np.ndarray) -> np.ndarray:
    """Deterministic uniform [0, 1) value per (student, problem) pair."""
    with np.errstate(over="ignore"):
        x = (np.uint64(seed) * np.uint64(0x9E3779B97F4A7C15)) ^ (u.astype(np.uint64) << np.uint64(32)) ^ i.astype(np.uint64)
        x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        x = x ^ (x >> np.uint64(31))
    return (x >> np.uint64(11)).astype(np.float64) / float(1 << 53)


def weights_for(y: SparseTensor, wmap: AggregationMap, raw: SparseTensor, config: TrainConfig) -> dict:
    if config.aggregate:
        return confidence_weights(y, wmap, raw)
    return unit_weights(y)


def utility(
    candidate: SparseTensor,
    params: ModelParams,
    config: TrainConfig,
    seed: int,
    *,
    weights: Mapping | None = None,
    eligible=None,
    update_count: int = 0,
) -> float:
    """Missing-value prediction accuracy of a candidate aggregated tensor.

    A hashed ``holdout_frac`` share of the last slice's entries (restricted to
    ``eligible`` (student, problem) pairs when given) is hidden, ``params`` is
    warm-started on the rest for ``config.utility_epochs`` epochs and the
    hidden entries are predicted. With ``config.utility_rotations > 1`` this
    repeats over disjoint hash bands and the held-out predictions are pooled.
    Returns -RMSE, or AUC for the logistic link when both classes are
    present. Higher is better; ``-inf`` means there is too little data.
    """
    if len(candidate) < MIN_UTILITY_ENTRIES:
        return float("-inf")
    u, t, i, v = candidate.arrays()
    last = candidate.dims[1] - 1
    pool = np.flatnonzero(t == last)
    if eligible is not None:
        ok = set(eligible)
        pool = np.array([k for k in pool if (int(u[k]), int(i[k])) in ok], dtype=np.int64)
    if pool.size == 0:
        return float("-inf")
    h = _hash01(seed, u[pool], i[pool])
    frac = config.holdout_frac
    preds, actual = [], []
    for r in range(config.utility_rotations):
        held = pool[(h >= r * frac) & (h < (r + 1) * frac)]
        if held.size == 0:
            if r > 0:
                continue
            held = pool[[int(np.argmin(h))]]
        held_keys = {(int(u[k]), int(t[k]), int(i[k])) for k in held}
        train = SparseTensor(candidate.dims, {k: val for k, val in candidate.items() if k not in held_keys})
        if len(train) == 0:
            continue
        w = None if weights is None else {k: weights[k] for k in train}
        fitted, _ = fit(
            params, train, w, config, epoch_budget=config.utility_epochs, update_count=update_count, seed=seed + r
        )
        preds.extend(predict_many(fitted, u[held], t[held], i[held]).tolist())
        actual.extend(v[held].tolist())
    if not preds:
        return float("-inf")
    pairs = list(zip(preds, actual))
    if config.binary:
        try:
            return auc(pairs)
        except UndefinedMetricError:
            pass
    return -rmse(pairs)


def _with_slice(raw: SparseTensor, attempt: int, entries: Mapping) -> SparseTensor:
    m, t, n = raw.dims
    merged = raw.to_dict()
    for (u, i), val in entries.items():
        key = (u, attempt, i)
        if key in merged:
            raise ValueError(f"record {key} already ingested")
        merged[key] = val
    return SparseTensor((m, max(t, attempt + 1), n), merged)


def initial_state(
    first: Mapping, dims: tuple[int, int], config: TrainConfig, train_mean: float
) -> OnlineState:
    """Fit the first slice: every student's first attempt."""
    m, n = dims
    raw = _with_slice(SparseTensor((m, 0, n)), 0, first)
    wmap = AggregationMap.identity(1)
    agg = apply_aggregation(raw, wmap)
    params = init_params(config, config.seed, train_mean, m, n, 1)
    if len(agg):
        params, _ = fit(params, agg, weights_for(agg, wmap, raw, config), config, update_count=0, seed=config.seed)
    return OnlineState(raw, agg, wmap, params, round=1, merged=[False])


def step(state: OnlineState, new_slice: Mapping, config: TrainConfig, attempt: int | None = None) -> OnlineState:
    """Ingest all records of the next raw attempt and refit.

    ``new_slice`` maps (student, problem) to score. The merge candidate folds
    the new records into the last aggregated slice; the append candidate
    opens a new slice. Merging wins only on strictly higher utility, with
    both candidates judged on the same hidden records of the new attempt.
    The very first step after initialisation always appends.
    """
    t = state.next_attempt if attempt is None else attempt
    if t != state.next_attempt:
        raise ValueError(f"expected attempt {state.next_attempt}, got {t}")
    raw = _with_slice(state.raw, t, new_slice)
    seed = _round_seed(config, state.round)

    merge = False
    if config.aggregate and t >= 2:
        if not new_slice:
            merge = True
        else:
            merge = _prefer_merge(state, raw, new_slice, config, seed)

    wmap = state.wmap.extend(merge)
    agg = apply_aggregation(raw, wmap)
    params = state.params if merge else append_slice(
        state.params, config.append_mode, np.random.default_rng(seed), config.init_scale
    )
    if len(agg):
        params, _ = fit(params, agg, weights_for(agg, wmap, raw, config), config, update_count=state.round, seed=seed)
    return OnlineState(raw, agg, wmap, params, state.round + 1, [*state.merged, merge])


def _prefer_merge(state: OnlineState, raw: SparseTensor, new_slice: Mapping, config: TrainConfig, seed: int) -> bool:
    eligible = set(new_slice)
    w_merge = state.wmap.extend(True)
    y_merge = apply_aggregation(raw, w_merge)
    u_merge = utility(
        y_merge, state.params, config, seed,
        weights=weights_for(y_merge, w_merge, raw, config), eligible=eligible, update_count=state.round,
    )
    w_app = state.wmap.extend(False)
    y_app = apply_aggregation(raw, w_app)
    p_app = append_slice(state.params, config.append_mode, np.random.default_rng(seed), config.init_scale)
    u_app = utility(
        y_app, p_app, config, seed,
        weights=weights_for(y_app, w_app, raw, config), eligible=eligible, update_count=state.round,
    )
    log.debug("attempt %d utility merge=%.5f append=%.5f", state.next_attempt, u_merge, u_app)
    return u_merge > u_app


def absorb(state: OnlineState, records: Mapping) -> OnlineState:
    """Add late records for the most recent raw attempt without refitting."""
    if not records:
        return state
    t = state.next_attempt - 1
    raw = _with_slice(state.raw, t, records)
    return replace(state, raw=raw, agg=apply_aggregation(raw, state.wmap))


def _round_seed(config: TrainConfig, rnd: int) -> int:
    return int(np.random.SeedSequence([config.seed, rnd]).generate_state(1)[0])


def _slice_records(x: SparseTensor, attempt: int) -> dict[tuple[int, int], float]:
    return x.slice(attempt)


def run_online(
    train: SparseTensor,
    test: SparseTensor,
    config: TrainConfig,
    *,
    fold: int = 0,
    audit: bool = False,
    horizon: int | None = None,
) -> OnlineResult:
    """Train on ``train`` students and predict ``test`` students attempt by attempt.

    Both tensors share dims and hold disjoint students. The initial fit sees
    every student's first attempt. Then for each attempt ``t >= 1``: the
    training students' records at ``t`` are ingested with :func:`step`, the
    test students' records at ``t`` are predicted from the refitted model,
    and only then are they absorbed into the data for later rounds.
    """
    if len(train) == 0:
        raise ValueError("training set is empty")
    if train.dims[0] != test.dims[0] or train.dims[2] != test.dims[2]:
        raise ValueError("train and test tensors must share student and problem dims")
    start = time.perf_counter()
    m, _, n = train.dims
    train_idx = _by_attempt(train)
    test_idx = _by_attempt(test)
    test_students = {u for u, _, _ in test}
    if horizon is None:
        last_test = max(test_idx) if test_idx else -1
        horizon = max(last_test, 0) + 1 if test_idx else max(train_idx) + 1
    _, _, _, tv = train.arrays()
    first = {**train_idx.get(0, {}), **test_idx.get(0, {})}
    state = initial_state(first, (m, n), config, float(np.mean(tv)))

    preds: list[PredictionRecord] = []
    checks = violations = 0
    for t in range(1, horizon):
        state = step(state, train_idx.get(t, {}), config, attempt=t)
        targets = test_idx.get(t, {})
        if targets:
            keys = sorted(targets)
            if audit:
                c, v = _audit(state, test_students, t, keys)
                checks += c
                violations += v
            us = np.array([k[0] for k in keys])
            is_ = np.array([k[1] for k in keys])
            s = state.last_slice
            yhat = predict_many(state.params, us, np.full(len(keys), s), is_)
            preds.extend(
                PredictionRecord(fold, int(uu), t, int(ii), targets[(uu, ii)], float(p), s)
                for (uu, ii), p in zip(keys, yhat)
            )
            state = absorb(state, targets)
    seconds = time.perf_counter() - start
    report = {"checked": checks, "violations": violations} if audit else None
    return OnlineResult(preds, state, seconds, report)


def _by_attempt(x: SparseTensor) -> dict[int, dict[tuple[int, int], float]]:
    out: dict[int, dict[tuple[int, int], float]] = {}
    for (u, t, i), v in x.items():
        out.setdefault(t, {})[(u, i)] = v
    return out


def _audit(state: OnlineState, test_students: set, t: int, keys) -> tuple[int, int]:
    """Count visible test-student records at or after attempt ``t``."""
    bad = 0
    for u, a, i in state.raw:
        if u in test_students and a >= t:
            bad += 1
    agg_ok = apply_aggregation(state.raw, state.wmap) == state.agg
    bad += 0 if agg_ok else 1
    for u, i in keys:
        if (u, t, i) in state.raw:
            bad += 1
    return len(keys), bad
