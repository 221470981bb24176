"""Record files, synthetic corpora and CSV/JSON exports."""
from __future__ import annotations

import csv
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .model import ModelParams, knowledge, predict_many
from .tensor import AggregationMap, SparseTensor

HEADER = ["student", "attempt", "problem", "score"]


class DataError(ValueError):
    """Malformed or inconsistent input data."""


@dataclass
class Dataset:
    tensor: SparseTensor
    students: list[str]
    problems: list[str]
    score_range: tuple[float, float] | None = None

    @property
    def binary(self) -> bool:
        _, _, _, v = self.tensor.arrays()
        return bool(v.size) and bool(np.all((v == 0.0) | (v == 1.0)))

    def student_index(self) -> dict[str, int]:
        return {s: k for k, s in enumerate(self.students)}

    def problem_index(self) -> dict[str, int]:
        return {p: k for k, p in enumerate(self.problems)}


def fmt(x: float) -> str:
    return f"{x:.9g}"


def load(path: str | os.PathLike, attempt_mode: str = "per-student") -> Dataset:
    """Read a ``student,attempt,problem,score`` CSV.

    Ids become dense 0-based indices in order of first appearance. Attempts
    are re-indexed to a contiguous ``0..T_u-1`` range per student (or taken
    as ``attempt - 1`` when ``attempt_mode="global"``). If any score falls
    outside [0, 1] the whole file is min-max normalised.
    """
    if attempt_mode not in ("per-student", "global"):
        raise ValueError(f"unknown attempt mode {attempt_mode!r}")
    path = Path(path)
    rows: list[tuple[str, int, str, float, int]] = []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if [h.strip() for h in header] != HEADER:
            raise DataError(f"{path}:1: expected header {','.join(HEADER)}")
        seen = set()
        for lineno, rec in enumerate(reader, start=2):
            if not rec or all(not f.strip() for f in rec):
                continue
            if len(rec) != 4:
                raise DataError(f"{path}:{lineno}: expected 4 fields, got {len(rec)}")
            student, attempt, problem, score = (f.strip() for f in rec)
            try:
                a = int(attempt)
            except ValueError:
                raise DataError(f"{path}:{lineno}: attempt {attempt!r} is not an integer") from None
            if a < 1:
                raise DataError(f"{path}:{lineno}: attempt must be a positive integer")
            try:
                v = float(score)
            except ValueError:
                raise DataError(f"{path}:{lineno}: score {score!r} is not numeric") from None
            if not np.isfinite(v):
                raise DataError(f"{path}:{lineno}: score must be finite")
            key = (student, a, problem)
            if key in seen:
                raise DataError(f"{path}:{lineno}: duplicate record {key}")
            seen.add(key)
            rows.append((student, a, problem, v, lineno))
    if not rows:
        raise DataError(f"{path}: no records")

    students: dict[str, int] = {}
    problems: dict[str, int] = {}
    for s, _, p, _, _ in rows:
        students.setdefault(s, len(students))
        problems.setdefault(p, len(problems))

    if attempt_mode == "per-student":
        per: dict[str, set[int]] = {}
        for s, a, _, _, _ in rows:
            per.setdefault(s, set()).add(a)
        remap = {s: {a: k for k, a in enumerate(sorted(v))} for s, v in per.items()}
        idx = [remap[s][a] for s, a, _, _, _ in rows]
    else:
        idx = [a - 1 for _, a, _, _, _ in rows]

    scores = np.array([r[3] for r in rows])
    lo, hi = float(scores.min()), float(scores.max())
    score_range = None
    if lo < 0.0 or hi > 1.0:
        score_range = (lo, hi)
        scores = (scores - lo) / (hi - lo) if hi > lo else np.zeros_like(scores)

    entries = {}
    for (s, _, p, _, lineno), t, v in zip(rows, idx, scores):
        key = (students[s], t, problems[p])
        if key in entries:
            raise DataError(f"{path}:{lineno}: duplicate record after attempt re-indexing {(s, t + 1, p)}")
        entries[key] = float(v)
    dims = (len(students), max(idx) + 1, len(problems))
    return Dataset(SparseTensor(dims, entries), list(students), list(problems), score_range)


def save(dataset: Dataset, path: str | os.PathLike) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(HEADER)
        for (u, t, i), v in dataset.tensor.items():
            w.writerow([dataset.students[u], t + 1, dataset.problems[i], repr(float(v))])
    return path


def from_tensor(tensor: SparseTensor) -> Dataset:
    m, _, n = tensor.dims
    return Dataset(tensor, [f"s{u}" for u in range(m)], [f"p{i}" for i in range(n)])


def checksum(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


# --- synthetic data ---------------------------------------------------------


@dataclass(frozen=True)
class SyntheticSpec:
    M: int = 50
    N: int = 20
    T: int = 10
    K: int = 3
    C: int = 4
    guess_prob: float = 0.0
    slip_prob: float = 0.0
    forgetting_prob: float = 0.0
    binary: bool = False
    seed: int = 0
    noise_std: float = 0.0
    retry_prob: float = 0.0
    problems_per_attempt: int = 1
    keep_best_on_retry: bool = False

    def __post_init__(self):
        if min(self.M, self.N, self.T, self.K, self.C) < 1:
            raise ValueError("all synthetic dimensions must be >= 1")
        for name in ("guess_prob", "slip_prob", "forgetting_prob", "retry_prob"):
            v = getattr(self, name)
            if not 0 <= v < 1:
                raise ValueError(f"{name} must lie in [0, 1)")
        if self.guess_prob + self.slip_prob >= 1:
            raise ValueError("guess_prob + slip_prob must be < 1")
        if not 1 <= self.problems_per_attempt <= self.N:
            raise ValueError("problems_per_attempt must lie in [1, N]")


PRESETS: dict[str, dict] = {
    "planted": dict(M=50, N=20, T=10, K=3, C=4, problems_per_attempt=2),
    "guess-slip": dict(
        M=40, N=10, T=15, K=3, C=9, guess_prob=0.1, slip_prob=0.2, retry_prob=0.6, keep_best_on_retry=True
    ),
    "forgetting-free": dict(M=40, N=12, T=12, K=2, C=3, noise_std=0.1, guess_prob=0.05, slip_prob=0.1),
    "csintro": dict(M=120, N=48, T=19, K=7, C=9, guess_prob=0.05, slip_prob=0.15, retry_prob=0.5),
    "masterygrids": dict(M=382, N=30, T=27, K=3, C=9, guess_prob=0.1, slip_prob=0.1, binary=True, retry_prob=0.5),
}


@dataclass
class Synthetic:
    tensor: SparseTensor
    params: ModelParams
    knowledge: np.ndarray
    spec: SyntheticSpec = field(default_factory=SyntheticSpec)

    def dataset(self) -> Dataset:
        return from_tensor(self.tensor)


def planted_params(spec: SyntheticSpec, rng: np.random.Generator) -> ModelParams:
    m, n, t, k, c = spec.M, spec.N, spec.T, spec.K, spec.C
    s = rng.uniform(0.0, 1.0, size=(m, k))
    q = rng.dirichlet(np.full(c, 0.5), size=n).T
    a = np.empty((t, k, c))
    a[0] = rng.uniform(0.0, 0.35 / k, size=(k, c))
    for j in range(1, t):
        step = rng.uniform(0.0, 1.2 / (k * t), size=(k, c))
        if spec.forgetting_prob > 0:
            forget = rng.random((k, c)) < spec.forgetting_prob
            step = np.where(forget, -2.0 * step, step)
        a[j] = a[j - 1] + step
    b_u = rng.uniform(-0.05, 0.05, size=m)
    b_i = rng.uniform(-0.05, 0.05, size=n)
    if spec.binary:
        a *= 8.0
        return ModelParams(s, a, q, b_u, b_i, -2.5, "logistic")
    return ModelParams(s, a, q, b_u, b_i, 0.15, "identity")


def generate(spec: SyntheticSpec) -> Synthetic:
    """Sample a corpus from planted factors.

    Knowledge slices are non-decreasing except for forgetting events. At each
    attempt a student works on ``problems_per_attempt`` problems; after a
    weak score (< 0.5) the same problem is retried with ``retry_prob``.
    Real-valued scores get Gaussian noise, then slips (score scaled down into
    [0, 0.3) of its value) and guesses (score pushed up towards 1). Binary
    scores are Bernoulli draws with ``(1-slip)*p + guess*(1-p)``.
    """
    rng = np.random.default_rng(spec.seed)
    params = planted_params(spec, rng)
    entries: dict[tuple[int, int, int], float] = {}
    for u in range(spec.M):
        last: list[int] = []
        last_score: list[float] = []
        for t in range(spec.T):
            chosen: list[int] = []
            for prev, sc in zip(last, last_score):
                if sc < 0.5 and rng.random() < spec.retry_prob and prev not in chosen:
                    chosen.append(prev)
            pool = [i for i in range(spec.N) if i not in chosen]
            extra = spec.problems_per_attempt - len(chosen)
            if extra > 0:
                chosen.extend(int(i) for i in rng.choice(pool, size=extra, replace=False))
            chosen = chosen[: spec.problems_per_attempt]
            p = predict_many(params, np.full(len(chosen), u), np.full(len(chosen), t), np.array(chosen))
            before = dict(zip(last, last_score))
            scores = []
            for i, pi in zip(chosen, p):
                if spec.binary:
                    pc = (1 - spec.slip_prob) * pi + spec.guess_prob * (1 - pi)
                    v = float(rng.random() < pc)
                else:
                    v = float(pi)
                    if spec.noise_std > 0:
                        v = float(np.clip(v + rng.normal(0.0, spec.noise_std), 0.0, 1.0))
                    r = rng.random()
                    if r < spec.slip_prob:
                        v *= rng.uniform(0.0, 0.3)
                    elif r < spec.slip_prob + spec.guess_prob:
                        v += (1.0 - v) * rng.uniform(0.5, 1.0)
                if spec.keep_best_on_retry and i in before:
                    v = max(v, before[i])
                entries[(u, t, i)] = v
                scores.append(v)
            last, last_score = chosen, scores
    tensor = SparseTensor((spec.M, spec.T, spec.N), entries)
    return Synthetic(tensor, params, knowledge(params).values, spec)


def synthetic_spec(preset: str | None = None, **overrides) -> SyntheticSpec:
    if preset and preset not in PRESETS:
        raise KeyError(f"unknown preset {preset!r}")
    base = dict(PRESETS[preset]) if preset else {}
    base.update({k: v for k, v in overrides.items() if v is not None})
    return SyntheticSpec(**base)


# --- exports ----------------------------------------------------------------


def write_json(obj, path: str | os.PathLike) -> Path:
    path = Path(path)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


def export_knowledge(
    params: ModelParams,
    wmap: AggregationMap,
    out_dir: str | os.PathLike,
    student_ids: Sequence[str] | None = None,
) -> dict[str, Path]:
    """Write per-slice knowledge matrices, per-slice averages and the map.

    ``knowledge.csv`` has one row per (slice, student), ``knowledge_avg.csv``
    one row per slice with the student-averaged concept vector (heatmap
    data) and the 1-based raw attempts merged into that slice.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    kv = knowledge(params).values
    m, n_slices, c = kv.shape
    ids = list(student_ids) if student_ids is not None else [str(u) for u in range(m)]
    concepts = [f"concept_{j}" for j in range(c)]
    kpath = out / "knowledge.csv"
    with kpath.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["slice", "student", *concepts])
        for s in range(n_slices):
            for u in range(m):
                w.writerow([s, ids[u], *map(fmt, kv[u, s])])
    apath = out / "knowledge_avg.csv"
    avg = kv.mean(axis=0)
    with apath.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["slice", "raw_attempts", *concepts])
        for s in range(n_slices):
            raws = [str(t + 1) for t in range(wmap.raw_len) if wmap[t] == s]
            w.writerow([s, " ".join(raws), *map(fmt, avg[s])])
    wpath = write_json({"assignment": wmap.to_list(), "raw_len": wmap.raw_len, "agg_len": wmap.agg_len}, out / "wmap.json")
    return {"knowledge": kpath, "average": apath, "wmap": wpath}


def read_knowledge(path: str | os.PathLike) -> np.ndarray:
    """Inverse of the ``knowledge.csv`` export, shape ``(M, slices, C)``."""
    with Path(path).open(newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        rows = [(int(row[0]), row[1], [float(x) for x in row[2:]]) for row in r]
    n_slices = max(s for s, _, _ in rows) + 1
    students = list(dict.fromkeys(sid for _, sid, _ in rows))
    pos = {sid: k for k, sid in enumerate(students)}
    out = np.zeros((len(students), n_slices, len(header) - 2))
    for s, sid, vals in rows:
        out[pos[sid], s] = vals
    return out


def export_qmatrix(params: ModelParams, problem_ids: Sequence[str], path: str | os.PathLike) -> Path:
    path = Path(path)
    if len(problem_ids) != params.Q.shape[1]:
        raise ValueError("need one id per problem")
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["concept", *problem_ids])
        for c, row in enumerate(params.Q):
            w.writerow([c, *map(fmt, row)])
    return path


def read_qmatrix(path: str | os.PathLike) -> tuple[list[str], np.ndarray]:
    with Path(path).open(newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        q = np.array([[float(x) for x in row[1:]] for row in r])
    return header[1:], q


PREDICTION_HEADER = ["fold", "student", "attempt", "problem", "actual", "predicted", "slice"]


def write_predictions(records: Iterable, path: str | os.PathLike, dataset: Dataset | None = None) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(PREDICTION_HEADER)
        for r in records:
            student = dataset.students[r.student] if dataset else r.student
            problem = dataset.problems[r.problem] if dataset else r.problem
            w.writerow([r.fold, student, r.attempt + 1, problem, fmt(r.actual), fmt(r.predicted), r.slice])
    return path


def spec_dict(spec: SyntheticSpec) -> dict:
    return asdict(spec)
