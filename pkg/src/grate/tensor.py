"""Sparse student x attempt x problem tensors and attempt aggregation."""
from __future__ import annotations

from bisect import bisect_right
from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Iterator, Mapping

import numpy as np

Key = tuple[int, int, int]


@dataclass(frozen=True, order=True)
class Observation:
    student: int
    attempt: int
    problem: int
    score: float


class SparseTensor:
    """Immutable sparse 3-mode tensor keyed by ``(student, attempt, problem)``.

    Iteration is always in sorted key order so that anything built on top of
    it (SGD shuffles included) is reproducible.
    """

    __slots__ = ("dims", "_entries", "_keys", "_arrays")

    def __init__(self, dims: tuple[int, int, int], entries: Mapping[Key, float] | None = None):
        m, t, n = (int(d) for d in dims)
        if min(m, t, n) < 0:
            raise ValueError(f"negative tensor dims {dims}")
        self.dims = (m, t, n)
        entries = dict(entries or {})
        for (u, a, i), v in entries.items():
            if not (0 <= u < m and 0 <= a < t and 0 <= i < n):
                raise IndexError(f"entry {(u, a, i)} outside dims {self.dims}")
            if not np.isfinite(v):
                raise ValueError(f"non-finite score at {(u, a, i)}")
        self._keys = sorted(entries)
        self._entries = {k: float(entries[k]) for k in self._keys}
        self._arrays = None

    @classmethod
    def from_observations(cls, dims, observations: Iterable[Observation]) -> "SparseTensor":
        entries: dict[Key, float] = {}
        for ob in observations:
            key = (ob.student, ob.attempt, ob.problem)
            if key in entries:
                raise ValueError(f"duplicate observation {key}")
            entries[key] = ob.score
        return cls(dims, entries)

    def __len__(self) -> int:
        return len(self._keys)

    def __contains__(self, key) -> bool:
        return key in self._entries

    def __getitem__(self, key: Key) -> float:
        return self._entries[key]

    def get(self, key: Key, default=None):
        return self._entries.get(key, default)

    def __iter__(self) -> Iterator[Key]:
        return iter(self._keys)

    def __eq__(self, other) -> bool:
        if not isinstance(other, SparseTensor):
            return NotImplemented
        return self.dims == other.dims and self._entries == other._entries

    def __repr__(self) -> str:
        return f"SparseTensor(dims={self.dims}, nnz={len(self)})"

    def items(self) -> Iterator[tuple[Key, float]]:
        for k in self._keys:
            yield k, self._entries[k]

    def observations(self) -> list[Observation]:
        return [Observation(u, t, i, v) for (u, t, i), v in self.items()]

    def to_dict(self) -> dict[Key, float]:
        return dict(self._entries)

    def arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Return ``(students, attempts, problems, scores)`` as parallel arrays."""
        if self._arrays is None:
            if self._keys:
                idx = np.asarray(self._keys, dtype=np.int64)
                u, t, i = idx[:, 0].copy(), idx[:, 1].copy(), idx[:, 2].copy()
            else:
                u = t = i = np.zeros(0, dtype=np.int64)
            v = np.fromiter((self._entries[k] for k in self._keys), dtype=float, count=len(self._keys))
            for a in (u, t, i, v):
                a.setflags(write=False)
            self._arrays = (u, t, i, v)
        return self._arrays

    def slice(self, attempt: int) -> dict[tuple[int, int], float]:
        """Observed ``(student, problem) -> score`` at one attempt index."""
        return {(u, i): v for (u, t, i), v in self.items() if t == attempt}

    def attempt_counts(self) -> np.ndarray:
        """Number of distinct attempt indices each student has observations at."""
        seen = {(u, t) for u, t, _ in self._keys}
        counts = np.zeros(self.dims[0], dtype=np.int64)
        for u, _ in seen:
            counts[u] += 1
        return counts

    def restrict(self, students=None, max_attempt: int | None = None) -> "SparseTensor":
        """Sub-tensor with the same dims holding only the selected entries."""
        keep = None if students is None else set(int(s) for s in students)
        entries = {
            k: v
            for k, v in self.items()
            if (keep is None or k[0] in keep) and (max_attempt is None or k[1] <= max_attempt)
        }
        return SparseTensor(self.dims, entries)

    def with_dims(self, dims) -> "SparseTensor":
        return SparseTensor(dims, self._entries)


class AggregationMap:
    """Assignment of raw attempt indices to aggregated slices.

    Only consecutive raw attempts can share a slice: ``assignment`` starts at
    zero and steps by 0 or 1.
    """

    __slots__ = ("assignment",)

    def __init__(self, assignment: Iterable[int]):
        a = np.asarray(list(assignment), dtype=np.int64)
        if a.ndim != 1:
            raise ValueError("assignment must be one-dimensional")
        if a.size:
            if a[0] != 0:
                raise ValueError("assignment must start at 0")
            steps = np.diff(a)
            if np.any((steps < 0) | (steps > 1)):
                raise ValueError("assignment must be non-decreasing with increments of at most 1")
        a.setflags(write=False)
        self.assignment = a

    @classmethod
    def identity(cls, raw_len: int) -> "AggregationMap":
        return cls(range(raw_len))

    @classmethod
    def from_breaks(cls, merged: Iterable[bool]) -> "AggregationMap":
        """Build from per-attempt flags: ``merged[t]`` joins attempt t to t-1."""
        out, cur = [], 0
        for t, m in enumerate(merged):
            if t > 0 and not m:
                cur += 1
            out.append(cur)
        return cls(out)

    @property
    def raw_len(self) -> int:
        return int(self.assignment.size)

    @property
    def agg_len(self) -> int:
        return int(self.assignment[-1]) + 1 if self.assignment.size else 0

    def __len__(self) -> int:
        return self.raw_len

    def __getitem__(self, t: int) -> int:
        return int(self.assignment[t])

    def __eq__(self, other) -> bool:
        if not isinstance(other, AggregationMap):
            return NotImplemented
        return np.array_equal(self.assignment, other.assignment)

    def __repr__(self) -> str:
        return f"AggregationMap({self.assignment.tolist()})"

    def matrix(self) -> np.ndarray:
        """0/1 matrix of shape ``(agg_len, raw_len)``."""
        w = np.zeros((self.agg_len, self.raw_len), dtype=np.int64)
        w[self.assignment, np.arange(self.raw_len)] = 1
        return w

    def last_raw(self, slice_index: int) -> int:
        """Largest raw attempt index assigned to ``slice_index``."""
        return int(np.searchsorted(self.assignment, slice_index, side="right")) - 1

    def extend(self, merge: bool) -> "AggregationMap":
        """Map for one more raw attempt, merged into the last slice or appended."""
        if self.raw_len == 0:
            return AggregationMap([0])
        nxt = self.agg_len - 1 if merge else self.agg_len
        return AggregationMap([*self.assignment.tolist(), nxt])

    def compose(self, outer: "AggregationMap") -> "AggregationMap":
        """Single map equivalent to applying ``self`` and then ``outer``."""
        if outer.raw_len != self.agg_len:
            raise ValueError("outer map length must equal this map's aggregated length")
        return AggregationMap(outer.assignment[self.assignment])

    def to_list(self) -> list[int]:
        return self.assignment.tolist()


def merge_slices(prev: Mapping, curr: Mapping) -> dict:
    """Merge two ``(student, problem) -> score`` slices; the later one wins."""
    out = dict(prev)
    out.update(curr)
    return out


def apply_aggregation(x: SparseTensor, w: AggregationMap) -> SparseTensor:
    m, t, n = x.dims
    if w.raw_len != t:
        raise ValueError(f"map covers {w.raw_len} attempts but tensor has {t}")
    out: dict[Key, float] = {}
    # (u, t, i) sort order visits each (u, i) in ascending attempt order,
    # so plain overwriting realises the left fold of merge_slices.
    assign = w.assignment
    for (u, a, i), v in x.items():
        out[(u, int(assign[a]), i)] = v
    return SparseTensor((m, w.agg_len, n), out)


def confidence_weights(y: SparseTensor, w: AggregationMap, raw: SparseTensor) -> dict[Key, float]:
    """Cumulative trial counts for every observed entry of the aggregated tensor.

    The weight of ``(u, s, i)`` is how many raw attempts of student ``u`` on
    problem ``i`` fall at or before the last raw attempt of slice ``s``.
    """
    history: dict[tuple[int, int], list[int]] = defaultdict(list)
    for u, a, i in raw:
        history[(u, i)].append(a)
    for v in history.values():
        v.sort()
    last = {s: w.last_raw(s) for s in range(w.agg_len)}
    return {(u, s, i): float(bisect_right(history[(u, i)], last[s])) for u, s, i in y}


def unit_weights(y: SparseTensor) -> dict[Key, float]:
    return {k: 1.0 for k in y}
