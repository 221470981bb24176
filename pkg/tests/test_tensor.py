import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from grate.tensor import (
    AggregationMap,
    Observation,
    SparseTensor,
    apply_aggregation,
    confidence_weights,
    merge_slices,
    unit_weights,
)

from conftest import random_map, random_tensor


def brute_aggregate(x: SparseTensor, w: AggregationMap) -> dict:
    """Materialise each aggregated slice by folding raw slices in order."""
    m, t, n = x.dims
    out = {}
    for s in range(w.agg_len):
        acc = {}
        for a in range(t):
            if w[a] != s:
                continue
            cur = {(u, i): x[(u, a, i)] for u in range(m) for i in range(n) if (u, a, i) in x}
            acc = merge_slices(acc, cur)
        out.update({(u, s, i): v for (u, i), v in acc.items()})
    return out


def brute_weights(y, w, raw):
    counts = {}
    for (u, s, i) in y:
        counts[(u, s, i)] = float(sum(1 for (ru, ra, ri) in raw if ru == u and ri == i and w[ra] <= s))
    return counts


class TestSparseTensor:
    def test_sorted_iteration(self):
        x = SparseTensor((2, 2, 2), {(1, 0, 0): 0.1, (0, 1, 1): 0.2, (0, 0, 1): 0.3})
        assert list(x) == [(0, 0, 1), (0, 1, 1), (1, 0, 0)]

    def test_rejects_out_of_range(self):
        with pytest.raises(IndexError):
            SparseTensor((1, 1, 1), {(0, 1, 0): 0.5})

    def test_rejects_nan(self):
        with pytest.raises(ValueError):
            SparseTensor((1, 1, 1), {(0, 0, 0): float("nan")})

    def test_duplicate_observation(self):
        obs = [Observation(0, 0, 0, 0.1), Observation(0, 0, 0, 0.2)]
        with pytest.raises(ValueError):
            SparseTensor.from_observations((1, 1, 1), obs)

    def test_arrays_read_only(self):
        x = SparseTensor((1, 2, 1), {(0, 1, 0): 0.4})
        u, t, i, v = x.arrays()
        assert t.tolist() == [1] and v.tolist() == [0.4]
        with pytest.raises(ValueError):
            v[0] = 1.0

    def test_restrict_and_slice(self):
        x = SparseTensor((2, 3, 1), {(0, 0, 0): 0.1, (0, 2, 0): 0.2, (1, 1, 0): 0.3})
        assert len(x.restrict(students=[0])) == 2
        assert len(x.restrict(max_attempt=1)) == 2
        assert x.slice(1) == {(1, 0): 0.3}
        assert x.attempt_counts().tolist() == [2, 1]


class TestAggregationMap:
    @pytest.mark.parametrize("bad", [[1, 1], [0, 2], [0, 1, 0]])
    def test_invalid(self, bad):
        with pytest.raises(ValueError):
            AggregationMap(bad)

    def test_matrix_columns_have_single_one(self):
        w = AggregationMap([0, 0, 1, 1, 1, 1])
        mat = w.matrix()
        assert mat.shape == (2, 6)
        assert mat.sum(axis=0).tolist() == [1] * 6
        assert w.agg_len == 2 and w.last_raw(0) == 1 and w.last_raw(1) == 5

    def test_extend(self):
        w = AggregationMap([0, 1])
        assert w.extend(True).to_list() == [0, 1, 1]
        assert w.extend(False).to_list() == [0, 1, 2]
        assert AggregationMap([]).extend(False).to_list() == [0]

    def test_from_breaks(self):
        assert AggregationMap.from_breaks([True, True, False, True]).to_list() == [0, 0, 1, 1]


class TestMergeSlices:
    def test_prev_only(self):
        assert merge_slices({(0, 0): 0.4}, {}) == {(0, 0): 0.4}

    def test_curr_only(self):
        assert merge_slices({}, {(0, 0): 0.9}) == {(0, 0): 0.9}

    def test_curr_wins(self):
        assert merge_slices({(0, 0): 0.4}, {(0, 0): 0.9}) == {(0, 0): 0.9}

    def test_both_missing(self):
        assert merge_slices({}, {}) == {}


class TestApplyAggregation:
    def test_identity(self):
        x = random_tensor(np.random.default_rng(0), (4, 5, 3))
        assert apply_aggregation(x, AggregationMap.identity(5)) == x

    def test_six_attempts_into_two(self):
        # 5 x 6 x 5 tensor reduced to 5 x 2 x 5
        rng = np.random.default_rng(1)
        x = random_tensor(rng, (5, 6, 5), density=0.4)
        y = apply_aggregation(x, AggregationMap([0, 0, 1, 1, 1, 1]))
        assert y.dims == (5, 2, 5)
        for (u, s, i), v in y.items():
            raws = range(0, 2) if s == 0 else range(2, 6)
            last = max(a for a in raws if (u, a, i) in x)
            assert v == x[(u, last, i)]

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            apply_aggregation(SparseTensor((1, 3, 1)), AggregationMap([0, 1]))

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_matches_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        dims = (int(rng.integers(1, 5)), int(rng.integers(1, 7)), int(rng.integers(1, 5)))
        x = random_tensor(rng, dims, density=float(rng.random()))
        w = random_map(rng, dims[1])
        assert apply_aggregation(x, w).to_dict() == brute_aggregate(x, w)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_composition_and_no_invention(self, seed):
        rng = np.random.default_rng(seed)
        x = random_tensor(rng, (3, 7, 3), density=0.4)
        w1 = random_map(rng, 7)
        w2 = random_map(rng, w1.agg_len)
        once = apply_aggregation(x, w1.compose(w2))
        assert apply_aggregation(apply_aggregation(x, w1), w2) == once
        assert len(once) <= len(x)
        for (u, s, i), v in once.items():
            assert any(x.get((u, a, i)) == v for a in range(7) if w1.compose(w2)[a] == s)


class TestConfidenceWeights:
    def test_single_trial(self):
        raw = SparseTensor((1, 2, 1), {(0, 1, 0): 0.3})
        w = AggregationMap.identity(2)
        assert confidence_weights(apply_aggregation(raw, w), w, raw) == {(0, 1, 0): 1.0}

    def test_two_trials_merged(self):
        raw = SparseTensor((1, 2, 1), {(0, 0, 0): 0.3, (0, 1, 0): 0.8})
        w = AggregationMap([0, 0])
        assert confidence_weights(apply_aggregation(raw, w), w, raw) == {(0, 0, 0): 2.0}

    def test_cumulative_across_slices(self):
        raw = SparseTensor((1, 3, 1), {(0, 0, 0): 0.3, (0, 2, 0): 0.8})
        w = AggregationMap.identity(3)
        om = confidence_weights(apply_aggregation(raw, w), w, raw)
        assert om == {(0, 0, 0): 1.0, (0, 2, 0): 2.0}

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_recount_oracle(self, seed):
        rng = np.random.default_rng(seed)
        raw = random_tensor(rng, (3, 6, 3), density=0.5)
        w = random_map(rng, 6)
        y = apply_aggregation(raw, w)
        assert confidence_weights(y, w, raw) == brute_weights(y, w, raw)

    def test_unit(self):
        y = SparseTensor((1, 1, 2), {(0, 0, 0): 0.1, (0, 0, 1): 0.2})
        assert set(unit_weights(y).values()) == {1.0}
