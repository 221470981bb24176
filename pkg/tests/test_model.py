import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from grate.config import TrainConfig
from grate.model import (
    ModelParams,
    append_slice,
    init_params,
    knowledge,
    predict,
    predict_many,
    sigmoid,
)
from grate.objective import Observed
from grate.optimizer import fit_observed

from conftest import random_params


def scalar_params(a, link="logistic"):
    return ModelParams([[1.0]], [[[a]]], [[1.0]], [0.0], [0.0], 0.0, link)


def test_zero_student_is_half():
    p = ModelParams(np.zeros((1, 2)), np.ones((1, 2, 2)), np.full((2, 1), 0.5), [0.0], [0.0], 0.0, "logistic")
    assert predict(p, 0, 0, 0) == 0.5


def test_scalar_logistic():
    assert predict(scalar_params(2.0), 0, 0, 0) == pytest.approx(1 / (1 + np.exp(-2.0)))
    assert predict(scalar_params(2.0), 0, 0, 0) == pytest.approx(0.8808, abs=5e-5)


def test_identity_clamps():
    assert predict(scalar_params(3.0, "identity"), 0, 0, 0) == 1.0
    assert predict(scalar_params(-3.0, "identity"), 0, 0, 0) == 0.0


def test_out_of_range():
    with pytest.raises(IndexError):
        predict(scalar_params(1.0), 0, 1, 0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["identity", "logistic"]))
def test_prediction_matches_knowledge_and_range(seed, link):
    rng = np.random.default_rng(seed)
    p = random_params(rng, 4, 3, 5, 2, 3, link, scale=2.0)
    kv = knowledge(p).values
    for u, t, i in [(0, 0, 0), (3, 2, 4), (1, 1, 2)]:
        z = kv[u, t] @ p.Q[:, i] + p.b_u[u] + p.b_i[i] + p.mu
        want = sigmoid(z) if link == "logistic" else min(max(z, 0.0), 1.0)
        got = predict(p, u, t, i)
        assert got == pytest.approx(want, abs=1e-12)
        assert 0.0 <= got <= 1.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["identity", "logistic"]))
def test_monotone_in_a(seed, link):
    rng = np.random.default_rng(seed)
    p = random_params(rng, 3, 2, 4, 2, 2, link)
    before = predict_many(p, np.arange(3), np.ones(3, int), np.zeros(3, int))
    bumped = p.copy()
    bumped.A[1, rng.integers(2), rng.integers(2)] += abs(rng.normal()) + 0.01
    after = predict_many(bumped, np.arange(3), np.ones(3, int), np.zeros(3, int))
    assert np.all(after >= before)


def test_knowledge_triple_loop():
    rng = np.random.default_rng(3)
    p = random_params(rng, 3, 2, 2, 4, 5)
    kv = knowledge(p).values
    naive = np.zeros_like(kv)
    for m in range(3):
        for t in range(2):
            for c in range(5):
                naive[m, t, c] = sum(p.S[m, k] * p.A[t, k, c] for k in range(4))
    assert np.allclose(kv, naive, atol=1e-14)
    assert knowledge(p).average().shape == (2, 5)


def test_knowledge_identity_and_zero():
    a = np.array([[[0.3], [0.7]]])
    p = ModelParams(np.eye(2), a, [[1.0]], [0, 0], [0.0])
    assert knowledge(p).values[:, 0, 0].tolist() == [0.3, 0.7]
    p.S[:] = 0
    assert not knowledge(p).values.any()


def test_init_deterministic_and_valid():
    cfg = TrainConfig()
    a = init_params(cfg, 0, 0.6, 10, 7, 2)
    b = init_params(cfg, 0, 0.6, 10, 7, 2)
    assert a.dumps() == b.dumps()
    a.check_invariants()
    assert a.dims == {"M": 10, "K": 3, "slices": 2, "C": 9, "N": 7}
    assert a.mu == 0.6


def test_init_logistic_offset_is_logit():
    p = init_params(TrainConfig(link="logistic"), 0, 0.75, 2, 2)
    assert sigmoid(p.mu) == pytest.approx(0.75)


def test_append_slice():
    p = init_params(TrainConfig(), 1, 0.5, 3, 3)
    q = append_slice(p)
    assert q.n_slices == 2 and np.array_equal(q.A[1], q.A[0])
    r = append_slice(p, "fresh-random", np.random.default_rng(0))
    assert r.n_slices == 2
    with pytest.raises(ValueError):
        append_slice(p, "nope")


def test_shape_validation():
    with pytest.raises(ValueError):
        ModelParams(np.zeros((2, 2)), np.zeros((1, 3, 2)), np.ones((2, 1)) / 2, [0, 0], [0.0])


def test_json_round_trip():
    p = random_params(np.random.default_rng(0), 2, 3, 2, 2, 2, "logistic")
    q = ModelParams.from_json_dict(json.loads(p.dumps()))
    assert q.dumps() == p.dumps()


def test_copy_last_warm_start_converges_faster():
    """Epochs to reach tolerance after appending a slice, warm vs fresh."""
    from grate.data import generate, synthetic_spec

    syn = generate(synthetic_spec("planted", T=4, seed=2))
    cfg = TrainConfig(k=3, c=4, eta=0.0, rank=False, lambda_s=0, lambda_a=0)
    sgd = cfg.sgd.__class__(lr0=0.05, max_epochs=400, tol=1e-5)
    first = syn.tensor.restrict(max_attempt=2).with_dims((50, 3, 20))
    obs3 = Observed.from_tensor(first)
    base, _ = fit_observed(init_params(cfg, 0, 0.5, 50, 20, 3), obs3, cfg, sgd)
    full = Observed.from_tensor(syn.tensor)
    warm = append_slice(base)
    fresh = append_slice(base, "fresh-random", np.random.default_rng(0))
    _, h_warm = fit_observed(warm, full, cfg, sgd)
    _, h_fresh = fit_observed(fresh, full, cfg, sgd)
    assert len(h_warm) < len(h_fresh)
