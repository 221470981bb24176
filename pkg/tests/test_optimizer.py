import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from grate.config import SgdConfig, TrainConfig
from grate.data import generate, synthetic_spec
from grate.model import ModelParams, init_params, predict_many
from grate.optimizer import NumericalError, fit, learning_rate, project
from grate.tensor import SparseTensor

from conftest import random_params, random_tensor


def test_project_examples():
    p = ModelParams([[-0.3, 1.7]], [[[0.0, 0.0]] * 2], [[0.2, -1.0], [0.2, -2.0]], [0.0], [0.0, 0.0])
    q = project(p)
    assert q.S.tolist() == [[0.0, 1.0]]
    assert q.Q[:, 0].tolist() == [0.5, 0.5]
    assert q.Q[:, 1].tolist() == [0.5, 0.5]
    assert p.S[0, 0] == -0.3  # not in place by default


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_project_invariants(seed):
    rng = np.random.default_rng(seed)
    p = random_params(rng, 4, 2, 6, 3, 4)
    p.S = rng.normal(0.5, 1, p.S.shape)
    p.Q = rng.normal(0, 1, p.Q.shape)
    project(p).check_invariants()


def test_learning_rate():
    assert learning_rate(SgdConfig(lr0=0.3), 0) == 0.3
    assert learning_rate(SgdConfig(lr0=0.1), 99) == pytest.approx(0.01)
    assert learning_rate(SgdConfig(lr0=0.2, decay="multiplicative", gamma=0.5), 2) == pytest.approx(0.05)


@pytest.mark.parametrize("kw", [dict(lr0=0), dict(decay="x"), dict(decay="multiplicative", gamma=1.5), dict(batch_size=0)])
def test_sgd_validation(kw):
    with pytest.raises(ValueError):
        SgdConfig(**kw)


def test_fixed_point():
    p = ModelParams([[0.5]], [[[0.5]]], [[1.0]], [0.0], [0.0], 0.25)
    y = SparseTensor((1, 1, 1), {(0, 0, 0): 0.5})
    cfg = TrainConfig(k=1, c=1, eta=0, lambda_s=0, lambda_a=0)
    q, _ = fit(p, y, None, cfg, epoch_budget=5)
    assert q.dumps() == p.dumps()


def test_empty_tensor():
    with pytest.raises(ValueError):
        fit(init_params(TrainConfig(), 0, 0.5, 1, 1), SparseTensor((1, 1, 1)), None, TrainConfig())


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numerical_failure():
    rng = np.random.default_rng(0)
    y = random_tensor(rng, (4, 2, 4), 0.9)
    cfg = TrainConfig(k=2, c=2, sgd=SgdConfig(lr0=1e6, tol=0, batch_size=1))
    with pytest.raises(NumericalError):
        fit(init_params(cfg, 0, 0.5, 4, 4, 2), y, None, cfg, epoch_budget=50)


def test_deterministic():
    rng = np.random.default_rng(1)
    y = random_tensor(rng, (5, 3, 4))
    cfg = TrainConfig(k=2, c=2)
    p0 = init_params(cfg, 0, 0.5, 5, 4, 3)
    a, _ = fit(p0, y, None, cfg, epoch_budget=20, seed=3)
    b, _ = fit(p0, y, None, cfg, epoch_budget=20, seed=3)
    assert a.dumps() == b.dumps()


def _planted(seed, **over):
    syn = generate(synthetic_spec("planted", M=20, N=10, T=5, K=2, C=3, problems_per_attempt=3, seed=seed, **over))
    cfg = TrainConfig(k=2, c=3, eta=0, rank=False, lambda_s=0, lambda_a=0,
                      sgd=SgdConfig(lr0=0.05, max_epochs=500, tol=0))
    return syn, cfg


def test_planted_training_fit():
    syn, cfg = _planted(0)
    p0 = init_params(cfg, 0, float(np.mean(syn.tensor.arrays()[3])), 20, 10, 5)
    p, hist = fit(p0, syn.tensor, None, cfg)
    u, t, i, v = syn.tensor.arrays()
    err = np.sqrt(np.mean((predict_many(p, u, t, i) - v) ** 2))
    assert len(hist) <= 501 and err < 0.05


def test_loss_decreases_on_most_epochs():
    drops = total = 0
    for seed in range(3):
        syn, cfg = _planted(seed)
        # default learning rate; a large step reaches the SGD noise floor and then jitters
        cfg = TrainConfig(**{**cfg.to_dict(), "sgd": SgdConfig(max_epochs=300, tol=0)})
        p0 = init_params(cfg, seed, 0.5, 20, 10, 5)
        _, hist = fit(p0, syn.tensor, None, cfg)
        tot = [h.total for h in hist]
        drops += sum(b < a for a, b in zip(tot, tot[1:]))
        total += len(tot) - 1
    assert drops / total >= 0.9


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_fit_preserves_invariants(seed):
    rng = np.random.default_rng(seed)
    y = random_tensor(rng, (5, 3, 4))
    cfg = TrainConfig(k=2, c=3, eta=0.2, sgd=SgdConfig(lr0=0.1, project_every_step=bool(seed % 2)))
    p, _ = fit(init_params(cfg, seed, 0.5, 5, 4, 3), y, None, cfg, epoch_budget=10)
    p.check_invariants()


def test_biases_reach_least_squares_optimum():
    # S = A = 0 freezes every factor except the biases, leaving a convex problem
    rng = np.random.default_rng(5)
    m, n = 6, 5
    y = random_tensor(rng, (m, 1, n), 0.7)
    w = {k: float(rng.integers(1, 4)) for k in y}
    mu = 0.4
    p0 = ModelParams(np.zeros((m, 2)), np.zeros((1, 2, 2)), np.full((2, n), 0.5), np.zeros(m), np.zeros(n), mu)
    cfg = TrainConfig(k=2, c=2, eta=0, rank=False, lambda_s=0, lambda_a=0,
                      sgd=SgdConfig(lr0=0.02, max_epochs=20000, tol=1e-12, batch_size=10**6))
    p, _ = fit(p0, y, w, cfg)
    u, _, i, v = y.arrays()
    sw = np.sqrt([w[k] for k in y])
    design = np.zeros((len(v), m + n))
    design[np.arange(len(v)), u] = 1
    design[np.arange(len(v)), m + i] = 1
    sol, *_ = np.linalg.lstsq(design * sw[:, None], (v - mu) * sw, rcond=None)
    best = float(np.sum(((design @ sol + mu - v) * sw) ** 2))
    got = float(np.sum(((p.b_u[u] + p.b_i[i] + mu - v) * sw) ** 2))
    assert got == pytest.approx(best, rel=1e-6, abs=1e-10)
