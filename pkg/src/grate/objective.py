"""Weighted fit loss, rank-based knowledge penalty and their analytic gradients.

For the identity link the fit term is taken on the affine score itself;
clamping to [0, 1] is applied only to reported predictions, so the training
loss stays smooth and never loses its gradient outside the unit interval.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .config import TrainConfig
from .model import ModelParams, sigmoid
from .tensor import SparseTensor


@dataclass(frozen=True)
class Observed:
    """Flattened observed entries with their confidence weights."""

    u: np.ndarray
    t: np.ndarray
    i: np.ndarray
    y: np.ndarray
    w: np.ndarray

    @classmethod
    def from_tensor(cls, y: SparseTensor, weights: Mapping | None = None) -> "Observed":
        u, t, i, v = y.arrays()
        if weights is None:
            w = np.ones(len(v))
        else:
            try:
                w = np.fromiter((weights[k] for k in y), dtype=float, count=len(y))
            except KeyError as exc:
                raise KeyError(f"missing weight for observed entry {exc.args[0]}") from None
        return cls(u, t, i, v, w)

    def __len__(self) -> int:
        return len(self.y)

    def take(self, idx) -> "Observed":
        return Observed(self.u[idx], self.t[idx], self.i[idx], self.y[idx], self.w[idx])


@dataclass
class LossBreakdown:
    weighted_fit: float
    reg_s: float
    reg_a: float
    rank_penalty: float
    eta: float
    total: float

    def as_dict(self) -> dict[str, float]:
        return {
            "weighted_fit": self.weighted_fit,
            "reg_s": self.reg_s,
            "reg_a": self.reg_a,
            "rank_penalty": self.rank_penalty,
            "eta": self.eta,
            "total": self.total,
        }


@dataclass
class Gradients:
    S: np.ndarray
    A: np.ndarray
    Q: np.ndarray
    b_u: np.ndarray
    b_i: np.ndarray

    @classmethod
    def zeros_like(cls, p: ModelParams) -> "Gradients":
        return cls(
            np.zeros_like(p.S), np.zeros_like(p.A), np.zeros_like(p.Q), np.zeros_like(p.b_u), np.zeros_like(p.b_i)
        )

    def blocks(self) -> dict[str, np.ndarray]:
        return {"S": self.S, "A": self.A, "Q": self.Q, "b_u": self.b_u, "b_i": self.b_i}


def _forward(p: ModelParams, obs: Observed):
    su = p.S[obs.u]
    at = p.A[obs.t]
    qi = p.Q[:, obs.i].T
    know = np.einsum("bk,bkc->bc", su, at)
    z = np.sum(know * qi, axis=1) + p.b_u[obs.u] + p.b_i[obs.i] + p.mu
    if p.link == "logistic":
        yhat = sigmoid(z)
        dz = yhat * (1.0 - yhat)
    else:
        yhat = z
        dz = np.ones_like(z)
    return su, at, qi, know, yhat, dz


def weighted_sse(p: ModelParams, obs: Observed) -> float:
    if len(obs) == 0:
        return 0.0
    yhat = _forward(p, obs)[4]
    return float(np.sum(obs.w * (obs.y - yhat) ** 2))


def fit_loss(
    params: ModelParams,
    y: SparseTensor,
    weights: Mapping | None = None,
    lambda_s: float = 0.0,
    lambda_a: float = 0.0,
) -> float:
    """Confidence-weighted squared error plus Frobenius penalties on S and A."""
    obs = Observed.from_tensor(y, weights)
    return (
        weighted_sse(params, obs)
        + lambda_s * float(np.sum(params.S**2))
        + lambda_a * float(np.sum(params.A**2))
    )


def rank_terms(p: ModelParams, students: np.ndarray, lower: np.ndarray) -> np.ndarray:
    """Per-(student, pair, concept) knowledge increase ``k[j+1] - k[j]``."""
    diff = p.A[lower + 1] - p.A[lower]
    return np.einsum("bk,bkc->bc", p.S[students], diff)


def rank_penalty(params: ModelParams, pairs=None) -> float:
    """Sum of ``-log sigmoid(k[j+1] - k[j])`` over students, concepts and pairs.

    ``pairs`` lists the lower slice index ``j`` of each consecutive pair;
    every pair is used when omitted.
    """
    if params.n_slices < 2:
        return 0.0
    lower = np.arange(params.n_slices - 1) if pairs is None else np.asarray(_lower(pairs), dtype=np.int64)
    if lower.size == 0:
        return 0.0
    m = params.S.shape[0]
    su = np.repeat(np.arange(m), lower.size)
    lj = np.tile(lower, m)
    d = rank_terms(params, su, lj)
    return float(np.sum(np.logaddexp(0.0, -d)))


def _lower(pairs) -> list[int]:
    out = []
    for pr in pairs:
        if isinstance(pr, tuple):
            out.append(int(pr[0]))
        else:
            out.append(int(pr))
    return out


def sample_rank_pairs(
    n_slices: int, strategy: str = "full", window: int = 1, n: int = 1, seed: int = 0
) -> list[tuple[int, int]]:
    """Consecutive slice pairs ``(j, j+1)`` (0-indexed) entering the rank term.

    ``full`` uses every pair, ``window`` the last ``window`` pairs and
    ``sampled`` draws ``n`` distinct pairs uniformly with a seeded generator.
    """
    if n_slices < 2:
        return []
    every = [(j, j + 1) for j in range(n_slices - 1)]
    if strategy == "full":
        return every
    if strategy == "window":
        return every[-window:] if window > 0 else []
    if strategy == "sampled":
        rng = np.random.default_rng(seed)
        pick = rng.choice(len(every), size=min(n, len(every)), replace=False)
        return [every[j] for j in sorted(pick.tolist())]
    raise ValueError(f"unknown pair strategy {strategy!r}")


def config_pairs(config: TrainConfig, n_slices: int, seed: int | None = None) -> list[tuple[int, int]]:
    return sample_rank_pairs(
        n_slices,
        config.pair_strategy,
        window=config.pair_window,
        n=config.pair_samples,
        seed=config.seed if seed is None else seed,
    )


def evaluate(params: ModelParams, y: SparseTensor, weights: Mapping | None, config: TrainConfig) -> LossBreakdown:
    obs = Observed.from_tensor(y, weights)
    return evaluate_observed(params, obs, config)


def evaluate_observed(params: ModelParams, obs: Observed, config: TrainConfig, pairs=None) -> LossBreakdown:
    fit = weighted_sse(params, obs)
    reg_s = config.lambda_s * float(np.sum(params.S**2))
    reg_a = config.lambda_a * float(np.sum(params.A**2))
    eta = config.effective_eta
    if eta > 0:
        rp = rank_penalty(params, config_pairs(config, params.n_slices) if pairs is None else pairs)
    else:
        rp = 0.0
    return LossBreakdown(fit, reg_s, reg_a, rp, eta, fit + reg_s + reg_a + eta * rp)


def accumulate_fit(p: ModelParams, obs: Observed, g: Gradients, scale: float = 1.0) -> None:
    """Add ``scale`` times the fit-term gradient of ``obs`` into ``g``.

    ``g`` may alias the parameter arrays of ``p``: every contribution is
    computed from copies before anything is written.
    """
    if len(obs) == 0:
        return
    su, at, qi, know, yhat, dz = _forward(p, obs)
    r = (2.0 * scale) * obs.w * (yhat - obs.y) * dz
    np.add.at(g.S, obs.u, r[:, None] * np.einsum("bkc,bc->bk", at, qi))
    np.add.at(g.A, obs.t, r[:, None, None] * su[:, :, None] * qi[:, None, :])
    np.add.at(g.Q.T, obs.i, r[:, None] * know)
    np.add.at(g.b_u, obs.u, r)
    np.add.at(g.b_i, obs.i, r)


def accumulate_rank(
    p: ModelParams, students: np.ndarray, lower: np.ndarray, eta: float, g: Gradients, scale: float = 1.0
) -> None:
    if eta == 0 or students.size == 0:
        return
    diff = p.A[lower + 1] - p.A[lower]
    su = p.S[students]
    d = np.einsum("bk,bkc->bc", su, diff)
    # d/dd of -log sigmoid(d) is -sigmoid(-d)
    gd = (-eta * scale) * sigmoid(-d)
    np.add.at(g.S, students, np.einsum("bc,bkc->bk", gd, diff))
    outer = su[:, :, None] * gd[:, None, :]
    np.add.at(g.A, lower + 1, outer)
    np.add.at(g.A, lower, -outer)


def accumulate_reg(p: ModelParams, lambda_s: float, lambda_a: float, g: Gradients, scale: float = 1.0) -> None:
    if lambda_s:
        g.S += (2.0 * lambda_s * scale) * p.S
    if lambda_a:
        g.A += (2.0 * lambda_a * scale) * p.A


def rank_items(n_students: int, pairs) -> tuple[np.ndarray, np.ndarray]:
    lower = np.asarray(_lower(pairs), dtype=np.int64)
    return np.repeat(np.arange(n_students, dtype=np.int64), lower.size), np.tile(lower, n_students)


def gradients(
    params: ModelParams, y: SparseTensor, weights: Mapping | None, config: TrainConfig, pairs=None
) -> Gradients:
    """Exact gradient of the total objective with respect to every factor."""
    obs = Observed.from_tensor(y, weights)
    return gradients_observed(params, obs, config, pairs)


def gradients_observed(params: ModelParams, obs: Observed, config: TrainConfig, pairs=None) -> Gradients:
    g = Gradients.zeros_like(params)
    accumulate_fit(params, obs, g)
    accumulate_reg(params, config.lambda_s, config.lambda_a, g)
    eta = config.effective_eta
    if eta > 0 and params.n_slices >= 2:
        if pairs is None:
            pairs = config_pairs(config, params.n_slices)
        su, lj = rank_items(params.S.shape[0], pairs)
        accumulate_rank(params, su, lj, eta, g)
    return g
