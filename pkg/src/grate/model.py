"""Factor parameters, forward prediction and knowledge states."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .config import LINKS, TrainConfig


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=float)))


def apply_link(z, link: str):
    if link == "logistic":
        return sigmoid(z)
    if link == "identity":
        return np.clip(z, 0.0, 1.0)
    raise ValueError(f"unknown link {link!r}")


@dataclass
class ModelParams:
    """S (M x K), A (T~ x K x C), Q (C x N), biases and the global offset."""

    S: np.ndarray
    A: np.ndarray
    Q: np.ndarray
    b_u: np.ndarray
    b_i: np.ndarray
    mu: float = 0.0
    link: str = "identity"

    def __post_init__(self):
        self.S = np.asarray(self.S, dtype=float)
        self.A = np.asarray(self.A, dtype=float)
        self.Q = np.asarray(self.Q, dtype=float)
        self.b_u = np.asarray(self.b_u, dtype=float)
        self.b_i = np.asarray(self.b_i, dtype=float)
        self.mu = float(self.mu)
        if self.link not in LINKS:
            raise ValueError(f"unknown link {self.link!r}")
        if self.A.ndim != 3:
            raise ValueError("A must have shape (slices, K, C)")
        m, k = self.S.shape
        _, ka, c = self.A.shape
        cq, n = self.Q.shape
        if ka != k or cq != c or self.b_u.shape != (m,) or self.b_i.shape != (n,):
            raise ValueError(
                f"inconsistent shapes S{self.S.shape} A{self.A.shape} Q{self.Q.shape} "
                f"b_u{self.b_u.shape} b_i{self.b_i.shape}"
            )

    @property
    def dims(self) -> dict[str, int]:
        return {
            "M": self.S.shape[0],
            "K": self.S.shape[1],
            "slices": self.A.shape[0],
            "C": self.A.shape[2],
            "N": self.Q.shape[1],
        }

    @property
    def n_slices(self) -> int:
        return self.A.shape[0]

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.S.copy(), self.A.copy(), self.Q.copy(), self.b_u.copy(), self.b_i.copy(), self.mu, self.link
        )

    def check_invariants(self, atol: float = 1e-9) -> None:
        if np.any(self.S < 0) or np.any(self.S > 1):
            raise AssertionError("S outside [0, 1]")
        if np.any(self.Q < 0) or np.any(self.Q > 1):
            raise AssertionError("Q outside [0, 1]")
        if not np.allclose(self.Q.sum(axis=0), 1.0, rtol=0, atol=atol):
            raise AssertionError("Q columns do not sum to 1")

    def to_json_dict(self) -> dict:
        return {
            "dims": self.dims,
            "link": self.link,
            "mu": self.mu,
            "S": self.S.tolist(),
            "A": self.A.tolist(),
            "Q": self.Q.tolist(),
            "b_u": self.b_u.tolist(),
            "b_i": self.b_i.tolist(),
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "ModelParams":
        k, c = d["dims"]["K"], d["dims"]["C"]
        a = np.asarray(d["A"], dtype=float).reshape(-1, k, c)
        return cls(d["S"], a, d["Q"], d["b_u"], d["b_i"], d["mu"], d["link"])

    def dumps(self) -> str:
        return json.dumps(self.to_json_dict())


@dataclass
class KnowledgeState:
    """Per-slice student knowledge, shape ``(M, slices, C)``."""

    values: np.ndarray
    slice_ids: list[int] = field(default_factory=list)

    def __getitem__(self, s: int) -> np.ndarray:
        return self.values[:, s, :]

    @property
    def shape(self):
        return self.values.shape

    def average(self) -> np.ndarray:
        """Mean knowledge over students, shape ``(slices, C)``."""
        return self.values.mean(axis=0)


def affine_score(params: ModelParams, u, t, i):
    """Score before the link, vectorised over index arrays."""
    u, t, i = np.asarray(u), np.asarray(t), np.asarray(i)
    know = np.einsum("...k,...kc->...c", params.S[u], params.A[t])
    return np.sum(know * params.Q[:, i].T, axis=-1) + params.b_u[u] + params.b_i[i] + params.mu


def predict(params: ModelParams, u: int, t: int, i: int) -> float:
    m, k = params.S.shape
    n = params.Q.shape[1]
    if not (0 <= u < m and 0 <= t < params.n_slices and 0 <= i < n):
        raise IndexError(f"index {(u, t, i)} out of range for {params.dims}")
    z = params.S[u] @ params.A[t] @ params.Q[:, i] + params.b_u[u] + params.b_i[i] + params.mu
    return float(apply_link(z, params.link))


def predict_many(params: ModelParams, u, t, i) -> np.ndarray:
    return apply_link(affine_score(params, u, t, i), params.link)


def knowledge(params: ModelParams) -> KnowledgeState:
    vals = np.einsum("mk,tkc->mtc", params.S, params.A)
    return KnowledgeState(vals, list(range(params.n_slices)))


def init_params(
    config: TrainConfig, seed: int, train_mean: float, n_students: int, n_problems: int, n_slices: int = 1
) -> ModelParams:
    if min(config.k, config.c, n_students, n_problems, n_slices) < 1:
        raise ValueError("all dimensions must be >= 1")
    rng = np.random.default_rng(seed)
    hi = config.init_scale
    s = rng.uniform(0.0, hi, size=(n_students, config.k))
    a = rng.uniform(0.0, hi, size=(n_slices, config.k, config.c))
    q = rng.uniform(0.0, hi, size=(config.c, n_problems))
    q /= q.sum(axis=0, keepdims=True)
    mu = float(train_mean)
    if config.link == "logistic":
        # offset lives on the logit scale
        p = min(max(mu, 1e-3), 1 - 1e-3)
        mu = float(np.log(p / (1 - p)))
    return ModelParams(s, a, q, np.zeros(n_students), np.zeros(n_problems), mu, config.link)


def append_slice(params: ModelParams, mode: str = "copy-last", rng=None, init_scale: float = 0.2) -> ModelParams:
    if params.n_slices < 1:
        raise ValueError("cannot append to a model without slices")
    if mode == "copy-last":
        new = params.A[-1:].copy()
    elif mode == "fresh-random":
        rng = rng if rng is not None else np.random.default_rng()
        new = rng.uniform(0.0, init_scale, size=(1, *params.A.shape[1:]))
    else:
        raise ValueError(f"unknown append mode {mode!r}")
    out = params.copy()
    out.A = np.concatenate([params.A, new], axis=0)
    return out
