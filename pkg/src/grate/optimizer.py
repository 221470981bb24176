"""Projected mini-batch SGD over observed entries and rank pairs."""
from __future__ import annotations

import logging
import math
from typing import Mapping

import numpy as np

from .config import SgdConfig, TrainConfig
from .model import ModelParams
from .objective import (
    Gradients,
    LossBreakdown,
    Observed,
    accumulate_fit,
    accumulate_rank,
    config_pairs,
    evaluate_observed,
    rank_items,
)
from .tensor import SparseTensor

log = logging.getLogger(__name__)


class NumericalError(FloatingPointError):
    """Training produced a non-finite loss."""


def project(params: ModelParams, inplace: bool = False) -> ModelParams:
    """Clip S and Q into [0, 1] and rescale every Q column onto the simplex.

    A Q column that is all zeros after clipping is reset to uniform ``1/C``.
    """
    p = params if inplace else params.copy()
    np.clip(p.S, 0.0, 1.0, out=p.S)
    np.clip(p.Q, 0.0, 1.0, out=p.Q)
    sums = p.Q.sum(axis=0)
    dead = sums <= 0
    if np.any(dead):
        p.Q[:, dead] = 1.0 / p.Q.shape[0]
        sums[dead] = 1.0
    p.Q /= sums
    return p


def learning_rate(sgd: SgdConfig, update_count: int) -> float:
    if update_count < 0:
        raise ValueError("update_count must be >= 0")
    if sgd.decay == "inverse-sqrt":
        return sgd.lr0 / math.sqrt(1.0 + update_count)
    return sgd.lr0 * sgd.gamma**update_count


def fit(
    params: ModelParams,
    y: SparseTensor,
    weights: Mapping | None,
    config: TrainConfig,
    sgd: SgdConfig | None = None,
    epoch_budget: int | None = None,
    *,
    update_count: int = 0,
    seed: int = 0,
) -> tuple[ModelParams, list[LossBreakdown]]:
    """Fit ``params`` to the observed entries of ``y``.

    Each epoch visits the observed entries in a fresh shuffled order in
    mini-batches of ``sgd.batch_size``. The rank items ``(student, pair)``
    are shuffled too and spread evenly across the same batches; the L2 terms
    are applied once per epoch as weight decay. Projection happens at the end
    of every epoch (or after every step if configured).

    Returns the fitted copy of ``params`` and the loss history, whose first
    element is the loss at the starting point.
    """
    if len(y) == 0:
        raise ValueError("cannot fit on an empty tensor")
    obs = Observed.from_tensor(y, weights)
    return fit_observed(
        params, obs, config, sgd, epoch_budget, update_count=update_count, seed=seed
    )


def fit_observed(
    params: ModelParams,
    obs: Observed,
    config: TrainConfig,
    sgd: SgdConfig | None = None,
    epoch_budget: int | None = None,
    *,
    update_count: int = 0,
    seed: int = 0,
) -> tuple[ModelParams, list[LossBreakdown]]:
    sgd = sgd or config.sgd
    epochs = sgd.max_epochs if epoch_budget is None else int(epoch_budget)
    lr = learning_rate(sgd, update_count)
    p = project(params)
    target = Gradients(p.S, p.A, p.Q, p.b_u, p.b_i)
    rng = np.random.default_rng([sgd.shuffle_seed, seed, update_count])

    eta = config.effective_eta
    pairs = config_pairs(config, p.n_slices, seed=seed) if eta > 0 else []
    r_students, r_lower = rank_items(p.S.shape[0], pairs)

    n = len(obs)
    n_batches = max(1, math.ceil(n / sgd.batch_size))
    shrink_s = 1.0 - 2.0 * lr * config.lambda_s
    shrink_a = 1.0 - 2.0 * lr * config.lambda_a

    history = [_checked(evaluate_observed(p, obs, config, pairs), 0)]
    for epoch in range(1, epochs + 1):
        order = rng.permutation(n)
        rorder = rng.permutation(r_students.size)
        obs_chunks = np.array_split(order, n_batches)
        rank_chunks = np.array_split(rorder, n_batches)
        for oc, rc in zip(obs_chunks, rank_chunks):
            accumulate_fit(p, obs.take(oc), target, scale=-lr)
            if rc.size:
                accumulate_rank(p, r_students[rc], r_lower[rc], eta, target, scale=-lr)
            if sgd.project_every_step:
                project(p, inplace=True)
        if shrink_s != 1.0:
            p.S *= shrink_s
        if shrink_a != 1.0:
            p.A *= shrink_a
        project(p, inplace=True)
        cur = _checked(evaluate_observed(p, obs, config, pairs), epoch)
        prev = history[-1].total
        history.append(cur)
        if sgd.tol > 0 and (prev - cur.total) < sgd.tol * max(abs(prev), 1e-12):
            break
    return p, history


def _checked(lb: LossBreakdown, epoch: int) -> LossBreakdown:
    if not math.isfinite(lb.total):
        raise NumericalError(f"non-finite loss at epoch {epoch}; the learning rate is probably too large")
    return lb
