import numpy as np
import pytest

from grate.model import ModelParams
from grate.tensor import AggregationMap, SparseTensor

_ACCEPTANCE: list[str] = []


def record_criterion(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    _ACCEPTANCE.append(line)
    print(line)


@pytest.fixture
def criterion():
    return record_criterion


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


def random_tensor(rng, dims, density=0.5) -> SparseTensor:
    m, t, n = dims
    entries = {}
    for u in range(m):
        for a in range(t):
            for i in range(n):
                if rng.random() < density:
                    entries[(u, a, i)] = float(rng.random())
    return SparseTensor(dims, entries)


def random_map(rng, raw_len) -> AggregationMap:
    return AggregationMap.from_breaks(rng.random(raw_len) < 0.5)


def random_params(rng, m, slices, n, k, c, link="identity", scale=1.0) -> ModelParams:
    q = rng.random((c, n)) + 0.05
    q /= q.sum(axis=0)
    return ModelParams(
        rng.random((m, k)),
        rng.normal(0, scale, (slices, k, c)),
        q,
        rng.normal(0, 0.1, m),
        rng.normal(0, 0.1, n),
        float(rng.normal(0, 0.2)),
        link,
    )


def finite_difference_error(params, obs, config, h=1e-5) -> float:
    """Largest relative error between analytic and central-difference partials."""
    from grate.objective import evaluate_observed, gradients_observed

    analytic = gradients_observed(params, obs, config).blocks()
    worst = 0.0
    for name, g in analytic.items():
        arr = getattr(params, name)
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + h
            up = evaluate_observed(params, obs, config).total
            arr[idx] = old - h
            down = evaluate_observed(params, obs, config).total
            arr[idx] = old
            fd = (up - down) / (2 * h)
            err = abs(fd - g[idx]) / max(abs(fd), abs(g[idx]), 1e-6)
            worst = max(worst, err)
    return worst
