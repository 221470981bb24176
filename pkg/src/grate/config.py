"""Training and optimizer settings."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace
from typing import Any

LINKS = ("identity", "logistic")
DECAYS = ("inverse-sqrt", "multiplicative")
PAIR_STRATEGIES = ("full", "window", "sampled")
APPEND_MODES = ("copy-last", "fresh-random")


@dataclass(frozen=True)
class SgdConfig:
    lr0: float = 0.005
    decay: str = "inverse-sqrt"
    gamma: float = 0.9
    max_epochs: int = 60
    tol: float = 1e-5
    shuffle_seed: int = 0
    batch_size: int = 16
    project_every_step: bool = False

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if self.decay not in DECAYS:
            raise ValueError(f"decay must be one of {DECAYS}")
        if self.decay == "multiplicative" and not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if self.tol < 0:
            raise ValueError("tol must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass(frozen=True)
class TrainConfig:
    """Model dimensions, regularisation and ablation switches.

    Defaults follow the MORF row of the published hyper-parameter table
    (K=3, C=9, lambda_s=lambda_a=0.001, eta=0.1).
    """

    k: int = 3
    c: int = 9
    lambda_s: float = 0.001
    lambda_a: float = 0.001
    eta: float = 0.1
    link: str = "identity"
    aggregate: bool = True
    rank: bool = True
    pair_strategy: str = "full"
    pair_window: int = 1
    pair_samples: int = 1
    append_mode: str = "copy-last"
    init_scale: float = 0.2
    utility_epochs: int = 20
    holdout_frac: float = 0.2
    utility_rotations: int = 5
    seed: int = 0
    sgd: SgdConfig = field(default_factory=SgdConfig)

    def __post_init__(self):
        if self.k < 1 or self.c < 1:
            raise ValueError("k and c must be >= 1")
        if min(self.lambda_s, self.lambda_a, self.eta) < 0:
            raise ValueError("regularisers and eta must be non-negative")
        if self.link not in LINKS:
            raise ValueError(f"link must be one of {LINKS}")
        if self.pair_strategy not in PAIR_STRATEGIES:
            raise ValueError(f"pair_strategy must be one of {PAIR_STRATEGIES}")
        if self.append_mode not in APPEND_MODES:
            raise ValueError(f"append_mode must be one of {APPEND_MODES}")
        if not 0 < self.holdout_frac < 1:
            raise ValueError("holdout_frac must lie in (0, 1)")
        if not 1 <= self.utility_rotations <= int(1 / self.holdout_frac):
            raise ValueError("utility_rotations must lie in [1, 1/holdout_frac]")

    @property
    def effective_eta(self) -> float:
        return self.eta if self.rank else 0.0

    @property
    def binary(self) -> bool:
        return self.link == "logistic"

    def without_aggregation(self) -> "TrainConfig":
        return replace(self, aggregate=False)

    def without_rank(self) -> "TrainConfig":
        return replace(self, rank=False, eta=0.0)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TrainConfig":
        d = dict(d)
        sgd = d.pop("sgd", None)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d, sgd=SgdConfig(**sgd) if sgd is not None else SgdConfig())


PRESETS = {
    "morf": dict(k=3, c=9, lambda_s=0.001, lambda_a=0.001, eta=0.1, link="identity"),
    "csintro": dict(k=7, c=9, lambda_s=0.0, lambda_a=0.01, eta=0.2, link="identity"),
    "masterygrids": dict(k=3, c=9, lambda_s=0.0, lambda_a=0.0, eta=0.01, link="logistic"),
}
