from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace
from typing import Optional

from .clustering import MECHANISMS, TOPK

ATTENTION_FNS = ("softmax", "laplace")


class ConfigError(ValueError):
    """Invalid layer configuration."""


@dataclass(frozen=True)
class CastConfig:
    """Structural hyperparameters of one clustering-attention layer.

    Temperatures left as ``None`` resolve to ``sqrt(d / heads)``.
    """

    d: int
    n_clusters: int
    cluster_size: int
    heads: int = 1
    attention: str = "softmax"
    mechanism: str = TOPK
    tau: Optional[float] = None
    tau_q: Optional[float] = None
    tau_k: Optional[float] = None

    def __post_init__(self):
        if self.d < 1 or self.n_clusters < 1 or self.cluster_size < 1 or self.heads < 1:
            raise ConfigError("d, n_clusters, cluster_size and heads must be positive")
        if self.d % self.heads:
            raise ConfigError(f"d={self.d} is not divisible by heads={self.heads}")
        if self.attention not in ATTENTION_FNS:
            raise ConfigError(f"attention must be one of {ATTENTION_FNS}, got {self.attention!r}")
        if self.mechanism not in MECHANISMS:
            raise ConfigError(f"mechanism must be one of {MECHANISMS}, got {self.mechanism!r}")
        for name in ("tau", "tau_q", "tau_k"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise ConfigError(f"{name} must be positive, got {v}")

    @property
    def head_dim(self) -> int:
        return self.d // self.heads

    def temperatures(self) -> tuple[float, float, float]:
        default = math.sqrt(self.head_dim)
        return tuple(default if t is None else float(t) for t in (self.tau, self.tau_q, self.tau_k))

    def check_length(self, n: int) -> None:
        """Raise unless a length-``n`` sequence can be clustered."""
        if self.n_clusters * self.cluster_size < n:
            raise ConfigError(
                f"n_clusters * cluster_size = {self.n_clusters * self.cluster_size} < sequence length {n}"
            )
        if self.mechanism == TOPK and self.cluster_size > n:
            raise ConfigError(f"cluster_size {self.cluster_size} exceeds sequence length {n}")

    def padded_length(self, n: int) -> int:
        """Sequence length after padding: only single assignment needs full clusters."""
        if self.mechanism == TOPK:
            return n
        return self.n_clusters * self.cluster_size

    def replace(self, **changes) -> "CastConfig":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def for_length(cls, n: int, d: int, n_clusters: int, **kw) -> "CastConfig":
        """Config with ``cluster_size = ceil(n / n_clusters)``."""
        return cls(d=d, n_clusters=n_clusters, cluster_size=-(-n // n_clusters), **kw)
