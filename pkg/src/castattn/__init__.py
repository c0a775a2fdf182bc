"""Clustering self-attention with learnable surrogate tokens on a small NumPy tensor kernel."""

from .clustering import ClusterAssignment, cluster, sa_topk_cluster, topk_cluster
from .config import CastConfig, ConfigError
from .core import CastIntermediates, CastParams, forward, init_params
from .estimators import CASTAttention, CASTClassifier, DenseAttention
from .multihead import mh_forward

__version__ = "0.1.0"

__all__ = [
    "CASTAttention",
    "CASTClassifier",
    "DenseAttention",
    "CastConfig",
    "CastIntermediates",
    "CastParams",
    "ClusterAssignment",
    "ConfigError",
    "cluster",
    "forward",
    "init_params",
    "mh_forward",
    "sa_topk_cluster",
    "topk_cluster",
]
