"""Single-head clustering attention with learnable surrogate tokens.

Pipeline for ``X`` of shape ``(..., N, d)``:

1. ``Q, K, V = X W_q, X W_k, X W_v``.
2. Surrogate scores ``A_q = Q S^T``, ``A_k = K S^T`` and a per-token gate
   ``phi = X W_phi + b_phi``; the cluster affinity ``A_g`` blends the
   cluster-softmaxed scores with ``sigmoid(phi)``.
3. ``A_g`` drives a clustering mechanism; exact attention runs inside every
   cluster (``R_intra``).
4. Each cluster is summarised by a key-score weighted average of its values
   (``R_inter``).
5. Every token mixes its own intra-cluster result with the summaries of the
   clusters it does not belong to, using the query-side weights ``A_sum``.
6. ``O = R W_o``.

The helpers below accept extra leading axes (sequence batch, heads); the token
axis is always ``-2``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import clustering
from .clustering import ClusterAssignment
from .config import CastConfig
from .kernel import ops
from .kernel.tensor import ShapeError, Tensor

PARAM_NAMES = ("W_q", "W_k", "W_v", "W_o", "S", "W_phi", "b_phi")

# Additive logit for padded keys; large enough that exp underflows to 0 yet finite.
_MASKED_LOGIT = -1e9


@dataclass
class CastParams:
    """Learnable parameters of one layer.

    ``S`` is ``(n_clusters, d)`` for a single head or ``(n_clusters, heads,
    d // heads)`` for the multi-head layer.
    """

    W_q: Tensor
    W_k: Tensor
    W_v: Tensor
    W_o: Tensor
    S: Tensor
    W_phi: Tensor
    b_phi: Tensor

    @property
    def d(self) -> int:
        return self.W_q.shape[0]

    @property
    def n_clusters(self) -> int:
        return self.S.shape[0]

    @property
    def dtype(self):
        return self.W_q.dtype

    def tensors(self) -> dict:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def arrays(self) -> dict:
        return {name: t.data for name, t in self.tensors().items()}

    @classmethod
    def from_arrays(cls, arrays: dict, dtype=None, requires_grad: bool = False) -> "CastParams":
        missing = [n for n in PARAM_NAMES if n not in arrays]
        if missing:
            raise KeyError(f"missing parameters: {missing}")
        return cls(**{
            n: Tensor(np.asarray(arrays[n]), dtype=dtype, requires_grad=requires_grad, name=n) for n in PARAM_NAMES
        })

    def astype(self, dtype, requires_grad: bool = False) -> "CastParams":
        return CastParams.from_arrays(self.arrays(), dtype=dtype, requires_grad=requires_grad)

    def validate(self, config: CastConfig) -> None:
        d, n_c = config.d, config.n_clusters
        for name in ("W_q", "W_k", "W_v", "W_o"):
            if getattr(self, name).shape != (d, d):
                raise ShapeError(f"{name} must be {(d, d)}, got {getattr(self, name).shape}")
        if self.S.shape not in ((n_c, d), (n_c, config.heads, config.head_dim)):
            raise ShapeError(f"S must have {n_c} rows of width {d}, got {self.S.shape}")
        if self.W_phi.shape != (d, 1):
            raise ShapeError(f"W_phi must be {(d, 1)}, got {self.W_phi.shape}")
        if self.b_phi.shape != (1,):
            raise ShapeError(f"b_phi must have shape (1,), got {self.b_phi.shape}")


def init_params(config: CastConfig, seed: int = 0, dtype=np.float32) -> CastParams:
    """Uniform(-1/sqrt(d), 1/sqrt(d)) projections and surrogates; zero gate bias."""
    d, n_c = config.d, config.n_clusters
    rng = np.random.default_rng(seed)
    bound = 1.0 / math.sqrt(d)

    def u(*shape):
        return rng.uniform(-bound, bound, size=shape)

    s_shape = (n_c, d) if config.heads == 1 else (n_c, config.heads, config.head_dim)
    arrays = {
        "W_q": u(d, d),
        "W_k": u(d, d),
        "W_v": u(d, d),
        "W_o": u(d, d),
        "S": u(*s_shape),
        "W_phi": u(d, 1),
        "b_phi": np.zeros(1),
    }
    return CastParams.from_arrays(arrays, dtype=dtype)


@dataclass
class CastIntermediates:
    """Tensors retained from one forward pass (padded to ``n_padded`` tokens)."""

    n_tokens: int
    n_padded: int
    A_q: Tensor
    A_k: Tensor
    phi: Tensor
    A_g: Tensor
    assignment: ClusterAssignment
    R_intra: Tensor
    summary_weights: Tensor
    R_inter: Tensor
    A_sum: Tensor
    R: Tensor
    extra: dict = field(default_factory=dict)

    def cluster_scores(self) -> np.ndarray:
        """``A_g`` restricted to real (unpadded) tokens."""
        return self.A_g.data[..., : self.n_tokens, :]


def attention_fn(x: Tensor, kind: str, axis: int = -1) -> Tensor:
    if kind == "softmax":
        return ops.softmax(x, axis=axis)
    if kind == "laplace":
        return ops.laplace(x)
    raise ValueError(f"unknown attention function {kind!r}")


def project_qkv(X: Tensor, params: CastParams):
    if X.shape[-1] != params.d:
        raise ShapeError(f"input width {X.shape[-1]} does not match model width {params.d}")
    return X @ params.W_q, X @ params.W_k, X @ params.W_v


def surrogate_affinities(Q: Tensor, K: Tensor, S: Tensor):
    if Q.shape[-1] != S.shape[-1] or K.shape[-1] != S.shape[-1]:
        raise ShapeError(f"surrogate width {S.shape[-1]} does not match {Q.shape[-1]}/{K.shape[-1]}")
    St = ops.swap_last(S)
    return Q @ St, K @ St


def gate(X: Tensor, params: CastParams) -> Tensor:
    if X.shape[-1] != params.W_phi.shape[0]:
        raise ShapeError(f"input width {X.shape[-1]} does not match gate width {params.W_phi.shape[0]}")
    return X @ params.W_phi + params.b_phi


def combined_affinity(A_q: Tensor, A_k: Tensor, phi: Tensor, attention: str = "softmax") -> Tensor:
    """``sigmoid(phi) * f(A_q) + (1 - sigmoid(phi)) * f(A_k)`` over the cluster axis."""
    if A_q.shape != A_k.shape:
        raise ShapeError(f"A_q {A_q.shape} and A_k {A_k.shape} differ")
    if phi.shape[-1] != 1 or phi.shape[-2] != A_q.shape[-2]:
        raise ShapeError(f"gate shape {phi.shape} incompatible with scores {A_q.shape}")
    s = ops.sigmoid(phi)
    return s * attention_fn(A_q, attention) + ops.one_minus(s) * attention_fn(A_k, attention)


def intra_attention(Q_g: Tensor, K_g: Tensor, V_g: Tensor, tau: float, attention: str = "softmax",
                    key_valid: Optional[np.ndarray] = None) -> Tensor:
    """Scaled attention inside each cluster: ``f(Q_g K_g^T / tau) V_g``.

    ``key_valid`` (``(..., N_c, kappa)`` booleans) excludes padded members.
    """
    if Q_g.shape[:-1] != K_g.shape[:-1] or K_g.shape[:-1] != V_g.shape[:-1]:
        raise ShapeError(f"clustered Q/K/V extents differ: {Q_g.shape}, {K_g.shape}, {V_g.shape}")
    scores = ops.scale(Q_g @ ops.swap_last(K_g), 1.0 / tau)
    if key_valid is None:
        return attention_fn(scores, attention, axis=-1) @ V_g
    valid = key_valid[..., None, :]
    if attention == "softmax":
        bias = Tensor(np.where(valid, 0.0, _MASKED_LOGIT), dtype=scores.dtype)
        return ops.softmax(scores + bias, axis=-1) @ V_g
    return (attention_fn(scores, attention) * Tensor(valid, dtype=scores.dtype)) @ V_g


def _own_cluster_column(n_clusters: int, dtype) -> Tensor:
    # Expanded identity (N_c, N_c, 1): batched matmul picks column j for cluster j.
    return Tensor(np.eye(n_clusters)[:, :, None], dtype=dtype)


def cluster_summaries(A_k: Tensor, phi: Tensor, assignment: ClusterAssignment, V_g: Tensor, tau_k: float,
                      attention: str = "softmax", lead: int = 0, member_valid: Optional[np.ndarray] = None):
    """One value summary per cluster from key-surrogate scores.

    Returns ``(R_inter, summary_weights)`` with shapes ``(..., N_c, d)`` and
    ``(..., N_c, kappa, 1)``.
    """
    logits = ops.scale(A_k * ops.softplus_plus_one(ops.neg(phi)), 1.0 / tau_k)
    clustered = clustering.gather_G(assignment, logits, lead=lead)
    own = clustered @ _own_cluster_column(assignment.n_clusters, A_k.dtype)
    del logits, clustered
    if member_valid is not None:
        valid = member_valid[..., None]
        if attention == "softmax":
            own = own + Tensor(np.where(valid, 0.0, _MASKED_LOGIT), dtype=own.dtype)
            weights = ops.softmax(own, axis=-2)
        else:
            weights = attention_fn(own, attention) * Tensor(valid, dtype=own.dtype)
    else:
        weights = attention_fn(own, attention, axis=-2)
    summary = ops.swap_last(weights) @ V_g
    shape = summary.shape[:-2] + (summary.shape[-1],)
    return ops.reshape(summary, shape), weights


def mix(A_q: Tensor, phi: Tensor, mask: Tensor, assignment: ClusterAssignment, R_intra: Tensor,
        R_inter: Tensor, tau_q: float, attention: str = "softmax", lead: int = 0):
    """Combine intra-cluster results and other clusters' summaries per token.

    Returns ``(R, A_sum)``. ``mask`` is the membership indicator ``M``; the
    token's own clusters are weighted by ``A_sum * M`` and served by ``R_intra``,
    all other clusters by ``A_sum * (1 - M)`` against ``R_inter``.
    """
    if mask.shape[-2:] != A_q.shape[-2:]:
        raise ShapeError(f"mask {mask.shape} does not match scores {A_q.shape}")
    A_sum = attention_fn(ops.scale(A_q * ops.softplus_plus_one(phi), 1.0 / tau_q), attention, axis=-1)
    inter_mix = A_sum * ops.one_minus(mask)
    own = clustering.gather_G(assignment, A_sum * mask, lead=lead) @ _own_cluster_column(
        assignment.n_clusters, A_q.dtype)
    intra = clustering.scatter_Ginv(assignment, own * R_intra, lead=lead)
    del own
    return intra + inter_mix @ R_inter, A_sum


def _real_token_mask(assignment: ClusterAssignment, n_real: int, lead: int) -> Optional[np.ndarray]:
    if n_real == assignment.n_tokens:
        return None
    valid = assignment.indices < n_real
    b = assignment.batch_dims
    return valid.reshape(valid.shape[:b] + (1,) * lead + valid.shape[b:])


def assign_clusters(A_g: Tensor, config: CastConfig, n_real: int) -> ClusterAssignment:
    """Cluster the (possibly padded) affinity rows of ``A_g``.

    Padded tokens (positions >= ``n_real``) never compete with real tokens;
    they only fill slots the real tokens left empty.
    """
    n_pad = A_g.shape[-2]
    if n_real < n_pad:
        assignment = clustering.cluster(A_g.data[..., :n_real, :], config.cluster_size, config.mechanism)
        return clustering.fill_empty_slots(assignment, n_pad)
    return clustering.cluster(A_g.data, config.cluster_size, config.mechanism)


def cluster_attend(Q, K, V, A_q, A_k, phi, assignment: ClusterAssignment, config: CastConfig, n_real: int,
                   lead: int = 0, keep: bool = True):
    """Intra attention, summaries and mixing for a given clustering; shared by both layers."""
    tau, tau_q, tau_k = config.temperatures()
    valid = _real_token_mask(assignment, n_real, lead)

    Q_g = clustering.gather_G(assignment, Q, lead=lead)
    K_g = clustering.gather_G(assignment, K, lead=lead)
    V_g = clustering.gather_G(assignment, V, lead=lead)
    R_intra = intra_attention(Q_g, K_g, V_g, tau, config.attention, key_valid=valid)
    del Q_g, K_g
    R_inter, weights = cluster_summaries(A_k, phi, assignment, V_g, tau_k, config.attention, lead=lead,
                                         member_valid=valid)
    del V_g
    M = membership_mask_tensor(assignment, A_q.dtype, lead)
    R, A_sum = mix(A_q, phi, M, assignment, R_intra, R_inter, tau_q, config.attention, lead=lead)
    if not keep:
        return R, None
    return R, dict(R_intra=R_intra, summary_weights=weights, R_inter=R_inter, A_sum=A_sum)


def membership_mask_tensor(assignment: ClusterAssignment, dtype, lead: int = 0) -> Tensor:
    m = clustering.membership_mask(assignment)
    b = assignment.batch_dims
    return Tensor(m.reshape(m.shape[:b] + (1,) * lead + m.shape[b:]), dtype=dtype)


def _prepare_input(X, params: CastParams, config: CastConfig) -> Tensor:
    if not isinstance(X, Tensor):
        X = Tensor(np.asarray(X), dtype=params.dtype)
    if X.dtype != params.dtype:
        raise TypeError(f"input dtype {X.dtype} does not match parameter dtype {params.dtype}")
    if X.ndim < 2:
        raise ShapeError(f"input must be (..., N, d), got {X.shape}")
    if X.shape[-1] != config.d:
        raise ShapeError(f"input width {X.shape[-1]} does not match d={config.d}")
    config.check_length(X.shape[-2])
    return X


def forward(X, params: CastParams, config: CastConfig, keep_intermediates: bool = True):
    """Run the single-head layer; returns ``(O, CastIntermediates | None)``."""
    if config.heads != 1:
        raise ValueError("forward is single-head; use castattn.multihead.mh_forward for heads > 1")
    X = _prepare_input(X, params, config)
    params.validate(config)
    keep = keep_intermediates
    n = X.shape[-2]
    n_pad = config.padded_length(n)
    Xp = ops.pad_rows(X, n_pad) if n_pad > n else X

    Q, K, V = project_qkv(Xp, params)
    A_q, A_k = surrogate_affinities(Q, K, params.S)
    phi = gate(Xp, params)
    A_g = combined_affinity(A_q, A_k, phi, config.attention)
    assignment = assign_clusters(A_g, config, n)
    if not keep:
        del A_g  # only the clustering reads it
    R, parts = cluster_attend(Q, K, V, A_q, A_k, phi, assignment, config, n, keep=keep)
    if not keep:
        del Q, K, V, A_q, A_k, phi
    Rn = ops.slice_rows(R, 0, n) if n_pad > n else R
    O = Rn @ params.W_o
    if not keep:
        return O, None
    return O, CastIntermediates(n_tokens=n, n_padded=n_pad, A_q=A_q, A_k=A_k, phi=phi, A_g=A_g,
                                assignment=assignment, R=R, **parts)
