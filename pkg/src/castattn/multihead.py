"""Multi-head clustering attention.

Queries, keys, values and surrogate tokens are split into ``heads`` slices of
width ``d // heads``. Per-head surrogate scores are summed over heads to form a
single affinity ``A_g``, so all heads share one clustering; the intra-cluster,
summary and mixing steps then run per head, and the head outputs are
concatenated (head 0 first) before the output projection.
"""

from __future__ import annotations

from .config import CastConfig
from .core import (
    CastIntermediates,
    CastParams,
    _prepare_input,
    assign_clusters,
    attention_fn,
    cluster_attend,
    gate,
    project_qkv,
)
from .kernel import ops
from .kernel.tensor import ShapeError, Tensor


def split_heads(x: Tensor, heads: int) -> Tensor:
    """``(..., N, d) -> (..., heads, N, d // heads)``."""
    *lead, n, d = x.shape
    if d % heads:
        raise ShapeError(f"width {d} not divisible by {heads} heads")
    y = ops.reshape(x, tuple(lead) + (n, heads, d // heads))
    k = len(lead)
    return ops.permute(y, tuple(range(k)) + (k + 1, k, k + 2))


def merge_heads(x: Tensor) -> Tensor:
    """Inverse of :func:`split_heads`."""
    *lead, h, n, dh = x.shape
    k = len(lead)
    y = ops.permute(x, tuple(range(k)) + (k + 1, k, k + 2))
    return ops.reshape(y, tuple(lead) + (n, h * dh))


def surrogate_heads(S: Tensor, heads: int) -> Tensor:
    """Surrogates as ``(heads, N_c, d_h)``."""
    if S.ndim == 2:
        n_c, d = S.shape
        S = ops.reshape(S, (n_c, heads, d // heads))
    if S.shape[1] != heads:
        raise ShapeError(f"surrogates {S.shape} do not have {heads} heads")
    return ops.permute(S, (1, 0, 2))


def head_scores(Qh: Tensor, Kh: Tensor, Sh: Tensor):
    """Per-head surrogate scores ``(..., heads, N, N_c)``."""
    St = ops.swap_last(Sh)
    return Qh @ St, Kh @ St


def mh_affinity(A_q: Tensor, A_k: Tensor, phi: Tensor, attention: str = "softmax") -> Tensor:
    """Affinity from per-head scores ``(..., heads, N, N_c)`` summed over heads."""
    if A_q.shape != A_k.shape:
        raise ShapeError(f"A_q {A_q.shape} and A_k {A_k.shape} differ")
    head_axis = A_q.ndim - 3
    s = ops.sigmoid(phi)
    q = attention_fn(ops.sum(A_q, axis=head_axis), attention)
    k = attention_fn(ops.sum(A_k, axis=head_axis), attention)
    return s * q + ops.one_minus(s) * k


def mh_forward(X, params: CastParams, config: CastConfig, keep_intermediates: bool = True):
    """Multi-head layer; returns ``(O, CastIntermediates | None)``.

    Intermediates carry per-head tensors (head axis before the token axis).
    """
    X = _prepare_input(X, params, config)
    params.validate(config)
    h = config.heads
    n = X.shape[-2]
    n_pad = config.padded_length(n)
    Xp = ops.pad_rows(X, n_pad) if n_pad > n else X

    Q, K, V = project_qkv(Xp, params)
    Qh, Kh, Vh = split_heads(Q, h), split_heads(K, h), split_heads(V, h)
    del Q, K, V
    A_q, A_k = head_scores(Qh, Kh, surrogate_heads(params.S, h))
    phi = gate(Xp, params)
    A_g = mh_affinity(A_q, A_k, phi, config.attention)
    phi_h = ops.reshape(phi, phi.shape[:-2] + (1,) + phi.shape[-2:])
    assignment = assign_clusters(A_g, config, n)
    if not keep_intermediates:
        del A_g
    R, parts = cluster_attend(Qh, Kh, Vh, A_q, A_k, phi_h, assignment, config, n, lead=1,
                              keep=keep_intermediates)
    R = merge_heads(R)
    Rn = ops.slice_rows(R, 0, n) if n_pad > n else R
    O = Rn @ params.W_o
    if not keep_intermediates:
        return O, None
    return O, CastIntermediates(n_tokens=n, n_padded=n_pad, A_q=A_q, A_k=A_k, phi=phi, A_g=A_g,
                                assignment=assignment, R=R, **parts)

