"""Token clustering from a cluster-affinity matrix.

Two mechanisms turn scores ``A_g`` of shape ``(..., N, N_c)`` into
``N_c`` clusters of ``kappa`` token indices each:

* ``topk``: every cluster independently takes its ``kappa`` highest-scoring
  tokens, so a token may land in several clusters or in none.
* ``satopk``: single assignment. Tokens are visited in descending order of
  their best score over several passes; on pass ``p`` each still-unplaced
  token tries its ``p``-th preferred cluster and is placed if that cluster has
  room.

Ties always resolve towards the lowest token (or cluster) index.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .kernel import ops
from .kernel.tensor import Tensor

TOPK = "topk"
SATOPK = "satopk"
MECHANISMS = (TOPK, SATOPK)


@dataclass(frozen=True)
class ClusterAssignment:
    """Cluster membership produced by a clustering mechanism.

    ``indices`` has shape ``(*batch, n_clusters, cluster_size)``; entries are
    token positions in ``[0, n_tokens)`` listed in the order they were placed.
    An entry of ``-1`` marks an empty slot (only possible for ``satopk`` when
    ``n_clusters * cluster_size > n_tokens``).
    """

    n_tokens: int
    n_clusters: int
    cluster_size: int
    indices: np.ndarray
    mechanism: str
    _row_indices: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    @property
    def batch_shape(self) -> tuple:
        return self.indices.shape[:-2]

    @property
    def batch_dims(self) -> int:
        return self.indices.ndim - 2

    @property
    def complete(self) -> bool:
        return bool((self.indices >= 0).all())

    def clusters(self) -> list:
        """Per-cluster index lists for a single (unbatched) assignment."""
        if self.batch_dims:
            raise ValueError("clusters() is only defined for unbatched assignments")
        return [[int(i) for i in row if i >= 0] for row in self.indices]

    def membership_mask(self) -> np.ndarray:
        return membership_mask(self)

    def same_membership(self, other: "ClusterAssignment") -> bool:
        """True when both assign identical token sets to every cluster."""
        return self.indices.shape == other.indices.shape and np.array_equal(
            np.sort(self.indices, axis=-1), np.sort(other.indices, axis=-1)
        )


def _scores(A_g) -> np.ndarray:
    a = A_g.data if isinstance(A_g, Tensor) else np.asarray(A_g)
    if a.ndim < 2:
        raise ValueError(f"affinity matrix must be at least 2-D, got shape {a.shape}")
    if not np.isfinite(a).all():
        raise ValueError("affinity matrix contains non-finite values")
    return a


def topk_cluster(A_g, kappa: int) -> ClusterAssignment:
    """Per-cluster top-``kappa`` selection over the token axis."""
    a = _scores(A_g)
    n, n_c = a.shape[-2:]
    if kappa > n:
        raise ValueError(f"cluster size {kappa} exceeds sequence length {n}")
    if kappa < 1:
        raise ValueError("cluster size must be positive")
    idx = ops.topk_indices(a, kappa, axis=-2)
    return ClusterAssignment(n, n_c, kappa, np.ascontiguousarray(np.swapaxes(idx, -1, -2)), TOPK)


def sa_topk_cluster(A_g, kappa: int) -> ClusterAssignment:
    """Greedy single-assignment clustering.

    One stable sort orders the tokens by their maximum score; each pass then
    resolves all placements at once, since within a pass tokens only compete
    with earlier tokens that want the same cluster.
    """
    a = _scores(A_g)
    n, n_c = a.shape[-2:]
    if kappa < 1:
        raise ValueError("cluster size must be positive")
    if n_c * kappa < n:
        raise ValueError(f"{n_c} clusters of size {kappa} cannot hold {n} tokens")
    batch = a.shape[:-2]
    flat = a.reshape((-1, n, n_c))
    nb = flat.shape[0]

    pref = ops.argsort_desc(flat, axis=-1)
    order = ops.argsort_desc(flat.max(axis=-1), axis=-1)

    out = np.full((nb * n_c, kappa), -1, dtype=np.int64)
    fill = np.zeros(nb * n_c, dtype=np.int64)
    placed = np.zeros((nb, n), dtype=bool)
    for p in range(n_c):
        waiting = ~np.take_along_axis(placed, order, axis=1)
        bb, pos = np.nonzero(waiting)
        if bb.size == 0:
            break
        tok = order[bb, pos]
        key = bb * n_c + pref[bb, tok, p]
        s = np.argsort(key, kind="stable")
        ks = key[s]
        rank = np.arange(ks.size) - np.searchsorted(ks, ks, side="left")
        ok = rank < kappa - fill[ks]
        acc = s[ok]
        out[ks[ok], fill[ks[ok]] + rank[ok]] = tok[acc]
        placed[bb[acc], tok[acc]] = True
        fill += np.bincount(key[acc], minlength=nb * n_c)
    return ClusterAssignment(n, n_c, kappa, out.reshape(batch + (n_c, kappa)), SATOPK)


def cluster(A_g, kappa: int, mechanism: str) -> ClusterAssignment:
    if mechanism == TOPK:
        return topk_cluster(A_g, kappa)
    if mechanism == SATOPK:
        return sa_topk_cluster(A_g, kappa)
    raise ValueError(f"unknown clustering mechanism {mechanism!r}; expected one of {MECHANISMS}")


def fill_empty_slots(assign: ClusterAssignment, n_total: int) -> ClusterAssignment:
    """Put padding tokens ``n_tokens .. n_total-1`` into the empty slots, in slot order.

    Real tokens keep the placement they got without padding; padding only
    occupies capacity nobody else claimed.
    """
    n_real = assign.n_tokens
    flat = assign.indices.reshape(-1, assign.n_clusters * assign.cluster_size).copy()
    empty = flat < 0
    if (empty.sum(axis=1) != n_total - n_real).any():
        raise ValueError(f"empty slots do not match the {n_total - n_real} padding tokens")
    flat[empty] = np.tile(np.arange(n_real, n_total), flat.shape[0])
    idx = flat.reshape(assign.indices.shape)
    return ClusterAssignment(n_total, assign.n_clusters, assign.cluster_size,
                             idx, assign.mechanism)


def _row_index(assign: ClusterAssignment, lead_shape: tuple) -> ops.RowIndex:
    """Row index for tensors with ``lead_shape`` axes between batch and tokens; cached per layout."""
    ri = assign._row_indices.get(lead_shape)
    if ri is None:
        if not assign.complete:
            raise ValueError("assignment has empty slots; pad the sequence to n_clusters * cluster_size")
        idx = assign.indices
        b = assign.batch_dims
        if lead_shape:
            idx = idx.reshape(idx.shape[:b] + (1,) * len(lead_shape) + idx.shape[b:])
            idx = np.broadcast_to(idx, assign.batch_shape + lead_shape + assign.indices.shape[b:])
        ri = ops.RowIndex(idx, assign.n_tokens, b + len(lead_shape))
        assign._row_indices[lead_shape] = ri
    return ri


def _check_batch(assign: ClusterAssignment, shape: tuple) -> None:
    if tuple(shape[:assign.batch_dims]) != assign.batch_shape:
        raise ValueError(f"tensor batch shape {shape[:assign.batch_dims]} does not match assignment "
                         f"{assign.batch_shape}")


def gather_G(assign: ClusterAssignment, x: Tensor, lead: int = 0) -> Tensor:
    """Group token rows into clusters: ``(*B, *H, N, *F) -> (*B, *H, N_c, kappa, *F)``.

    ``lead`` counts axes (e.g. heads) between the batch axes and the token
    axis that share the same assignment.
    """
    _check_batch(assign, x.shape)
    b = assign.batch_dims
    if x.ndim < b + lead + 1 or x.shape[b + lead] != assign.n_tokens:
        raise ValueError(f"tensor of shape {x.shape} does not have {assign.n_tokens} tokens on axis {b + lead}")
    return ops.gather_rows(x, _row_index(assign, tuple(x.shape[b:b + lead])), batch_dims=b + lead)


def scatter_Ginv(assign: ClusterAssignment, y: Tensor, n_tokens: int = None, lead: int = 0) -> Tensor:
    """Return clustered rows to token positions, summing duplicates.

    Tokens that belong to no cluster receive zero rows.
    """
    n_tokens = assign.n_tokens if n_tokens is None else n_tokens
    if n_tokens != assign.n_tokens:
        raise ValueError(f"assignment covers {assign.n_tokens} tokens, not {n_tokens}")
    _check_batch(assign, y.shape)
    b = assign.batch_dims
    if tuple(y.shape[b + lead: b + lead + 2]) != (assign.n_clusters, assign.cluster_size):
        raise ValueError(
            f"expected clustered extents {(assign.n_clusters, assign.cluster_size)} at axis {b + lead}, got {y.shape}"
        )
    return ops.scatter_add_rows(n_tokens, _row_index(assign, tuple(y.shape[b:b + lead])), y, batch_dims=b + lead)


def membership_mask(assign: ClusterAssignment) -> np.ndarray:
    """Indicator ``M[..., i, j] = 1`` iff token ``i`` is in cluster ``j``."""
    idx = assign.indices
    b = assign.batch_dims
    nb = int(np.prod(assign.batch_shape)) if b else 1
    flat = idx.reshape(nb, assign.n_clusters, assign.cluster_size)
    m = np.zeros((nb, assign.n_tokens, assign.n_clusters), dtype=np.uint8)
    bb, cc, ss = np.nonzero(flat >= 0)
    m[bb, flat[bb, cc, ss], cc] = 1
    return m.reshape(assign.batch_shape + (assign.n_tokens, assign.n_clusters))
