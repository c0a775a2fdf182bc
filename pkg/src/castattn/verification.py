"""Reference oracles and checkers.

Everything here is deliberately slow and literal: loops over tokens and
clusters in float64, with no use of the vectorised gather/scatter or the
optimised clustering routines. The fast path is tested against these.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence

import numpy as np
from scipy import special

from . import clustering
from .clustering import SATOPK, TOPK, ClusterAssignment
from .config import CastConfig
from .core import PARAM_NAMES, CastParams, forward, init_params
from .kernel import ops
from .kernel.tensor import Tape, Tensor, backward
from .multihead import merge_heads, mh_forward, split_heads


class UnstableAssignmentError(RuntimeError):
    """A finite-difference probe changed the cluster assignment."""


# -- dense baseline --------------------------------------------------------------


def dense_attention_oracle(X, params: CastParams, tau: Optional[float] = None, heads: int = 1) -> Tensor:
    """Full softmax self-attention followed by ``W_o``.

    Built from kernel primitives so it is differentiable and metered; it
    materialises the ``N x N`` score matrix per head.
    """
    if not isinstance(X, Tensor):
        X = Tensor(np.asarray(X), dtype=params.dtype)
    d = X.shape[-1]
    tau = math.sqrt(d // heads) if tau is None else tau
    Q, K, V = X @ params.W_q, X @ params.W_k, X @ params.W_v
    if heads == 1:
        P = ops.softmax(ops.scale(Q @ ops.swap_last(K), 1.0 / tau), axis=-1)
        return (P @ V) @ params.W_o
    Qh, Kh, Vh = split_heads(Q, heads), split_heads(K, heads), split_heads(V, heads)
    del Q, K, V
    P = ops.softmax(ops.scale(Qh @ ops.swap_last(Kh), 1.0 / tau), axis=-1)
    return merge_heads(P @ Vh) @ params.W_o


# -- literal clustering transcriptions --------------------------------------------


def topk_reference(A, kappa: int) -> ClusterAssignment:
    """Per-cluster top-kappa by explicit sorting of ``(-score, index)`` keys."""
    A = np.asarray(A, dtype=np.float64)
    n, n_c = A.shape
    clusters = []
    for c in range(n_c):
        ranked = sorted(range(n), key=lambda t: (-A[t, c], t))
        clusters.append(ranked[:kappa])
    return ClusterAssignment(n, n_c, kappa, np.array(clusters, dtype=np.int64).reshape(n_c, kappa), TOPK)


def sa_topk_reference(A, kappa: int) -> ClusterAssignment:
    """Single-assignment clustering written out with an assignment mask.

    On outer pass ``i`` every unassigned token, visited in descending order
    of its best score, tries its ``i``-th preferred cluster.
    """
    A = np.asarray(A, dtype=np.float64)
    n, n_c = A.shape
    # sort_2: each token's clusters from highest to lowest score
    I_c = [sorted(range(n_c), key=lambda c: (-A[t, c], c)) for t in range(n)]
    A_c = [[A[t, c] for c in I_c[t]] for t in range(n)]
    # sort_1: tokens from highest to lowest best score
    I_r = sorted(range(n), key=lambda t: (-A_c[t][0], t))
    C = [[] for _ in range(n_c)]
    M = [0] * n
    for i in range(n_c):
        for j in range(n):
            j_token = I_r[j]
            i_cluster = I_c[j_token][i]
            if M[j_token] == 1 or len(C[i_cluster]) == kappa:
                continue
            C[i_cluster].append(j_token)
            M[j_token] = 1
    if not all(M):
        raise ValueError("some tokens could not be placed")
    idx = np.full((n_c, kappa), -1, dtype=np.int64)
    for c, members in enumerate(C):
        idx[c, : len(members)] = members
    return ClusterAssignment(n, n_c, kappa, idx, SATOPK)


def reference_cluster(A, kappa: int, mechanism: str) -> ClusterAssignment:
    return topk_reference(A, kappa) if mechanism == TOPK else sa_topk_reference(A, kappa)


# -- loop transcription of the layer ------------------------------------------------


def _f_vec(x: np.ndarray, kind: str) -> np.ndarray:
    if kind == "softmax":
        e = np.exp(x - x.max())
        return e / e.sum()
    return 0.5 * (1.0 + special.erf((x - math.sqrt(0.5)) / (math.sqrt(1 / (4 * math.pi)) * math.sqrt(2))))


def _sigmoid(x: float) -> float:
    return 1.0 / (1.0 + math.exp(-x))


def _phi1(x: float) -> float:
    return math.log1p(math.exp(x)) + 1.0 if x < 30 else x + 1.0


def naive_cast_oracle(X, params, config: CastConfig, return_assignment: bool = False):
    """Token-by-token float64 evaluation of the layer for one ``(N, d)`` sequence."""
    X = np.asarray(X, dtype=np.float64)
    P = {k: np.asarray(v, dtype=np.float64) for k, v in
         (params.arrays() if isinstance(params, CastParams) else params).items()}
    n, d = X.shape
    h, dh, n_c = config.heads, config.head_dim, config.n_clusters
    kind = config.attention
    tau, tau_q, tau_k = config.temperatures()
    S = P["S"].reshape(n_c, h, dh)

    Q = np.array([[X[i] @ P["W_q"][:, c] for c in range(d)] for i in range(n)])
    K = np.array([[X[i] @ P["W_k"][:, c] for c in range(d)] for i in range(n)])
    V = np.array([[X[i] @ P["W_v"][:, c] for c in range(d)] for i in range(n)])
    phi = [float(X[i] @ P["W_phi"][:, 0] + P["b_phi"][0]) for i in range(n)]

    def head(M, hh):
        return M[:, hh * dh:(hh + 1) * dh]

    A_q = np.zeros((h, n, n_c))
    A_k = np.zeros((h, n, n_c))
    for hh in range(h):
        for i in range(n):
            for c in range(n_c):
                A_q[hh, i, c] = head(Q, hh)[i] @ S[c, hh]
                A_k[hh, i, c] = head(K, hh)[i] @ S[c, hh]
    A_g = np.zeros((n, n_c))
    for i in range(n):
        s = _sigmoid(phi[i])
        A_g[i] = s * _f_vec(A_q[:, i, :].sum(axis=0), kind) + (1 - s) * _f_vec(A_k[:, i, :].sum(axis=0), kind)

    assign = reference_cluster(A_g, config.cluster_size, config.mechanism)
    members = [[int(t) for t in row if t >= 0] for row in assign.indices]

    R = np.zeros((n, d))
    for hh in range(h):
        q, k, v = head(Q, hh), head(K, hh), head(V, hh)
        R_intra = {}
        R_inter = np.zeros((n_c, dh))
        for j, mem in enumerate(members):
            for i in mem:
                w = _f_vec(np.array([q[i] @ k[t] / tau for t in mem]), kind)
                R_intra[(j, i)] = sum(w[s] * v[t] for s, t in enumerate(mem))
            if mem:
                logits = np.array([A_k[hh, t, j] * _phi1(-phi[t]) / tau_k for t in mem])
                w = _f_vec(logits, kind)
                R_inter[j] = sum(w[s] * v[t] for s, t in enumerate(mem))
        for i in range(n):
            a_sum = _f_vec(A_q[hh, i, :] * _phi1(phi[i]) / tau_q, kind)
            out = np.zeros(dh)
            for j, mem in enumerate(members):
                if i in mem:
                    out += a_sum[j] * R_intra[(j, i)]
                else:
                    out += a_sum[j] * R_inter[j]
            R[i, hh * dh:(hh + 1) * dh] = out
    O = np.array([[R[i] @ P["W_o"][:, c] for c in range(d)] for i in range(n)])
    return (O, assign) if return_assignment else O


# -- finite differences ----------------------------------------------------------


@dataclass
class GradCheckReport:
    name: str
    max_rel_err: float
    step: float
    dtype: str
    stable: bool
    n_coords: int = 0

    def to_json(self) -> str:
        return json.dumps({"name": self.name, "max_rel_err": self.max_rel_err, "step": self.step,
                           "stable": self.stable})


def write_reports(reports: Sequence[GradCheckReport], path) -> None:
    Path(path).write_text("".join(r.to_json() + "\n" for r in reports))


def fd_gradcheck(fn: Callable, point: Mapping[str, np.ndarray], names: Optional[Sequence[str]] = None,
                 step: float = 1e-5, n_coords: int = 64, seed: int = 0, atol: float = 1e-6,
                 strict: bool = True) -> list:
    """Compare tape gradients of a scalar function with central differences.

    ``fn`` maps ``{name: Tensor}`` to ``(loss, signature)`` where ``loss`` is a
    scalar tensor and ``signature`` is a :class:`ClusterAssignment` (or
    ``None``) used to detect probes that cross a clustering boundary. Up to
    ``n_coords`` coordinates per tensor are probed (all of them if fewer).
    The relative error per coordinate is ``|a - n| / max(|a|, |n|, atol)``.
    """
    point = {k: np.asarray(v, dtype=np.float64) for k, v in point.items()}
    names = list(point) if names is None else list(names)
    rng = np.random.default_rng(seed)

    leaves = {k: Tensor(v, dtype=np.float64, requires_grad=k in names, name=k) for k, v in point.items()}
    with Tape() as tape:
        loss, base_sig = fn(leaves)
    grads = backward(tape, output=loss)
    analytic = {k: (grads[leaves[k]].data if leaves[k] in grads else np.zeros_like(point[k])) for k in names}
    del tape, grads, leaves

    def evaluate(k, flat_i, delta):
        arrays = dict(point)
        a = point[k].copy()
        a.reshape(-1)[flat_i] += delta
        arrays[k] = a
        loss, sig = fn({n: Tensor(v, dtype=np.float64, name=n) for n, v in arrays.items()})
        return loss.item(), sig

    reports = []
    for k in names:
        size = point[k].size
        coords = np.arange(size) if size <= n_coords else np.sort(rng.choice(size, n_coords, replace=False))
        worst, stable = 0.0, True
        for ci in coords:
            fp, sp = evaluate(k, ci, step)
            fm, sm = evaluate(k, ci, -step)
            if base_sig is not None and not (base_sig.same_membership(sp) and base_sig.same_membership(sm)):
                stable = False
                if strict:
                    raise UnstableAssignmentError(f"probe on {k}[{ci}] changed the cluster assignment")
            num = (fp - fm) / (2 * step)
            a = float(analytic[k].reshape(-1)[ci])
            err = abs(a - num) / max(abs(a), abs(num), atol)
            worst = max(worst, err)
        reports.append(GradCheckReport(k, worst, step, "float64", stable, len(coords)))
    return reports


def cast_gradcheck(config: CastConfig, n_tokens: int, seed: int = 0, step: float = 1e-5, n_coords: int = 64,
                   max_resamples: int = 10) -> list:
    """Gradient check of the whole layer w.r.t. ``X`` and all seven parameters.

    The loss is ``sum(O * C)`` for a fixed random ``C``. Base points whose
    assignment flips under a probe are resampled up to ``max_resamples`` times.
    """
    layer = forward if config.heads == 1 else mh_forward
    last = None
    for attempt in range(max_resamples):
        rng = np.random.default_rng([seed, attempt])
        params = init_params(config, seed=int(rng.integers(2**31)), dtype=np.float64)
        point = {"X": rng.normal(size=(n_tokens, config.d))}
        point.update({k: v.copy() for k, v in params.arrays().items()})
        point["b_phi"] = rng.normal(scale=0.5, size=1)
        C = Tensor(rng.normal(size=(n_tokens, config.d)), dtype=np.float64)

        def fn(t):
            p = CastParams(**{k: t[k] for k in PARAM_NAMES})
            O, inter = layer(t["X"], p, config)
            return ops.sum(O * C), inter.assignment

        try:
            return fd_gradcheck(fn, point, ["X", *PARAM_NAMES], step=step, n_coords=n_coords, seed=seed)
        except UnstableAssignmentError as exc:
            last = exc
    raise UnstableAssignmentError(f"no stable base point after {max_resamples} attempts") from last


# -- toy training task -------------------------------------------------------------


def motif_dataset(n_samples: int = 256, length: int = 64, d: int = 16, motif_len: int = 4, noise: float = 1.0,
                  seed: int = 0):
    """Noise sequences with one of two planted motifs; the label says which.

    Both motifs are fixed random token sequences of ``motif_len`` rows, planted
    at a random offset. Labels are balanced.
    """
    rng = np.random.default_rng(seed)
    motifs = rng.normal(scale=2.0, size=(2, motif_len, d))
    X = rng.normal(scale=noise, size=(n_samples, length, d))
    y = np.arange(n_samples) % 2
    rng.shuffle(y)
    for i in range(n_samples):
        start = rng.integers(0, length - motif_len + 1)
        X[i, start:start + motif_len] = motifs[y[i]]
    return X.astype(np.float32), y


def toy_overfit(config: CastConfig, seed: int = 0, steps: int = 500, learning_rate: float = 0.5,
                n_samples: int = 256, length: int = 64) -> float:
    """Train a clustering-attention classifier on :func:`motif_dataset`; return train accuracy."""
    from .estimators import CASTClassifier

    X, y = motif_dataset(n_samples=n_samples, length=length, d=config.d, seed=seed)
    clf = CASTClassifier(n_clusters=config.n_clusters, cluster_size=config.cluster_size, n_heads=config.heads,
                         mechanism=config.mechanism, attention=config.attention, learning_rate=learning_rate,
                         max_iter=steps, random_state=seed)
    clf.fit(X, y)
    return clf.score(X, y)
