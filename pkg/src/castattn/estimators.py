"""scikit-learn compatible wrappers around the clustering-attention layer."""

from __future__ import annotations

import math

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .config import CastConfig
from .core import PARAM_NAMES, CastParams, forward, init_params
from .kernel import ops
from .kernel.serialization import dump_tensors, load_tensors
from .kernel.tensor import NonFiniteError, Tape, Tensor, backward
from .multihead import mh_forward
from .validation import check_binary_labels, check_sequences, resolve_dtype


class _CastLayerMixin:
    def _layer_config(self, n_tokens: int, d: int) -> CastConfig:
        size = self.cluster_size if self.cluster_size is not None else math.ceil(n_tokens / self.n_clusters)
        return CastConfig(d=d, n_clusters=self.n_clusters, cluster_size=size, heads=self.n_heads,
                          attention=self.attention, mechanism=self.mechanism,
                          tau=getattr(self, "tau", None), tau_q=getattr(self, "tau_q", None),
                          tau_k=getattr(self, "tau_k", None))

    def _run_layer(self, X, params: CastParams, keep: bool = False):
        config = self._layer_config(X.shape[-2], X.shape[-1])
        layer = forward if config.heads == 1 else mh_forward
        return layer(X, params, config, keep_intermediates=keep)


class CASTAttention(_CastLayerMixin, TransformerMixin, BaseEstimator):
    """Clustering self-attention as a transformer: ``(N, d)`` or ``(B, N, d)`` in, same shape out.

    ``fit`` only initialises parameters from ``random_state`` (the width is
    taken from ``X``); use :meth:`load_weights` to install trained weights.

    Parameters
    ----------
    n_clusters : int
        Number of surrogate tokens / clusters.
    cluster_size : int, optional
        Tokens per cluster; defaults to ``ceil(N / n_clusters)`` at transform time.
    n_heads : int
    mechanism : {"topk", "satopk"}
    attention : {"softmax", "laplace"}
    tau, tau_q, tau_k : float, optional
        Temperatures; ``None`` means ``sqrt(d / n_heads)``.
    dtype : {"float32", "float64"}
    random_state : int
    """

    def __init__(self, n_clusters=16, cluster_size=None, n_heads=1, mechanism="topk", attention="softmax",
                 tau=None, tau_q=None, tau_k=None, dtype="float32", random_state=0):
        self.n_clusters = n_clusters
        self.cluster_size = cluster_size
        self.n_heads = n_heads
        self.mechanism = mechanism
        self.attention = attention
        self.tau = tau
        self.tau_q = tau_q
        self.tau_k = tau_k
        self.dtype = dtype
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_sequences(X, dtype=self.dtype)
        d = X.shape[-1]
        config = self._layer_config(X.shape[-2], d)
        self.params_ = init_params(config, seed=self.random_state, dtype=resolve_dtype(self.dtype))
        self.n_features_in_ = d
        return self

    def transform(self, X):
        check_is_fitted(self, "params_")
        X = check_sequences(X, dtype=self.dtype, d=self.n_features_in_)
        O, _ = self._run_layer(X, self.params_)
        return O.numpy()

    def cluster_assignments(self, X) -> np.ndarray:
        """Token indices per cluster, shape ``(..., n_clusters, cluster_size)``."""
        return self.inspect(X).assignment.indices

    def inspect(self, X):
        """Forward pass returning the intermediate tensors."""
        check_is_fitted(self, "params_")
        X = check_sequences(X, dtype=self.dtype, d=self.n_features_in_)
        _, inter = self._run_layer(X, self.params_, keep=True)
        return inter

    def save_weights(self, path) -> None:
        check_is_fitted(self, "params_")
        records = dict(self.params_.arrays())
        records["h"] = np.array(float(self.n_heads))
        dump_tensors(records, path)

    def load_weights(self, path):
        arrays = load_tensors(path)
        if "h" in arrays and int(arrays["h"]) != self.n_heads:
            raise ValueError(f"weights were saved with {int(arrays['h'])} heads, estimator has {self.n_heads}")
        self.params_ = CastParams.from_arrays(arrays, dtype=resolve_dtype(self.dtype))
        self.n_features_in_ = self.params_.d
        return self


class DenseAttention(TransformerMixin, BaseEstimator):
    """Quadratic softmax self-attention with the same parameterisation (baseline)."""

    def __init__(self, n_heads=1, dtype="float32", random_state=0):
        self.n_heads = n_heads
        self.dtype = dtype
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_sequences(X, dtype=self.dtype)
        d = X.shape[-1]
        config = CastConfig(d=d, n_clusters=1, cluster_size=X.shape[-2], heads=self.n_heads)
        self.params_ = init_params(config, seed=self.random_state, dtype=resolve_dtype(self.dtype))
        self.n_features_in_ = d
        return self

    def transform(self, X):
        from .verification import dense_attention_oracle

        check_is_fitted(self, "params_")
        X = check_sequences(X, dtype=self.dtype, d=self.n_features_in_)
        return dense_attention_oracle(X, self.params_, heads=self.n_heads).numpy()


class CASTClassifier(_CastLayerMixin, ClassifierMixin, BaseEstimator):
    """Binary sequence classifier: clustering attention, mean pooling, linear head.

    Trained with full-batch gradient descent on the logistic loss.
    """

    def __init__(self, n_clusters=4, cluster_size=None, n_heads=1, mechanism="topk", attention="softmax",
                 learning_rate=0.5, max_iter=500, dtype="float32", random_state=0):
        self.n_clusters = n_clusters
        self.cluster_size = cluster_size
        self.n_heads = n_heads
        self.mechanism = mechanism
        self.attention = attention
        self.learning_rate = learning_rate
        self.max_iter = max_iter
        self.dtype = dtype
        self.random_state = random_state

    def _logits(self, X: Tensor, params: CastParams, w: Tensor, b: Tensor) -> Tensor:
        O, _ = self._run_layer(X, params)
        return ops.mean(O, axis=-2) @ w + b

    def fit(self, X, y):
        X = check_sequences(X, dtype=self.dtype, allow_single=False)
        self.classes_, target = check_binary_labels(y, X.shape[0])
        dtype = resolve_dtype(self.dtype)
        d = X.shape[-1]
        arrays = init_params(self._layer_config(X.shape[-2], d), seed=self.random_state, dtype=dtype).arrays()
        arrays = {k: v.copy() for k, v in arrays.items()}
        arrays["w"] = np.zeros((d, 1), dtype=dtype)
        arrays["b"] = np.zeros(1, dtype=dtype)
        Xt = Tensor(X)
        lr = dtype.type(self.learning_rate)
        self.loss_curve_ = []
        for step in range(self.max_iter):
            leaves = {k: Tensor(v, requires_grad=True, name=k) for k, v in arrays.items()}
            params = CastParams(**{k: leaves[k] for k in PARAM_NAMES})
            try:
                with Tape() as tape:
                    loss = ops.bce_with_logits(self._logits(Xt, params, leaves["w"], leaves["b"]), target)
                grads = backward(tape, output=loss)
            except NonFiniteError as exc:
                raise RuntimeError(f"training diverged at step {step}") from exc
            self.loss_curve_.append(loss.item())
            for k, t in leaves.items():
                g = grads.get(t)
                if g is not None:
                    arrays[k] = arrays[k] - lr * g.data
            if not all(np.isfinite(a).all() for a in arrays.values()):
                raise RuntimeError(f"training diverged at step {step}")
        self.params_ = CastParams.from_arrays(arrays, dtype=dtype)
        self.coef_ = arrays["w"].reshape(-1)
        self.intercept_ = arrays["b"].copy()
        self.n_features_in_ = d
        return self

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "params_")
        X = check_sequences(X, dtype=self.dtype, d=self.n_features_in_, allow_single=False)
        w = Tensor(self.coef_.reshape(-1, 1))
        b = Tensor(self.intercept_)
        return self._logits(Tensor(X), self.params_, w, b).data.reshape(-1).copy()

    def predict_proba(self, X) -> np.ndarray:
        p = 1.0 / (1.0 + np.exp(-self.decision_function(X).astype(np.float64)))
        return np.stack([1 - p, p], axis=1)

    def predict(self, X) -> np.ndarray:
        return self.classes_[(self.decision_function(X) > 0).astype(int)]
