import numpy as np
import pytest
from scipy import special

from castattn import core
from castattn.config import CastConfig
from castattn.core import CastParams, forward, init_params
from castattn.kernel import ShapeError, Tensor
from castattn.multihead import merge_heads, mh_affinity, mh_forward, split_heads
from castattn.verification import dense_attention_oracle, naive_cast_oracle

F64 = np.float64


def test_split_merge_round_trip(rng):
    x = Tensor(rng.standard_normal((2, 5, 12)), dtype=F64)
    h = split_heads(x, 3)
    assert h.shape == (2, 3, 5, 4)
    np.testing.assert_array_equal(h.data[1, 2], x.data[1, :, 8:12])
    np.testing.assert_array_equal(merge_heads(h).data, x.data)


def test_split_requires_divisible():
    with pytest.raises(ShapeError):
        split_heads(Tensor(np.ones((3, 10))), 4)


class TestAffinity:
    def test_one_head_reduces_to_single_head(self, rng):
        A_q, A_k, phi = rng.standard_normal((6, 3)), rng.standard_normal((6, 3)), rng.standard_normal((6, 1))
        multi = mh_affinity(Tensor(A_q[None], dtype=F64), Tensor(A_k[None], dtype=F64), Tensor(phi, dtype=F64))
        single = core.combined_affinity(Tensor(A_q, dtype=F64), Tensor(A_k, dtype=F64), Tensor(phi, dtype=F64))
        np.testing.assert_array_equal(multi.data, single.data)

    def test_identical_heads_double_scores(self, rng):
        A_q, A_k, phi = rng.standard_normal((6, 3)), rng.standard_normal((6, 3)), rng.standard_normal((6, 1))
        two = mh_affinity(Tensor(np.stack([A_q, A_q]), dtype=F64), Tensor(np.stack([A_k, A_k]), dtype=F64),
                          Tensor(phi, dtype=F64)).data
        s = special.expit(phi)
        ref = s * special.softmax(2 * A_q, axis=1) + (1 - s) * special.softmax(2 * A_k, axis=1)
        np.testing.assert_allclose(two, ref, rtol=1e-12)

    def test_rows_sum_to_one(self, rng):
        out = mh_affinity(Tensor(rng.standard_normal((4, 7, 3))), Tensor(rng.standard_normal((4, 7, 3))),
                          Tensor(rng.standard_normal((7, 1)))).data
        np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-6)


class TestForward:
    def test_one_head_bit_identical(self, rng):
        config = CastConfig(d=8, n_clusters=2, cluster_size=8)
        params = init_params(config, seed=5)
        X = rng.standard_normal((16, 8)).astype(np.float32)
        np.testing.assert_array_equal(mh_forward(X, params, config)[0].data, forward(X, params, config)[0].data)

    @pytest.mark.parametrize("heads", [2, 4])
    def test_single_cluster_is_multihead_dense(self, rng, heads):
        config = CastConfig(d=16, n_clusters=1, cluster_size=20, heads=heads)
        params = init_params(config, seed=0)
        X = rng.standard_normal((20, 16)).astype(np.float32)
        O, _ = mh_forward(X, params, config)
        np.testing.assert_allclose(O.data, dense_attention_oracle(X, params, heads=heads).data, atol=1e-5)

    @pytest.mark.parametrize("mechanism", ["topk", "satopk"])
    @pytest.mark.parametrize("attention", ["softmax", "laplace"])
    @pytest.mark.parametrize("n", [32, 27])
    def test_matches_per_head_oracle(self, rng, mechanism, attention, n):
        config = CastConfig(d=16, n_clusters=4, cluster_size=8, heads=4, mechanism=mechanism, attention=attention)
        params = init_params(config, seed=1, dtype=F64)
        X = rng.standard_normal((n, 16))
        O, _ = mh_forward(X, params, config)
        np.testing.assert_allclose(O.data, naive_cast_oracle(X, params, config), atol=1e-10)

    def test_shared_clustering(self, rng):
        config = CastConfig(d=8, n_clusters=2, cluster_size=6, heads=2)
        params = init_params(config, seed=2)
        _, inter = mh_forward(rng.standard_normal((12, 8)).astype(np.float32), params, config)
        assert inter.assignment.indices.shape == (2, 6)
        assert inter.A_q.shape == (2, 12, 2)
        assert inter.R_intra.shape == (2, 2, 6, 4)

    def test_accepts_flat_or_split_surrogates(self, rng):
        config = CastConfig(d=8, n_clusters=2, cluster_size=6, heads=2)
        p = init_params(config, seed=3, dtype=F64)
        flat = CastParams.from_arrays({**p.arrays(), "S": p.S.data.reshape(2, 8)}, dtype=F64)
        X = rng.standard_normal((12, 8))
        np.testing.assert_array_equal(mh_forward(X, p, config)[0].data, mh_forward(X, flat, config)[0].data)

    def test_batch(self, rng):
        config = CastConfig(d=8, n_clusters=3, cluster_size=4, heads=2, mechanism="satopk")
        params = init_params(config, seed=4, dtype=F64)
        X = rng.standard_normal((2, 11, 8))
        O, _ = mh_forward(X, params, config, keep_intermediates=False)
        for b in range(2):
            np.testing.assert_allclose(O.data[b], mh_forward(X[b], params, config)[0].data, atol=1e-12)
