"""Acceptance criteria, one test each.

Every test appends a PASS/FAIL line (with the measured values) that is printed
in the pytest terminal summary, then asserts the same condition.
"""
import time

import numpy as np
import pytest

from castattn import bench, clustering
from castattn.bench import DENSE, FORWARD
from castattn.cli import main
from castattn.config import CastConfig
from castattn.core import (
    assign_clusters,
    cluster_attend,
    combined_affinity,
    forward,
    gate,
    init_params,
    project_qkv,
    surrogate_affinities,
)
from castattn.kernel import Tape, Tensor, backward, corrupted_adjoint, ops
from castattn.multihead import mh_forward
from castattn.verification import (
    cast_gradcheck,
    dense_attention_oracle,
    naive_cast_oracle,
    reference_cluster,
    toy_overfit,
)
from conftest import ACCEPTANCE_LINES

MECHANISMS = ("topk", "satopk")


def report(number, title, ok, detail, elapsed, budget):
    ok = bool(ok) and elapsed < budget
    ACCEPTANCE_LINES.append(f"{'PASS' if ok else 'FAIL'} [{number:2d}] {title}: {detail}; "
                            f"{elapsed:.1f}s (budget {budget:g}s)")
    print(ACCEPTANCE_LINES[-1])
    return ok


def test_01_single_cluster_collapse():
    t0 = time.perf_counter()
    config = CastConfig(d=32, n_clusters=1, cluster_size=64)
    worst = 0.0
    for seed in range(10):
        params = init_params(config, seed=seed)
        X = np.random.default_rng(seed).standard_normal((64, 32)).astype(np.float32)
        O, _ = forward(X, params, config)
        assert O.dtype == np.float32
        worst = max(worst, float(np.abs(O.data - dense_attention_oracle(X, params).data).max()))
    assert report(1, "single-cluster collapse", worst <= 1e-5, f"max abs diff {worst:.2e} (tol 1e-5)",
                  time.perf_counter() - t0, 5)


def test_02_oracle_equivalence():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    worst = 0.0
    count = 0
    for heads in (1, 4):
        for mech in MECHANISMS:
            config = CastConfig(d=16, n_clusters=4, cluster_size=32, heads=heads, mechanism=mech)
            layer = forward if heads == 1 else mh_forward
            for _ in range(20):
                params = init_params(config, seed=int(rng.integers(2**31)))
                X = rng.standard_normal((128, 16)).astype(np.float32)
                O, _ = layer(X, params, config)
                worst = max(worst, float(np.abs(O.data - naive_cast_oracle(X, params, config)).max()))
                count += 1
    assert report(2, "vectorized forward vs loop oracle", worst <= 1e-5,
                  f"{count} instances, max abs diff {worst:.2e} (tol 1e-5)", time.perf_counter() - t0, 30)


def test_03_clustering_oracles():
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    mismatches = {m: 0 for m in MECHANISMS}
    not_partition = 0
    for _ in range(100):
        A = rng.random((64, 8))
        for mech in MECHANISMS:
            fast = clustering.cluster(A, 8, mech).indices
            if not np.array_equal(fast, reference_cluster(A, 8, mech).indices):
                mismatches[mech] += 1
            if mech == "satopk":
                ok = np.array_equal(np.sort(fast.reshape(-1)), np.arange(64)) and fast.shape == (8, 8)
                not_partition += not ok
    ok = not any(mismatches.values()) and not_partition == 0
    assert report(3, "clustering vs reference transcriptions", ok,
                  f"mismatches {mismatches}, partition violations {not_partition} of 100",
                  time.perf_counter() - t0, 5)


def test_04_gradient_correctness():
    t0 = time.perf_counter()
    worst, control = 0.0, np.inf
    for mech in MECHANISMS:
        config = CastConfig(d=8, n_clusters=4, cluster_size=4, mechanism=mech)
        reports = cast_gradcheck(config, 16, seed=0, step=1e-5)
        assert {r.name for r in reports} == {"X", "W_q", "W_k", "W_v", "W_o", "S", "W_phi", "b_phi"}
        assert all(r.stable and r.dtype == "float64" for r in reports)
        worst = max(worst, max(r.max_rel_err for r in reports))
        with corrupted_adjoint("matmul"):
            control = min(control, max(r.max_rel_err for r in cast_gradcheck(config, 16, seed=0, step=1e-5)))
    ok = worst <= 1e-4 and control > 1e-2
    assert report(4, "gradient check", ok,
                  f"max rel err {worst:.2e} (tol 1e-4), corrupted adjoint {control:.2e} (> 1e-2)",
                  time.perf_counter() - t0, 120)


def _value_gradient(config, seed, token):
    """Gradient of ``sum(R[token])`` with respect to the value rows, plus the clustering."""
    rng = np.random.default_rng(seed)
    params = init_params(config, seed=seed, dtype=np.float64)
    X = Tensor(rng.standard_normal((config.n_clusters * config.cluster_size, config.d)), dtype=np.float64)
    Q, K, V = project_qkv(X, params)
    V = Tensor(V.data, requires_grad=True)
    with Tape() as tape:
        A_q, A_k = surrogate_affinities(Q, K, params.S)
        phi = gate(X, params)
        assignment = assign_clusters(combined_affinity(A_q, A_k, phi, config.attention), config, X.shape[0])
        R, _ = cluster_attend(Q, K, V, A_q, A_k, phi, assignment, config, X.shape[0], keep=False)
        loss = ops.sum(ops.slice_rows(R, token, token + 1))
    return backward(tape, output=loss)[V].data, assignment.indices


def test_05_cross_cluster_gradient_flow():
    t0 = time.perf_counter()
    smallest = np.inf
    checked = 0
    for mech in MECHANISMS:
        config = CastConfig(d=16, n_clusters=4, cluster_size=16, mechanism=mech)
        for seed in range(10):
            token = seed % 64
            grad, indices = _value_gradient(config, seed, token)
            others = [c for c in range(config.n_clusters) if token not in indices[c]]
            assert others
            for c in others:
                smallest = min(smallest, float(np.linalg.norm(grad[indices[c]], axis=1).min()))
                checked += 1
    assert report(5, "cross-cluster gradient flow", smallest > 1e-8,
                  f"{checked} foreign clusters, smallest value-row grad norm {smallest:.2e} (> 1e-8)",
                  time.perf_counter() - t0, 10)


@pytest.fixture(scope="module")
def length_sweep():
    t0 = time.perf_counter()
    recs = bench.sweep_sequence_lengths((DENSE, "topk"), Ns=(1024, 2048, 4096), kappa=200, reps=5)
    return recs, time.perf_counter() - t0


def test_06_complexity_scaling(length_sweep):
    recs, elapsed = length_sweep
    Ns = [1024, 2048, 4096]
    times = {m: [r.median_seconds for r in recs if r.mechanism == m] for m in (DENSE, "topk")}
    dense_slope = bench.loglog_slope(Ns, times[DENSE])
    cast_slope = bench.loglog_slope(Ns, times["topk"])
    ratio = times[DENSE][-1] / times["topk"][-1]
    ok = dense_slope >= 1.7 and cast_slope <= 1.4 and ratio >= 3
    assert report(6, "time scaling", ok,
                  f"dense slope {dense_slope:.2f} (>= 1.7), clustered slope {cast_slope:.2f} (<= 1.4), "
                  f"dense/clustered at N=4096 {ratio:.2f} (>= 3)", elapsed, 600)


def test_07_memory_scaling():
    t0 = time.perf_counter()
    worst_model = 0.0
    ratios = {}
    for phase in bench.PHASES:
        recs = bench.sweep_sequence_lengths((DENSE, "topk"), Ns=(4096,), kappa=200, d=64, reps=1, warmup=0,
                                            phase=phase)
        for r in recs:
            model = bench.analytic_peak(r.mechanism, phase, r.N, r.d, r.Nc, r.kappa)
            worst_model = max(worst_model, abs(r.peak_elements - model) / model)
        ratios[phase] = recs[1].peak_elements / recs[0].peak_elements
    ok = max(ratios.values()) <= 0.35 and worst_model <= 0.2
    detail = ", ".join(f"{p} ratio {v:.3f}" for p, v in ratios.items())
    assert report(7, "memory scaling", ok, f"{detail} (<= 0.35), worst analytic model error {worst_model:.1%} "
                  "(<= 20%)", time.perf_counter() - t0, 300)


def test_08_memory_minimum_location():
    t0 = time.perf_counter()
    counts = (4, 8, 16, 32, 64)
    recs = bench.sweep_cluster_counts(N=4096, counts=counts, reps=1, warmup=0)
    peaks = {r.Nc: r.peak_elements for r in recs}
    best = min(peaks, key=peaks.get)
    assert report(8, "memory minimum at N_c=16", best == 16,
                  f"argmin N_c={best}, peaks {peaks}", time.perf_counter() - t0, 300)


def test_09_mechanism_speed_ordering():
    t0 = time.perf_counter()
    recs = bench.sweep_cluster_sizes(N=4096, kappas=(32, 64, 128, 256, 512), reps=5)
    by = {(r.mechanism, r.kappa): r.median_seconds for r in recs}
    pairs = {k: (by[("topk", k)], by[("satopk", k)]) for k in (32, 64, 128, 256, 512)}
    ok = all(t <= s for t, s in pairs.values())
    detail = ", ".join(f"k={k} {t * 1e3:.1f}/{s * 1e3:.1f}ms" for k, (t, s) in pairs.items())
    assert report(9, "TopK not slower than SATopK", ok, detail, time.perf_counter() - t0, 600)


def test_10_toy_overfit():
    t0 = time.perf_counter()
    accs = {}
    for mech in MECHANISMS:
        config = CastConfig(d=16, n_clusters=4, cluster_size=16, mechanism=mech)
        accs[mech] = [toy_overfit(config, seed=s, steps=500) for s in range(5)]
    hits = {m: sum(a >= 0.95 for a in v) for m, v in accs.items()}
    ok = all(h >= 4 for h in hits.values())
    assert report(10, "toy motif overfit", ok,
                  f"seeds with train acc >= 0.95: {hits} (>= 4 of 5), accuracies {accs}",
                  time.perf_counter() - t0, 300)


def test_11_determinism(tmp_path):
    t0 = time.perf_counter()
    same = True
    for mech in MECHANISMS:
        args = ["cluster-map", "--N", "1024", "--Nc", "16", "--seed", "7", "--mechanism", mech]
        codes = [main([*args, "--out", str(tmp_path / f"{mech}{i}")]) for i in range(2)]
        files = sorted(p.name for p in (tmp_path / f"{mech}0").glob("*.pgm"))
        same &= codes == [0, 0] and len(files) == 2 * 17
        same &= all((tmp_path / f"{mech}0" / f).read_bytes() == (tmp_path / f"{mech}1" / f).read_bytes()
                    for f in files)
    recs = bench.sweep_sequence_lengths((DENSE, "topk"), Ns=(256,), kappa=64, d=16, reps=1, warmup=0)
    for i in range(2):
        bench.write_report(recs, tmp_path / f"b{i}.csv")
    for suffix in (".csv", ".json", "_ratios.csv"):
        same &= (tmp_path / f"b0{suffix}").read_bytes() == (tmp_path / f"b1{suffix}").read_bytes()
    assert report(11, "determinism", same, "cluster maps and bench reports byte-identical" if same
                  else "outputs differ", time.perf_counter() - t0, 60)
