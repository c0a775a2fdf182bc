"""Wall-clock and peak-memory measurements of the clustering layer against dense attention.

Memory is reported in live tensor elements from the kernel's allocation
meter, so numbers are deterministic and independent of the allocator.
Timings run single-threaded unless ``threads`` says otherwise; the meter is
process-global, so benchmarks must not run concurrently.
"""

from __future__ import annotations

import csv
import json
import math
import os
import statistics
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .config import CastConfig
from .core import CastParams, forward, init_params
from .kernel.tensor import METER, Tape, Tensor, backward
from .multihead import mh_forward
from .verification import dense_attention_oracle

DENSE = "dense"
FORWARD = "forward"
TRAIN = "forward+backward"
PHASES = (FORWARD, TRAIN)
CSV_HEADER = ("mechanism", "phase", "N", "d", "h", "Nc", "kappa", "reps", "median_seconds", "peak_elements")
RATIO_HEADER = ("mechanism", "phase", "N", "d", "h", "Nc", "kappa", "speed_ratio", "memory_ratio")


@dataclass(frozen=True)
class BenchRecord:
    """One measured configuration. A failed run has ``median_seconds = nan``
    and ``peak_elements = -1``."""

    mechanism: str
    phase: str
    N: int
    d: int
    h: int
    Nc: int
    kappa: int
    reps: int
    median_seconds: float
    peak_elements: int

    @property
    def failed(self) -> bool:
        return math.isnan(self.median_seconds)

    def key(self) -> tuple:
        return (self.phase, self.N, self.d, self.h)


def threads_from_env(default: int = 0) -> Optional[int]:
    """Thread cap from ``CAST_THREADS``; 0 (the default) means one thread."""
    raw = os.environ.get("CAST_THREADS", str(default))
    try:
        n = int(raw)
    except ValueError as exc:
        raise ValueError(f"CAST_THREADS must be an integer, got {raw!r}") from exc
    if n < 0:
        raise ValueError("CAST_THREADS must be non-negative")
    return max(n, 1)


class _Workload:
    """Seeded inputs for one configuration; built outside the timed region."""

    def __init__(self, config: CastConfig, n: int, phase: str, dense: bool, seed: int, dtype):
        rng = np.random.default_rng(seed)
        arrays = init_params(config, seed=seed, dtype=dtype).arrays()
        self.train = phase == TRAIN
        self.params = CastParams.from_arrays(arrays, dtype=dtype, requires_grad=self.train)
        self.X = Tensor(rng.standard_normal((n, config.d)), dtype=dtype)
        self.cotangent = rng.standard_normal((n, config.d)).astype(dtype) if self.train else None
        self.config = config
        self.dense = dense

    def _layer(self):
        if self.dense:
            return dense_attention_oracle(self.X, self.params, heads=self.config.heads)
        run = forward if self.config.heads == 1 else mh_forward
        O, _ = run(self.X, self.params, self.config, keep_intermediates=False)
        return O

    def run(self) -> None:
        if not self.train:
            self._layer()
            return
        with Tape() as tape:
            O = self._layer()
        backward(tape, output_grad=self.cotangent, output=O)


def time_config(config: CastConfig, N: int, reps: int = 5, *, phase: str = FORWARD, dense: bool = False,
                warmup: int = 2, seed: int = 0, dtype=np.float32, threads: Optional[int] = 1) -> BenchRecord:
    """Median wall time over ``reps`` runs and the peak live elements of one run.

    ``dense=True`` times the quadratic baseline with the same width and heads;
    the cluster fields of ``config`` are then ignored.
    """
    return time_interleaved([(config, dense)], N, reps, phase=phase, warmup=warmup, seed=seed, dtype=dtype,
                            threads=threads)[0]


def time_interleaved(cases: Sequence[tuple], N: int, reps: int = 5, *, phase: str = FORWARD, warmup: int = 2,
                     seed: int = 0, dtype=np.float32, threads: Optional[int] = 1) -> list[BenchRecord]:
    """Time several ``(config, dense)`` cases round-robin, one repetition each per round.

    Interleaving exposes every case to the same machine drift, which matters
    when comparing configurations whose costs are close.
    """
    if reps < 1 or warmup < 0:
        raise ValueError("reps must be positive and warmup non-negative")
    if phase not in PHASES:
        raise ValueError(f"phase must be one of {PHASES}, got {phase!r}")
    for config, dense in cases:
        if not dense:
            config.check_length(N)
    works, times, peaks = [], [], []
    for config, dense in cases:
        try:
            works.append(_Workload(config, N, phase, dense, seed, dtype))
        except MemoryError:
            works.append(None)
        times.append([])
        peaks.append(0)
    with threadpool_limits(limits=threads):
        for rnd in range(warmup + reps):
            for i, work in enumerate(works):
                if work is None:
                    continue
                try:
                    METER.reset_peak()
                    t0 = time.perf_counter()
                    work.run()
                    elapsed = time.perf_counter() - t0
                except MemoryError:
                    works[i] = None
                    continue
                if rnd >= warmup:
                    times[i].append(elapsed)
                    peaks[i] = max(peaks[i], METER.peak_live_elements())
    records = []
    for (config, dense), work, ts, peak in zip(cases, works, times, peaks):
        ok = work is not None and len(ts) == reps
        nc, kappa = (1, N) if dense else (config.n_clusters, config.cluster_size)
        records.append(BenchRecord(DENSE if dense else config.mechanism, phase, N, config.d, config.heads, nc, kappa,
                                   reps, _round9(statistics.median(ts)) if ok else math.nan,
                                   int(peak) if ok else -1))
    return records


def _round9(x: float) -> float:
    # Reports keep 9 significant digits; rounding here makes CSV round trips exact.
    return float(f"{x:.9g}")


def _cast_config(N: int, d: int, h: int, mechanism: str, n_clusters: int = None, kappa: int = None,
                 attention: str = "softmax") -> CastConfig:
    if kappa is None:
        kappa = -(-N // n_clusters)
    if n_clusters is None:
        n_clusters = -(-N // kappa)
    return CastConfig(d=d, n_clusters=n_clusters, cluster_size=kappa, heads=h, mechanism=mechanism,
                      attention=attention)


def sweep_sequence_lengths(mechanisms: Sequence[str] = (DENSE, "topk"), Ns: Sequence[int] = (1024, 2048, 3072, 4096),
                           kappa: int = 200, d: int = 64, h: int = 1, phase: str = FORWARD, reps: int = 5,
                           **kw) -> list[BenchRecord]:
    """Fixed cluster size, ``N_c = ceil(N / kappa)`` per length."""
    records = []
    for N in Ns:
        cases = [(_cast_config(N, d, h, "topk", n_clusters=1), True) if mech == DENSE
                 else (_cast_config(N, d, h, mech, kappa=min(kappa, N)), False) for mech in mechanisms]
        records += time_interleaved(cases, N, reps, phase=phase, **kw)
    return records


def sweep_cluster_sizes(N: int = 4096, kappas: Sequence[int] = (32, 64, 128, 256, 512),
                        mechanisms: Sequence[str] = ("topk", "satopk"), d: int = 64, h: int = 1,
                        phase: str = FORWARD, reps: int = 5, **kw) -> list[BenchRecord]:
    """Vary ``kappa`` at fixed ``N`` with ``N_c = ceil(N / kappa)``."""
    records = []
    for k in kappas:
        cases = [(_cast_config(N, d, h, mech, kappa=k), False) for mech in mechanisms]
        records += time_interleaved(cases, N, reps, phase=phase, **kw)
    return records


def sweep_cluster_counts(N: int = 4096, counts: Sequence[int] = (4, 8, 16, 32, 64), mechanism: str = "topk",
                         d: int = 64, h: int = 1, phase: str = FORWARD, reps: int = 5, **kw) -> list[BenchRecord]:
    """Vary ``N_c`` at fixed ``N`` with ``kappa = ceil(N / N_c)``."""
    return [time_config(_cast_config(N, d, h, mechanism, n_clusters=c), N, reps, phase=phase, **kw)
            for c in counts]


def inference_vs_training(mechanism: str = "topk", Ns: Sequence[int] = (1024, 2048, 4096), kappa: int = 200,
                          d: int = 64, h: int = 1, reps: int = 5, **kw) -> list[BenchRecord]:
    """Dense and clustering records for both phases at each length."""
    records = []
    for phase in PHASES:
        records += sweep_sequence_lengths((DENSE, mechanism), Ns, kappa=kappa, d=d, h=h, phase=phase, reps=reps,
                                          **kw)
    return records


def ratios(records: Iterable[BenchRecord]) -> list[dict]:
    """Speed (dense time / time) and memory (peak / dense peak) per clustering record."""
    records = list(records)
    dense = {r.key(): r for r in records if r.mechanism == DENSE}
    rows = []
    for r in records:
        base = dense.get(r.key())
        if r.mechanism == DENSE or base is None:
            continue
        ok = not (r.failed or base.failed)
        rows.append(dict(mechanism=r.mechanism, phase=r.phase, N=r.N, d=r.d, h=r.h, Nc=r.Nc, kappa=r.kappa,
                         speed_ratio=base.median_seconds / r.median_seconds if ok else math.nan,
                         memory_ratio=r.peak_elements / base.peak_elements if ok else math.nan))
    return rows


def loglog_slope(Ns: Sequence[float], values: Sequence[float]) -> float:
    """Least-squares slope of ``log(values)`` against ``log(Ns)``."""
    return float(np.polyfit(np.log(np.asarray(Ns, float)), np.log(np.asarray(values, float)), 1)[0])


# -- analytic peak model -----------------------------------------------------------


def analytic_peak(mechanism: str, phase: str, N: int, d: int, Nc: int = 1, kappa: int = None, h: int = 1) -> int:
    """Predicted peak live elements for the single-head softmax layer.

    Parameters and the input are always live. The remaining terms count the
    tensors alive at the layer's high-water mark. The candidates are the
    intra-cluster attention and the mixing step (two moments of it in the
    forward-only phase); the largest one is returned. ``n`` is the padded
    length and ``m = Nc * kappa`` the number of cluster slots.
    """
    if h != 1:
        raise ValueError("the analytic model covers the single-head layer")
    if phase not in PHASES:
        raise ValueError(f"phase must be one of {PHASES}, got {phase!r}")
    base = 4 * d * d + Nc * d + d + 1 + N * d
    if mechanism == DENSE:
        if phase == FORWARD:
            return base + 3 * N * d + 2 * N * N
        return base + 7 * N * d + d * d + 4 * N * N
    kappa = N if kappa is None else kappa
    m = Nc * kappa
    n = N if mechanism == "topk" else m
    padded = n > N
    if phase == FORWARD:
        intra = 3 * n * d + 2 * n * Nc + n + 4 * m * d + 2 * m * kappa + (m * kappa + m if padded else 0)
        mixing = (4 if padded else 3) * n * d + 6 * n * Nc + m * Nc + m * d + Nc * d + n + m
        # the final sum of intra and inter contributions, with both addends live
        mix_end = (7 if padded else 6) * n * d + 5 * n * Nc + m * d + Nc * d + n + m
        return base + max(intra, mixing, mix_end)
    mixing = (9 * n * d + 6 * m * d + 3 * m * kappa + 16 * n * Nc + 2 * m * Nc + 7 * n + 4 * m
              + d * d + 3 * Nc * d + 2 * Nc * Nc + (N * d + m * kappa + 3 * m if padded else 0))
    intra = (N * d + 4 * n * d + 7 * m * d + (5 if padded else 4) * m * kappa + 9 * n * Nc + 5 * n
             + (m if padded else 0) + d * d + Nc * d)
    return base + max(mixing, intra)


# -- reports -----------------------------------------------------------------------


def _fmt(value) -> str:
    if isinstance(value, float):
        return "nan" if math.isnan(value) else f"{value:.9g}"
    return str(value)


def ratios_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + "_ratios.csv")


def write_report(records: Sequence[BenchRecord], path) -> None:
    """Write ``path`` (CSV), the same records as JSON next to it, and a ratios CSV."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in records:
            w.writerow([_fmt(getattr(r, k)) for k in CSV_HEADER])
    with open(path.with_suffix(".json"), "w") as fh:
        json.dump([{k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in asdict(r).items()}
                   for r in records], fh, indent=1)
        fh.write("\n")
    with open(ratios_path(path), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RATIO_HEADER)
        for row in ratios(records):
            w.writerow([_fmt(row[k]) for k in RATIO_HEADER])


def read_report(path) -> list[BenchRecord]:
    """Parse a CSV written by :func:`write_report`."""
    types = {f.name: f.type for f in fields(BenchRecord)}
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_HEADER:
            raise ValueError(f"unexpected header {reader.fieldnames}")
        for row in reader:
            kw = {}
            for k, v in row.items():
                t = types[k]
                kw[k] = int(v) if t == "int" else float(v) if t == "float" else v
            out.append(BenchRecord(**kw))
    return out
