"""Command-line interface: ``castattn {bench,verify,gradcheck,cluster-map}``.

Exit codes: 0 success, 1 invalid configuration, 2 a check failed, 3 I/O error.
Set ``CAST_THREADS`` to cap BLAS threads (0, the default, means one).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import bench, clustering
from .config import CastConfig, ConfigError
from .core import PARAM_NAMES, CastParams, forward, init_params
from .kernel import ops
from .kernel.serialization import FormatError, dump_tensors, load_tensors
from .kernel.tensor import Tensor
from .multihead import mh_forward
from .validation import resolve_dtype
from .verification import (
    cast_gradcheck,
    dense_attention_oracle,
    naive_cast_oracle,
    reference_cluster,
    write_reports,
)

EXIT_OK, EXIT_CONFIG, EXIT_CHECK, EXIT_IO = 0, 1, 2, 3
GRAD_TOL = 1e-4
EQUIV_TOL = 1e-5
VERIFY_MAX_N = 128
GRADCHECK_MAX_N = 32


class UsageError(Exception):
    """Bad flags or configuration; maps to exit code 1."""


@dataclass
class RunConfig:
    """Everything a subcommand needs. Defaults describe a 2-layer, 2-head, width-128 image model."""

    d: int = 128
    n_clusters: int = 16
    cluster_size: Optional[int] = None
    heads: int = 2
    attention: str = "softmax"
    mechanism: str = "topk"
    tau: Optional[float] = None
    tau_q: Optional[float] = None
    tau_k: Optional[float] = None
    N: int = 1024
    layers: int = 2
    seed: int = 0
    dtype: str = "f32"
    out: str = "cast_out"
    Ns: list = field(default_factory=lambda: [1024, 2048, 3072, 4096])
    kappas: list = field(default_factory=lambda: [32, 64, 128, 256, 512])
    bench_kappa: int = 200
    reps: int = 5
    width: Optional[int] = None
    height: Optional[int] = None

    @property
    def kappa(self) -> int:
        return self.cluster_size if self.cluster_size is not None else math.ceil(self.N / self.n_clusters)

    def layer_config(self, n: Optional[int] = None, **changes) -> CastConfig:
        """Layer config for sequence length ``n`` (default ``N``)."""
        n = self.N if n is None else n
        kappa = self.cluster_size if self.cluster_size is not None else math.ceil(n / self.n_clusters)
        kw = dict(d=self.d, n_clusters=self.n_clusters, cluster_size=kappa, heads=self.heads,
                  attention=self.attention, mechanism=self.mechanism, tau=self.tau, tau_q=self.tau_q,
                  tau_k=self.tau_k)
        kw.update(changes)
        return CastConfig(**kw)

    def validate(self) -> "RunConfig":
        try:
            for name in ("N", "layers", "reps", "bench_kappa"):
                if not isinstance(getattr(self, name), int) or getattr(self, name) < 1:
                    raise ConfigError(f"{name} must be a positive integer")
            if not isinstance(self.seed, int) or self.seed < 0:
                raise ConfigError("seed must be a non-negative integer")
            resolve_dtype(self.dtype)
            for name in ("Ns", "kappas"):
                vals = getattr(self, name)
                if not isinstance(vals, list) or not vals or not all(isinstance(v, int) and v > 0 for v in vals):
                    raise ConfigError(f"{name} must be a non-empty list of positive integers")
            config = self.layer_config()
            config.check_length(self.N)
        except (ConfigError, ValueError, TypeError) as exc:
            raise UsageError(str(exc)) from exc
        return self


FIELD_NAMES = tuple(f.name for f in dataclasses.fields(RunConfig))


def _int_list(text: str) -> list:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="flat JSON file with RunConfig fields")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--N", type=int, dest="N", help="sequence length")
    common.add_argument("--Nc", type=int, dest="n_clusters", help="number of clusters")
    common.add_argument("--kappa", type=int, dest="cluster_size", help="cluster size (default ceil(N/Nc))")
    common.add_argument("--d", type=int, dest="d", help="model width")
    common.add_argument("--heads", type=int)
    common.add_argument("--layers", type=int)
    common.add_argument("--mechanism", choices=clustering.MECHANISMS)
    common.add_argument("--attn", dest="attention", choices=("softmax", "laplace"))
    common.add_argument("--dtype", choices=("f32", "f64"))
    common.add_argument("--Ns", type=_int_list, dest="Ns", help="sequence lengths, comma separated")
    common.add_argument("--kappas", type=_int_list, dest="kappas", help="cluster sizes, comma separated")
    common.add_argument("--reps", type=int)

    parser = _Parser(prog="castattn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("bench", parents=[common], help="time and memory sweeps against dense attention")
    sub.add_parser("verify", parents=[common], help="oracle equivalence checks")
    g = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    g.add_argument("--corrupt-adjoint", metavar="OP", choices=sorted(ops.DIFFERENTIABLE_OPS),
                   help="scale the adjoint of kernel op OP (negative control)")
    c = sub.add_parser("cluster-map", parents=[common], help="write cluster and score maps as PGM images")
    c.add_argument("--width", type=int)
    c.add_argument("--height", type=int)
    c.add_argument("--weights", help="weights file written by a previous run")
    c.add_argument("--input", help="raw 8-bit grayscale grid, width*height bytes")
    return parser


def parse_config(path: Optional[str] = None, overrides: Optional[dict] = None) -> RunConfig:
    """Defaults, then the JSON file, then ``overrides`` (flags); validated."""
    values = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise OSError(f"cannot read config file {path}: {exc.strerror}") from exc
        try:
            loaded = json.loads(text) if text.strip() else {}
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(loaded, dict):
            raise UsageError("config file must hold a flat JSON object")
        unknown = sorted(set(loaded) - set(FIELD_NAMES))
        if unknown:
            raise UsageError(f"unknown config keys {unknown}; valid keys are {list(FIELD_NAMES)}")
        values.update(loaded)
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    try:
        cfg = RunConfig(**values)
    except TypeError as exc:
        raise UsageError(str(exc)) from exc
    return cfg.validate()


# -- bench -------------------------------------------------------------------------


def cmd_bench(cfg: RunConfig) -> int:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    threads = bench.threads_from_env()
    lengths = []
    for phase in bench.PHASES:
        lengths += bench.sweep_sequence_lengths((bench.DENSE, cfg.mechanism), cfg.Ns, kappa=cfg.bench_kappa,
                                                d=cfg.d, h=cfg.heads, phase=phase, reps=cfg.reps,
                                                seed=cfg.seed, threads=threads)
    sizes = []
    for phase in bench.PHASES:
        sizes += bench.sweep_cluster_sizes(max(cfg.Ns), cfg.kappas, clustering.MECHANISMS, d=cfg.d, h=cfg.heads,
                                           phase=phase, reps=cfg.reps, seed=cfg.seed, threads=threads)
    bench.write_report(lengths, out / "bench_lengths.csv")
    bench.write_report(sizes, out / "bench_cluster_sizes.csv")
    print(f"{'mechanism':>9} {'phase':>16} {'N':>6} {'Nc':>4} {'kappa':>5} {'speed':>7} {'memory':>7}")
    for row in bench.ratios(lengths):
        print(f"{row['mechanism']:>9} {row['phase']:>16} {row['N']:>6} {row['Nc']:>4} {row['kappa']:>5} "
              f"{row['speed_ratio']:7.2f} {row['memory_ratio']:7.3f}")
    failed = [r for r in lengths + sizes if r.failed]
    for r in failed:
        print(f"failed: {r.mechanism} {r.phase} N={r.N} (out of memory)")
    print(f"wrote {len(lengths) + len(sizes)} records to {out}")
    return EXIT_OK


# -- verify ------------------------------------------------------------------------


def _check(name: str, value: float, tol: float, **extra) -> dict:
    return dict(name=name, value=float(value), tol=tol, passed=bool(value <= tol), **extra)


def _layer(config: CastConfig):
    return forward if config.heads == 1 else mh_forward


def verify_checks(cfg: RunConfig) -> list:
    """Equivalence checks at a short length derived from ``cfg``."""
    n = min(cfg.N, VERIFY_MAX_N)
    rng = np.random.default_rng(cfg.seed)
    checks = []

    # One cluster holding every token is exactly dense attention.
    single = cfg.layer_config(n, n_clusters=1, cluster_size=n, attention="softmax", tau=None)
    params = init_params(single, seed=cfg.seed)
    X = rng.standard_normal((n, cfg.d)).astype(np.float32)
    O, _ = _layer(single)(X, params, single, keep_intermediates=False)
    dense = dense_attention_oracle(X, params, heads=cfg.heads)
    checks.append(_check("single_cluster_vs_dense", np.abs(O.data - dense.data).max(), EQUIV_TOL, N=n))

    config = cfg.layer_config(n)
    worst = 0.0
    for i in range(3):
        p64 = init_params(config, seed=cfg.seed + i, dtype=np.float64)
        Xi = rng.standard_normal((n, cfg.d))
        O, _ = _layer(config)(Xi, p64, config, keep_intermediates=False)
        worst = max(worst, float(np.abs(O.data - naive_cast_oracle(Xi, p64, config)).max()))
    checks.append(_check("forward_vs_loop_oracle", worst, EQUIV_TOL, N=n, mechanism=config.mechanism))

    for mech in clustering.MECHANISMS:
        kappa = math.ceil(n / cfg.n_clusters)
        mismatches = 0
        for _ in range(10):
            A = rng.random((n, cfg.n_clusters))
            fast = clustering.cluster(A, kappa, mech)
            if not np.array_equal(fast.indices, reference_cluster(A, kappa, mech).indices):
                mismatches += 1
        checks.append(_check(f"{mech}_vs_reference", mismatches, 0, N=n))

    kappa = math.ceil(n / cfg.n_clusters)
    bad = 0
    for _ in range(10):
        idx = clustering.sa_topk_cluster(rng.random((n, cfg.n_clusters)), kappa).indices
        real = np.sort(idx[idx >= 0])
        if not np.array_equal(real, np.arange(n)):
            bad += 1
    checks.append(_check("satopk_partition", bad, 0, N=n))
    return checks


def cmd_verify(cfg: RunConfig) -> int:
    checks = verify_checks(cfg)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    passed = all(c["passed"] for c in checks)
    (out / "verify.json").write_text(json.dumps({"passed": passed, "checks": checks}, indent=1) + "\n")
    for c in checks:
        print(f"{'PASS' if c['passed'] else 'FAIL'} {c['name']}: {c['value']:.3g} (tol {c['tol']:g})")
    return EXIT_OK if passed else EXIT_CHECK


# -- gradcheck ---------------------------------------------------------------------


def cmd_gradcheck(cfg: RunConfig, corrupt: Optional[str] = None) -> int:
    n = min(cfg.N, GRADCHECK_MAX_N)
    config = cfg.layer_config(n)
    if corrupt:
        with ops.corrupted_adjoint(corrupt):
            reports = cast_gradcheck(config, n, seed=cfg.seed)
    else:
        reports = cast_gradcheck(config, n, seed=cfg.seed)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    write_reports(reports, out / "gradcheck.jsonl")
    ok = True
    for r in reports:
        good = r.max_rel_err <= GRAD_TOL
        ok &= good
        print(f"{'PASS' if good else 'FAIL'} {r.name}: max rel err {r.max_rel_err:.2e} over {r.n_coords} coords")
    return EXIT_OK if ok else EXIT_CHECK


# -- cluster maps ------------------------------------------------------------------


def write_pgm(path, image: np.ndarray) -> None:
    """Binary P5 greymap, max value 255."""
    image = np.asarray(image)
    if image.ndim != 2 or image.dtype != np.uint8:
        raise ValueError("PGM images must be 2-D uint8")
    h, w = image.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + image.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if len(parts) < 5 or parts[0] != b"P5" or parts[3] != b"255":
        raise ValueError(f"{path} is not a binary PGM with max value 255")
    w, h = int(parts[1]), int(parts[2])
    pixels = data[len(data) - w * h:]
    return np.frombuffer(pixels, dtype=np.uint8).reshape(h, w)


def grid_shape(n: int, width: Optional[int], height: Optional[int]) -> tuple:
    if width is None and height is None:
        side = math.isqrt(n)
        if side * side != n:
            raise UsageError(f"N={n} is not a perfect square; pass --width and --height")
        return side, side
    if width is None or height is None or width * height != n:
        raise UsageError(f"--width and --height must both be given with width * height = N ({n})")
    return height, width


def token_clusters(A_g: np.ndarray, indices: np.ndarray, n_tokens: int) -> np.ndarray:
    """One cluster per token: its containing cluster with the highest affinity.

    Tokens no cluster took (possible under TopK) fall back to their best
    cluster by affinity.
    """
    member = np.zeros(A_g.shape, dtype=bool)
    for c, row in enumerate(indices):
        row = row[(row >= 0) & (row < n_tokens)]
        member[row, c] = True
    masked = np.where(member, A_g, -np.inf)
    return np.where(member.any(axis=1), masked.argmax(axis=1), A_g.argmax(axis=1))


def cluster_image(labels: np.ndarray, n_clusters: int, shape: tuple) -> np.ndarray:
    if n_clusters == 1:
        return np.zeros(shape, dtype=np.uint8)
    return (255 * labels.astype(np.int64) // (n_clusters - 1)).astype(np.uint8).reshape(shape)


def score_image(scores: np.ndarray, shape: tuple) -> np.ndarray:
    lo, hi = float(scores.min()), float(scores.max())
    if hi <= lo:
        return np.zeros(shape, dtype=np.uint8)
    scaled = np.floor(255 * (scores.astype(np.float64) - lo) / (hi - lo))
    return np.clip(scaled, 0, 255).astype(np.uint8).reshape(shape)


def _model_weights(cfg: RunConfig, dtype) -> dict:
    rng = np.random.default_rng([cfg.seed, 1])
    bound = 1.0 / math.sqrt(cfg.d)
    weights = {"embed.w": rng.uniform(-1, 1, size=(1, cfg.d)), "embed.b": rng.uniform(-bound, bound, size=cfg.d),
               "embed.pos": rng.normal(scale=0.1, size=(cfg.N, cfg.d))}
    for layer in range(cfg.layers):
        for k, v in init_params(cfg.layer_config(), seed=cfg.seed + layer, dtype=dtype).arrays().items():
            weights[f"layers.{layer}.{k}"] = v
    # Stored as float32 on disk; round now so a reload reproduces this run exactly.
    return {k: np.asarray(v, dtype=np.float32).astype(dtype) for k, v in weights.items()}


def _check_weights(weights: dict, cfg: RunConfig) -> None:
    need = {"embed.w", "embed.b", "embed.pos"} | {f"layers.{i}.{k}" for i in range(cfg.layers) for k in PARAM_NAMES}
    missing = sorted(need - set(weights))
    if missing:
        raise UsageError(f"weights file lacks {missing[:4]}{'...' if len(missing) > 4 else ''}")
    if weights["embed.pos"].shape != (cfg.N, cfg.d):
        raise UsageError(f"weights were written for a different N or d: embed.pos is {weights['embed.pos'].shape}")


def cluster_maps(cfg: RunConfig, weights: dict, pixels: np.ndarray) -> list:
    """Run the layer stack on one image; returns per layer ``(labels, A_g)`` for real tokens."""
    dtype = resolve_dtype(cfg.dtype)
    x = pixels.reshape(-1, 1).astype(dtype) / dtype.type(255)
    H = Tensor(x @ weights["embed.w"] + weights["embed.b"] + weights["embed.pos"], dtype=dtype)
    config = cfg.layer_config()
    results = []
    for layer in range(cfg.layers):
        params = CastParams.from_arrays({k: weights[f"layers.{layer}.{k}"] for k in PARAM_NAMES}, dtype=dtype)
        O, inter = _layer(config)(H, params, config)
        scores = inter.cluster_scores().astype(np.float64)
        results.append((token_clusters(scores, inter.assignment.indices, cfg.N), scores))
        H = H + O
    return results


def cmd_cluster_map(cfg: RunConfig, weights_path: Optional[str] = None, input_path: Optional[str] = None) -> int:
    shape = grid_shape(cfg.N, cfg.width, cfg.height)
    dtype = resolve_dtype(cfg.dtype)
    if weights_path is not None:
        try:
            weights = {k: v.astype(dtype) for k, v in load_tensors(weights_path).items()}
        except FormatError as exc:
            raise OSError(f"cannot read weights {weights_path}: {exc}") from exc
        _check_weights(weights, cfg)
    else:
        weights = _model_weights(cfg, dtype)
    if input_path is not None:
        raw = Path(input_path).read_bytes()
        if len(raw) != cfg.N:
            raise UsageError(f"input has {len(raw)} bytes, expected {cfg.N}")
        pixels = np.frombuffer(raw, dtype=np.uint8)
    else:
        pixels = np.random.default_rng([cfg.seed, 2]).integers(0, 256, size=cfg.N, dtype=np.uint8)

    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    if weights_path is None:
        dump_tensors(weights, out / "weights.cast")
    written = 0
    for layer, (labels, scores) in enumerate(cluster_maps(cfg, weights, pixels)):
        write_pgm(out / f"layer{layer}_clusters.pgm", cluster_image(labels, cfg.n_clusters, shape))
        for c in range(cfg.n_clusters):
            write_pgm(out / f"layer{layer}_score{c:02d}.pgm", score_image(scores[:, c], shape))
        written += 1 + cfg.n_clusters
    note = "" if weights_path else " (untrained seeded weights: maps show initialisation structure only)"
    print(f"wrote {written} images for {cfg.layers} layers to {out}{note}")
    return EXIT_OK


# -- entry point -------------------------------------------------------------------


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        overrides = {k: getattr(args, k, None) for k in FIELD_NAMES}
        cfg = parse_config(args.config, overrides)
        with threadpool_limits(limits=bench.threads_from_env()):
            if args.command == "bench":
                return cmd_bench(cfg)
            if args.command == "verify":
                return cmd_verify(cfg)
            if args.command == "gradcheck":
                return cmd_gradcheck(cfg, args.corrupt_adjoint)
            return cmd_cluster_map(cfg, args.weights, args.input)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
