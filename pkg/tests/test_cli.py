import json

import numpy as np
import pytest

from castattn import cli
from castattn.cli import EXIT_CHECK, EXIT_CONFIG, EXIT_IO, EXIT_OK, RunConfig, UsageError, main, parse_config
from castattn.kernel import dump_tensors, load_tensors


def run(tmp_path, *args):
    return main([*args, "--out", str(tmp_path / "out")])


class TestConfig:
    def test_defaults_are_image_setting(self, tmp_path):
        (tmp_path / "c.json").write_text("{}")
        cfg = parse_config(str(tmp_path / "c.json"))
        assert (cfg.n_clusters, cfg.heads, cfg.d, cfg.layers) == (16, 2, 128, 2)

    def test_empty_file_allowed(self, tmp_path):
        (tmp_path / "c.json").write_text("")
        assert parse_config(str(tmp_path / "c.json")) == RunConfig()

    def test_flag_overrides_file(self, tmp_path):
        (tmp_path / "c.json").write_text(json.dumps({"n_clusters": 4, "d": 32}))
        cfg = parse_config(str(tmp_path / "c.json"), {"n_clusters": 8})
        assert (cfg.n_clusters, cfg.d) == (8, 32)

    def test_parser_maps_flags(self):
        args = cli.build_parser().parse_args(["verify", "--Nc", "8", "--Ns", "64,128", "--attn", "laplace"])
        assert (args.n_clusters, args.Ns, args.attention) == (8, [64, 128], "laplace")

    @pytest.mark.parametrize("values", [{"d": 10, "heads": 4}, {"dtype": "f16"}, {"N": 0}, {"Ns": []},
                                        {"n_clusters": 4, "cluster_size": 8, "N": 64}, {"seed": -1}])
    def test_invalid(self, values):
        with pytest.raises(UsageError):
            parse_config(None, values)

    def test_unknown_key(self, tmp_path):
        (tmp_path / "c.json").write_text(json.dumps({"Nc": 8}))
        with pytest.raises(UsageError, match="unknown config keys"):
            parse_config(str(tmp_path / "c.json"))

    def test_non_object(self, tmp_path):
        (tmp_path / "c.json").write_text("[1, 2]")
        with pytest.raises(UsageError):
            parse_config(str(tmp_path / "c.json"))


class TestExitCodes:
    def test_divisibility_rejected(self, tmp_path, capsys):
        assert run(tmp_path, "verify", "--d", "10", "--heads", "4") == EXIT_CONFIG
        assert "divisible" in capsys.readouterr().err

    def test_bad_flag(self, tmp_path):
        assert run(tmp_path, "verify", "--bogus") == EXIT_CONFIG
        assert main([]) == EXIT_CONFIG

    def test_missing_config(self, tmp_path):
        assert run(tmp_path, "verify", "--config", str(tmp_path / "none.json")) == EXIT_IO

    def test_unknown_adjoint_op(self, tmp_path):
        assert run(tmp_path, "gradcheck", "--corrupt-adjoint", "nope") == EXIT_CONFIG

    def test_unreadable_weights(self, tmp_path):
        (tmp_path / "w.cast").write_bytes(b"\x01\x00")
        assert run(tmp_path, "cluster-map", "--N", "64", "--weights", str(tmp_path / "w.cast")) == EXIT_IO
        assert run(tmp_path, "cluster-map", "--N", "64", "--weights", str(tmp_path / "nope")) == EXIT_IO


class TestVerify:
    def test_defaults_pass(self, tmp_path):
        assert run(tmp_path, "verify") == EXIT_OK
        report = json.loads((tmp_path / "out" / "verify.json").read_text())
        assert report["passed"] and len(report["checks"]) == 5
        assert all(c["passed"] for c in report["checks"])

    @pytest.mark.parametrize("flags", [["--mechanism", "satopk", "--N", "100", "--Nc", "6"],
                                       ["--attn", "laplace", "--heads", "1", "--d", "16"]])
    def test_variants_pass(self, tmp_path, flags):
        assert run(tmp_path, "verify", *flags) == EXIT_OK

    def test_failure_exits_2(self, tmp_path, monkeypatch):
        monkeypatch.setattr(cli, "verify_checks", lambda cfg: [cli._check("x", 1.0, 0.5)])
        assert run(tmp_path, "verify") == EXIT_CHECK
        assert not json.loads((tmp_path / "out" / "verify.json").read_text())["passed"]


class TestGradcheck:
    def test_passes(self, tmp_path):
        assert run(tmp_path, "gradcheck", "--d", "16", "--Nc", "4") == EXIT_OK
        lines = (tmp_path / "out" / "gradcheck.jsonl").read_text().splitlines()
        assert [json.loads(x)["name"] for x in lines] == ["X", "W_q", "W_k", "W_v", "W_o", "S", "W_phi", "b_phi"]

    def test_corrupted_adjoint_exits_2(self, tmp_path):
        assert run(tmp_path, "gradcheck", "--d", "16", "--Nc", "4", "--corrupt-adjoint", "matmul") == EXIT_CHECK


class TestBench:
    def test_grid_files(self, tmp_path, monkeypatch):
        monkeypatch.setenv("CAST_THREADS", "0")
        code = run(tmp_path, "bench", "--Ns", "128,256", "--kappas", "32,64", "--d", "16", "--heads", "1",
                   "--reps", "1")
        assert code == EXIT_OK
        out = tmp_path / "out"
        from castattn.bench import read_report
        lengths = read_report(out / "bench_lengths.csv")
        assert len(lengths) == 2 * 2 * 2  # (dense, topk) x N x phase
        sizes = read_report(out / "bench_cluster_sizes.csv")
        assert {(r.mechanism, r.kappa, r.phase) for r in sizes} == {
            (m, k, p) for m in ("topk", "satopk") for k in (32, 64) for p in ("forward", "forward+backward")}
        for name in ("bench_lengths.json", "bench_lengths_ratios.csv", "bench_cluster_sizes_ratios.csv"):
            assert (out / name).exists()


class TestClusterMap:
    def test_outputs(self, tmp_path):
        assert run(tmp_path, "cluster-map", "--N", "64", "--Nc", "8", "--d", "16") == EXIT_OK
        out = tmp_path / "out"
        for layer in (0, 1):
            img = cli.read_pgm(out / f"layer{layer}_clusters.pgm")
            assert img.shape == (8, 8)
            assert set(np.unique(img)) <= {255 * c // 7 for c in range(8)}
            for c in range(8):
                score = cli.read_pgm(out / f"layer{layer}_score{c:02d}.pgm")
                assert score.shape == (8, 8)
        assert len(list(out.glob("*.pgm"))) == 2 * 9
        assert (out / "weights.cast").exists()

    def test_pgm_header(self, tmp_path):
        run(tmp_path, "cluster-map", "--N", "16", "--Nc", "2", "--d", "8", "--width", "8", "--height", "2")
        data = (tmp_path / "out" / "layer0_clusters.pgm").read_bytes()
        assert data.startswith(b"P5\n8 2\n255\n") and len(data) == len(b"P5\n8 2\n255\n") + 16

    def test_single_cluster_constant(self, tmp_path):
        assert run(tmp_path, "cluster-map", "--N", "64", "--Nc", "1", "--d", "8") == EXIT_OK
        assert not cli.read_pgm(tmp_path / "out" / "layer0_clusters.pgm").any()

    @pytest.mark.parametrize("mechanism", ["topk", "satopk"])
    def test_deterministic(self, tmp_path, mechanism):
        args = ["cluster-map", "--N", "100", "--Nc", "4", "--d", "16", "--seed", "3", "--mechanism", mechanism]
        main([*args, "--out", str(tmp_path / "a")])
        main([*args, "--out", str(tmp_path / "b")])
        files = sorted(p.name for p in (tmp_path / "a").iterdir())
        assert files == sorted(p.name for p in (tmp_path / "b").iterdir())
        for name in files:
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_reload_weights_reproduces(self, tmp_path):
        base = ["cluster-map", "--N", "64", "--Nc", "4", "--d", "16", "--dtype", "f64"]
        main([*base, "--out", str(tmp_path / "a")])
        main([*base, "--out", str(tmp_path / "b"), "--weights", str(tmp_path / "a" / "weights.cast")])
        for name in ("layer1_clusters.pgm", "layer1_score03.pgm"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_input_image(self, tmp_path):
        (tmp_path / "in.raw").write_bytes(bytes(range(64)))
        assert run(tmp_path, "cluster-map", "--N", "64", "--Nc", "4", "--d", "8", "--input",
                   str(tmp_path / "in.raw")) == EXIT_OK
        (tmp_path / "short.raw").write_bytes(b"\0" * 10)
        assert run(tmp_path, "cluster-map", "--N", "64", "--d", "8", "--input", str(tmp_path / "short.raw")) \
            == EXIT_CONFIG

    def test_grid_errors(self, tmp_path):
        assert run(tmp_path, "cluster-map", "--N", "60", "--d", "8", "--Nc", "4") == EXIT_CONFIG
        assert run(tmp_path, "cluster-map", "--N", "60", "--d", "8", "--Nc", "4", "--width", "6") == EXIT_CONFIG
        assert run(tmp_path, "cluster-map", "--N", "60", "--d", "8", "--Nc", "4", "--width", "6",
                   "--height", "10") == EXIT_OK

    def test_weights_for_other_shape(self, tmp_path):
        main(["cluster-map", "--N", "64", "--d", "8", "--Nc", "4", "--out", str(tmp_path / "a")])
        weights = str(tmp_path / "a" / "weights.cast")
        assert run(tmp_path, "cluster-map", "--N", "81", "--d", "8", "--Nc", "4", "--weights", weights) \
            == EXIT_CONFIG
        w = load_tensors(weights)
        del w["layers.1.S"]
        dump_tensors(w, tmp_path / "partial.cast")
        assert run(tmp_path, "cluster-map", "--N", "64", "--d", "8", "--Nc", "4", "--weights",
                   str(tmp_path / "partial.cast")) == EXIT_CONFIG


class TestMapping:
    def test_topk_picks_best_containing_cluster(self):
        A_g = np.array([[0.6, 0.4], [0.3, 0.7], [0.5, 0.5]])
        indices = np.array([[0, 1], [0, 1]])  # token 0 and 1 in both clusters, token 2 in none
        assert cli.token_clusters(A_g, indices, 3).tolist() == [0, 1, 0]

    def test_ignores_padding(self):
        A_g = np.array([[0.9, 0.1], [0.2, 0.8]])
        indices = np.array([[2, 1], [0, 3]])
        assert cli.token_clusters(A_g, indices, 2).tolist() == [1, 0]

    def test_cluster_image_levels(self):
        img = cli.cluster_image(np.array([0, 1, 2, 3]), 4, (2, 2))
        assert img.tolist() == [[0, 85], [170, 255]]

    def test_score_image_normalised(self):
        img = cli.score_image(np.array([1.0, 2.0, 3.0, 1.0]), (2, 2))
        assert img.tolist() == [[0, 127], [255, 0]]
        assert not cli.score_image(np.ones(4), (2, 2)).any()

    def test_pgm_round_trip(self, tmp_path):
        img = np.arange(12, dtype=np.uint8).reshape(3, 4)
        cli.write_pgm(tmp_path / "x.pgm", img)
        np.testing.assert_array_equal(cli.read_pgm(tmp_path / "x.pgm"), img)
        with pytest.raises(ValueError):
            cli.write_pgm(tmp_path / "y.pgm", img.astype(np.int32))
