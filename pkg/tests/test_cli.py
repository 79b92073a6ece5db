"""CLI wiring: artifacts, determinism, exit codes, help text."""

import numpy as np
import pytest

from corrmatch.cli import build_parser, main
from corrmatch.flowio import read_correspondences, read_flo, write_flo, FlowField
from corrmatch.model import ModelConfig, init_params
from corrmatch.tensor import AdamState
from corrmatch.training import Checkpoint, save_checkpoint

TINY_FLAGS = ["--size", "32", "--d-model", "8", "--enc-layers", "1",
              "--dec-layers", "1", "--heads", "2", "--head-hidden", "8"]


def make_tiny_ckpt(path, seed=0):
    cfg = ModelConfig(input_size=32, d_model=8, enc_layers=1, dec_layers=1,
                      heads=2, head_hidden=8)
    params = {k: p.data for k, p in init_params(cfg, seed=seed).items()}
    ckpt = Checkpoint(config=cfg, params=params,
                      opt_state=AdamState.zeros_like(params), step=0)
    save_checkpoint(ckpt, path)
    return cfg


class TestGenData:
    def test_writes_expected_artifacts(self, tmp_path):
        out = tmp_path / "corpus"
        rc = main(["gen-data", "--out", str(out), "--pairs", "2",
                   "--render-size", "64", "--seed", "5"])
        assert rc == 0
        for i in range(2):
            assert (out / f"pair_{i:04d}_a.ppm").exists()
            assert (out / f"pair_{i:04d}_b.ppm").exists()
            assert (out / f"pair_{i:04d}_gt.flo").exists()
            assert (out / f"scene_{i:04d}.txt").exists()

    def test_byte_identical_reruns(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            main(["gen-data", "--out", str(out), "--pairs", "1",
                  "--render-size", "64", "--seed", "9"])
        fa = (a / "pair_0000_a.ppm").read_bytes()
        fb = (b / "pair_0000_a.ppm").read_bytes()
        assert fa == fb
        assert (a / "pair_0000_gt.flo").read_bytes() == \
            (b / "pair_0000_gt.flo").read_bytes()


class TestTrainAndMatch:
    def test_train_then_match_then_dense(self, tmp_path):
        ckpt = tmp_path / "m.ckpt"
        rc = main(["train", "--out", str(ckpt), "--scenes", "4",
                   "--stage-steps", "2,2,2", "--batch", "2",
                   "--corr-per-pair", "8", "--seed", "3",
                   "--log-file", str(tmp_path / "log.txt")] + TINY_FLAGS)
        assert rc == 0 and ckpt.exists()
        log = (tmp_path / "log.txt").read_text()
        assert "step=1" in log and "corr=" in log

        corpus = tmp_path / "corpus"
        main(["gen-data", "--out", str(corpus), "--pairs", "1",
              "--render-size", "64", "--seed", "11"])
        out = tmp_path / "matches.txt"
        rc = main(["match", "--ckpt", str(ckpt),
                   "--image-a", str(corpus / "pair_0000_a.ppm"),
                   "--image-b", str(corpus / "pair_0000_b.ppm"),
                   "--out", str(out), "--grid", "4", "--covis-grid", "8",
                   "--zoom-steps", "1", "--tau-cycle", "1e9",
                   "--tau-std", "1e9", "--tau-visible", "1e9"])
        assert rc == 0
        recs = read_correspondences(out)
        assert recs.shape == (16, 5)

        flo = tmp_path / "dense.flo"
        rc = main(["dense", "--ckpt", str(ckpt),
                   "--image-a", str(corpus / "pair_0000_a.ppm"),
                   "--image-b", str(corpus / "pair_0000_b.ppm"),
                   "--out", str(flo), "--grid", "4", "--covis-grid", "8",
                   "--zoom-steps", "0", "--tau-cycle", "1e9",
                   "--tau-std", "1e9", "--tau-visible", "1e9"])
        assert rc == 0
        field = read_flo(flo)
        assert field.width == 64 and field.height == 64

    def test_match_untrained_no_covisibility_is_exit_1(self, tmp_path, capsys):
        # An untrained network fails the cycle gate everywhere, which must
        # surface as the no-covisibility domain error.
        ckpt = tmp_path / "m.ckpt"
        make_tiny_ckpt(ckpt)
        corpus = tmp_path / "corpus"
        main(["gen-data", "--out", str(corpus), "--pairs", "1",
              "--render-size", "64", "--seed", "12"])
        rc = main(["match", "--ckpt", str(ckpt),
                   "--image-a", str(corpus / "pair_0000_a.ppm"),
                   "--image-b", str(corpus / "pair_0000_b.ppm"),
                   "--out", str(tmp_path / "x.txt"), "--covis-grid", "8"])
        assert rc == 1
        assert "no_covisibility" in capsys.readouterr().err


class TestEval:
    def test_identical_files_print_zero(self, tmp_path, capsys):
        rng = np.random.default_rng(0)
        field = FlowField.all_valid(rng.standard_normal((6, 6, 2)).astype(np.float32))
        p = tmp_path / "f.flo"
        write_flo(field, p)
        rc = main(["eval", "--pred", str(p), "--gt", str(p)])
        out = capsys.readouterr().out
        assert rc == 0
        assert "aepe=0" in out.splitlines()[0]
        assert any(line.startswith("pck3=1") for line in out.splitlines())
        assert any(line.startswith("fl=0") for line in out.splitlines())

    def test_missing_file_is_exit_1(self, tmp_path, capsys):
        rc = main(["eval", "--pred", str(tmp_path / "no.flo"),
                   "--gt", str(tmp_path / "no.flo")])
        assert rc == 1


class TestGradcheckCommand:
    def test_passes_and_prints_per_primitive(self, capsys):
        rc = main(["gradcheck", "--shapes", "2", "--samples", "4"])
        out = capsys.readouterr().out
        assert rc == 0
        assert out.count("PASS") >= 20
        assert "full_model_loss" in out
        assert "FAIL" not in out


class TestUsage:
    def test_unknown_subcommand_exits_2(self):
        with pytest.raises(SystemExit) as e:
            main(["frobnicate"])
        assert e.value.code == 2

    def test_unknown_flag_exits_2(self):
        with pytest.raises(SystemExit) as e:
            main(["eval", "--bogus", "x"])
        assert e.value.code == 2

    def test_help_lists_defaults(self, capsys):
        with pytest.raises(SystemExit) as e:
            main(["match", "--help"])
        assert e.value.code == 0
        out = " ".join(capsys.readouterr().out.split())
        for needle in ("--zoom-factor", "default: 2.0", "--zoom-steps",
                       "default: 4", "--tau-visible", "default: 5.0",
                       "--tau-cycle", "--tau-std", "default: 0.02"):
            assert needle in out

    def test_train_help_has_paper_scale_defaults(self, capsys):
        with pytest.raises(SystemExit):
            main(["train", "--help"])
        out = " ".join(capsys.readouterr().out.split())
        assert "default: 2000,10000,2000" in out
        assert "default: 100" in out   # correspondences per pair
        assert "default: 8" in out     # batch size

    def test_config_file_sets_defaults_flags_override(self, tmp_path, capsys):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("pck-px = 3\n")
        rng = np.random.default_rng(1)
        field = FlowField.all_valid(rng.standard_normal((4, 4, 2)).astype(np.float32))
        p = tmp_path / "f.flo"
        write_flo(field, p)
        rc = main(["--config", str(cfg), "eval", "--pred", str(p), "--gt", str(p)])
        out = capsys.readouterr().out
        assert rc == 0 and "pck3=" in out and "pck1=" not in out
        rc = main(["--config", str(cfg), "eval", "--pred", str(p),
                   "--gt", str(p), "--pck-px", "5"])
        out = capsys.readouterr().out
        assert "pck5=" in out and "pck3=" not in out
