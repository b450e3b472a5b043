import csv
import json

import numpy as np
import pytest

from noise2detail import cli
from noise2detail.imageio import load_image, save_image
from noise2detail.noise import phantom

FAST = ["--iters", "3", "--j", "2,4"]


@pytest.fixture
def clean_dir(tmp_path):
    d = tmp_path / "clean"
    d.mkdir()
    save_image(phantom(24, seed=1), d / "b.png")
    save_image(phantom(20, seed=2), d / "a.pgm")
    return d


class TestConfigMerge:
    def _args(self, argv):
        return cli.make_parser().parse_args(argv)

    def test_defaults(self):
        cfg = cli.build_config(self._args(["denoise", "in.png", "out.png"]))
        assert cfg.iterations == 2000 and cfg.lr == 1e-3 and cfg.J == (2, 4) and cfg.seed == 0

    def test_flags_override_file(self, tmp_path):
        p = tmp_path / "c.cfg"
        p.write_text("iterations = 10\nlr = 0.01\nj = 2\n")
        cfg = cli.build_config(self._args(["denoise", "a", "b", "--config", str(p), "--iters", "7"]))
        assert cfg.iterations == 7 and cfg.lr == 0.01 and cfg.J == (2,)

    def test_unknown_key(self, tmp_path):
        p = tmp_path / "c.cfg"
        p.write_text("momentum = 0.9\n")
        with pytest.raises(ValueError, match="momentum"):
            cli.build_config(self._args(["denoise", "a", "b", "--config", str(p)]))

    def test_empty_j(self):
        cfg = cli.build_config(self._args(["denoise", "a", "b", "--j", ""]))
        assert cfg.J == ()

    def test_level_range(self):
        args = self._args(["eval", "a", "b", "--noise", "poisson", "--lambda", "10,50"])
        assert args.lam == (10.0, 50.0)


class TestDenoise:
    def test_writes_output_and_report(self, tmp_path):
        clean = phantom(20)
        save_image(clean, tmp_path / "in.png")
        rc = cli.main(["denoise", str(tmp_path / "in.png"), str(tmp_path / "out.png"), *FAST,
                       "--gt", str(tmp_path / "in.png"), "--report", str(tmp_path / "r.json"), "--debug-stages"])
        assert rc == 0
        assert load_image(tmp_path / "out.png").shape == (20, 20, 1)
        for name in ("out_xbar.png", "out_refined_j2.png", "out_refined_j4.png", "out_blend.png"):
            assert (tmp_path / name).exists()
        report = json.loads((tmp_path / "r.json").read_text())
        assert report["height"] == 20 and report["failed_stage"] is None
        assert set(report["psnr"]) >= {"noisy", "xbar", "blend", "final"}

    def test_stride_too_large(self, tmp_path, capsys):
        save_image(phantom(6), tmp_path / "in.png")
        rc = cli.main(["denoise", str(tmp_path / "in.png"), str(tmp_path / "o.png"), "--iters", "1", "--j", "8"])
        assert rc != 0
        assert "8" in capsys.readouterr().err
        assert not (tmp_path / "o.png").exists()

    def test_missing_input(self, tmp_path, capsys):
        assert cli.main(["denoise", str(tmp_path / "none.png"), str(tmp_path / "o.png")]) == 2
        assert "none.png" in capsys.readouterr().err


class TestEval:
    def test_csv_schema_and_determinism(self, tmp_path, clean_dir):
        outs = []
        for run in ("r1", "r2"):
            rc = cli.main(["eval", str(clean_dir), str(tmp_path / run), "--noise", "poisson",
                           "--lambda", "10,50", "--seed", "3", *FAST, "--save-images"])
            assert rc == 0
            outs.append(tmp_path / run)
        a, b = [(o / "results.csv").read_bytes() for o in outs]
        assert a == b
        for name in ("a_denoised.png", "b_denoised.png"):
            assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()
        lines = a.decode().splitlines()
        assert lines[0] == "# n2d-eval-csv v1"
        rows = list(csv.DictReader(lines[1:]))
        assert [r["image"] for r in rows] == ["a.pgm", "b.png"]
        assert list(rows[0]) == cli.CSV_COLUMNS
        assert rows[0]["seconds_total"] == ""
        assert 10 <= float(rows[0]["sigma_or_lambda"]) < 50
        assert rows[0]["sigma_or_lambda"] != rows[1]["sigma_or_lambda"]
        summary = json.loads((outs[0] / "summary.json").read_text())
        assert summary["images"] == 2

    def test_record_time(self, tmp_path, clean_dir):
        cli.main(["eval", str(clean_dir), str(tmp_path / "o"), "--noise", "gaussian", "--sigma", "25",
                  *FAST, "--record-time"])
        rows = list(csv.DictReader((tmp_path / "o" / "results.csv").read_text().splitlines()[1:]))
        assert all(float(r["seconds_total"]) > 0 for r in rows)

    def test_needs_level(self, tmp_path, clean_dir):
        assert cli.main(["eval", str(clean_dir), str(tmp_path / "o"), "--noise", "gaussian"]) == 2

    def test_empty_folder(self, tmp_path):
        (tmp_path / "e").mkdir()
        assert cli.main(["eval", str(tmp_path / "e"), str(tmp_path / "o"), "--noise", "gaussian", "--sigma", "5"]) == 2


class TestAblate:
    def test_rows(self):
        clean = phantom(24)
        noisy = clean + np.float32(0.05) * np.random.default_rng(0).standard_normal(clean.shape).astype(np.float32)
        from noise2detail.pipeline import PipelineConfig
        rows = cli.run_ablation(clean, noisy, PipelineConfig(iterations=3))
        assert [r["J"] for r in rows] == [(), (2,), (2, 4), (2, 4, 8)]
        assert all(np.isfinite(r["psnr_blend"]) for r in rows)

    def test_cli_csv(self, tmp_path, capsys):
        save_image(phantom(24), tmp_path / "p.png")
        rc = cli.main(["ablate", str(tmp_path / "p.png"), "--noise", "gaussian", "--sigma", "25",
                       "--iters", "2", "--j-sets", "", "2", "--final", "--csv", str(tmp_path / "a.csv")])
        assert rc == 0
        lines = (tmp_path / "a.csv").read_text().splitlines()
        assert lines[0] == "J,psnr_blend,psnr_final"
        assert len(lines) == 3 and lines[1].startswith(",")


class TestPhantom:
    def test_writes_image(self, tmp_path):
        assert cli.main(["phantom", str(tmp_path / "p.pgm"), "--size", "32", "--bit-depth", "16"]) == 0
        img = load_image(tmp_path / "p.pgm")
        assert img.shape == (32, 32, 1)
        assert np.abs(img - phantom(32)).max() <= 0.5 / 65535 + 1e-6
