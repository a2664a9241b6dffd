import json
import subprocess
import sys
from pathlib import Path

import pytest

from physcene.cli import main
from physcene.denoiser import Checkpoint, Denoiser, DenoiserConfig, save_checkpoint
from physcene.experiment import ABLATION_ROWS
from physcene.scene import NormStats, Taxonomy
from physcene.synthetic import GeneratorConfig, generate_dataset

FIXTURE_DIR = Path(__file__).parent / "data" / "fixture_scenes"
FIXTURE = FIXTURE_DIR / "one_collision.json"


@pytest.fixture(scope="module")
def tiny_checkpoint(tmp_path_factory):
    """Untrained small network; enough to exercise the command plumbing."""
    scenes = [s.scene for s in generate_dataset(GeneratorConfig(seed=0), 20)]
    model = Denoiser(DenoiserConfig(d_model=8, heads=2, blocks=1, ff_width=16, T=10), seed=0)
    path = tmp_path_factory.mktemp("ckpt") / "tiny.ckpt"
    save_checkpoint(path, Checkpoint(model, NormStats.from_scenes(scenes), Taxonomy(), 1e-4, 0.02))
    return path


@pytest.fixture(scope="module")
def tiny_config(tmp_path_factory):
    d = tmp_path_factory.mktemp("cfg")
    cfg = {
        "dataset": "data",
        "checkpoint": "model.ckpt",
        "output_dir": "run",
        "n_scenes": 12,
        "T": 10,
        "model": {"d_model": 8, "heads": 2, "blocks": 1, "ff_width": 16, "T": 10},
        "training": {"steps": 3, "batch_size": 4, "log_every": 1},
    }
    (d / "exp.json").write_text(json.dumps(cfg))
    return d / "exp.json"


def _error(capsys):
    err = capsys.readouterr().err.strip().splitlines()[-1]
    return json.loads(err)


class TestEvaluate:
    def test_fixture_col_obj(self, tmp_path, capsys):
        assert main(["evaluate", "--scenes", str(FIXTURE_DIR), "--out", str(tmp_path / "report.json")]) == 0
        out = capsys.readouterr().out
        assert "Col_obj     0.5000" in out
        report = json.loads((tmp_path / "report.json").read_text())
        assert report["col_obj"] == 0.5
        assert report["col_scene"] == 1.0
        assert report["n_scenes"] == 1

    def test_missing_directory(self, tmp_path, capsys):
        assert main(["evaluate", "--scenes", str(tmp_path / "nope")]) == 2
        assert _error(capsys)["error"] == "not_found"

    def test_schema_error_reports_field(self, tmp_path, capsys):
        doc = json.loads(FIXTURE.read_text())
        del doc["objects"][2]["feature"]
        (tmp_path / "bad.json").write_text(json.dumps(doc))
        assert main(["evaluate", "--scenes", str(tmp_path)]) == 2
        err = _error(capsys)
        assert err == {"error": "schema", "field": "objects[2].feature", "message": "missing required field"}


class TestSample:
    def test_seed_byte_identical(self, tiny_checkpoint, tmp_path, capsys):
        for name in ("a", "b"):
            argv = ["sample", "--checkpoint", str(tiny_checkpoint), "--floors", str(FIXTURE_DIR)]
            argv += ["--n", "2", "--seed", "7", "--out", str(tmp_path / name)]
            assert main(argv) == 0
        files = sorted(p.name for p in (tmp_path / "a").iterdir())
        assert files == ["sample-00000.json", "sample-00000.svg", "sample-00001.json", "sample-00001.svg"]
        for f in files:
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
        doc = json.loads((tmp_path / "a" / "sample-00000.json").read_text())
        assert doc["source_floor"] == "one_collision"

    def test_other_seed_differs(self, tiny_checkpoint, tmp_path, capsys):
        for seed in ("7", "8"):
            argv = ["sample", "--checkpoint", str(tiny_checkpoint), "--floors", str(FIXTURE_DIR), "--n", "1"]
            assert main(argv + ["--seed", seed, "--no-svg", "--out", str(tmp_path / seed)]) == 0
        a = (tmp_path / "7" / "sample-00000.json").read_bytes()
        assert a != (tmp_path / "8" / "sample-00000.json").read_bytes()

    def test_sample_then_evaluate(self, tiny_checkpoint, tmp_path, capsys):
        argv = ["sample", "--checkpoint", str(tiny_checkpoint), "--floors", str(FIXTURE_DIR), "--n", "2"]
        assert main(argv + ["--guidance", "coll,layout", "--out", str(tmp_path / "s")]) == 0
        assert main(["evaluate", "--scenes", str(tmp_path / "s"), "--floors", str(FIXTURE_DIR)]) == 0
        assert "R_walkable" in capsys.readouterr().out

    def test_bad_guidance_term(self, tiny_checkpoint, tmp_path, capsys):
        argv = ["sample", "--checkpoint", str(tiny_checkpoint), "--floors", str(FIXTURE_DIR)]
        assert main(argv + ["--guidance", "gravity", "--out", str(tmp_path)]) == 2
        assert _error(capsys)["error"] == "invalid_input"

    def test_corrupt_checkpoint(self, tmp_path, capsys):
        (tmp_path / "x.ckpt").write_bytes(b"NOTACKPT")
        argv = ["sample", "--checkpoint", str(tmp_path / "x.ckpt"), "--floors", str(FIXTURE_DIR)]
        assert main(argv + ["--out", str(tmp_path / "o")]) == 2
        assert _error(capsys)["error"] == "invalid_input"


class TestAblate:
    def test_five_rows(self, tiny_checkpoint, tmp_path, capsys):
        argv = ["ablate", "--checkpoint", str(tiny_checkpoint), "--floors", str(FIXTURE_DIR)]
        assert main(argv + ["--n", "2", "--out", str(tmp_path)]) == 0
        table = capsys.readouterr().out.strip().splitlines()
        rows = table[2:]
        assert [r.split()[0] for r in rows] == [label for label, _ in ABLATION_ROWS]
        data = json.loads((tmp_path / "ablation.json").read_text())
        assert len(data["rows"]) == 5
        assert {r["label"] for r in data["rows"]} == {"none", "collision", "layout", "reach", "all"}


class TestRender:
    @pytest.mark.parametrize("walkable", [False, True])
    def test_writes_svg(self, tmp_path, walkable, capsys):
        argv = ["render", "--scene", str(FIXTURE), "--out", str(tmp_path / "s.svg")]
        assert main(argv + (["--walkable"] if walkable else [])) == 0
        text = (tmp_path / "s.svg").read_text()
        assert text.startswith("<svg") or text.startswith("<?xml")
        assert text.rstrip().endswith("</svg>")
        assert text.count("<polygon") >= 5


class TestPipelineCommands:
    def test_generate_and_train(self, tiny_config, capsys):
        assert main(["generate-dataset", "--config", str(tiny_config)]) == 0
        manifest = json.loads((tiny_config.parent / "data" / "manifest.json").read_text())
        assert manifest["count"] == 12
        assert main(["train", "--config", str(tiny_config)]) == 0
        info = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        assert Path(info["checkpoint"]).exists()
        lines = Path(info["loss_csv"]).read_text().splitlines()
        assert lines[0] == "step,loss" and len(lines) == 4


class TestErrors:
    def test_usage_error(self, capsys):
        assert main(["frobnicate"]) == 2
        assert _error(capsys)["error"] == "usage"

    def test_missing_required(self, capsys):
        assert main(["render", "--scene", str(FIXTURE)]) == 2
        assert _error(capsys)["error"] == "usage"

    def test_nonpositive_count(self, tiny_checkpoint, tmp_path, capsys):
        argv = ["sample", "--checkpoint", str(tiny_checkpoint), "--floors", str(FIXTURE_DIR)]
        assert main(argv + ["--n", "0", "--out", str(tmp_path)]) == 2
        assert "--n" in _error(capsys)["message"]

    def test_bad_config_key(self, tmp_path, capsys):
        (tmp_path / "c.json").write_text(json.dumps({"learning_rate": 1}))
        assert main(["generate-dataset", "--config", str(tmp_path / "c.json")]) == 2
        assert _error(capsys)["error"] == "invalid_input"

    def test_entry_point_exit_status(self):
        proc = subprocess.run(
            [sys.executable, "-m", "physcene.cli", "render", "--scene", "/no/such.json", "--out", "/tmp/x.svg"],
            capture_output=True,
            text=True,
        )
        assert proc.returncode == 2
        assert json.loads(proc.stderr.strip())["error"] == "not_found"
