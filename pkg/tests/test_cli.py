import json

import numpy as np
import pytest

from semaim import numerics as nx
from semaim.cli import main, resolve_config, ConfigError
from semaim.data import load_manifest
from semaim.imageio import read_pgm, read_ppm

TOY = """\
[model]
image_size = 16x16
patch_size = 4
embed_dim = 16
encoder_depth = 2
decoder_depth = 1
heads = 2
mlp_ratio = 2

[train]
epochs = 2
batch_size = 4
base_lr = 0.01

[data]
count = 8
blob_radius = 2, 4
"""


@pytest.fixture
def toy_cfg(tmp_path):
    path = tmp_path / "toy.cfg"
    path.write_text(TOY)
    return path


@pytest.fixture(autouse=True)
def _restore_runtime():
    yield
    nx.set_deterministic(False)


def run(*argv):
    return main([str(a) for a in argv])


class TestConfig:
    def test_flags_override_file(self, toy_cfg):
        cfg = resolve_config(toy_cfg, {"train": {"epochs": "5"}, "model": {}, "target": {}, "data": {}}, seed=9)
        assert cfg.train.epochs == 5 and cfg.train.seed == 9 and cfg.train.model.image_size == (16, 16)
        assert cfg.data.image_size == 16 and cfg.data.blob_radius == (2.0, 4.0)

    def test_bad_value_names_key(self, tmp_path):
        (tmp_path / "c.cfg").write_text("[train]\nepochs = many\n")
        with pytest.raises(ConfigError, match="train.epochs"):
            resolve_config(tmp_path / "c.cfg", {})

    def test_unknown_section(self, tmp_path):
        (tmp_path / "c.cfg").write_text("[optim]\nlr = 1\n")
        with pytest.raises(ConfigError, match="optim"):
            resolve_config(tmp_path / "c.cfg", {})


class TestExitCodes:
    def test_bogus_order(self, toy_cfg, capsys):
        assert run("pretrain", "--config", toy_cfg, "--order", "bogus") == 2
        assert "{raster, stochastic, similarity, semantic}" in capsys.readouterr().err

    def test_unknown_key(self, toy_cfg, capsys, tmp_path):
        assert run("pretrain", "--config", toy_cfg, "--set", "model.depth=3", "--out", tmp_path) == 2
        assert "model.depth" in capsys.readouterr().err

    def test_invalid_model(self, toy_cfg, tmp_path):
        assert run("pretrain", "--config", toy_cfg, "--set", "model.decoder_depth=3", "--out", tmp_path) == 2

    def test_bad_thread_env(self, toy_cfg, tmp_path, monkeypatch):
        monkeypatch.setenv("SEMAIM_THREADS", "lots")
        assert run("gen-data", "--config", toy_cfg, "--out", tmp_path) == 2

    def test_unknown_suite_is_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            run("verify", "everything")
        assert exc.value.code == 2

    def test_missing_checkpoint_is_runtime_error(self, toy_cfg, tmp_path):
        code = run("visualize-order", "--config", toy_cfg, "--checkpoint", tmp_path / "none",
                   "--image", tmp_path / "none.ppm", "--out", tmp_path / "v")
        assert code == 1

    def test_missing_image(self, toy_cfg, tmp_path):
        assert run("visualize-order", "--config", toy_cfg, "--oracle-teacher", "--image", tmp_path / "x.ppm",
                   "--out", tmp_path / "v") == 1


class TestPretrain:
    def test_smoke_and_determinism(self, toy_cfg, tmp_path):
        for name in ("a", "b"):
            assert run("--seed", 3, "--deterministic", "pretrain", "--config", toy_cfg, "--order", "semantic",
                       "--out", tmp_path / name) == 0
        a, b = tmp_path / "a", tmp_path / "b"
        assert (a / "metrics.jsonl").read_bytes() == (b / "metrics.jsonl").read_bytes()
        for f in sorted((a / "final").rglob("*.semt")):
            assert f.read_bytes() == (b / "final" / f.relative_to(a / "final")).read_bytes()
        manifest = json.loads((a / "run.json").read_text())
        assert manifest["train"]["seed"] == 3 and manifest["deterministic"] is True
        assert manifest["train"]["model"]["embed_dim"] == 16 and manifest["train"]["order"] == "semantic"

    def test_uses_given_dataset(self, toy_cfg, tmp_path):
        assert run("gen-data", "--config", toy_cfg, "--count", 4, "--out", tmp_path / "d") == 0
        assert len(load_manifest(tmp_path / "d" / "train.manifest")) == 4
        assert run("pretrain", "--config", toy_cfg, "--dataset", tmp_path / "d" / "train.manifest",
                   "--max-steps", 1, "--out", tmp_path / "r") == 0
        assert len((tmp_path / "r" / "metrics.jsonl").read_text().splitlines()) == 1


class TestVisualize:
    @pytest.fixture
    def data_dir(self, toy_cfg, tmp_path):
        run("gen-data", "--config", toy_cfg, "--out", tmp_path / "d")
        return tmp_path / "d"

    def test_raster_rank_map_row_major(self, toy_cfg, data_dir, tmp_path):
        run("pretrain", "--config", toy_cfg, "--max-steps", 1, "--out", tmp_path / "r",
            "--dataset", data_dir / "train.manifest")
        code = run("visualize-order", "--config", toy_cfg, "--checkpoint", tmp_path / "r" / "final",
                   "--image", "train00002", "--dataset", data_dir / "train.manifest", "--out", tmp_path / "v")
        assert code == 0
        ranks = read_pgm(tmp_path / "v" / "train00002_raster.pgm")
        assert ranks.shape == (16, 16)
        cells = ranks[::4, ::4].reshape(-1).astype(int)
        assert cells[0] == 255 and cells[-1] == 0 and np.all(np.diff(cells) < 0)
        for strategy in ("stochastic", "similarity", "semantic"):
            assert read_pgm(tmp_path / "v" / f"train00002_{strategy}.pgm").shape == (16, 16)
        for suffix in ("simmap", "simmap_filtered", "center", "semantic_heat"):
            assert read_ppm(tmp_path / "v" / f"train00002_{suffix}.ppm").shape == (16, 16, 3)

    def test_oracle_teacher_first_patch_near_blob(self, toy_cfg, data_dir, tmp_path):
        manifest = load_manifest(data_dir / "train.manifest")
        for record in manifest.records:
            code = run("visualize-order", "--config", toy_cfg, "--oracle-teacher", "--strategy", "semantic",
                       "--image", manifest.image_path(record), "--out", tmp_path / "v")
            assert code == 0
            summary = json.loads((tmp_path / "v" / f"{record.image_id}_orders.json").read_text())
            first = summary["orders"]["semantic"][0]
            fy, fx = divmod(first, 4)
            assert abs(fy - record.center[0] // 4) <= 1 and abs(fx - record.center[1] // 4) <= 1


class TestVerifyAndProbe:
    def test_verify_masks(self, capsys):
        assert run("verify", "masks") == 0
        out = capsys.readouterr().out
        assert out.count("[PASS]") == 2 and "masks: 2/2 passed" in out

    def test_probe_report(self, toy_cfg, tmp_path):
        run("pretrain", "--config", toy_cfg, "--max-steps", 2, "--out", tmp_path / "r")
        code = run("probe", "--config", toy_cfg, "--checkpoint", tmp_path / "r" / "final", "--baseline",
                   "--k", 5, "--out", tmp_path / "p")
        assert code == 0
        report = json.loads((tmp_path / "p" / "probe_report.json").read_text())
        assert [r["model"] for r in report["rows"]][0] == "untrained"
        assert report["rows"][1]["order"] == "semantic" and report["rows"][1]["steps"] == 2
        assert report["knn"]["k"] == 5 and report["knn"]["temperature"] == 0.07
        assert report["linear"]["train_size"] + report["linear"]["test_size"] == report["dataset_size"]
        assert "| untrained |" in (tmp_path / "p" / "probe_report.md").read_text()
