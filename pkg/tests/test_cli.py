import json

import pytest

from smbea.cli import main
from smbea.data import load_dataset


class TestDataset:
    def test_gen(self, tmp_path, capsys):
        assert main(["dataset", "gen", "--task", "saliency", "--n", "3", "--hw", "32", "--out", str(tmp_path), "--png"]) == 0
        ds = load_dataset(tmp_path / "saliency.npz", "saliency")
        assert ds.inputs.shape == (3, 3, 32, 32)
        assert len(list((tmp_path / "png").glob("*.png"))) == 6
        assert "wrote 3 saliency pairs" in capsys.readouterr().out

    def test_bad_size(self, tmp_path, capsys):
        assert main(["dataset", "gen", "--task", "saliency", "--hw", "48", "--out", str(tmp_path)]) == 2
        assert "smbea: dataset gen failed" in capsys.readouterr().err


class TestZoo:
    def test_build(self, tmp_path):
        out = tmp_path / "zoo"
        args = ["zoo", "build", "--task", "saliency", "--out", str(out), "--n-specs", "1", "--n-train", "4",
                "--epochs", "1", "--hw", "32"]
        assert main(args) == 0
        index = json.loads((out / "zoo.json").read_text())
        assert index["task"] == "saliency" and len(index["models"]) == 2


class TestAttack:
    @pytest.fixture
    def config(self, tmp_path, micro_models):
        from smbea.zoo import save_model
        zoo = tmp_path / "zoo"
        for m in micro_models:
            save_model(m, zoo / m.name)
        (zoo / "zoo.json").write_text(json.dumps({"task": "saliency", "models": [{"name": m.name} for m in micro_models]}))
        cfg = {"task": "saliency", "zoo": str(zoo), "batches": [["micro0", "micro1"], ["micro2", "micro3"]],
               "holdouts": ["micro5"], "attacks": ["none", "smbea"], "batch_counts": [1, 2], "n_test": 2, "hw": 32,
               "attack": {"K": 2, "X": 2}}
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps(cfg))
        return path

    def test_run_and_render(self, config, tmp_path, capsys):
        out = tmp_path / "report"
        assert main(["attack", "run", "--config", str(config), "--out", str(out)]) == 0
        printed = capsys.readouterr().out
        assert "| smbea |" in printed and "report written" in printed
        before = (out / "summary.tsv").read_bytes()
        (out / "summary.tsv").unlink()
        assert main(["report", "render", "--trace", str(out)]) == 0
        assert (out / "summary.tsv").read_bytes() == before

    def test_ablate(self, config, tmp_path, capsys):
        assert main(["ablate", "--config", str(config), "--sweep", "momentum", "--out", str(tmp_path / "ab")]) == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert len(lines) == 1 + 5 * 2
        assert (tmp_path / "ab" / "ablation-momentum.tsv").exists()

    def test_bad_config(self, tmp_path, capsys):
        path = tmp_path / "bad.json"
        path.write_text("{broken")
        assert main(["attack", "run", "--config", str(path)]) == 2
        assert "smbea: attack run failed" in capsys.readouterr().err

    def test_render_missing(self, tmp_path, capsys):
        assert main(["report", "render", "--trace", str(tmp_path / "none")]) == 2
        assert "report render failed" in capsys.readouterr().err


def test_unknown_subcommand():
    with pytest.raises(SystemExit) as exc:
        main(["fly"])
    assert exc.value.code == 2

