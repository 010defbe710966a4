import json

import numpy as np
import pytest

from smbea import harness as H
from smbea.data import load_png, to_uint8
from smbea.zoo import build_model, default_spec, save_model


@pytest.fixture(scope="module")
def tiny_zoo(tmp_path_factory):
    """Seven untrained saliency models: enough for two batches of two plus hold-outs."""
    root = tmp_path_factory.mktemp("zoo")
    names = [f"t{i}" for i in range(7)]
    for i, n in enumerate(names):
        m = build_model(default_spec(1, seed=100 + i, name=n)).freeze()
        save_model(m, root / n)
    (root / "zoo.json").write_text(json.dumps({"task": "saliency", "models": [{"name": n} for n in names]}))
    return root


def make_cfg(zoo, **kw):
    base = dict(task="saliency", zoo=str(zoo), batches=[["t0", "t1"], ["t2", "t3"]], holdouts=["t5", "t6"],
                attacks=["none", "noise", "smbea", "mim"], batch_counts=[1, 2], n_test=3, hw=32,
                attack={"K": 2, "X": 3, "T1_first": 2e-3, "alpha": 5e-4}, n_panels=2)
    base.update(kw)
    return H.ExperimentConfig(**base)


class TestConfig:
    def test_round_trip(self, tiny_zoo, tmp_path):
        cfg = make_cfg(tiny_zoo)
        (tmp_path / "c.json").write_text(json.dumps(cfg.to_dict()))
        assert H.ExperimentConfig.from_json(tmp_path / "c.json") == cfg

    @pytest.mark.parametrize("change,match", [
        (dict(holdouts=["t1"]), "hold-out"),
        (dict(batches=[["t0", "t1", "t2"]]), "expected K"),
        (dict(attacks=["cw"]), "unknown attacks"),
        (dict(batch_counts=[3]), "batch count"),
        (dict(batches=[["t0", "t1"], ["t1", "t2"]]), "more than one"),
        (dict(surrogate="t5"), "surrogate"),
    ])
    def test_invalid(self, tiny_zoo, change, match):
        with pytest.raises(H.HarnessError, match=match):
            make_cfg(tiny_zoo, **change).validate()

    def test_unknown_keys(self):
        with pytest.raises(H.HarnessError):
            H.ExperimentConfig.from_dict({"task": "saliency", "colour": "red"})

    def test_missing_models(self, tiny_zoo):
        with pytest.raises(H.HarnessError, match="missing"):
            H.run_experiment(make_cfg(tiny_zoo, holdouts=["t9"]))

    def test_missing_zoo(self, tmp_path, tiny_zoo):
        with pytest.raises(H.HarnessError, match="no zoo"):
            H.run_experiment(make_cfg(tmp_path / "nothing"))


@pytest.fixture(scope="module")
def result(tiny_zoo):
    return H.run_experiment(make_cfg(tiny_zoo))


class TestRunExperiment:
    def test_null_attack(self, result):
        for n in (1, 2):
            run = result.run("none", n)
            assert all(t.drop == 0.0 for t in run.transfers)
            assert run.l1_mean == 0.0

    def test_budget_parity(self, result):
        for n in (1, 2):
            budgets = {r.budget for r in result.runs if r.batches == n and r.attack != "none"}
            assert len(budgets) == 1

    def test_isolation(self, result):
        assert result.isolation == {"t5": 0, "t6": 0}

    def test_isolation_violation_detected(self, tiny_zoo, monkeypatch):
        models = H.load_models(make_cfg(tiny_zoo))
        original = H._craft

        def leaky(name, n, cfg, models, clean, guide, guide_target, *a):
            from smbea.tensor import Tensor
            models["t5"](Tensor(clean, requires_grad=True))
            return original(name, n, cfg, models, clean, guide, guide_target, *a)

        monkeypatch.setattr(H, "_craft", leaky)
        with pytest.raises(H.IsolationError):
            H.run_experiment(make_cfg(tiny_zoo, attacks=["none"]), models)

    def test_drop_sign_convention(self, result):
        run = result.run("smbea", 2)
        for t in run.transfers:
            assert t.drop == pytest.approx(t.adversarial - t.clean)
            assert t.metric == "cc"
        assert run.strength == pytest.approx(-run.mean_drop)

    def test_adversaries_valid(self, result):
        for r in result.runs:
            assert r.panels["adv"].min() >= 0 and r.panels["adv"].max() <= 1
            if r.attack == "smbea":
                assert r.l1_max <= r.budget + 5e-4

    def test_deterministic(self, tiny_zoo, result):
        again = H.run_experiment(make_cfg(tiny_zoo))
        assert again.table() == result.table()

    def test_guides_are_derangement(self, tiny_zoo):
        clean, _, guide, _ = H.eval_split(make_cfg(tiny_zoo))
        np.testing.assert_array_equal(guide, np.roll(clean, -1, axis=0))


class TestReport:
    def test_files_and_rerender(self, result, tmp_path):
        files = H.write_report(result, tmp_path)
        names = {f.name for f in files}
        assert {"summary.tsv", "summary.md"} <= names
        assert (tmp_path / "trace.jsonl").exists()
        first = {f: f.read_bytes() for f in files}
        again = H.render_report(tmp_path)
        assert {f: f.read_bytes() for f in again} == first
        lines = (tmp_path / "trace.jsonl").read_text().splitlines()
        assert all(json.loads(line)["run"] for line in lines)
        table = (tmp_path / "summary.tsv").read_text().splitlines()
        assert len(table) == 1 + len(result.runs)

    def test_perturbation_panel(self, result, tmp_path):
        H.write_report(result, tmp_path)
        run = result.run("smbea", 1)
        png = load_png(tmp_path / "panels" / f"{run.key}-0.png")
        w = run.panels["clean"].shape[-1]
        expected = np.clip(10 * np.abs(run.panels["clean"][0] - run.panels["adv"][0]), 0, 1)
        np.testing.assert_array_equal(to_uint8(png[:, :, 2 * w:3 * w]), to_uint8(expected))
        assert png.shape[-1] == 6 * w

    def test_empty(self, result, tmp_path):
        with pytest.raises(H.HarnessError):
            H.write_report(H.ExperimentResult(result.config, [], {}), tmp_path)

    def test_unwritable(self, result, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(H.HarnessError):
            H.write_report(result, blocker / "sub")


class TestAblation:
    def test_single_setting_equals_experiment(self, tiny_zoo, result):
        rows = H.ablation_run(make_cfg(tiny_zoo), "strategy", settings=[{"label": "S3_group_pool"}])
        expected = [r.row() for r in result.runs if r.attack == "smbea"]
        assert [{k: v for k, v in row.items() if k not in ("sweep", "setting")} for row in rows] == expected

    def test_momentum_has_control(self, tiny_zoo):
        settings = H._sweep_settings("momentum", make_cfg(tiny_zoo), H.load_models(make_cfg(tiny_zoo)))
        assert {"beta1": 0.0, "beta2": 0.0} in [s["attack"] for s in settings]

    def test_tap_depth_ordered(self, tiny_zoo):
        rows = H.ablation_run(make_cfg(tiny_zoo, batch_counts=[1]), "tap_depth")
        depths = [r["depth"] for r in rows]
        assert depths == sorted(depths) and len(set(depths)) == 3

    def test_empty(self, tiny_zoo):
        with pytest.raises(H.HarnessError):
            H.ablation_run(make_cfg(tiny_zoo), "strategy", settings=[])
        with pytest.raises(H.HarnessError):
            H.ablation_run(make_cfg(tiny_zoo), "colour")

    def test_writes_table(self, tiny_zoo, tmp_path):
        H.ablation_run(make_cfg(tiny_zoo, batch_counts=[1], out=str(tmp_path)), "optimizer")
        rows = json.loads((tmp_path / "ablation-optimizer.json").read_text())
        assert [r["setting"] for r in rows] == ["sgd", "msgd", "adagrad", "rmsprop", "adam"]


def test_pearson_cc():
    a = np.random.default_rng(0).random((3, 1, 4, 4))
    np.testing.assert_allclose(H.pearson_cc(a, a), 1.0)
    assert H.pearson_cc(np.ones((1, 1, 4, 4)), a[:1]) == 0.0
