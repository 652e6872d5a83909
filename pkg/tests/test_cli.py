import csv
import json

import numpy as np
import pytest

from srot import cli


def run(*argv):
    return cli.main([str(a) for a in argv])


def write_config(path, doc):
    path.write_text(json.dumps(doc))
    return path


SMALL_TOY = {"dataset": {"params": {"n_clean_per_side": 20, "n_type1": 2, "n_type2": 2}}}


@pytest.fixture
def toy_out(tmp_path):
    cfg = write_config(tmp_path / "cfg.json", SMALL_TOY)
    out = tmp_path / "run"
    assert run("gen", "--config", cfg, "--out", out) == 0
    return out, cfg


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


class TestGen:
    def test_layout(self, tmp_path):
        out = tmp_path / "o"
        assert run("gen", "--preset", "toy2d", "--out", out) == 0
        for name in ("config.json", "data", "plans", "traces", "plots", "report.csv"):
            assert (out / name).exists()
        rows = (out / "data" / "dataset.csv").read_text().splitlines()
        assert len(rows) == 161
        cfg = json.loads((out / "config.json").read_text())
        assert cfg["dataset"]["preset"] == "toy2d" and cfg["out"] == str(out)

    def test_flow_preset(self, tmp_path):
        assert run("gen", "--preset", "flow2d", "--out", tmp_path) == 0
        assert len((tmp_path / "data" / "dataset.csv").read_text().splitlines()) == 2001

    def test_bad_preset(self, tmp_path, capsys):
        assert run("gen", "--preset", "mnist", "--out", tmp_path) == 2

    def test_bad_preset_in_config(self, tmp_path):
        cfg = write_config(tmp_path / "c.json", {"dataset": {"preset": "mnist"}})
        assert run("gen", "--config", cfg, "--out", tmp_path) == 2

    def test_unknown_key(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "c.json", {"solver": {"epsilom": 0.1}})
        assert run("gen", "--config", cfg, "--out", tmp_path) == 2
        assert "epsilom" in capsys.readouterr().err

    def test_existing_needs_force(self, toy_out):
        out, cfg = toy_out
        assert run("gen", "--config", cfg, "--out", out) == 1
        assert run("gen", "--config", cfg, "--out", out, "--force") == 0

    def test_no_command(self):
        assert run() == 2

    @pytest.mark.parametrize("value", ["0", "-1", "many"])
    def test_bad_threads(self, tmp_path, monkeypatch, value):
        monkeypatch.setenv("SROT_THREADS", value)
        assert run("gen", "--out", tmp_path) == 2

    def test_threads(self, tmp_path, monkeypatch):
        monkeypatch.setenv("SROT_THREADS", "2")
        assert run("gen", "--out", tmp_path) == 0


class TestTrain:
    def test_missing_dataset(self, tmp_path, capsys):
        assert run("train", "--out", tmp_path, "--data", tmp_path / "nope.csv") == 1
        assert "not found" in capsys.readouterr().err

    def test_outputs(self, toy_out):
        out, cfg = toy_out
        assert run("train", "--config", cfg, "--out", out, "--mode", "ar", "--epochs", "5") == 0
        assert (out / "data" / "model.json").exists()
        hist = read_csv(out / "data" / "history.csv")
        assert hist[-1]["epoch"] == "5"
        det = read_csv(out / "data" / "detection.csv")
        assert len(det) == 44 and set(det[0]) == {"index", "flag", "confidence", "side", "truth"}

    def test_ce_misses_swapped(self, tmp_path):
        out = tmp_path / "ce"
        assert run("gen", "--out", out) == 0
        assert run("train", "--out", out, "--mode", "ce") == 0
        det = [r for r in read_csv(out / "data" / "detection.csv") if r["side"] == "target"]
        assert sum(int(r["flag"]) for r in det if r["truth"] == "1") <= 1


class TestSolve:
    def test_tau_sweep(self, toy_out):
        out, cfg = toy_out
        assert run("solve", "--config", cfg, "--out", out, "--solver", "uot",
                   "--tau", "1000", "1", "0.05") == 0
        rows = read_csv(out / "report.csv")
        assert [r["run"] for r in rows] == ["uot_tau1000", "uot_tau1", "uot_tau0.05"]
        masses = [float(r["mass"]) for r in rows]
        assert masses[0] > masses[1] > masses[2]
        for r in rows:
            assert (out / "plans" / f"plan_{r['run']}.json").exists()
            assert (out / "plots" / f"plan_{r['run']}.svg").exists()

    def test_srot_hard_plot_segments(self, toy_out):
        out, cfg = toy_out
        assert run("train", "--config", cfg, "--out", out, "--epochs", "200") == 0
        assert run("solve", "--config", cfg, "--out", out, "--solver", "srot_hard") == 0
        plan = json.loads((out / "plans" / "plan_srot_hard.json").read_text())
        P = np.array(plan["coupling"])
        det = read_csv(out / "data" / "detection.csv")
        src = np.array([int(r["flag"]) for r in det if r["side"] == "source"], bool)
        tgt = np.array([int(r["flag"]) for r in det if r["side"] == "target"], bool)
        assert np.all(P[src] == 0) and np.all(P[:, tgt] == 0)
        row, = read_csv(out / "report.csv")
        assert int(row["segments"]) == np.count_nonzero(P)

    def test_srot_without_model_trains(self, toy_out):
        out, cfg = toy_out
        doc = dict(SMALL_TOY, classifier={"epochs": 100})
        cfg = write_config(out / "c2.json", doc)
        assert run("solve", "--config", cfg, "--out", out, "--solver", "srot_soft") == 0
        assert (out / "data" / "model.json").exists()

    def test_missing_model_path(self, toy_out):
        out, cfg = toy_out
        assert run("solve", "--config", cfg, "--out", out, "--solver", "srot_hard",
                   "--model", out / "none.json") == 1

    def test_bad_solver(self, toy_out):
        out, _ = toy_out
        assert run("solve", "--out", out, "--solver", "magic") == 2


class TestFlowAndPlot:
    @pytest.fixture
    def flow_out(self, tmp_path):
        cfg = write_config(tmp_path / "cfg.json", {
            "dataset": {"preset": "flow2d", "params": {"n": 60}},
            "classifier": {"epochs": 50},
        })
        out = tmp_path / "flow"
        assert run("gen", "--config", cfg, "--out", out) == 0
        return out, cfg

    def test_default_losses(self, flow_out):
        out, cfg = flow_out
        assert run("flow", "--config", cfg, "--out", out, "--iters", "6", "--log-every", "1") == 0
        rows = read_csv(out / "report.csv")
        assert [r["method"] for r in rows] == ["exact", "partial(m=0.9)", "srot_hard"]
        trace = read_csv(out / "traces" / "srot_hard" / "trace.csv")
        # one row per iteration plus the state after the last step
        assert [int(r["iteration"]) for r in trace] == list(range(7))
        assert all(r["eval"] != "" for r in trace)
        assert (out / "plots" / "flow_traces.svg").exists()

    def test_empty_losses(self, flow_out):
        out, cfg = flow_out
        assert run("flow", "--config", cfg, "--out", out, "--loss") == 2

    def test_plot_rerender(self, flow_out):
        out, cfg = flow_out
        assert run("flow", "--config", cfg, "--out", out, "--iters", "2",
                   "--loss", "wasserstein") == 0
        svg = out / "plots" / "flow_traces.svg"
        before = svg.read_bytes()
        svg.unlink()
        assert run("plot", "--config", cfg, "--out", out) == 0
        assert svg.read_bytes() == before

    def test_plot_nothing(self, tmp_path):
        assert run("plot", "--out", tmp_path / "empty") == 1


class TestLabelprop:
    @pytest.fixture
    def lp_out(self, tmp_path):
        cfg = write_config(tmp_path / "cfg.json", {
            "dataset": {"preset": "labelprop",
                        "params": {"n_per_class": 30, "n_extra": 10, "n_swapped_per_class": 8}},
            "classifier": {"epochs": 30},
        })
        out = tmp_path / "lp"
        assert run("gen", "--config", cfg, "--out", out) == 0
        return out, cfg

    def test_grid(self, lp_out):
        out, cfg = lp_out
        assert run("labelprop", "--config", cfg, "--out", out) == 0
        rows = read_csv(out / "report.csv")
        assert len(rows) == 12
        assert (out / "plots" / "labelprop.svg").exists()

    def test_single_mass(self, lp_out):
        out, cfg = lp_out
        assert run("labelprop", "--config", cfg, "--out", out, "--mass", "0.7",
                   "--methods", "partial") == 0
        rows = read_csv(out / "report.csv")
        assert len(rows) == 1 and float(rows[0]["m"]) == 0.7

    def test_conflicting_flags(self, lp_out):
        out, cfg = lp_out
        assert run("labelprop", "--config", cfg, "--out", out, "--mass", "0.7",
                   "--mass-grid", "0.5", "0.9") == 2

    def test_bad_threshold(self, lp_out):
        out, cfg = lp_out
        assert run("labelprop", "--config", cfg, "--out", out, "--threshold", "2") == 2


class TestDeterminism:
    def test_byte_identical(self, tmp_path):
        cfg = write_config(tmp_path / "cfg.json", dict(SMALL_TOY, classifier={"epochs": 100}))
        outs = []
        for k in range(2):
            out = tmp_path / f"r{k}"
            assert run("gen", "--config", cfg, "--out", out, "--seed", 0) == 0
            assert run("train", "--config", cfg, "--out", out, "--seed", 0) == 0
            assert run("solve", "--config", cfg, "--out", out, "--seed", 0,
                       "--solver", "srot_soft") == 0
            outs.append(out)
        files = sorted(p.relative_to(outs[0]) for p in outs[0].rglob("*")
                       if p.is_file() and p.name != "config.json")
        assert len(files) >= 8
        for rel in files:
            assert (outs[0] / rel).read_bytes() == (outs[1] / rel).read_bytes(), rel

    def test_seed_changes_data(self, tmp_path):
        run("gen", "--out", tmp_path / "a", "--seed", 1)
        run("gen", "--out", tmp_path / "b", "--seed", 2)
        a = (tmp_path / "a" / "data" / "dataset.csv").read_bytes()
        assert a != (tmp_path / "b" / "data" / "dataset.csv").read_bytes()
