import json
import re

import numpy as np
import pytest

from oracles import relu_net
from refxplain.cli import main, run_selfcheck
from refxplain.network import load_network, save_network, strip_biases

TINY = {
    "datasets": ["linear"],
    "repeats": 1,
    "hidden": 8,
    "max_instances": 3,
    "k_random": 10,
    "settings": {"linear": {"n": 120, "retrain_epochs": 2, "train": {"epochs": 10, "learning_rate": 0.05}}},
}


def values(out: str) -> dict[str, float]:
    found = {}
    for line in out.splitlines():
        parts = line.split()
        if len(parts) >= 2:
            try:
                found[parts[0]] = float(parts[1])
            except ValueError:
                pass
    return found


class TestTrain:
    def test_writes_network_and_metrics(self, tmp_path, capsys):
        out = tmp_path / "net.json"
        assert main(["train", "--dataset", "linear", "--n", "300", "--hidden", "16", "--epochs", "300", "--lr", "0.05",
                     "--out", str(out)]) == 0
        text = capsys.readouterr().out
        assert "dataset linear: n=300 d=8" in text
        net = load_network(out)
        assert net.input_dim == 8 and net.metadata["dataset"]["name"] == "linear"
        metrics = json.loads((tmp_path / "net.json.metrics.json").read_text())
        assert metrics["test_r2"] > 0.9

    def test_missing_out_is_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            main(["train", "--dataset", "linear"])
        assert exc.value.code == 2

    def test_bad_csv_path(self, tmp_path, capsys):
        assert main(["train", "--dataset", "csv", "--path", str(tmp_path / "none.csv"),
                     "--out", str(tmp_path / "n.json")]) == 1
        assert "error" in capsys.readouterr().err.lower()


class TestExplain:
    def test_auction_demo(self, capsys):
        assert main(["explain", "--builtin", "max2", "--input", "1100,900", "--reference", "1000",
                     "--method", "shapley", "--baseline", "1000,1000"]) == 0
        v = values(capsys.readouterr().out)
        assert v["prediction"] == 1100.0 and v["x1"] == 100.0 and v["x2"] == 0.0

    def test_reference_and_q_conflict(self):
        with pytest.raises(SystemExit) as exc:
            main(["explain", "--builtin", "max2", "--input", "1,2", "--reference", "1", "--q", "0.5"])
        assert exc.value.code == 2

    def test_shapley_refused_for_wide_input(self, tmp_path, rng, capsys):
        path = tmp_path / "wide.json"
        save_network(relu_net(rng, 25, hidden=4), path)
        x = ",".join(["0.1"] * 25)
        assert main(["explain", str(path), "--input", x, "--method", "shapley"]) == 1
        assert "refused" in capsys.readouterr().err

    def test_lrp_zero_reference_conserves(self, tmp_path, rng, capsys):
        net = strip_biases(relu_net(rng, 4))
        path = tmp_path / "nb.json"
        save_network(net, path)
        x = rng.normal(size=4)
        out = tmp_path / "e.json"
        assert main(["explain", str(path), "--input=" + ",".join(repr(float(v)) for v in x), "--reference", "0",
                     "--gamma", "0.5,0", "--out", str(out)]) == 0
        doc = json.loads(out.read_text())
        assert sum(doc["attributions"]) == pytest.approx(float(net.predict(x)), abs=1e-9)
        assert abs(doc["conservation_gap"]) < 1e-9

    def test_restructure_needs_reference(self, capsys):
        assert main(["explain", "--builtin", "max2", "--input", "1,2", "--method", "restructure-lrp"]) == 1

    def test_wrong_input_length(self, capsys):
        assert main(["explain", "--builtin", "max2", "--input", "1,2,3"]) == 1

    def test_values_print_at_full_precision(self, capsys):
        main(["explain", "--builtin", "max2", "--input", "0.1,0.2", "--method", "gxi"])
        out = capsys.readouterr().out
        assert re.search(r"prediction\s+0\.2\b", out)


class TestSelfcheck:
    def test_passes(self, capsys):
        assert main(["selfcheck"]) == 0
        assert "FAIL" not in capsys.readouterr().out

    def test_injected_bias_fails(self, capsys):
        assert main(["selfcheck", "--inject-bias"]) == 1

    def test_named_checks(self):
        names = [name for name, ok, _ in run_selfcheck(n_nets=3)]
        assert len(names) == len(set(names)) >= 4


class TestBenchmarkCommand:
    def test_runs_and_is_reproducible(self, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps(TINY))
        assert main(["benchmark", "--config", str(cfg), "--seed", "3", "--out", str(tmp_path / "a")]) == 0
        assert main(["benchmark", "--config", str(cfg), "--seed", "3", "--out", str(tmp_path / "b")]) == 0
        for name in ("table.csv", "figure_means.csv", "report.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_unknown_key_rejected(self, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({**TINY, "repeets": 3}))
        assert main(["benchmark", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1
        assert "repeets" in capsys.readouterr().err
