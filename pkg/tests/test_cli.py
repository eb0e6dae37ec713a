import json

import pytest

from causalbench.cli import main, read_config
from causalbench.core import read_graph
from causalbench.errors import ConfigError


@pytest.fixture
def synth_dir(tmp_path):
    out = tmp_path / "syn"
    assert main(["synth", "--d", "6", "--edge-prob", "0.4", "--seed", "3", "--cells-per-condition", "60",
                 "--out-dir", str(out)]) == 0
    return out


def test_ground_truth_writes_outputs(synth_dir, tmp_path):
    out = tmp_path / "gt"
    code = main(["ground-truth", "--panel", str(synth_dir / "panel.txt"), "--matrix", str(synth_dir / "matrix.tsv"),
                 "--labels", str(synth_dir / "labels.tsv"), "--out-dir", str(out)])
    assert code == 0
    panel, g = read_graph(out / "ancestral_graph.csv")
    assert panel.d == 6
    assert (out / "test_ledger.csv").read_text().count("\n") == 4 + 30
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "ground-truth"
    assert set(manifest["outputs"]) == {"ancestral_graph.csv", "test_ledger.csv"}


def run_oracle(synth_dir, out, cache):
    return main(["run", "--panel", str(synth_dir / "panel.txt"), "--truth", str(synth_dir / "true_dag.csv"),
                 "--backend", "mock:oracle", "--repetitions", "2", "--cache-dir", str(cache),
                 "--out-dir", str(out)])


def test_run_then_evaluate(synth_dir, tmp_path, capsys):
    out = tmp_path / "run"
    assert run_oracle(synth_dir, out, tmp_path / "cache") == 0
    capsys.readouterr()
    pred = out / "predictions" / "naive__none__none__rep0.csv"
    assert main(["evaluate", "--truth", str(synth_dir / "true_dag.csv"), "--pred", str(pred)]) == 0
    assert capsys.readouterr().out == "auroc\t1.000000\n"
    ev = tmp_path / "ev"
    assert main(["evaluate", "--truth", str(synth_dir / "true_dag.csv"), "--pred-dir", str(out / "predictions"),
                 "--out-dir", str(ev)]) == 0
    assert "naive/none/none\t1.000000\t0.000000" in capsys.readouterr().out
    assert (ev / "auroc_matrix_none.csv").read_text().splitlines()[1] == "none,1.000 (0.000),,,,,,"


def test_rerun_is_byte_identical(synth_dir, tmp_path):
    out = tmp_path / "run"
    run_oracle(synth_dir, out, tmp_path / "cache")
    first = {p.name: p.read_bytes() for p in sorted(out.rglob("*")) if p.is_file()}
    run_oracle(synth_dir, out, tmp_path / "cache")
    second = {p.name: p.read_bytes() for p in sorted(out.rglob("*")) if p.is_file()}
    assert first == second


def test_literature_analysis(tmp_path, capsys):
    code = main(["literature-analysis", "--table", "4060,5639,78,123", "--grid-points", "200",
                 "--out-dir", str(tmp_path)])
    assert code == 0
    text = capsys.readouterr().out
    assert "fisher_one_sided_p   0.213262" in text
    boschloo = float(text.split("boschloo_one_sided_p")[1].split()[0])
    assert boschloo == pytest.approx(0.2075, abs=0.002)


def test_prompt_render(capsys):
    assert main(["prompts", "render", "--pair", "ATR,CD47"]) == 0
    assert capsys.readouterr().out.rstrip("\n").endswith("Probability =")


def test_config_precedence(tmp_path, monkeypatch, capsys):
    conf = tmp_path / "c.conf"
    conf.write_text("# comment\nvariants = naive/none/simple   # trailing\nrepetitions = 2\n")
    (tmp_path / "panel.txt").write_text("A\nB\n")
    monkeypatch.setenv("CAUSALBENCH_REPETITIONS", "7")
    monkeypatch.setenv("CAUSALBENCH_VARIANTS", "cancer/none/none")
    base = ["prompts", "plan", "--panel", str(tmp_path / "panel.txt"), "--out-dir", str(tmp_path / "o")]

    def plan_rows(*extra):
        assert main(base + list(extra)) == 0
        return (tmp_path / "o" / "plan.csv").read_text().splitlines()[1:]

    rows = plan_rows()
    assert len(rows) == 14 and rows[0].split(",")[2] == "cancer/none/none"
    rows = plan_rows("--config", str(conf))
    assert len(rows) == 4 and rows[0].split(",")[2] == "naive/none/simple"
    rows = plan_rows("--config", str(conf), "--repetitions", "1")
    assert len(rows) == 2
    monkeypatch.delenv("CAUSALBENCH_REPETITIONS")
    monkeypatch.delenv("CAUSALBENCH_VARIANTS")
    assert len(plan_rows()) == 2


def test_config_file_errors(tmp_path):
    bad = tmp_path / "bad.conf"
    bad.write_text("no_such_setting = 1\n")
    with pytest.raises(ConfigError, match="unknown setting"):
        read_config(bad)
    assert main(["synth", "--config", str(bad), "--out-dir", str(tmp_path)]) == 2


def test_usage_errors(tmp_path, capsys):
    assert main(["synth", "--bogus"]) == 2
    assert "usage:" in capsys.readouterr().err
    assert main(["evaluate", "--pred", "x.csv"]) == 2
    assert main(["synth", "--d", "many"]) == 2
    assert main(["evaluate", "--truth", str(tmp_path / "missing.csv"), "--pred", "x.csv"]) == 3
