import json

import pytest

from nnems.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, main


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    """A one-day dataset, a centralized and a decentralized model from it."""
    out = tmp_path_factory.mktemp("cli")
    common = ["--out-dir", str(out), "--quiet"]
    assert main(["dataset", "--days", "1", "--dt", "15", *common]) == EXIT_OK
    assert main(["train", str(out / "dataset.csv"), "--hidden", "4", "--epochs", "30", *common]) == EXIT_OK
    assert main(["train", str(out / "dataset.csv"), "--hidden", "4", "--epochs", "30", "--decentralized",
                 "--out-stem", "local", *common]) == EXIT_OK
    return out


def test_pv_fit_bundled_curve(tmp_path, capsys):
    assert main(["pv-fit", "--out-dir", str(tmp_path)]) == EXIT_OK
    rep = json.loads((tmp_path / "pv_fit.json").read_text())
    assert rep["c1"] == pytest.approx(0.3072, abs=1e-3) and rep["c2"] == pytest.approx(-2.1944, abs=1e-3)
    assert "c1 = 0.307" in capsys.readouterr().out
    assert (tmp_path / "pv-fit.manifest.json").exists()


def test_pv_fit_two_points(tmp_path):
    curve = tmp_path / "two.csv"
    curve.write_text("irr_w_m2,p_panel_w\n0,0\n1000,305\n")
    assert main(["pv-fit", str(curve), "--out-dir", str(tmp_path), "--quiet"]) == EXIT_OK
    rep = json.loads((tmp_path / "pv_fit.json").read_text())
    assert rep["c1"] == pytest.approx(0.305, abs=1e-12) and rep["c2"] == pytest.approx(0.0, abs=1e-9)


def test_pv_fit_empty_file_fails(tmp_path):
    curve = tmp_path / "empty.csv"
    curve.write_text("")
    assert main(["pv-fit", str(curve), "--out-dir", str(tmp_path), "--quiet"]) != EXIT_OK
    assert main(["pv-fit", str(tmp_path / "missing.csv"), "--out-dir", str(tmp_path), "--quiet"]) == EXIT_DATA


def test_dataset_is_reproducible(tmp_path):
    args = ["dataset", "--days", "1", "--dt", "30", "--quiet"]
    assert main([*args, "--out-dir", str(tmp_path / "a")]) == EXIT_OK
    assert main([*args, "--out-dir", str(tmp_path / "b")]) == EXIT_OK
    a = json.loads((tmp_path / "a" / "dataset.manifest.json").read_text())
    b = json.loads((tmp_path / "b" / "dataset.manifest.json").read_text())
    assert a["outputs"]["dataset.csv"] == b["outputs"]["dataset.csv"]
    assert (tmp_path / "a" / "dataset.csv").read_bytes() == (tmp_path / "b" / "dataset.csv").read_bytes()


def test_fixed_bounds_reports_lost_droop(tmp_path):
    assert main(["dataset", "--days", "1", "--dt", "30", "--fixed-bounds", "--quiet",
                 "--out-dir", str(tmp_path)]) == EXIT_OK
    diag = json.loads((tmp_path / "dataset.droop.json").read_text())
    assert diag["droop_effect_lost"] is True
    meta = json.loads((tmp_path / "dataset.meta.json").read_text())
    assert meta["banded"] is False


def test_train_outputs(small_run):
    rep = json.loads((small_run / "model.report.json").read_text())
    assert set(rep["mse"]) == {"train", "val", "test"}
    assert sorted(p.name for p in small_run.glob("local_dg*.json")) == ["local_dg1.json", "local_dg2.json",
                                                                         "local_dg3.json"]


def test_train_rejects_bad_fractions(small_run, tmp_path):
    assert main(["train", str(small_run / "dataset.csv"), "--fractions", "0.5,0.6,0.1",
                 "--out-dir", str(tmp_path), "--quiet"]) == EXIT_USAGE


def test_bad_flag_is_usage_error(tmp_path):
    assert main(["dataset", "--days", "0", "--out-dir", str(tmp_path)]) == EXIT_USAGE
    assert main(["no-such-command"]) == EXIT_USAGE


def test_simulate_and_self_report(small_run, tmp_path):
    common = ["--out-dir", str(tmp_path), "--quiet"]
    assert main(["simulate", "charging", "--controller", str(small_run / "model.json"), "--out-stem", "nn",
                 *common]) == EXIT_OK
    assert main(["simulate", "charging", "--controller", str(small_run), "--out-stem", "local", *common]) == EXIT_OK
    assert (tmp_path / "nn.svg").read_text().startswith("<svg")
    trace = str(tmp_path / "nn.csv")
    assert main(["report", trace, trace, "--events", "4", *common]) == EXIT_OK
    rep = json.loads((tmp_path / "report.json").read_text())
    assert all(v["max"] == 0.0 for v in rep["deltas"].values())
    for name in ("simulate", "report"):
        man = json.loads((tmp_path / f"{name}.manifest.json").read_text())
        assert man["command"] == name and man["outputs"] and man["tool_version"]


def test_simulate_unknown_scenario(tmp_path):
    assert main(["simulate", "no-such-scenario", "--out-dir", str(tmp_path), "--quiet"]) == EXIT_DATA


def test_report_timeline_mismatch(tmp_path):
    common = ["--out-dir", str(tmp_path), "--quiet"]
    assert main(["simulate", "charging", "--out-stem", "c", *common]) == EXIT_OK
    short = tmp_path / "short.csv"
    short.write_text("\n".join((tmp_path / "c.csv").read_text().splitlines()[:50]) + "\n")
    assert main(["report", str(tmp_path / "c.csv"), str(short), *common]) == EXIT_DATA
