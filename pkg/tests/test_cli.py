import json
import subprocess
import sys

import pandas as pd
import pytest

from dpmnl import cli

from cli_pipeline import run_pipeline, snapshot


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    codes = run_pipeline(out, threads=1)
    return out, codes


def test_pipeline_exit_codes(pipeline):
    _, codes = pipeline
    assert codes["simulate"] == cli.EXIT_OK
    assert codes["mnl"] == cli.EXIT_OK and codes["summarize"] == cli.EXIT_OK
    assert codes["dp_demo"] == cli.EXIT_OK
    for name in ("lc", "dpm", "crossval_dpm", "crossval_lc"):
        assert codes[name] in (cli.EXIT_OK, cli.EXIT_NONCONVERGED)


def test_pipeline_outputs(pipeline):
    out, _ = pipeline
    rate = json.loads((out / "sim_III_error_rate.json").read_text())
    assert 0 <= rate["error_rate"] < 0.5
    model = json.loads((out / "dpm_model.json").read_text())
    assert model["alpha_hat"] > 0 and model["K"] == 5
    sweep = pd.read_csv(out / "lc_sweep.csv")
    assert sweep.K.tolist() == [1, 2] and sweep.aic_best.sum() == 1 and sweep.bic_best.sum() == 1
    cv = pd.read_csv(out / "crossval_dpm.csv")
    assert len(cv) == 3 and cv.n_holdout.sum() == 60
    assert (out / "dp_demo_alpha_1.csv").exists() and (out / "dpm_model_draws.csv").exists()
    wtp = pd.read_csv(out / "mnl_wtp_summary.csv")
    assert wtp.attribute.tolist() == ["ivtt", "ovtt"]


def test_rerun_byte_identical_across_threads(pipeline, tmp_path):
    out, codes = pipeline
    again = run_pipeline(tmp_path / "again", threads=3)
    assert again == codes
    a, b = snapshot(out), snapshot(tmp_path / "again")
    assert a.keys() == b.keys()
    assert [k for k in a if a[k] != b[k]] == []


def test_invalid_experiment_is_usage_error(tmp_path):
    with pytest.raises(SystemExit) as exc:
        cli.main(["simulate", "--experiment", "V", "--output-dir", str(tmp_path)])
    assert exc.value.code == cli.EXIT_USAGE


def test_folds_exceeding_individuals(pipeline, tmp_path):
    out, _ = pipeline
    rc = cli.main(["crossval", "--data", str(out / "sim_III_data.csv"), "--model", "mnl",
                   "--folds", "61", "--output-dir", str(tmp_path)])
    assert rc == cli.EXIT_USAGE


def test_missing_data_file(tmp_path):
    rc = cli.main(["estimate", "--data", str(tmp_path / "nope.csv"), "--model", "mnl",
                   "--output-dir", str(tmp_path)])
    assert rc == cli.EXIT_DATA


def test_config_unknown_key_rejected(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"seed": 1, "simulate": {"experiment": "I", "colour": "red"}}))
    rc = cli.main(["simulate", "--config", str(cfg), "--output-dir", str(tmp_path)])
    assert rc == cli.EXIT_USAGE
    assert not (tmp_path / "sim_I_data.csv").exists()


def test_flags_override_config(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"seed": 1, "simulate": {"experiment": "I", "n": 9, "t": 2}}))
    assert cli.main(["simulate", "--config", str(cfg), "--n", "12",
                     "--output-dir", str(tmp_path)]) == cli.EXIT_OK
    rep = json.loads((tmp_path / "sim_I_error_rate.json").read_text())
    assert (rep["N"], rep["T"], rep["seed"]) == (12, 2, 1)


def test_output_dir_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUTPUT_DIR_ENV, str(tmp_path / "env"))
    assert cli.main(["dp-demo", "--alphas", "2", "--draws", "50"]) == cli.EXIT_OK
    assert (tmp_path / "env" / "dp_demo_alpha_2.csv").exists()


def test_tiny_alpha_single_atom(tmp_path):
    assert cli.main(["dp-demo", "--alphas", "1e-8", "--draws", "1000",
                     "--output-dir", str(tmp_path)]) == cli.EXIT_OK
    summary = pd.read_csv(tmp_path / "dp_demo_summary.csv")
    assert summary.distinct_atoms.tolist() == [1]
    hist = pd.read_csv(tmp_path / "dp_demo_alpha_1e-08.csv")
    assert (hist["count"] > 0).sum() == 1 and hist["count"].sum() == 1000


def test_dp_demo_truncation_floor():
    assert cli.dp_demo_truncation(1.0) == 150
    assert cli.dp_demo_truncation(1000.0) > 150


def test_nonpositive_values_rejected(tmp_path):
    assert cli.main(["dp-demo", "--alphas", "0", "--output-dir", str(tmp_path)]) == cli.EXIT_USAGE
    assert cli.main(["simulate", "--experiment", "I", "--n", "0",
                     "--output-dir", str(tmp_path)]) == cli.EXIT_USAGE


def test_console_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "dpmnl.cli", "dp-demo", "--alphas", "3",
                        "--draws", "20", "--output-dir", str(tmp_path)], capture_output=True)
    assert r.returncode == 0
    assert (tmp_path / "dp_demo_summary.csv").exists()
