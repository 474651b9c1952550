import json
import os

import numpy as np
import pytest

from adace.cli import main
from adace.simulation import SETTINGS, generate_trial
from adace.trial_data import save_csv

from _fixtures import random_trial_fixture


@pytest.fixture()
def toy_csv(tmp_path):
    ds = random_trial_fixture(np.random.default_rng(1), n_per_arm=15, K=3)
    path = tmp_path / "trial.csv"
    save_csv(ds, path)
    return str(path)


def read(path):
    with open(path, "rb") as fh:
        return fh.read()


class TestEstimateCommand:
    def test_deterministic_outputs(self, toy_csv, tmp_path):
        out1, out2 = str(tmp_path / "o1"), str(tmp_path / "o2")
        argv = [toy_csv, "--stratum", "s++", "--M", "5", "--B", "4",
                "--seed", "1"]
        assert main(["estimate", *argv, "--out", out1]) == 0
        assert main(["estimate", *argv, "--out", out2]) == 0
        assert read(os.path.join(out1, "estimates.csv")) == read(
            os.path.join(out2, "estimates.csv"))
        assert read(os.path.join(out1, "inference.csv")) == read(
            os.path.join(out2, "inference.csv"))
        lines = read(os.path.join(out1, "estimates.csv")).decode().splitlines()
        assert lines[0] == "stratum,subset,treatment,estimate,n_effective,M"
        assert len(lines) == 4  # header + three treatment rows for one stratum

    def test_baseline_only_differs_on_z_dependent_data(self, tmp_path):
        ds, _ = generate_trial(SETTINGS["setting1"], seed=77)
        data = tmp_path / "trial.csv"
        save_csv(ds, data)
        out_full, out_base = str(tmp_path / "full"), str(tmp_path / "base")
        common = [str(data), "--stratum", "s*+", "--M", "4", "--B", "2",
                  "--seed", "3", "--variance", "rubin"]
        assert main(["estimate", *common, "--mode", "full", "--out", out_full]) == 0
        assert main(["estimate", *common, "--mode", "baseline-only",
                     "--out", out_base]) == 0
        assert read(os.path.join(out_full, "estimates.csv")) != read(
            os.path.join(out_base, "estimates.csv"))

    def test_missing_file_names_path(self, tmp_path, capsys):
        code = main(["estimate", str(tmp_path / "nope.csv"), "--M", "2",
                     "--B", "2", "--out", str(tmp_path / "o")])
        assert code != 0
        assert "nope.csv" in capsys.readouterr().err

    def test_invalid_data_rejected(self, tmp_path, capsys):
        path = tmp_path / "bad.csv"
        path.write_text("subject_id,arm,x1,z1,i1,y\n"
                        "a,0,1.0,2.0,0,3.5\n"   # outcome after dropout
                        "b,1,1.0,2.0,1,1.0\n")
        code = main(["estimate", str(path), "--out", str(tmp_path / "o")])
        assert code != 0
        assert "y-after-dropout" in capsys.readouterr().err


class TestSimulateCommand:
    def test_smoke_and_identical_reruns(self, tmp_path):
        out1, out2 = str(tmp_path / "s1"), str(tmp_path / "s2")
        argv = ["simulate", "--setting", "setting1", "--R", "2", "--M", "3",
                "--B", "3", "--seed", "5"]
        assert main([*argv, "--out", out1]) == 0
        assert main([*argv, "--out", out2]) == 0
        assert read(os.path.join(out1, "study.csv")) == read(
            os.path.join(out2, "study.csv"))
        header = read(os.path.join(out1, "study.csv")).decode().splitlines()[0]
        assert header == "parameter,true,estimate,bias,boot_se,boot_cp,rubin_se,rubin_cp"

    def test_null_adds_rejection_column_for_both_adherers_difference(self, tmp_path):
        out = str(tmp_path / "null")
        assert main(["simulate", "--setting", "setting2", "--R", "2", "--M", "3",
                     "--B", "3", "--seed", "5", "--null", "--out", out]) == 0
        lines = read(os.path.join(out, "study.csv")).decode().splitlines()
        assert lines[0].endswith(",reject_rate")
        cells = {ln.split(",")[0]: ln.split(",")[-1] for ln in lines[1:]}
        assert cells["mu_d_++"] != ""
        assert cells["mu_d_*+"] == ""
        assert cells["mu_0_++"] == ""

    def test_unknown_setting_fails(self, tmp_path, capsys):
        code = main(["simulate", "--setting", "setting9", "--R", "1",
                     "--out", str(tmp_path / "o")])
        assert code != 0
        assert "setting9" in capsys.readouterr().err


class TestOracleCommand:
    def test_writes_six_parameters(self, tmp_path):
        out = str(tmp_path / "oracle")
        assert main(["oracle", "--setting", "setting1", "--n", "2e4",
                     "--seed", "2", "--out", out]) == 0
        lines = read(os.path.join(out, "oracle.csv")).decode().splitlines()
        assert lines[0] == "parameter,value,mc_se,stratum_n"
        assert len(lines) == 7
        assert {ln.split(",")[0] for ln in lines[1:]} == {
            "mu_0_*+", "mu_1_*+", "mu_d_*+", "mu_0_++", "mu_1_++", "mu_d_++"}

    def test_invalid_config_file_rejected(self, tmp_path, capsys):
        cfg = tmp_path / "broken.txt"
        text = []
        for key, value in SETTINGS["setting1"].as_dict().items():
            if isinstance(value, list):
                text.append(f"{key} = {', '.join(map(str, value))}")
            else:
                text.append(f"{key} = {value}")
        text = "\n".join(text).replace("sigma_eta = 0.4", "sigma_eta = 0.0")
        cfg.write_text(text + "\n")
        code = main(["oracle", "--setting", str(cfg), "--n", "1e3",
                     "--out", str(tmp_path / "o")])
        assert code != 0
        assert "sigma_eta" in capsys.readouterr().err


class TestManifest:
    def test_round_trip_reproduces_bytes(self, tmp_path):
        out = str(tmp_path / "run")
        assert main(["simulate", "--setting", "setting1", "--R", "2", "--M", "3",
                     "--B", "3", "--seed", "7", "--out", out]) == 0
        manifest = os.path.join(out, "manifest.json")
        with open(manifest) as fh:
            doc = json.load(fh)
        assert doc["command"] == "simulate" and doc["config"]["mu_x"] == 8.0
        replay = str(tmp_path / "replay")
        assert main(["--from-manifest", manifest, "--out", replay]) == 0
        assert read(os.path.join(out, "study.csv")) == read(
            os.path.join(replay, "study.csv"))

    def test_estimate_manifest_round_trip(self, toy_csv, tmp_path):
        out = str(tmp_path / "run")
        assert main(["estimate", toy_csv, "--M", "4", "--B", "3", "--seed", "2",
                     "--out", out]) == 0
        replay = str(tmp_path / "replay")
        assert main(["--from-manifest", os.path.join(out, "manifest.json"),
                     "--out", replay]) == 0
        for name in ("estimates.csv", "inference.csv"):
            assert read(os.path.join(out, name)) == read(os.path.join(replay, name))

    def test_missing_manifest(self, tmp_path, capsys):
        assert main(["--from-manifest", str(tmp_path / "none.json")]) != 0
        assert "none.json" in capsys.readouterr().err

    def test_replay_survives_deleted_config_file(self, tmp_path):
        # the manifest embeds the config snapshot, so replay must not need
        # the original file
        from adace.simulation import SETTINGS, save_config
        cfg_path = tmp_path / "my-setting.txt"
        save_config(SETTINGS["setting2"], cfg_path)
        out = str(tmp_path / "run")
        assert main(["oracle", "--setting", str(cfg_path), "--n", "1e4",
                     "--seed", "9", "--out", out]) == 0
        cfg_path.unlink()
        replay = str(tmp_path / "replay")
        assert main(["--from-manifest", os.path.join(out, "manifest.json"),
                     "--out", replay]) == 0
        assert read(os.path.join(out, "oracle.csv")) == read(
            os.path.join(replay, "oracle.csv"))


def test_threads_do_not_change_results(tmp_path):
    outs = []
    for threads in ("1", "2"):
        out = str(tmp_path / f"t{threads}")
        assert main(["simulate", "--setting", "setting2", "--R", "2", "--M", "3",
                     "--B", "2", "--seed", "11", "--threads", threads,
                     "--out", out]) == 0
        outs.append(read(os.path.join(out, "study.csv")))
    assert outs[0] == outs[1]
