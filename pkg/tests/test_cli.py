import json

import pytest

from kmsflow import cli
from kmsflow.errors import ConfigInvalid

EX3 = {"inclusion": {"kind": "diag_in_matn", "n": 3}, "generator": {"kind": "example_n3", "mu": 2.0},
       "flow": {"T": 1.0, "step": 0.05, "seed": 42}, "checks": ["kms", "master_identity"]}


@pytest.fixture
def ex3(tmp_path):
    p = tmp_path / "ex3.json"
    p.write_text(json.dumps(EX3))
    return str(p)


def test_schema_rejects_unknown_keys():
    with pytest.raises(ConfigInvalid):
        cli.validate_config(dict(EX3, surprise=1))


def test_tensor_size_gate():
    cfg = dict(EX3, inclusion={"kind": "diag_in_matn", "n": 100}, checks=["model_check"])
    with pytest.raises(ConfigInvalid):
        cli.validate_config(cfg)


def test_verify_exit_zero(ex3, capsys):
    assert cli.main(["verify", "--config", ex3, "--json"]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["all_pass"]
    assert all(r["seed"] == 0 for r in rep["records"])


def test_master_identity_reports_failure(ex3, capsys):
    assert cli.main(["run", "--config", ex3, "--json"]) == 1
    rep = json.loads(capsys.readouterr().out)
    rec = [r for r in rep["records"] if r["check"] == "master_identity"][0]
    assert not rec["pass"] and rec["residual"] > 0.1


def test_bad_config_exit_two(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text(json.dumps({"generator": {"kind": "example_n3"}, "oops": True}))
    assert cli.main(["verify", "--config", str(p)]) == 2


def test_flow_csv(ex3, capsys):
    assert cli.main(["flow", "--config", ex3, "--T", "0.5", "--step", "0.01"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "t,entropy,speed,bound,slack"
    ent = [float(l.split(",")[1]) for l in lines[1:]]
    assert all(b <= a + 1e-14 for a, b in zip(ent, ent[1:]))


def test_coarse_step_flags_integration_error(ex3, capsys):
    assert cli.main(["flow", "--config", ex3, "--T", "0.5", "--step", "0.05", "--json"]) == 1
    rec = json.loads(capsys.readouterr().out)["records"][0]
    assert rec["residual"] > 1e-8


def test_out_dir_written(ex3, tmp_path):
    out = tmp_path / "out"
    cli.main(["flow", "--config", ex3, "--T", "0.2", "--step", "0.05", "--out", str(out)])
    assert (out / "flow.json").exists() and (out / "flow.csv").exists()


def test_reports_are_byte_identical(ex3, capsys):
    cli.main(["run", "--config", ex3, "--json", "--seed", "3"])
    a = capsys.readouterr().out
    cli.main(["run", "--config", ex3, "--json", "--seed", "3"])
    assert capsys.readouterr().out == a
    assert "runtime_ms" not in a


def test_timing_flag(ex3, capsys):
    cli.main(["verify", "--config", ex3, "--json", "--timing"])
    assert "runtime_ms" in capsys.readouterr().out


def test_clifford_subcommand(capsys):
    assert cli.main(["clifford", "--a", "0.7", "--mu", "2.0"]) == 0
    rec = json.loads(capsys.readouterr().out)["records"][0]
    assert rec["B"][0] == pytest.approx([1.25, 0.4], abs=1e-10)
    assert rec["B"][1] == pytest.approx([0.4, 1.25], abs=1e-10)
    assert rec["beta"] == pytest.approx(0.85)
