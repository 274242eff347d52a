import json

import pytest

from tedsim.cli import EXIT_CONFIG, EXIT_FAIL, EXIT_OK, REPORT_VERSION, main

FOUR_RANKS = ["--world-size", "4", "--tensor-parallel", "2", "--experts", "2", "--seed", "0"]


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_train_report(capsys):
    code, out, _ = run(capsys, "train", *FOUR_RANKS, "--ckpt")
    assert code == EXIT_OK
    rep = json.loads(out)
    assert rep["version"] == REPORT_VERSION
    assert rep["config"]["flags"]["ckpt"] is True
    assert rep["ledger_matches_prediction"]
    assert len(rep["memory"]) == 4 and len(rep["losses"]) == 1
    assert rep["equivalence"]["first_step_grad_max_abs_diff_vs_serial"] <= 1e-9
    phases = {(r["phase"], r["op"]): r["calls"] for r in rep["ledger"]}
    for ph in ("forward", "recompute", "backward"):
        assert phases[(ph, "all-to-all")] == 2 and phases[(ph, "all-reduce")] == 2
    assert phases[("grad-sync", "all-reduce")] == 1
    assert phases[("optim", "all-gather")] == 1


def test_train_is_byte_identical(capsys):
    _, a, _ = run(capsys, "train", *FOUR_RANKS, "--dtd", "--steps", "2")
    _, b, _ = run(capsys, "train", *FOUR_RANKS, "--dtd", "--steps", "2")
    assert a == b


def test_single_rank_has_empty_ledger(capsys):
    code, out, _ = run(capsys, "train", "--world-size", "1", "--tensor-parallel", "1", "--experts", "1", "--seed", "3")
    assert code == EXIT_OK and json.loads(out)["ledger"] == []


def test_config_file_and_overrides(tmp_path, capsys):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"world_size": 8, "tensor_parallel": 2, "experts": 2, "seed": 1, "flags": {"dtd": True}}))
    out = tmp_path / "report.json"
    code, _, _ = run(capsys, "train", "--config", str(cfg), "--experts", "4", "--out", str(out))
    rep = json.loads(out.read_text())
    assert code == EXIT_OK
    assert rep["config"]["experts"] == 4 and rep["config"]["flags"]["dtd"] is True


@pytest.mark.parametrize(
    "argv, msg",
    [
        (["--world-size", "6", "--tensor-parallel", "4", "--experts", "2", "--seed", "0"], "G_tensor=4 does not divide G=6"),
        (["--world-size", "4", "--tensor-parallel", "2", "--experts", "2"], "seed"),
        (["--world-size", "4", "--tensor-parallel", "2", "--experts", "2", "--seed", "0", "--tokens", "3", "--dtd"], "dtd"),
    ],
)
def test_invalid_configs_exit_two(capsys, argv, msg):
    code, _, err = run(capsys, "train", *argv)
    assert code == EXIT_CONFIG and msg in err


def test_unknown_config_field(tmp_path, capsys):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"world_size": 4, "capacity_factor": 1.0}))
    code, _, err = run(capsys, "ledger", "--config", str(cfg), "--seed", "0")
    assert code == EXIT_CONFIG and "capacity_factor" in err


def test_cac_without_ckpt_warns(capsys):
    code, _, err = run(capsys, "train", *FOUR_RANKS, "--cac")
    assert code == EXIT_OK and "--cac has no effect without --ckpt" in err


def test_verify_passes(capsys):
    code, out, _ = run(capsys, "verify", *FOUR_RANKS, "--dtd", "--no-sweep")
    rep = json.loads(out)
    assert code == EXIT_OK and rep["failed"] == 0 and rep["checks"]


def test_verify_catches_corrupted_drop(capsys):
    code, out, err = run(capsys, "verify", *FOUR_RANKS, "--dtd", "--no-sweep", "--inject-drop-fault", "--format", "csv")
    assert code == EXIT_FAIL
    assert "FAIL  token conservation" in out and "FAIL" in err


def test_ledger_csv_and_prediction(capsys):
    _, measured, _ = run(capsys, "ledger", *FOUR_RANKS, "--ckpt", "--cac", "--format", "csv")
    _, predicted, _ = run(capsys, "ledger", *FOUR_RANKS, "--ckpt", "--cac", "--format", "csv", "--predicted")
    assert measured == predicted
    assert measured.splitlines()[0] == "phase,group_kind,op,calls,payload_bytes,metadata_bytes"
    assert "recompute" not in measured


def test_plan(capsys):
    code, out, _ = run(capsys, "plan")
    rows = json.loads(out)
    assert code == EXIT_OK and [r["G"] for r in rows[::2]] == [32, 64, 128, 256, 512]
    _, out, _ = run(capsys, "plan", "--tensor-max", "1", "--format", "csv")
    assert all(line.endswith(",1.0") for line in out.splitlines()[1:])
    code, _, _ = run(capsys, "plan", "--memory", "-1")
    assert code == EXIT_CONFIG
