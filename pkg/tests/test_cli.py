"""Command-line interface: every subcommand end to end, plus exit codes."""

import json
import os
import socket
import subprocess
import sys
import time

import numpy as np
import pytest

from coalseg.cli import main, resolve_model_config
from coalseg.checkpoint import load_checkpoint
from coalseg.data import load_dataset
from coalseg.model import config_to_dict, preset


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli-data")
    rc = main(["synth", "--n", "6", "--seed", "3", "--size", "64",
               "--out", str(root)])
    assert rc == 0
    return root


SMALL_MODEL = ["--channels", "8", "--depths", "1,1,1,1", "--input-size", "64,64"]


# -- wiring and exit codes ---------------------------------------------------


def test_no_subcommand_prints_usage_and_exits_2(capsys):
    assert main([]) == 2
    assert "usage" in capsys.readouterr().err


def test_unknown_flag_exits_2():
    with pytest.raises(SystemExit) as exc:
        main(["analyze", "--bogus-flag"])
    assert exc.value.code == 2


def test_runtime_failure_exits_1(tmp_path, capsys):
    rc = main(["train", "--data", str(tmp_path / "missing"),
               "--out", str(tmp_path / "out")])
    assert rc == 1
    assert "error" in capsys.readouterr().err


def test_module_entry_point_runs():
    out = subprocess.run(
        [sys.executable, "-m", "coalseg.cli", "analyze", "--scale", "tiny"],
        capture_output=True, text=True, timeout=120,
    )
    assert out.returncode == 0
    assert "81.1791" in out.stdout


# -- config resolution -------------------------------------------------------


def test_flags_override_preset():
    cfg = resolve_model_config(
        _parse(["analyze", "--scale", "tiny", "--mlp-ratio", "2.0",
                "--depths", "1,1,1,1"]))
    assert cfg.base_channels == preset("tiny").base_channels
    assert cfg.mlp_ratio == 2.0
    assert cfg.depths == (1, 1, 1, 1)


def test_config_file_then_flag_precedence(tmp_path):
    path = tmp_path / "model.json"
    path.write_text(json.dumps(config_to_dict(preset("small"))))
    cfg = resolve_model_config(_parse(["analyze", "--config", str(path)]))
    assert cfg == preset("small")
    cfg = resolve_model_config(
        _parse(["analyze", "--config", str(path), "--channels", "16"]))
    assert cfg.base_channels == 16
    assert cfg.depths == preset("small").depths


def test_custom_branches_resolve_and_mismatch_rejected():
    cfg = resolve_model_config(
        _parse(["analyze", "--kernels", "3,5", "--dilation-rates", "1,4"]))
    assert cfg.dcsa.branches == ((3, 1), (5, 4))
    assert cfg.dcsa.accounting_kernel == 5 + 4 * 3  # widest branch span
    with pytest.raises(ValueError, match="branches"):
        resolve_model_config(
            _parse(["analyze", "--kernels", "3,5,7", "--dilation-rates", "1,2"]))


def _parse(argv):
    from coalseg.cli import build_parser

    return build_parser().parse_args(argv)


# -- batch subcommands -------------------------------------------------------


def test_synth_writes_loadable_dataset(dataset):
    records = load_dataset(str(dataset))
    assert len(records) == 6
    assert all(r.image.shape == (64, 64, 3) for r in records)


def test_train_writes_reports_and_checkpoint(dataset, tmp_path, capsys):
    out = tmp_path / "run"
    rc = main(["train", "--data", str(dataset), "--out", str(out),
               *SMALL_MODEL, "--epochs", "2", "--lr", "1e-2"])
    assert rc == 0
    stdout = capsys.readouterr().out
    assert "resolved config" in stdout and "final:" in stdout
    for fname in ("model.ckpt", "history.csv", "history.png",
                  "metrics.json", "confusion.png"):
        assert (out / fname).exists(), fname
    metrics = json.loads((out / "metrics.json").read_text())
    assert 0.0 <= metrics["pa"] <= 1.0
    model = load_checkpoint(str(out / "model.ckpt"))
    assert model.cfg.base_channels == 8


def test_eval_reports_same_metrics_as_training_run(dataset, tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["train", "--data", str(dataset), "--out", str(out),
                 *SMALL_MODEL, "--epochs", "1"]) == 0
    trained = json.loads((out / "metrics.json").read_text())
    capsys.readouterr()
    rc = main(["eval", "--data", str(dataset),
               "--checkpoint", str(out / "model.ckpt"),
               "--out", str(tmp_path / "eval")])
    assert rc == 0
    assert "PA" in capsys.readouterr().out
    evaluated = json.loads((tmp_path / "eval" / "metrics.json").read_text())
    assert evaluated["pa"] == pytest.approx(trained["pa"], abs=1e-12)


def test_crossval_reports_five_folds(dataset, tmp_path, capsys):
    rc = main(["crossval", "--data", str(dataset), "--channels", "4",
               "--depths", "1,1,1,1", "--input-size", "64,64",
               "--epochs", "1", "--out", str(tmp_path / "cv")])
    assert rc == 0
    stdout = capsys.readouterr().out
    assert all(f"fold {k}:" in stdout for k in range(5))
    record = json.loads((tmp_path / "cv" / "crossval.json").read_text())
    assert len(record["folds"]) == 5


def test_analyze_prints_reduction_rates_and_reconciliation(tmp_path, capsys):
    rc = main(["analyze", "--scale", "tiny", "--out", str(tmp_path)])
    assert rc == 0
    stdout = capsys.readouterr().out
    assert "77.0083%" in stdout
    assert "81.1791%" in stdout
    assert "19x19" in stdout
    assert "ratio" in stdout  # params reconciliation line
    assert "9.066 G" in stdout
    for fname in ("decomposition.csv", "analyze.json",
                  "decomposition.png", "params.png"):
        assert (tmp_path / fname).exists(), fname


def test_flops_breakdown_sums_to_total(capsys):
    rc = main(["flops", *SMALL_MODEL])
    assert rc == 0
    stdout = capsys.readouterr().out
    assert "total" in stdout and "64x64" in stdout


def test_gradcheck_passes_quickly(capsys):
    start = time.monotonic()
    rc = main(["gradcheck"])
    assert rc == 0
    assert time.monotonic() - start < 60
    stdout = capsys.readouterr().out
    assert "PASS" in stdout
    assert "full model/input" in stdout


# -- serve + simulate-terminals ----------------------------------------------


def _free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def test_serve_and_simulate_terminals_round_trip(dataset, tmp_path):
    port = _free_port()
    env = {**os.environ, "PYTHONUNBUFFERED": "1"}
    proc = subprocess.Popen(
        [sys.executable, "-m", "coalseg.cli", "serve",
         "--data-root", str(tmp_path / "svc"),
         "--channels", "4", "--depths", "1,1,1,1", "--input-size", "32,32",
         "--port", str(port)],
        stdout=subprocess.PIPE, stderr=subprocess.STDOUT, text=True, env=env,
    )
    try:
        import httpx

        url = f"http://127.0.0.1:{port}"
        deadline = time.monotonic() + 60
        while True:
            try:
                info = httpx.get(f"{url}/v1/model/info", timeout=2.0).json()
                break
            except Exception:
                if time.monotonic() > deadline or proc.poll() is not None:
                    raise AssertionError(
                        f"service never came up: {proc.stdout.read() if proc.stdout else ''}")
                time.sleep(0.25)
        assert len(info["digest"]) == 64

        rc = main(["simulate-terminals", "--url", url,
                   "--images", str(dataset / "images"),
                   "--terminals", "2", "--count", "4"])
        assert rc == 0
        pending = httpx.get(f"{url}/v1/predictions",
                            params={"status": "pending_review"}, timeout=10.0).json()
        assert len(pending["items"]) == 4
        terminals = {p["terminal_id"] for p in pending["items"]}
        assert terminals == {"terminal-00", "terminal-01"}
    finally:
        proc.terminate()
        try:
            proc.wait(timeout=10)
        except subprocess.TimeoutExpired:
            proc.kill()


def test_simulate_terminals_fails_cleanly_without_server(dataset, capsys):
    port = _free_port()  # nothing listening here
    rc = main(["simulate-terminals", "--url", f"http://127.0.0.1:{port}",
               "--images", str(dataset / "images"), "--count", "1"])
    assert rc == 1
    assert "error" in capsys.readouterr().err
