import socket
import subprocess
import sys

import pytest

from fedgbdt.cli import main, parse_epsilons, parse_peers, parse_role
from fedgbdt.errors import FedGbdtError


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr().out
    return code, out


def blocks(text):
    reports = []
    for chunk in text.strip().split("\n\n"):
        pairs = [line.split("=", 1) for line in chunk.splitlines() if "=" in line]
        reports.append(dict(pairs))
    return reports


def test_parsers():
    assert parse_epsilons("0.5, 2,inf") == [0.5, 2.0, float("inf")]
    assert parse_role("participant:2") == ("participant", 2)
    assert parse_role("coordinator") == ("coordinator", None)
    assert parse_peers("0=a:1,1=b:2") == {0: ("a", 1), 1: ("b", 2)}
    with pytest.raises(FedGbdtError):
        parse_role("boss")
    with pytest.raises(FedGbdtError):
        parse_epsilons("-1")


def test_centralized_report(capsys):
    code, out = run(capsys, "centralized", "--trees", "3")
    (r,) = blocks(out)
    assert code == 0 and r["mode"] == "centralized"
    assert float(r["test_auc"]) > 0.9 and r["bytes_total"] == "0"


def test_vertical_sweep_writes_one_row_per_epsilon(capsys, tmp_path):
    code, out = run(capsys, "vertical", "--trees", "3", "--participants", "2",
                    "--epsilon", "1,inf", "--out", str(tmp_path))
    reports = blocks(out)
    assert code == 0 and [r["epsilon"] for r in reports] == ["1", "inf"]
    assert all(r["bucket_uploads_per_passive"] == "1" for r in reports)
    assert (tmp_path / "eps_1" / "model.fbm").exists()
    assert (tmp_path / "eps_inf" / "transcript.tsv").exists()


def test_vertical_noiseless_equals_centralized(capsys):
    _, central = run(capsys, "centralized", "--trees", "4")
    _, vertical = run(capsys, "vertical", "--trees", "4", "--participants", "3")
    assert blocks(central)[0]["model_sha256"] == blocks(vertical)[0]["model_sha256"]


def test_repeat_reports_spread(capsys):
    code, out = run(capsys, "vertical", "--trees", "2", "--participants", "2",
                    "--epsilon", "2", "--repeat", "3")
    (r,) = blocks(out)
    assert code == 0 and r["repeat"] == "3" and "test_auc_std" in r


def test_horizontal_report(capsys):
    code, out = run(capsys, "horizontal", "--trees", "2", "--participants", "3",
                    "--agg-profile", "test")
    (r,) = blocks(out)
    assert code == 0 and r["aggregation"] == "masked" and r["replicas_identical"] == "True"
    assert int(r["bytes_agg"]) > 0 and int(r["bytes_bucket"]) == 0


def test_config_file_and_flag_override(capsys, tmp_path):
    cfg = tmp_path / "run.ini"
    cfg.write_text("trees = 2\ndepth = 2\nbuckets = 8  # fewer\n")
    _, out = run(capsys, "centralized", "--config", str(cfg), "--depth", "1")
    (r,) = blocks(out)
    assert (r["trees"], r["depth"], r["q"]) == ("2", "1", "8")
    cfg.write_text("nonsense = 1\n")
    code, _ = run(capsys, "centralized", "--config", str(cfg))
    assert code == 2


def test_split_data_and_eval(capsys, tmp_path):
    code, out = run(capsys, "split-data", "--axis", "horizontal", "--participants", "3",
                    "--out", str(tmp_path))
    assert code == 0 and (tmp_path / "shard_2.csv").exists() and (tmp_path / "schema.json").exists()
    model_dir = tmp_path / "model"
    run(capsys, "centralized", "--trees", "3", "--out", str(model_dir))
    code, out = run(capsys, "eval", "--model", str(model_dir / "model.fbm"),
                    "--thresholds", str(model_dir / "thresholds.fbt"))
    (r,) = blocks(out)
    assert code == 0 and r["samples"] == "1000" and float(r["auc"]) > 0.9


def test_errors_exit_with_code_two(capsys, tmp_path):
    code = main(["eval", "--model", str(tmp_path / "missing.fbm")])
    assert code == 2
    assert "error:" in capsys.readouterr().err


def _free_ports(k):
    socks = [socket.socket() for _ in range(k)]
    for s in socks:
        s.bind(("127.0.0.1", 0))
    ports = [s.getsockname()[1] for s in socks]
    for s in socks:
        s.close()
    return ports


@pytest.mark.network
def test_distributed_vertical_matches_simulation(capsys, tmp_path):
    run(capsys, "split-data", "--axis", "vertical", "--participants", "2", "--test-split",
        "--out", str(tmp_path))
    ports = _free_ports(2)
    peers = ",".join(f"{i}=127.0.0.1:{p}" for i, p in enumerate(ports))
    common = ["vertical", "--trees", "3", "--peers", peers, "--schema",
              str(tmp_path / "schema.json"), "--timeout", "60"]
    cmd = [sys.executable, "-m", "fedgbdt.cli"]
    passive = subprocess.Popen(cmd + common + ["--role", "participant:0", "--data",
                               str(tmp_path / "train_0.csv"), "--test-data",
                               str(tmp_path / "test_0.csv")],
                               stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True)
    active = subprocess.run(cmd + common + ["--role", "coordinator", "--data",
                            str(tmp_path / "train_1.csv"), "--test-data",
                            str(tmp_path / "test_1.csv")],
                            capture_output=True, text=True, timeout=120)
    passive.wait(60)
    assert active.returncode == 0, active.stderr
    assert passive.returncode == 0, passive.stderr
    (dist,) = blocks(active.stdout)
    _, out = run(capsys, "vertical", "--trees", "3", "--participants", "2")
    (sim,) = blocks(out)
    assert dist["model_sha256"] == sim["model_sha256"]
    assert dist["test_auc"] == sim["test_auc"]
    assert int(dist["bytes_bucket"]) > 0
