import csv
import json
import subprocess
import sys

import pytest

from ccpxva.cases import table1_network
from ccpxva.cli import EXIT_CONFIG, EXIT_ESTIMATION, EXIT_INVALID, EXIT_OK, main, parse_sweep
from ccpxva.io import ConfigError, network_to_dict, save_network
from ccpxva.simulation import CopulaParams


@pytest.fixture
def table1(tmp_path):
    path = tmp_path / "table1.json"
    save_network(table1_network(), path)
    return path


def _rows(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def test_xva_mode(table1, tmp_path):
    out = tmp_path / "out"
    assert main(["--network", str(table1), "--paths", "20000", "--batches", "2", "--out", str(out)]) == EXIT_OK
    rows = _rows(out / "xva.csv")
    assert len(rows) == 20
    assert [int(r["member_id"]) for r in rows] == list(range(20))
    assert float(rows[0]["cmva"]) == pytest.approx(0.0687, rel=0.03)


def test_reruns_are_byte_identical(table1, tmp_path, monkeypatch):
    args = ["--network", str(table1), "--paths", "20000", "--batches", "4", "--seed", "9"]
    assert main(args + ["--out", str(tmp_path / "a")]) == EXIT_OK
    monkeypatch.setenv("CCP_XVA_THREADS", "1")
    assert main(args + ["--out", str(tmp_path / "b")]) == EXIT_OK
    assert (tmp_path / "a" / "xva.csv").read_bytes() == (tmp_path / "b" / "xva.csv").read_bytes()


def test_zero_paths_is_a_config_error(table1, tmp_path):
    assert main(["--network", str(table1), "--paths", "0", "--out", str(tmp_path)]) == EXIT_CONFIG
    assert main(["--network", str(table1), "--paths", "1000", "--batches", "3", "--out", str(tmp_path)]) == EXIT_CONFIG
    assert main(["--network", str(tmp_path / "none.json"), "--out", str(tmp_path)]) == EXIT_CONFIG
    assert main(["--network", str(table1), "--mode", "porting", "--out", str(tmp_path)]) == EXIT_CONFIG
    assert main(["--network", str(table1), "--mode", "sensitivity", "--sweep", "rho_xx=0:1:0.1"]) == EXIT_CONFIG


def test_invalid_network_and_copula(tmp_path):
    doc = network_to_dict(table1_network())
    doc["members"][0]["positions"][0]["client_nominal"] = -241.0
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(doc))
    assert main(["--network", str(bad), "--paths", "1000", "--out", str(tmp_path)]) == EXIT_INVALID
    doc = network_to_dict(table1_network(), CopulaParams(0.9, 0.9, 0.2))
    bad.write_text(json.dumps(doc))
    assert main(["--network", str(bad), "--paths", "1000", "--out", str(tmp_path)]) == EXIT_INVALID


def test_insufficient_paths_for_quantile(table1, tmp_path):
    code = main(["--network", str(table1), "--mode", "stress", "--paths", "2000", "--batches", "2",
                 "--quantile", "0.999", "--out", str(tmp_path)])
    assert code == EXIT_ESTIMATION


def test_rst_mode(table1, tmp_path):
    out = tmp_path / "rst"
    code = main(["--network", str(table1), "--mode", "rst", "--paths", "40000", "--batches", "4",
                 "--quantile", "0.99", "--quantile", "0.999", "--top-k", "3", "--out", str(out)])
    assert code == EXIT_OK
    rows = _rows(out / "stress.csv")
    assert len(rows) == 40
    for r in rows:
        assert "np." not in r["rst_ci"]
        float(r["rst_ci"])
        assert float(r["ci_lo"]) <= 0.0 <= float(r["ci_hi"])
    scen = json.loads((out / "scenarios.json").read_text())
    assert scen["reference_member"] == 0 and len(scen["scenarios"]) == 3


def test_porting_mode(table1, tmp_path):
    out = tmp_path / "p"
    code = main(["--network", str(table1), "--mode", "porting", "--default", "0", "--paths", "10000",
                 "--batches", "2", "--out", str(out)])
    assert code == EXIT_OK
    rows = _rows(out / "porting.csv")
    assert len(rows) == 19
    ftp = [float(r["ftp_total"]) for r in rows]
    assert ftp == sorted(ftp)
    assert set(json.loads((out / "porting.json").read_text())["dispersion"]) == {"cmva", "ccva", "kva"}
    assert main(["--network", str(table1), "--mode", "porting", "--default", "42", "--paths", "1000",
                 "--out", str(out)]) == EXIT_CONFIG


def test_sensitivity_mode(table1, tmp_path):
    out = tmp_path / "s"
    code = main(["--network", str(table1), "--mode", "sensitivity", "--sweep", "rho_wwr=0.7:0.8:0.1",
                 "--paths", "10000", "--batches", "2", "--out", str(out)])
    assert code == EXIT_OK
    rows = _rows(out / "sensitivity.csv")
    assert [r["admissible"] for r in rows] == ["1", "0"]
    assert rows[1]["agg_kva"] == "nan"


def test_parse_sweep():
    assert parse_sweep("rho_wwr=0.1:0.3:0.1") == ("rho_wwr", (0.1, 0.2, 0.3))
    with pytest.raises(ConfigError):
        parse_sweep("rho_cr=0.5:0.1:0.1")


def test_dump_batches_and_writers(table1, tmp_path):
    dump = tmp_path / "dump"
    assert main(["--network", str(table1), "--paths", "2000", "--batches", "2", "--dump-batches", str(dump),
                 "--out", str(tmp_path / "o")]) == EXIT_OK
    assert sorted(p.name for p in dump.iterdir()) == ["batch_00000.bin", "batch_00001.bin"]
    assert main(["--write-table1", str(tmp_path / "t1.json")]) == EXIT_OK
    assert main(["--write-two-ccp", str(tmp_path / "t2.json")]) == EXIT_OK
    assert len(json.loads((tmp_path / "t2.json").read_text())["members"]) == 155


def test_console_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "ccpxva.cli", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and "0.1.0" in res.stdout
    res = subprocess.run([sys.executable, "-m", "ccpxva.cli", "--paths", "0", "--network", "x"],
                         capture_output=True, text=True)
    assert res.returncode == EXIT_CONFIG and "error" in res.stderr
