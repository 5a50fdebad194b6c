import json

import pytest

from petrace.cli import main

PAIR = """\
population 2
horizon_days 3
1800 start 0 1
2400 end 0 1
90000 diagnose 0
"""


@pytest.fixture
def files(tmp_path):
    trace = tmp_path / "pair.trace"
    trace.write_text(PAIR)
    config = tmp_path / "config.json"
    config.write_text(json.dumps({"risk_threshold_sec": 300}))
    return trace, config, tmp_path


@pytest.mark.parametrize("mode", ["stateful", "stateless"])
def test_run_writes_report(files, capsys, mode):
    trace, config, tmp = files
    report = tmp / f"{mode}.json"
    code = main(["run", "--trace", str(trace), "--config", str(config), "--seed", "3",
                 "--mode", mode, "--report", str(report)])
    assert code == 0
    data = json.loads(report.read_text())
    assert data["mode"] == mode and data["devices"][1]["notified"]
    assert all(a["verdict"] == "PASS" for a in data["audits"].values())
    assert (tmp / f"{mode}.tsv").read_text().startswith("device\t")
    assert "[PASS] unlinkability" in capsys.readouterr().out


def test_run_is_reproducible(files):
    trace, config, tmp = files
    for name in ("a", "b"):
        main(["run", "--trace", str(trace), "--config", str(config), "--seed", "5",
              "--report", str(tmp / f"{name}.json")])
    assert (tmp / "a.json").read_text() == (tmp / "b.json").read_text()


def test_attack_linkability(files, capsys):
    trace, config, _ = files
    assert main(["attack", "--name", "linkability", "--trace", str(trace), "--seed", "1"]) == 0
    assert "[PASS] linkability" in capsys.readouterr().out


def test_attack_replay(files, capsys):
    trace, _, tmp = files
    report = tmp / "replay.json"
    assert main(["attack", "--name", "replay", "--trace", str(trace), "--seed", "1",
                 "--report", str(report)]) == 0
    assert json.loads(report.read_text())["replay"]["verdict"] == "PASS"


def test_bad_trace_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.trace"
    bad.write_text("population 2\nhorizon_days 1\n10 start 0 5\n")
    assert main(["run", "--trace", str(bad)]) == 2
    assert "bad.trace:3:" in capsys.readouterr().err


def test_missing_file_exit_code(tmp_path):
    assert main(["run", "--trace", str(tmp_path / "nope")]) == 2


def test_bad_config_exit_code(files, capsys):
    trace, config, _ = files
    config.write_text('{"bogus": 1}')
    assert main(["run", "--trace", str(trace), "--config", str(config)]) == 2
    assert "bogus" in capsys.readouterr().err


def test_unknown_attack_rejected(files):
    trace, _, _ = files
    with pytest.raises(SystemExit):
        main(["attack", "--name", "nope", "--trace", str(trace)])


def test_gen_trace(tmp_path):
    out = tmp_path / "g.trace"
    assert main(["gen-trace", "--population", "8", "--days", "5", "--seed", "2",
                 "--diagnosed", "1", "--out", str(out)]) == 0
    assert out.read_text().startswith("population 8\nhorizon_days 5\n")
    assert main(["gen-trace", "--days", "3", "--diagnosis-day", "3", "--out", str(out)]) == 2
