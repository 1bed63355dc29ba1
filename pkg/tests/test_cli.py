import json
from pathlib import Path

import pytest

from freshrec.cli import main
from freshrec.config import load_config

SMALL = Path(__file__).parent / "data" / "small.ini"


def test_show_config(capsys):
    assert main(["show-config", "--config", str(SMALL)]) == 0
    assert "n_users = 300" in capsys.readouterr().out


def test_missing_config_is_reported(tmp_path, capsys):
    assert main(["show-config", "--config", str(tmp_path / "none.ini")]) == 2
    assert "freshrec:" in capsys.readouterr().err


def test_state_pipeline(tmp_path, capsys):
    state = str(tmp_path / "state")
    now = str(load_config(SMALL).world.start_ts)
    common = ["--config", str(SMALL), "--state-dir", state]
    assert main(["init-state", *common, "--seed", "1"]) == 0
    assert main(["train-cf", *common, "--now", now]) == 0
    assert main(["train-coldstart", *common, "--now", now]) == 0
    assert main(["tick", *common, "--now", now]) == 0
    out = capsys.readouterr().out
    assert "store v1" in out and "new arms" in out
    arms = (tmp_path / "state" / "arms.jsonl").read_text().splitlines()
    assert len(arms) > 0 and all(json.loads(line) for line in arms)


def test_tick_without_state_fails(tmp_path):
    assert main(["tick", "--state-dir", str(tmp_path), "--now", "1"]) == 2


@pytest.mark.slow
def test_simulate_writes_reproducible_metrics(tmp_path, capsys):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    assert main(["simulate", "--config", str(SMALL), "--seed", "3", "--out", str(a)]) == 0
    assert main(["simulate", "--config", str(SMALL), "--seed", "3", "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    records = [json.loads(line) for line in a.read_text().splitlines()]
    kinds = [r["kind"] for r in records]
    assert kinds[0] == "config" and kinds.count("ab_compare") == 2
    assert "ColdStart vs Editorial" in capsys.readouterr().out
