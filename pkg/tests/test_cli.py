"""
The following tests check the command line verbs end to end on a tiny configuration.
"""

import json
from pathlib import Path
from typing import Any

import pytest

from pyautobid.cli import build_parser, main
from pyautobid.const import EXIT_BACKEND, EXIT_CONFIG, EXIT_MISSING_ARTIFACT, EXIT_OK
from pyautobid.gqpo import read_sft
from pyautobid.trajectory import read_cot_file, read_dataset

TINY: dict[str, Any] = {
    "seed": 7,
    "simulator": {"num_steps": 6, "impressions_per_step": 50, "num_periods": 2},
    "act_model": {
        "transformer": {"d_model": 8, "n_heads": 2, "n_layers": 1, "max_seq_len": 48},
        "decision_widths": [8, 8],
        "head_widths": [8, 1],
        "seq_len": 2,
        "max_cot_len": 32,
        "vocab_size": 256,
        "return_scale": 20.0,
        "batch_size": 4,
        "steps": 2,
    },
    "iql": {"hidden": 8, "n_layers": 1, "n_heads": 2, "seq_len": 2, "batch_size": 4, "steps": 2},
    "gqpo": {"group_size": 2, "target_count": 3},
    "eval": {"episodes": 1, "workers": 1, "scatter_samples": 5, "sweep_values": [0.5, 1.0]},
}


def _write(path: Path, data: dict[str, Any]) -> Path:
    path.write_text(json.dumps(data), encoding="utf-8")
    return path


@pytest.fixture(name="run_config")
def fixture_run_config(tmp_path: Path) -> Path:
    """Return the path of the tiny configuration."""
    return _write(tmp_path / "run.json", TINY)


def test_init_config(tmp_path: Path) -> None:
    """Test that init-config writes a loadable default configuration."""
    path = tmp_path / "default.json"
    assert main(["init-config", str(path), "--seed", "3"]) == EXIT_OK
    data = json.loads(path.read_text(encoding="utf-8"))
    assert data["seed"] == 3
    assert set(data) == {"seed", "simulator", "act_model", "iql", "think", "gqpo", "eval"}
    assert main(["gen-data", "-c", str(path), "-o", str(tmp_path / "d.traj"), "--periods", "1"]) == EXIT_OK


def test_parser_rejects_unknown_verbs() -> None:
    """Test argparse's handling of a bad verb."""
    with pytest.raises(SystemExit):
        build_parser().parse_args(["deploy"])


def test_exit_codes(tmp_path: Path, run_config: Path) -> None:
    """Test the configuration, missing-artifact and backend exit codes."""
    out = str(tmp_path / "x")
    assert main(["gen-data", "-c", str(tmp_path / "none.json"), "-o", out]) == EXIT_CONFIG
    bad = _write(tmp_path / "bad.json", {"seed": 1, "iql": {"gamma": "high"}})
    assert main(["gen-data", "-c", str(bad), "-o", out]) == EXIT_CONFIG
    assert main(["train-iql", "-c", str(run_config), "-o", out, "--data", str(tmp_path / "none.traj")]) == (
        EXIT_MISSING_ARTIFACT
    )
    assert main(["sweep", "-c", str(run_config), "-o", out, "--act", "a.ckpt", "--values", "x"]) == (
        EXIT_MISSING_ARTIFACT
    )

    data = tmp_path / "data.traj"
    assert main(["gen-data", "-c", str(run_config), "-o", str(data)]) == EXIT_OK
    remote = _write(
        tmp_path / "remote.json",
        {**TINY, "think": {"backend": "remote", "endpoint": "http://127.0.0.1:9/v1", "model": "m",
                           "timeout": 0.5, "max_retries": 0}},
    )
    assert main(["gen-cot", "-c", str(remote), "-o", str(tmp_path / "c.jsonl"), "--data", str(data)]) == (
        EXIT_BACKEND
    )


def test_pipeline(tmp_path: Path, run_config: Path) -> None:
    """Test every verb in pipeline order."""
    config = ["-c", str(run_config)]
    data, cots = tmp_path / "data.traj", tmp_path / "cots.jsonl"
    act, critic = tmp_path / "act.ckpt", tmp_path / "iql.ckpt"

    assert main(["gen-data", *config, "-o", str(data)]) == EXIT_OK
    dataset = read_dataset(data)
    assert len(dataset) == 6
    assert len(dataset.header["config_hash"]) == 64

    assert main(["gen-cot", *config, "-o", str(cots), "--data", str(data)]) == EXIT_OK
    assert len(read_cot_file(cots)) == 6 * 5

    assert main(["train-iql", *config, "-o", str(critic), "--data", str(data)]) == EXIT_OK
    assert (tmp_path / "iql.log.json").exists()
    assert main(
        ["train-act", *config, "-o", str(act), "--data", str(data), "--cot-file", str(cots), "--rtg-weight", "0.5"]
    ) == EXIT_OK
    assert len(json.loads((tmp_path / "act.log.json").read_text(encoding="utf-8"))) == 2

    sft = tmp_path / "sft.jsonl"
    code = main(
        ["gqpo-export", *config, "-o", str(sft), "--data", str(data), "--act", str(act), "--critic", str(critic),
         "--backend", "noisy"]
    )
    assert code == EXIT_OK
    report = json.loads((tmp_path / "sft-report.json").read_text(encoding="utf-8"))
    assert report["kind"] == "gqpo-export"
    if sft.exists():
        header, records = read_sft(sft)
        assert header["count"] == len(records)
        assert all(record.delta_q > 0 for record in records)

    evaluation = tmp_path / "eval"
    assert main(["evaluate", *config, "-o", str(evaluation), "--act", str(act), "--override", "base",
                 "--override", "none"]) == EXIT_OK
    body = json.loads((tmp_path / "eval.json").read_text(encoding="utf-8"))
    assert [cell["instruction_override"] for cell in body["cells"]] == ["base", "none"]
    assert (tmp_path / "eval.csv").read_text(encoding="utf-8").count("\n") == 3

    assert main(["sweep", *config, "-o", str(tmp_path / "sweep"), "--act", str(act)]) == EXIT_OK
    sweep = json.loads((tmp_path / "sweep.json").read_text(encoding="utf-8"))
    assert sweep["axis"] == "budget_ratio"
    assert [cell["budget_ratio"] for cell in sweep["cells"]] == [0.5, 1.0]

    assert main(["behavior-scatter", *config, "-o", str(tmp_path / "scatter"), "--act", str(act),
                 "--samples", "4"]) == EXIT_OK
    assert (tmp_path / "scatter.csv").read_text(encoding="utf-8").count("\n") == 5
