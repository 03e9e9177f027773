"""
The following tests check relative-Q selection, the group pipeline with stub models and
the SFT export.
"""

import math
from collections.abc import Sequence
from pathlib import Path

import numpy as np
import pytest

from pyautobid.exceptions import ArtifactMismatchError, BackendUnavailableError, MissingArtifactError
from pyautobid.gqpo import (
    GqpoConfig,
    GqpoRecord,
    async_run_pipeline,
    dedup_cots,
    export_sft,
    read_sft,
    relative_q,
    sample_pairs,
    select_best,
)
from pyautobid.think import DECREASE, INCREASE, CotResponse, NoisyOracle, PromptContext, parse_cot
from pyautobid.trajectory import Trajectory

# pylint: disable=C0103
pytestmark = pytest.mark.asyncio


class StubAct:
    """Moves one unit from the dataset action in the CoT's direction."""

    rtg_weight = 0.0

    def window(self, states: Sequence[np.ndarray], actions: Sequence[float], returns: Sequence[float], t: int) -> float:
        """Return the dataset action at t."""
        return float(actions[t])

    def act_many(self, cots: Sequence[CotResponse], seq: float) -> np.ndarray:
        """Return one action per CoT."""
        moves = {INCREASE: 1.0, DECREASE: -1.0}
        return np.array([seq + moves.get(cot.direction, 0.0) for cot in cots])


class StubCritic:
    """Q(s, a) = a."""

    def window(self, states: Sequence[np.ndarray], actions: Sequence[float], t: int) -> int:
        """Return the step."""
        return t

    def q_values(self, window: int, actions: Sequence[float]) -> np.ndarray:
        """Return the actions themselves."""
        return np.asarray(actions, dtype=np.float64)


class DownBackend:
    """Backend that is always unavailable."""

    async def async_generate(self, prompt: str, n: int, context: PromptContext | None = None) -> list[str]:
        """Fail."""
        raise BackendUnavailableError("down")


def _record(delta_q: float, beta: float = 1.0, t: int = 1) -> GqpoRecord:
    return GqpoRecord("prompt", "DIRECTION: INCREASE", delta_q, math.exp(beta * delta_q), "p0", t, INCREASE)


def test_select_best_matches_brute_force(rng: np.random.Generator) -> None:
    """Test the selection rule against an exhaustive search over random groups."""
    for _ in range(1000):
        size = int(rng.integers(2, 7))
        group = [float(x) for x in np.round(rng.normal(size=size), 1)]
        positives = [value for value in group if value > 0]
        expected = group.index(max(positives)) if positives else None
        assert select_best(group) == expected
    assert select_best([0.0, -1.0]) is None
    assert select_best([0.5, 0.5]) == 0
    with pytest.raises(ValueError):
        select_best([])


def test_relative_q() -> None:
    """Test Q(s, a_cot) - Q(s, a_data) and the equal-action shortcut."""
    critic = StubCritic()
    assert relative_q(critic, 0, 3.0, 1.0) == pytest.approx(2.0)
    assert relative_q(critic, 0, 1.0, 1.0) == 0.0


def test_dedup_and_pairs(trajectories: list[Trajectory]) -> None:
    """Test duplicate removal and state sampling."""
    cots = [parse_cot("DIRECTION: INCREASE"), parse_cot("DIRECTION: INCREASE"), parse_cot("DIRECTION: DECREASE")]
    assert [cot.direction for cot in dedup_cots(cots)] == [INCREASE, DECREASE]
    pairs = sample_pairs(trajectories, np.random.default_rng(0))
    assert len(pairs) == sum(len(traj) - 1 for traj in trajectories)
    assert all(t >= 1 for _, t in pairs)
    assert pairs == sample_pairs(trajectories, np.random.default_rng(0))


async def test_pipeline_with_stubs(trajectories: list[Trajectory]) -> None:
    """Test that only groups containing an improving CoT are exported."""
    config = GqpoConfig(group_size=4, beta=2.0, target_count=5, max_in_flight=3)
    result = await async_run_pipeline(
        trajectories, StubAct(), StubCritic(), NoisyOracle(0.5, seed=1), config, seed=9, impressions_per_step=200
    )
    assert result.error is None
    assert len(result.records) == 5
    assert [record.key for record in result.records] == sorted(record.key for record in result.records)
    for record in result.records:
        assert record.direction == INCREASE
        assert record.delta_q == pytest.approx(1.0)
        assert record.weight == pytest.approx(math.exp(2.0))
        assert record.rejected_count == sum(1 for value in record.group_delta_q if value <= 0)
    for group in result.groups:
        has_increase = any(cot.direction == INCREASE for cot in group.cots)
        assert (group.chosen is not None) == has_increase
    report = result.report
    assert report["accepted"] == 5
    assert report["target_reached"]
    assert sum(report["delta_q_histogram"].values()) == sum(len(group.delta_q) for group in result.groups)
    assert report["hallucination_checks"].get("FAIL", 0) == 0


async def test_pipeline_backend_failure(trajectories: list[Trajectory]) -> None:
    """Test that an unavailable backend ends the run with an error and no records."""
    result = await async_run_pipeline(
        trajectories, StubAct(), StubCritic(), DownBackend(), GqpoConfig(), seed=1, impressions_per_step=200
    )
    assert result.records == []
    assert result.error is not None
    assert result.report["error"] == result.error


def test_export_and_read(tmp_path: Path) -> None:
    """Test the SFT file and the refusal of non-improving records."""
    path = tmp_path / "sft.jsonl"
    records = [_record(0.3, t=1), _record(0.1, t=2)]
    export_sft(records, path, beta=1.0, extra_header={"config_hash": "abc"})
    header, read = read_sft(path)
    assert header["count"] == 2
    assert header["config_hash"] == "abc"
    assert "recommended_finetune" in header
    assert read == records

    with pytest.raises(ValueError):
        export_sft([_record(0.0)], path, beta=1.0)
    with pytest.raises(ValueError):
        export_sft([_record(0.2, beta=2.0)], path, beta=1.0)
    with pytest.raises(ValueError):
        export_sft([], path, beta=1.0)
    with pytest.raises(MissingArtifactError):
        read_sft(tmp_path / "none.jsonl")
    (tmp_path / "bad.jsonl").write_text('{"schema": "other"}\n', encoding="utf-8")
    with pytest.raises(ArtifactMismatchError):
        read_sft(tmp_path / "bad.jsonl")


def test_config_validation() -> None:
    """Test GqpoConfig checks."""
    for bad in ({"group_size": 1}, {"beta": -1.0}, {"tie_rule": "random"}, {"histogram_edges": (1.0, 0.0)}):
        with pytest.raises(ValueError):
            GqpoConfig(**bad)  # type: ignore[arg-type]
