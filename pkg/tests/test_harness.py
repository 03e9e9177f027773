"""
The following tests check closed-loop evaluation, sweeps, the behavior scatter, CoT
generation and report files.
"""

import asyncio
import dataclasses
import json
import re
from pathlib import Path

import pytest
from aiohttp import ClientSession, web
from aiohttp.test_utils import TestServer

from pyautobid import harness
from pyautobid.act import ActBundle
from pyautobid.bidding import METRIC_FIELDS
from pyautobid.chat import RemoteChat
from pyautobid.config import EvalConfig, RunConfig
from pyautobid.exceptions import ArtifactMismatchError, BackendUnavailableError, ConfigError
from pyautobid.think import PromptContext, ScriptedOracle, ThinkConfig
from pyautobid.trajectory import Trajectory

from .conftest import small_simulator, tiny_act_config

# pylint: disable=C0103
pytestmark = pytest.mark.asyncio

STEPS = 12


class FlakyBackend(ScriptedOracle):
    """Scripted reasoner that fails for odd steps."""

    async def async_generate(self, prompt: str, n: int, context: PromptContext | None = None) -> list[str]:
        """Fail on odd steps, reason otherwise."""
        if context is not None and context.t % 2:
            raise BackendUnavailableError("flaky")
        return await super().async_generate(prompt, n, context)


class StallingBackend(ScriptedOracle):
    """Scripted reasoner that stalls on a single step."""

    def __init__(self, stall_step: int, delay: float) -> None:
        super().__init__()
        self.stall_step = stall_step
        self.delay = delay

    async def async_generate(self, prompt: str, n: int, context: PromptContext | None = None) -> list[str]:
        """Sleep past any deadline on the stalled step, reason otherwise."""
        if context is not None and context.t == self.stall_step:
            await asyncio.sleep(self.delay)
        return await super().async_generate(prompt, n, context)


@pytest.fixture(name="config")
def fixture_config() -> RunConfig:
    """Return a run configuration sized for unit tests."""
    return RunConfig(
        seed=1,
        simulator=small_simulator(num_steps=STEPS),
        act_model=tiny_act_config(),
        think=ThinkConfig(deadline=1.0),
        eval=EvalConfig(episodes=2, workers=2, scatter_samples=30),
    )


async def test_evaluate_overrides(config: RunConfig, act_bundle: ActBundle) -> None:
    """Test one cell per override, think accounting and determinism."""
    cells = await harness.async_evaluate(config, act_bundle, ScriptedOracle(), ["base", "none", "DECREASE"])
    assert [cell.cell for cell in cells] == [
        {"instruction_override": "base"},
        {"instruction_override": "none"},
        {"instruction_override": "DECREASE"},
    ]
    base, empty, _ = cells
    assert [e.seed for e in base.episodes] == config.eval.episode_seeds()
    # a CoT is requested after every step but the last
    assert base.columns()["think_requests"] == 2 * (STEPS - 1)
    assert base.columns()["think_misses"] == 0
    assert empty.columns()["think_requests"] == 0
    for episode in base.episodes:
        assert len(episode.actions) == STEPS
        assert len(episode.trace) == STEPS - 1
        assert episode.report.budget_utilization <= 1.0

    again = await harness.async_evaluate(config, act_bundle, ScriptedOracle(), ["base"])
    assert again[0].report == base.report

    with pytest.raises(ConfigError):
        await harness.async_evaluate(config, act_bundle, ScriptedOracle(), ["sideways"])
    with pytest.raises(ValueError):
        await harness.async_evaluate(config, act_bundle, None, ["base"])


async def test_sweep(config: RunConfig, act_bundle: ActBundle) -> None:
    """Test sweep cells and their CSV rendering."""
    config = dataclasses.replace(config, eval=dataclasses.replace(config.eval, instruction_override="none"))
    cells = await harness.async_sweep(config, act_bundle, None, "budget_ratio", [0.5, 1.5], episodes=1)
    assert [cell.cell for cell in cells] == [{"budget_ratio": 0.5}, {"budget_ratio": 1.5}]
    lines = harness.cells_to_csv(cells).splitlines()
    assert lines[0].startswith("budget_ratio,episodes,think_requests,think_misses,mean_action_delta,")
    assert lines[0].endswith(",".join(METRIC_FIELDS))
    assert len(lines) == 3

    cells = await harness.async_sweep(config, act_bundle, None, "rtg_weight_w", [0.0, 1.0], episodes=1)
    assert [cell.cell["rtg_weight_w"] for cell in cells] == [0.0, 1.0]
    overrides = await harness.async_sweep(config, act_bundle, None, "instruction_override", ["INCREASE"], 1)
    assert overrides[0].cell == {"instruction_override": "INCREASE"}

    with pytest.raises(ConfigError):
        await harness.async_sweep(config, act_bundle, None, "budget_ratio", [0.0])
    with pytest.raises(ConfigError):
        await harness.async_sweep(config, act_bundle, None, "market_scale", [1.0])


async def test_behavior_scatter(config: RunConfig, act_bundle: ActBundle) -> None:
    """Test the sample count and that the scatter is reproducible."""
    points = await harness.async_behavior_scatter(config, act_bundle, ScriptedOracle())
    assert len(points) == 30
    assert points == await harness.async_behavior_scatter(config, act_bundle, ScriptedOracle())
    assert harness.scatter_to_csv(points).splitlines()[0] == "cpa_ratio,action_delta"


async def test_incompatible_checkpoint(config: RunConfig, act_bundle: ActBundle) -> None:
    """Test that an Act model trained for another action range is refused."""
    other = dataclasses.replace(config, simulator=small_simulator(action_range=(0.0, 5.0)))
    with pytest.raises(ArtifactMismatchError):
        await harness.async_evaluate(other, act_bundle, ScriptedOracle())


async def test_remote_backend_deadline_misses(config: RunConfig, act_bundle: ActBundle) -> None:
    """Test that stalled remote requests become exactly counted misses and episodes still finish."""
    step_re = re.compile(r"The next decision is step (\d+)")

    async def handler(request: web.Request) -> web.Response:
        body = await request.json()
        match = step_re.search(body["messages"][-1]["content"])
        if match and int(match.group(1)) % 2 == 0:
            await asyncio.sleep(1.5)
        return web.json_response({"choices": [{"message": {"content": "CPA ratio: 1\nDIRECTION: INCREASE"}}]})

    app = web.Application()
    app.router.add_post("/v1/chat/completions", handler)
    config = dataclasses.replace(config, think=ThinkConfig(deadline=0.3))
    async with TestServer(app) as server:
        async with ClientSession() as session:
            backend = RemoteChat(session, str(server.make_url("/v1/chat/completions")), "m", timeout=5.0)
            cells = await harness.async_evaluate(config, act_bundle, backend, ["base"])
    episodes = cells[0].episodes
    assert all(len(episode.actions) == STEPS for episode in episodes)
    # requests go out for steps 1..STEPS-1; the even ones stall past the deadline
    stalled = len([t for t in range(1, STEPS) if t % 2 == 0])
    assert [episode.think_misses for episode in episodes] == [stalled, stalled]
    assert cells[0].columns()["think_misses"] == 2 * stalled


async def test_gen_cot(config: RunConfig, trajectories: list[Trajectory]) -> None:
    """Test one CoT per step t >= 1, and partial output on backend failure."""
    subset = trajectories[:2]
    entries = await harness.async_gen_cot(subset, ScriptedOracle(), config)
    assert len(entries) == sum(len(traj) - 1 for traj in subset)
    assert {entry.t for entry in entries} == set(range(1, len(subset[0])))
    assert all(entry.direction in ("INCREASE", "DECREASE") for entry in entries)

    with pytest.raises(BackendUnavailableError) as info:
        await harness.async_gen_cot(subset, FlakyBackend(), config)
    assert info.value.partial
    assert all(entry.t % 2 == 0 for entry in info.value.partial)


def test_write_report(tmp_path: Path, config: RunConfig) -> None:
    """Test the JSON and CSV report files and their provenance."""
    paths = harness.write_report(tmp_path / "out" / "eval.txt", "evaluate", config, {"cells": []}, "a,b\n")
    assert [path.name for path in paths] == ["eval.json", "eval.csv"]
    payload = json.loads(paths[0].read_text(encoding="utf-8"))
    assert payload["kind"] == "evaluate"
    assert payload["config_hash"] == config.config_hash()
    assert payload["seed"] == 1
    assert "generated_at" in payload
    assert payload["config"] == config.to_dict()
    assert len(harness.write_report(tmp_path / "gq", "gqpo-export", config, {})) == 1


async def test_one_slow_response_is_one_miss(config: RunConfig, act_bundle: ActBundle) -> None:
    """Test that a single stalled CoT in a 48-step episode costs exactly one miss."""
    config = dataclasses.replace(
        config,
        simulator=small_simulator(num_steps=48, impressions_per_step=50),
        think=ThinkConfig(deadline=0.3),
        eval=dataclasses.replace(config.eval, episodes=1),
    )
    backend = StallingBackend(stall_step=20, delay=2.0)
    cells = await harness.async_evaluate(config, act_bundle, backend, ["base"])
    episode = cells[0].episodes[0]
    assert len(episode.actions) == 48
    columns = cells[0].columns()
    assert columns["think_requests"] == 47
    assert columns["think_misses"] == 1
