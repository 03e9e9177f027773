"""
The following tests check that the trained Think/Act loop behaves sensibly at desk scale.

They train a small Act model on a few hundred simulated trajectories with scripted CoTs and
take a few minutes; run them with --acceptance.
"""

import asyncio
import logging

import numpy as np
import pytest

from pyautobid import harness
from pyautobid.act import ActBundle, ActDataset, ActTrainer
from pyautobid.cli import build_tokenizer
from pyautobid.config import EvalConfig, RunConfig
from pyautobid.market import generate_trajectories
from pyautobid.neural import TransformerConfig
from pyautobid.think import ScriptedOracle, ThinkConfig
from pyautobid.trajectory import compute_stats

from .conftest import small_simulator, tiny_act_config

_LOGGER = logging.getLogger(__name__)

pytestmark = pytest.mark.acceptance


@pytest.fixture(name="desk", scope="module")
def fixture_desk() -> tuple[RunConfig, ActBundle, list[float]]:
    """Return a run configuration, an Act model trained with scripted CoTs and its loss curve."""
    config = RunConfig(
        seed=11,
        simulator=small_simulator(num_steps=24, impressions_per_step=300, num_periods=70),
        act_model=tiny_act_config(
            transformer=TransformerConfig(d_model=16, n_heads=2, n_layers=2, max_seq_len=80),
            decision_widths=(16, 16),
            head_widths=(16, 1),
            seq_len=4,
            max_cot_len=64,
            return_scale=200.0,
            lr=1e-3,
            batch_size=32,
        ),
        think=ThinkConfig(deadline=5.0),
        eval=EvalConfig(episodes=20, workers=4),
    )
    trajectories = generate_trajectories(config.simulator, config.seed, config.simulator.num_periods)
    entries = asyncio.run(harness.async_gen_cot(trajectories, ScriptedOracle(), config))
    cots = {entry.key: entry for entry in entries}
    stats = compute_stats(trajectories)
    tokenizer = build_tokenizer([entry.text for entry in entries], config.act_model.vocab_size)
    trainer = ActTrainer(config.act_model, ActDataset.build(trajectories, cots, stats), tokenizer, seed=5)
    losses = [row["loss"] for row in trainer.train(2000)]
    return config, ActBundle(trainer.model, tokenizer, stats, 0.0, {}), losses


def test_loss_halves(desk: tuple[RunConfig, ActBundle, list[float]]) -> None:
    """Test that training on about two hundred trajectories at least halves the loss."""
    _, _, losses = desk
    assert np.mean(losses[-100:]) <= 0.5 * np.mean(losses[:20])


def test_cot_helps(desk: tuple[RunConfig, ActBundle, list[float]]) -> None:
    """Test that scripted reasoning scores at least as well as no reasoning on paired seeds."""
    config, act, _ = desk
    base, empty = asyncio.run(harness.async_evaluate(config, act, ScriptedOracle(), ["base", "none"]))
    delta = base.report.score - empty.report.score
    _LOGGER.info("Score with CoT %.3f, without %.3f, delta %.3f", base.report.score, empty.report.score, delta)
    assert delta >= 0.0


def test_instructions_are_followed(desk: tuple[RunConfig, ActBundle, list[float]]) -> None:
    """Test that forcing DECREASE gives a CPA ratio no higher than forcing INCREASE."""
    config, act, _ = desk
    decrease, increase = asyncio.run(harness.async_evaluate(config, act, None, ["DECREASE", "INCREASE"]))
    assert decrease.report.cpa_ratio <= increase.report.cpa_ratio


def test_conversions_grow_with_budget(desk: tuple[RunConfig, ActBundle, list[float]]) -> None:
    """Test that conversions do not fall as the budget grows."""
    config, act, _ = desk
    cells = asyncio.run(
        harness.async_sweep(config, act, ScriptedOracle(), "budget_ratio", [0.5, 1.0, 1.5], episodes=10)
    )
    conversions = [cell.report.conversions for cell in cells]
    assert conversions == sorted(conversions)
