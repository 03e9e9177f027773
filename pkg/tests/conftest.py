"""Common functions and fixtures for pyautobid tests."""

import numpy as np
import pytest

from pyautobid.act import ActBundle, ActDataset, ActModelConfig, ActTrainer
from pyautobid.market import SimulatorConfig, generate_trajectories
from pyautobid.neural import TransformerConfig
from pyautobid.tokenizer import Tokenizer
from pyautobid.trajectory import DatasetStats, Trajectory, compute_stats


def pytest_addoption(parser: pytest.Parser) -> None:
    """Add the commandline options"""
    parser.addoption(
        "--endpoint",
        type=str,
        default=None,
        action="store",
        dest="ENDPOINT",
        help="chat-completion URL used by the integration tests",
    )

    parser.addoption(
        "--model",
        type=str,
        default=None,
        action="store",
        dest="MODEL",
        help="model name sent to the chat-completion endpoint",
    )

    parser.addoption(
        "--acceptance",
        default=False,
        action="store_true",
        dest="ACCEPTANCE",
        help="run the desk-scale training experiments",
    )


def pytest_runtest_setup(item: pytest.Item) -> None:
    """Skip integration tests without an endpoint and acceptance tests unless requested."""
    if "integration" in item.keywords and not item.config.getoption("--endpoint"):
        pytest.skip("use --endpoint and --model to run integration tests.")
    if "acceptance" in item.keywords and not item.config.getoption("--acceptance"):
        pytest.skip("use --acceptance to run the training experiments.")


def small_simulator(**kwargs: object) -> SimulatorConfig:
    """Return a simulator small enough for unit tests."""
    values: dict[str, object] = {"num_steps": 12, "impressions_per_step": 200, "num_periods": 4}
    values.update(kwargs)
    return SimulatorConfig(**values)  # type: ignore[arg-type]


def tiny_act_config(**kwargs: object) -> ActModelConfig:
    """Return an Act model with a few hundred parameters per layer."""
    values: dict[str, object] = {
        "transformer": TransformerConfig(d_model=8, n_heads=2, n_layers=1, max_seq_len=48),
        "decision_widths": (8, 8),
        "head_widths": (8, 1),
        "seq_len": 2,
        "max_cot_len": 32,
        "vocab_size": 256,
        "return_scale": 20.0,
        "batch_size": 4,
        "steps": 2,
        "log_every": 1,
    }
    values.update(kwargs)
    return ActModelConfig(**values)  # type: ignore[arg-type]


@pytest.fixture(name="simulator", scope="session")
def fixture_simulator() -> SimulatorConfig:
    """Return the unit-test simulator section."""
    return small_simulator()


@pytest.fixture(name="trajectories", scope="session")
def fixture_trajectories(simulator: SimulatorConfig) -> list[Trajectory]:
    """Return twelve short behavior trajectories (4 periods x 3 policies)."""
    return generate_trajectories(simulator, seed=7, num_periods=4)


@pytest.fixture(name="stats", scope="session")
def fixture_stats(trajectories: list[Trajectory]) -> DatasetStats:
    """Return the statistics of the unit-test dataset."""
    return compute_stats(trajectories)


@pytest.fixture(name="act_bundle", scope="session")
def fixture_act_bundle(trajectories: list[Trajectory], stats: DatasetStats) -> ActBundle:
    """Return a barely trained Act model, enough to drive closed-loop tests."""
    config = tiny_act_config()
    tokenizer = Tokenizer.fit(["DIRECTION: INCREASE", "DIRECTION: DECREASE", "CPA ratio"], config.vocab_size)
    trainer = ActTrainer(config, ActDataset.build(trajectories, {}, stats), tokenizer, seed=3)
    trainer.train()
    return ActBundle(trainer.model, tokenizer, stats, 0.0, {"kind": "act"})


@pytest.fixture(name="rng")
def fixture_rng() -> np.random.Generator:
    """Return a seeded generator."""
    return np.random.default_rng(1234)
