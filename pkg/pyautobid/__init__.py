"""
Hierarchical auto-bidding: an auction simulator, a reasoning client, a
reasoning-conditioned decision model, offline critics and the relative-Q
selection of reasoning samples.

The Think side writes a short chain of thought about recent campaign
performance and ends it with a direction for the bid parameter; the Act side
turns that text and the numeric history into the next bid parameter. IQL
critics score the actions that different reasoning samples lead to, and the
best samples are exported as fine-tuning data for the reasoner.
"""

import logging

# pylint: disable=unused-import
from .act import ActBundle, ActModel, ActModelConfig, load_act
from .bidding import MetricReport, compute_bid, evaluate_episode, penalty, score
from .chat import RemoteChat
from .config import RunConfig, load_config
from .exceptions import AutobidError
from .gqpo import GqpoConfig, GqpoRecord, export_sft, read_sft, run_pipeline
from .iql import Critic, IqlConfig, load_critic, train_iql
from .market import Environment, EpisodeConfig, SimulatorConfig, generate_dataset, run_auction
from .think import NoisyOracle, ScriptedOracle, ThinkScheduler, parse_cot
from .trajectory import Trajectory, read_dataset, write_dataset

# library users configure logging themselves
logging.getLogger(__name__).addHandler(logging.NullHandler())


__all__ = [
    "ActBundle",
    "ActModel",
    "ActModelConfig",
    "AutobidError",
    "Critic",
    "Environment",
    "EpisodeConfig",
    "GqpoConfig",
    "GqpoRecord",
    "IqlConfig",
    "MetricReport",
    "NoisyOracle",
    "RunConfig",
    "RemoteChat",
    "ScriptedOracle",
    "SimulatorConfig",
    "ThinkScheduler",
    "Trajectory",
    "compute_bid",
    "evaluate_episode",
    "export_sft",
    "generate_dataset",
    "load_act",
    "load_config",
    "load_critic",
    "parse_cot",
    "penalty",
    "read_dataset",
    "read_sft",
    "run_auction",
    "run_pipeline",
    "score",
    "train_iql",
    "write_dataset",
]
