"""Command line entry point: python -m pyautobid VERB --config run.json ..."""

from __future__ import annotations

import argparse
import asyncio
import dataclasses
import logging
from collections.abc import Awaitable, Callable, Sequence
from pathlib import Path
from typing import TypeVar

import aiohttp

from . import harness
from .act import ActBundle, ActDataset, ActTrainer, load_act, save_act, write_loss_log
from .config import SWEEP_AXES, RunConfig, config_from_dict, load_config, write_config
from .const import EXIT_BACKEND, EXIT_CONFIG, EXIT_MISSING_ARTIFACT, EXIT_OK, INSTRUCTION_OVERRIDES
from .exceptions import ArtifactMismatchError, BackendUnavailableError, ConfigError, MissingArtifactError
from .gqpo import async_run_pipeline, export_sft
from .iql import load_critic, save_iql, train_iql, write_training_log
from .market import generate_dataset
from .think import BACKENDS, ThinkBackend, instruction_cot, make_backend
from .tokenizer import Tokenizer
from .trajectory import compute_stats, read_cot_file, read_dataset, write_cot_file

_LOGGER = logging.getLogger(__name__)

T = TypeVar("T")


def _with_backend(
    config: RunConfig, stage: str, run: Callable[[ThinkBackend], Awaitable[T]]
) -> T:
    """Run a coroutine with the configured backend, inside an aiohttp session when remote."""

    async def _async_main() -> T:
        if config.think.backend != "remote":
            return await run(make_backend(config.think, config.stage_seed(stage)))
        async with aiohttp.ClientSession() as session:
            return await run(make_backend(config.think, config.stage_seed(stage), session))

    return asyncio.run(_async_main())


def _apply_backend(config: RunConfig, backend: str | None) -> RunConfig:
    if backend is None:
        return config
    try:
        think = dataclasses.replace(config.think, backend=backend)
    except ValueError as err:
        raise ConfigError("think", str(err)) from err
    return dataclasses.replace(config, think=think)


def cmd_init_config(args: argparse.Namespace) -> int:
    """Write the default configuration."""
    path = write_config(args.out, config_from_dict({"seed": args.seed}))
    _LOGGER.info("Wrote default configuration to %s", path)
    return EXIT_OK


def cmd_gen_data(args: argparse.Namespace, config: RunConfig) -> int:
    """Simulate behavior-policy trajectories."""
    stats = generate_dataset(
        config.simulator, args.out, config.seed, args.periods, extra_header=config.provenance()
    )
    _LOGGER.info("Dataset max return %.3f over %s trajectories", stats.max_return, stats.num_trajectories)
    return EXIT_OK


def cmd_gen_cot(args: argparse.Namespace, config: RunConfig) -> int:
    """Write the CoT side-file of a dataset."""
    dataset = read_dataset(args.data)
    try:
        entries = _with_backend(
            config, "gen-cot", lambda backend: harness.async_gen_cot(dataset.trajectories, backend, config)
        )
    except BackendUnavailableError as err:
        if err.partial:
            write_cot_file(args.out, err.partial, {**config.provenance(), "complete": False})
        raise
    write_cot_file(args.out, entries, {**config.provenance(), "complete": True})
    return EXIT_OK


def cmd_train_iql(args: argparse.Namespace, config: RunConfig) -> int:
    """Train the Q and V critics."""
    dataset = read_dataset(args.data)
    stats = compute_stats(dataset.trajectories)
    trainer = train_iql(dataset.trajectories, stats, config.iql, config.stage_seed("train-iql"), args.steps)
    save_iql(args.out, trainer, stats, config.provenance())
    write_training_log(Path(args.out).with_suffix(".log.json"), trainer.log)
    _LOGGER.info("Saved IQL checkpoint to %s", args.out)
    return EXIT_OK


def build_tokenizer(texts: Sequence[str], vocab_size: int) -> Tokenizer:
    """Fit the CoT tokenizer, always covering the instruction overrides."""
    fixed = [instruction_cot(direction).text for direction in ("INCREASE", "DECREASE")]
    return Tokenizer.fit([*texts, *fixed], vocab_size)


def cmd_train_act(args: argparse.Namespace, config: RunConfig) -> int:
    """Train the Act model on a dataset and its CoT side-file."""
    dataset = read_dataset(args.data)
    cots = read_cot_file(args.cot_file) if args.cot_file else {}
    stats = compute_stats(dataset.trajectories)
    tokenizer = build_tokenizer([entry.text for entry in cots.values()], config.act_model.vocab_size)
    act_data = ActDataset.build(dataset.trajectories, cots, stats, args.rtg_weight)
    trainer = ActTrainer(
        config.act_model, act_data, tokenizer, config.stage_seed("train-act"), use_cot=bool(cots)
    )
    losses = trainer.train(args.steps)
    save_act(args.out, trainer.model, tokenizer, stats, args.rtg_weight, config.provenance(), trainer.optimizer)
    write_loss_log(Path(args.out).with_suffix(".log.json"), losses)
    _LOGGER.info("Saved Act checkpoint to %s", args.out)
    return EXIT_OK


def cmd_gqpo_export(args: argparse.Namespace, config: RunConfig) -> int:
    """Select CoTs by relative Q and export the fine-tuning dataset."""
    dataset = read_dataset(args.data)
    act = load_act(args.act)
    critic = load_critic(args.critic)
    result = _with_backend(
        config,
        "gqpo-export",
        lambda backend: async_run_pipeline(
            dataset.trajectories,
            act,
            critic,
            backend,
            config.gqpo,
            config.stage_seed("gqpo-export"),
            config.simulator.impressions_per_step,
            config.think.history,
        ),
    )
    out = Path(args.out)
    if result.records:
        export_sft(
            result.records, out, config.gqpo.beta, {**config.provenance(), "complete": result.error is None}
        )
    else:
        _LOGGER.warning("No group improved on the dataset action; nothing exported")
    harness.write_report(out.with_name(f"{out.stem}-report"), "gqpo-export", config, result.report)
    return EXIT_BACKEND if result.error else EXIT_OK


def _load_policy(args: argparse.Namespace, config: RunConfig) -> ActBundle:
    act = load_act(args.act)
    harness.check_compatible(config, act)
    return act


def cmd_evaluate(args: argparse.Namespace, config: RunConfig) -> int:
    """Evaluate the Think/Act loop, once per instruction override."""
    act = _load_policy(args, config)
    cells = _with_backend(
        config,
        "evaluate",
        lambda backend: harness.async_evaluate(config, act, backend, args.override, args.episodes),
    )
    harness.write_report(args.out, "evaluate", config, harness.cells_body(cells), harness.cells_to_csv(cells))
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace, config: RunConfig) -> int:
    """Evaluate every value of one axis."""
    act = _load_policy(args, config)
    values = None
    if args.values:
        axis = args.axis or config.eval.sweep_axis
        try:
            values = args.values if axis == "instruction_override" else [float(v) for v in args.values]
        except ValueError as err:
            raise ConfigError("eval", f"sweep values for {axis} must be numbers: {err}") from err
    cells = _with_backend(
        config,
        "evaluate",
        lambda backend: harness.async_sweep(config, act, backend, args.axis, values, args.episodes),
    )
    body = {"axis": args.axis or config.eval.sweep_axis, **harness.cells_body(cells)}
    harness.write_report(args.out, "sweep", config, body, harness.cells_to_csv(cells))
    return EXIT_OK


def cmd_behavior_scatter(args: argparse.Namespace, config: RunConfig) -> int:
    """Sample (CPA ratio, action change) pairs."""
    act = _load_policy(args, config)
    points = _with_backend(
        config,
        "evaluate",
        lambda backend: harness.async_behavior_scatter(config, act, backend, args.samples),
    )
    body = {"samples": len(points)}
    harness.write_report(args.out, "behavior-scatter", config, body, harness.scatter_to_csv(points))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    """Return the argument parser with one subcommand per verb."""
    parser = argparse.ArgumentParser(prog="pyautobid", description="Hierarchical auto-bidding pipeline")
    parser.add_argument("-v", "--verbose", action="store_true", help="Log at DEBUG level")
    verbs = parser.add_subparsers(dest="verb", required=True)

    init = verbs.add_parser("init-config", help="Write the default configuration")
    init.add_argument("out", type=Path)
    init.add_argument("--seed", type=int, default=0)
    init.set_defaults(handler=cmd_init_config, needs_config=False)

    def verb(name: str, handler: Callable[..., int], help_text: str) -> argparse.ArgumentParser:
        sub = verbs.add_parser(name, help=help_text)
        sub.add_argument("-c", "--config", type=Path, required=True, help="Run configuration (JSON)")
        sub.add_argument("-o", "--out", type=Path, required=True, help="Output path")
        sub.set_defaults(handler=handler, needs_config=True)
        return sub

    sub = verb("gen-data", cmd_gen_data, "Simulate a trajectory dataset")
    sub.add_argument("--periods", type=int, default=None, help="Delivery periods (default simulator.num_periods)")

    sub = verb("gen-cot", cmd_gen_cot, "Generate the CoT side-file of a dataset")
    sub.add_argument("--data", type=Path, required=True)

    sub = verb("train-iql", cmd_train_iql, "Train the Q and V critics")
    sub.add_argument("--data", type=Path, required=True)
    sub.add_argument("--steps", type=int, default=None)

    sub = verb("train-act", cmd_train_act, "Train the Act model")
    sub.add_argument("--data", type=Path, required=True)
    sub.add_argument("--cot-file", type=Path, default=None, help="Omit to train without CoT")
    sub.add_argument("--rtg-weight", type=float, default=0.0, help="Penalty weight w of the return-to-go")
    sub.add_argument("--steps", type=int, default=None)

    sub = verb("gqpo-export", cmd_gqpo_export, "Export the reasoning fine-tuning dataset")
    sub.add_argument("--data", type=Path, required=True)
    sub.add_argument("--act", type=Path, required=True)
    sub.add_argument("--critic", type=Path, required=True)
    sub.add_argument("--backend", choices=BACKENDS, default=None)

    for name, handler, help_text in (
        ("evaluate", cmd_evaluate, "Evaluate the Think/Act loop"),
        ("sweep", cmd_sweep, "Evaluate one axis of the sweep grid"),
        ("behavior-scatter", cmd_behavior_scatter, "Sample CPA ratio against action change"),
    ):
        sub = verb(name, handler, help_text)
        sub.add_argument("--act", type=Path, required=True)
        sub.add_argument("--backend", choices=BACKENDS, default=None)
        if name == "behavior-scatter":
            sub.add_argument("--samples", type=int, default=None)
        else:
            sub.add_argument("--episodes", type=int, default=None)
        if name == "evaluate":
            sub.add_argument("--override", action="append", choices=INSTRUCTION_OVERRIDES, default=None)
        if name == "sweep":
            sub.add_argument("--axis", choices=SWEEP_AXES, default=None)
            sub.add_argument("--values", nargs="+", default=None)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    """Run one verb and return its exit code."""
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        if not args.needs_config:
            return int(args.handler(args))
        config = _apply_backend(load_config(args.config), getattr(args, "backend", None))
        return int(args.handler(args, config))
    except ConfigError as err:
        _LOGGER.error("Configuration error: %s", err)
        return EXIT_CONFIG
    except (MissingArtifactError, ArtifactMismatchError) as err:
        _LOGGER.error("Artifact error: %s", err)
        return EXIT_MISSING_ARTIFACT
    except BackendUnavailableError as err:
        _LOGGER.error("Think backend unavailable: %s", err)
        return EXIT_BACKEND
