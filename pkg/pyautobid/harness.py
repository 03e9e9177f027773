"""
Experiment orchestration: closed-loop evaluation, sweeps, behavior scatter and CoT generation.

Evaluation follows the deployed decision loop. The reasoning for step t is
requested as soon as step t - 1 has been played, the Act model decides step t
with whatever CoT arrived by the deadline, and the conditioning return starts
at the dataset maximum and is reduced by every realized reward.
"""

from __future__ import annotations

import asyncio
import csv
import io
import json
import logging
from collections.abc import Sequence
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

import numpy as np

from .act import ActBundle, inference_rtg_init
from .bidding import METRIC_FIELDS, MetricReport, evaluate_episode, reports_to_csv
from .config import SWEEP_AXES, RunConfig, check_sweep
from .const import STATE_FEATURES
from .exceptions import ArtifactMismatchError, BackendUnavailableError, ConfigError
from .market import EpisodeConfig, Environment
from .think import (
    EMPTY_COT,
    CotResponse,
    PromptContext,
    ThinkBackend,
    ThinkScheduler,
    async_generate_cot,
    build_prompt,
    instruction_cot,
)
from .trajectory import CotEntry, Trajectory

_LOGGER = logging.getLogger(__name__)

_CPA_INDEX = STATE_FEATURES.index("current_cpa_ratio")


# pylint: disable=too-many-instance-attributes
@dataclass
class EpisodeResult:
    """Outcome of one evaluated episode."""

    seed: int
    report: MetricReport
    actions: list[float]
    think_requests: int = 0
    think_misses: int = 0
    clamped: int = 0
    # (CPA ratio observed before step t, a_t - a_{t-1}) for t >= 1
    trace: list[tuple[float, float]] = field(default_factory=list)

    @property
    def mean_action_delta(self) -> float:
        """Return the mean step-to-step change of the action."""
        return float(np.mean(np.diff(self.actions))) if len(self.actions) > 1 else 0.0


@dataclass
class CellSummary:
    """Episodes of one sweep cell and their averaged metrics."""

    cell: dict[str, Any]
    episodes: list[EpisodeResult]

    @property
    def report(self) -> MetricReport:
        """Return the mean MetricReport over the cell's episodes."""
        return MetricReport.mean([episode.report for episode in self.episodes])

    def columns(self) -> dict[str, Any]:
        """Return the leading CSV columns of the cell."""
        return {
            **self.cell,
            "episodes": len(self.episodes),
            "think_requests": sum(e.think_requests for e in self.episodes),
            "think_misses": sum(e.think_misses for e in self.episodes),
            "mean_action_delta": float(np.mean([e.mean_action_delta for e in self.episodes])),
        }

    def to_json(self) -> dict[str, Any]:
        """Return the cell, its aggregate metrics and its per-episode metrics."""
        return {
            **self.columns(),
            "metrics": self.report.as_dict(),
            "per_episode": [
                {
                    "seed": e.seed,
                    **e.report.as_dict(),
                    "think_misses": e.think_misses,
                    "clamped": e.clamped,
                }
                for e in self.episodes
            ],
        }


def check_compatible(config: RunConfig, act: ActBundle) -> None:
    """Refuse an Act checkpoint that cannot drive the configured market."""
    if tuple(act.model.config.action_range) != tuple(config.simulator.action_range):
        raise ArtifactMismatchError(
            f"[act_model] checkpoint action_range {act.model.config.action_range} "
            f"differs from simulator.action_range {config.simulator.action_range}"
        )


def _check_grid(axis: str, values: Sequence[Any]) -> None:
    if axis not in SWEEP_AXES:
        raise ConfigError("eval", f"unknown sweep axis {axis!r}")
    try:
        check_sweep(axis, list(values))
    except ValueError as err:
        raise ConfigError("eval", str(err)) from err


def _fixed_cot(override: str) -> CotResponse | None:
    if override in ("INCREASE", "DECREASE"):
        return instruction_cot(override)  # type: ignore[arg-type]
    if override == "none":
        return EMPTY_COT
    return None


# pylint: disable=too-many-arguments,too-many-locals
async def async_run_episode(
    episode: EpisodeConfig,
    act: ActBundle,
    backend: ThinkBackend | None,
    config: RunConfig,
    override: str = "base",
    rtg_weight_w: float | None = None,
) -> EpisodeResult:
    """
    Play one episode with the Think/Act loop.

    Parameters:
        episode: the market episode to play
        act: loaded Act checkpoint
        backend: think backend, required when override is "base"
        config: run configuration (think deadline, history, market size)
        override: "base" uses the backend, "none" the empty CoT,
            "INCREASE"/"DECREASE" a fixed instruction at every step
        rtg_weight_w: offset added to the initial return (default: the
            checkpoint's training weight)
    """
    think = config.think
    fixed = _fixed_cot(override)
    if fixed is None and backend is None:
        raise ValueError("override 'base' needs a think backend")
    scheduler = (
        ThinkScheduler(backend, think.deadline, think.max_in_flight) if fixed is None and backend else None
    )
    w = act.rtg_weight if rtg_weight_w is None else rtg_weight_w
    scale = act.model.config.return_scale

    env = Environment(episode)
    states = [env.build_state()]
    actions: list[float] = []
    returns = [inference_rtg_init(act.stats, scale, w) * scale]
    trace: list[tuple[float, float]] = []
    try:
        while not env.done:
            t = env.t
            if scheduler is not None:
                cot = await scheduler.async_collect(t)
            else:
                cot = fixed if fixed is not None else EMPTY_COT
            action = act.act(cot, act.window(states, actions, returns, t))
            if t > 0:
                trace.append((float(states[t][_CPA_INDEX]), action - actions[-1]))
            state, reward = env.step(action)
            actions.append(env.actions[-1])
            states.append(state)
            returns.append(returns[-1] - reward)
            if scheduler is not None and not env.done:
                ctx = PromptContext.from_states(
                    states,
                    actions,
                    env.t,
                    episode.cpa_constraint,
                    episode.budget,
                    episode.impressions_per_step,
                    think.history,
                )
                scheduler.request(env.t, ctx)
            # let pending think requests progress between decisions
            await asyncio.sleep(0)
    finally:
        if scheduler is not None:
            await scheduler.async_close()

    report = evaluate_episode(
        env, episode.cpa_constraint, episode.budget, episode.eps_div, episode.sentinel_cpa_ratio
    )
    result = EpisodeResult(
        seed=episode.rng_seed,
        report=report,
        actions=actions,
        think_requests=scheduler.requests if scheduler else 0,
        think_misses=scheduler.misses if scheduler else 0,
        clamped=sum(env.clamped),
        trace=trace,
    )
    _LOGGER.debug("Episode %s (%s): %s, misses %s", episode.rng_seed, override, report, result.think_misses)
    return result


async def async_run_cell(
    config: RunConfig,
    act: ActBundle,
    backend: ThinkBackend | None,
    seeds: Sequence[int],
    override: str = "base",
    budget_ratio: float = 1.0,
    rtg_weight_w: float | None = None,
) -> list[EpisodeResult]:
    """Play one episode per seed, at most eval.workers at a time; results keep seed order."""
    semaphore = asyncio.Semaphore(config.eval.workers)

    async def _async_one(seed: int) -> EpisodeResult:
        async with semaphore:
            episode = config.simulator.episode(seed, budget_ratio)
            return await async_run_episode(episode, act, backend, config, override, rtg_weight_w)

    return list(await asyncio.gather(*(_async_one(seed) for seed in seeds)))


async def async_evaluate(
    config: RunConfig,
    act: ActBundle,
    backend: ThinkBackend | None,
    overrides: Sequence[str] | None = None,
    episodes: int | None = None,
) -> list[CellSummary]:
    """Evaluate the configured cell once per instruction override."""
    check_compatible(config, act)
    overrides = list(overrides or [config.eval.instruction_override])
    _check_grid("instruction_override", overrides)
    seeds = config.eval.episode_seeds(episodes)
    cells = []
    for override in overrides:
        results = await async_run_cell(
            config, act, backend, seeds, override, config.eval.budget_ratio, config.eval.rtg_weight_w
        )
        cells.append(CellSummary({"instruction_override": override}, results))
        _LOGGER.info("Evaluated %s episodes with override %s: %s", len(results), override, cells[-1].report)
    return cells


async def async_sweep(
    config: RunConfig,
    act: ActBundle,
    backend: ThinkBackend | None,
    axis: str | None = None,
    values: Sequence[Any] | None = None,
    episodes: int | None = None,
) -> list[CellSummary]:
    """
    Vary one axis of the evaluation and evaluate every cell on the same seeds.

    The axes are budget_ratio, rtg_weight_w (the inference offset of the
    initial return) and instruction_override.
    """
    check_compatible(config, act)
    axis = axis or config.eval.sweep_axis
    values = list(values if values is not None else config.eval.sweep_values)
    _check_grid(axis, values)
    seeds = config.eval.episode_seeds(episodes)
    cells = []
    for value in values:
        kwargs: dict[str, Any] = {
            "override": config.eval.instruction_override,
            "budget_ratio": config.eval.budget_ratio,
            "rtg_weight_w": config.eval.rtg_weight_w,
        }
        key = "override" if axis == "instruction_override" else axis
        kwargs[key] = value
        results = await async_run_cell(config, act, backend, seeds, **kwargs)
        cells.append(CellSummary({axis: value}, results))
        _LOGGER.info("Sweep cell %s=%s: %s", axis, value, cells[-1].report)
    return cells


async def async_behavior_scatter(
    config: RunConfig,
    act: ActBundle,
    backend: ThinkBackend | None,
    samples: int | None = None,
) -> list[tuple[float, float]]:
    """
    Sample (CPA ratio, action change) pairs from closed-loop episodes.

    Episodes are played in seed order until enough steps are collected; the
    returned samples are a seeded subset in episode order.
    """
    check_compatible(config, act)
    samples = samples or config.eval.scatter_samples
    pool: list[tuple[float, float]] = []
    seed = config.eval.first_seed
    while len(pool) < samples:
        seeds = list(range(seed, seed + config.eval.workers))
        seed += len(seeds)
        for result in await async_run_cell(
            config, act, backend, seeds, config.eval.instruction_override, config.eval.budget_ratio
        ):
            pool.extend(result.trace)
    rng = np.random.default_rng(config.stage_seed("evaluate"))
    picks = np.sort(rng.choice(len(pool), size=samples, replace=False))
    return [pool[i] for i in picks]


async def async_gen_cot(
    trajectories: Sequence[Trajectory],
    backend: ThinkBackend,
    config: RunConfig,
) -> list[CotEntry]:
    """
    Generate one CoT for every step t >= 1 of every trajectory.

    A backend failure raises BackendUnavailableError whose partial holds the
    entries finished so far.
    """
    think = config.think
    semaphore = asyncio.Semaphore(think.max_in_flight)
    impressions = config.simulator.impressions_per_step

    async def _async_step(traj: Trajectory, t: int) -> CotEntry:
        ctx = PromptContext.from_states(
            traj.states, traj.actions, t, traj.cpa_constraint, traj.budget, impressions, think.history
        )
        async with semaphore:
            cot = (await async_generate_cot(backend, build_prompt(ctx), 1, ctx))[0]
        return CotEntry(traj.traj_id, t, cot.text, cot.direction, cot.claimed_cpa_ratio)

    jobs = [(traj, t) for traj in trajectories for t in range(1, len(traj))]
    results = await asyncio.gather(*(_async_step(traj, t) for traj, t in jobs), return_exceptions=True)
    entries = [result for result in results if isinstance(result, CotEntry)]
    failures = [result for result in results if isinstance(result, BaseException)]
    for failure in failures:
        if not isinstance(failure, BackendUnavailableError):
            raise failure
    if failures:
        raise BackendUnavailableError(
            f"{len(failures)} of {len(jobs)} CoT requests failed: {failures[0]}", partial=entries
        )
    _LOGGER.info("Generated %s CoTs for %s trajectories", len(entries), len(trajectories))
    return entries


# reports


def cells_to_csv(cells: Sequence[CellSummary]) -> str:
    """Render cells as CSV: cell columns then the mean metrics."""
    return reports_to_csv([(cell.columns(), cell.report) for cell in cells])


def scatter_to_csv(points: Sequence[tuple[float, float]]) -> str:
    """Render (CPA ratio, action change) pairs as CSV."""
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(("cpa_ratio", "action_delta"))
    writer.writerows(points)
    return buffer.getvalue()


def report_payload(kind: str, config: RunConfig, body: dict[str, Any]) -> dict[str, Any]:
    """Wrap a report body with its provenance; generated_at is the only varying field."""
    return {
        "kind": kind,
        **config.provenance(),
        "generated_at": datetime.now(timezone.utc).isoformat(),
        "config": config.to_dict(),
        **body,
    }


def write_report(
    out: str | Path, kind: str, config: RunConfig, body: dict[str, Any], table: str | None = None
) -> list[Path]:
    """
    Write out.json and, for tables, out.csv.

    Parameters:
        out: path prefix; any suffix is replaced
        kind: report kind (evaluate, sweep, behavior-scatter, ...)
        config: run configuration embedded for reproducibility
        body: report-specific JSON content
        table: CSV text, if the report has a table
    """
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    json_path = out.with_suffix(".json")
    json_path.write_text(
        json.dumps(report_payload(kind, config, body), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    paths = [json_path]
    if table is not None:
        csv_path = out.with_suffix(".csv")
        csv_path.write_text(table, encoding="utf-8")
        paths.append(csv_path)
    _LOGGER.info("Wrote %s", ", ".join(str(path) for path in paths))
    return paths


def cells_body(cells: Sequence[CellSummary]) -> dict[str, Any]:
    """Return the JSON body of an evaluate or sweep report."""
    return {"metric_fields": list(METRIC_FIELDS), "cells": [cell.to_json() for cell in cells]}
