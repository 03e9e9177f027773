"""
Group selection of reasoning samples by relative Q, and the SFT export.

For a sampled dataset state, N CoTs are generated; each is fed through the
Act model to obtain the action it leads to, and the critic scores that action
against the dataset action (relative Q). The best CoT is kept only if it
strictly improves on the dataset action. The kept CoTs, weighted by
exp(beta * relative Q), form the fine-tuning dataset for the reasoner.
"""

from __future__ import annotations

import asyncio
import json
import logging
import math
from collections import Counter
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Protocol

import numpy as np

from .act import rtg_reweight
from .const import SFT_RECOMMENDED, SFT_SCHEMA
from .exceptions import ArtifactMismatchError, BackendUnavailableError, MissingArtifactError
from .think import (
    HISTORY,
    CotResponse,
    PromptContext,
    ThinkBackend,
    async_generate_cot,
    build_prompt,
    hallucination_check,
)
from .trajectory import Trajectory

_LOGGER = logging.getLogger(__name__)

TIE_RULES = ("lowest-index",)


@dataclass(frozen=True)
class GqpoConfig:
    """The [gqpo] section."""

    group_size: int = 3
    beta: float = 1.0
    target_count: int = 2000
    tie_rule: str = "lowest-index"
    dedup: bool = True
    max_in_flight: int = 8
    histogram_edges: tuple[float, ...] = (-0.1, -0.01, -0.001, 0.0, 0.001, 0.01, 0.1)

    def __post_init__(self) -> None:
        if self.group_size < 2:
            raise ValueError(f"group_size must be at least 2, got {self.group_size}")
        if self.beta < 0:
            raise ValueError(f"beta must be non-negative, got {self.beta}")
        if self.target_count < 1 or self.max_in_flight < 1:
            raise ValueError("target_count and max_in_flight must be positive")
        if self.tie_rule not in TIE_RULES:
            raise ValueError(f"tie_rule must be one of {TIE_RULES}")
        if list(self.histogram_edges) != sorted(self.histogram_edges):
            raise ValueError("histogram_edges must be increasing")


# pylint: disable=too-many-instance-attributes
@dataclass(frozen=True)
class GqpoRecord:
    """One exported sample: the prompt and the CoT chosen for it."""

    prompt: str
    response: str
    delta_q: float
    weight: float
    trajectory_id: str
    t: int
    direction: str
    group_delta_q: tuple[float, ...] = field(default_factory=tuple)
    rejected_count: int = 0

    @property
    def key(self) -> tuple[str, int]:
        """Return the (trajectory id, t) source key."""
        return (self.trajectory_id, self.t)

    def to_json(self) -> dict[str, Any]:
        """Return the JSON-lines representation."""
        return {
            "prompt": self.prompt,
            "response": self.response,
            "weight": self.weight,
            "delta_q": self.delta_q,
            "meta": {
                "trajectory_id": self.trajectory_id,
                "t": self.t,
                "direction": self.direction,
                "group_delta_q": list(self.group_delta_q),
                "rejected_count": self.rejected_count,
            },
        }

    @classmethod
    def from_json(cls, data: dict[str, Any]) -> GqpoRecord:
        """Rebuild a record from to_json() output."""
        meta = data["meta"]
        return cls(
            prompt=data["prompt"],
            response=data["response"],
            delta_q=data["delta_q"],
            weight=data["weight"],
            trajectory_id=meta["trajectory_id"],
            t=meta["t"],
            direction=meta["direction"],
            group_delta_q=tuple(meta["group_delta_q"]),
            rejected_count=meta["rejected_count"],
        )


class ActPolicy(Protocol):
    """The part of a loaded Act model the pipeline uses."""

    rtg_weight: float

    def window(
        self, states: Sequence[np.ndarray], actions: Sequence[float], returns: Sequence[float], t: int
    ) -> Any: ...

    def act_many(self, cots: Sequence[CotResponse], seq: Any) -> np.ndarray: ...


class QCritic(Protocol):
    """The part of a loaded critic the pipeline uses."""

    def window(self, states: Sequence[np.ndarray], actions: Sequence[float], t: int) -> Any: ...

    def q_values(self, window: Any, actions: Sequence[float]) -> np.ndarray: ...


def relative_q(critic: QCritic, window: Any, cot_action: float, dataset_action: float) -> float:
    """Return Q(s, cot_action) - Q(s, dataset_action)."""
    if cot_action == dataset_action:
        return 0.0
    values = critic.q_values(window, [cot_action, dataset_action])
    return float(values[0] - values[1])


def select_best(delta_q: Sequence[float]) -> int | None:
    """Return the index of the largest strictly positive value (lowest index on ties), else None."""
    if not delta_q:
        raise ValueError("select_best() needs a non-empty group")
    best = None
    for index, value in enumerate(delta_q):
        if value > 0 and (best is None or value > delta_q[best]):
            best = index
    return best


def dedup_cots(cots: Sequence[CotResponse]) -> list[CotResponse]:
    """Drop CoTs whose text repeats an earlier one."""
    seen: set[str] = set()
    unique = []
    for cot in cots:
        if cot.text not in seen:
            seen.add(cot.text)
            unique.append(cot)
    return unique


@dataclass
class GroupResult:
    """One evaluated group."""

    trajectory_id: str
    t: int
    prompt: str
    cots: list[CotResponse]
    delta_q: list[float]
    chosen: int | None
    verdicts: list[str]


@dataclass
class PipelineResult:
    """Exported records, evaluated groups and the pipeline report."""

    records: list[GqpoRecord]
    groups: list[GroupResult]
    report: dict[str, Any]
    error: str | None = None


def sample_pairs(trajectories: Sequence[Trajectory], rng: np.random.Generator) -> list[tuple[int, int]]:
    """Return every (trajectory index, t >= 1) pair in random order."""
    pairs = [(i, t) for i, traj in enumerate(trajectories) for t in range(1, len(traj))]
    order = rng.permutation(len(pairs))
    return [pairs[i] for i in order]


# pylint: disable=too-many-arguments,too-many-locals
async def _async_group(
    traj: Trajectory,
    t: int,
    returns: np.ndarray,
    act: ActPolicy,
    critic: QCritic,
    backend: ThinkBackend,
    config: GqpoConfig,
    impressions_per_step: int,
    history: int,
    semaphore: asyncio.Semaphore,
) -> GroupResult:
    ctx = PromptContext.from_states(
        traj.states, traj.actions, t, traj.cpa_constraint, traj.budget, impressions_per_step, history
    )
    prompt = build_prompt(ctx)
    async with semaphore:
        cots = await async_generate_cot(backend, prompt, config.group_size, ctx)
    if config.dedup:
        cots = dedup_cots(cots)
    dataset_action = float(traj.actions[t])
    cot_actions = act.act_many(cots, act.window(traj.states, traj.actions, returns, t))
    window = critic.window(traj.states, traj.actions, t)
    values = critic.q_values(window, [*map(float, cot_actions), dataset_action])
    delta_q = [
        0.0 if float(a) == dataset_action else float(q - values[-1])
        for a, q in zip(cot_actions, values[:-1])
    ]
    verdicts = [hallucination_check(ctx, cot) for cot in cots]
    return GroupResult(traj.traj_id, t, prompt, cots, delta_q, select_best(delta_q), verdicts)


def _record(group: GroupResult, beta: float) -> GqpoRecord | None:
    if group.chosen is None:
        return None
    chosen = group.cots[group.chosen]
    delta = group.delta_q[group.chosen]
    return GqpoRecord(
        prompt=group.prompt,
        response=chosen.text,
        delta_q=delta,
        weight=math.exp(beta * delta),
        trajectory_id=group.trajectory_id,
        t=group.t,
        direction=chosen.direction,
        group_delta_q=tuple(group.delta_q),
        rejected_count=sum(1 for value in group.delta_q if value <= 0),
    )


def build_report(
    groups: Sequence[GroupResult], records: Sequence[GqpoRecord], config: GqpoConfig, available: int
) -> dict[str, Any]:
    """Summarize a pipeline run."""
    all_delta = np.array([value for group in groups for value in group.delta_q], dtype=np.float64)
    edges = list(config.histogram_edges)
    bounds = [-math.inf, *edges, math.inf]
    buckets = np.searchsorted(np.array(edges), all_delta, side="left")
    histogram = {
        f"({bounds[i]}, {bounds[i + 1]}]": int(np.sum(buckets == i)) for i in range(len(bounds) - 1)
    }
    generated = Counter(cot.direction for group in groups for cot in group.cots)
    chosen = Counter(record.direction for record in records)
    verdicts = Counter(v for group in groups for v in group.verdicts)
    accepted = [record.delta_q for record in records]
    return {
        "groups": len(groups),
        "accepted": len(records),
        "acceptance_rate": len(records) / len(groups) if groups else 0.0,
        "mean_delta_q_accepted": float(np.mean(accepted)) if accepted else None,
        "delta_q_histogram": histogram,
        "directions_generated": dict(sorted(generated.items())),
        "directions_chosen": dict(sorted(chosen.items())),
        "hallucination_checks": dict(sorted(verdicts.items())),
        "target_count": config.target_count,
        "target_reached": len(records) >= config.target_count,
        "available_pairs": available,
    }


async def async_run_pipeline(
    trajectories: Sequence[Trajectory],
    act: ActPolicy,
    critic: QCritic,
    backend: ThinkBackend,
    config: GqpoConfig,
    seed: int,
    impressions_per_step: int = 1000,
    history: int = HISTORY,
) -> PipelineResult:
    """
    Sample states, evaluate CoT groups and collect the selected records.

    Groups are evaluated in waves of max_in_flight; the run stops once
    target_count records are accepted or the dataset is exhausted. A backend
    failure ends the run early with the records gathered so far.
    """
    pairs = sample_pairs(trajectories, np.random.default_rng([seed, 3]))
    returns = {i: rtg_reweight(traj, act.rtg_weight) for i, traj in enumerate(trajectories)}
    semaphore = asyncio.Semaphore(config.max_in_flight)
    groups: list[GroupResult] = []
    records: list[GqpoRecord] = []
    error = None
    position = 0
    while position < len(pairs) and len(records) < config.target_count:
        wave = pairs[position : position + config.max_in_flight]
        position += len(wave)
        results = await asyncio.gather(
            *(
                _async_group(
                    trajectories[i], t, returns[i], act, critic, backend, config,
                    impressions_per_step, history, semaphore,
                )
                for i, t in wave
            ),
            return_exceptions=True,
        )
        for result in results:
            if isinstance(result, BackendUnavailableError):
                error = str(result)
                continue
            if isinstance(result, BaseException):
                raise result
            if len(records) >= config.target_count:
                break
            groups.append(result)
            record = _record(result, config.beta)
            if record is not None:
                records.append(record)
        if error is not None:
            _LOGGER.error("Think backend failed, keeping %s records: %s", len(records), error)
            break

    if len(records) < config.target_count and error is None:
        _LOGGER.warning(
            "Only %s of %s target records reachable from %s state pairs",
            len(records),
            config.target_count,
            len(pairs),
        )
    records.sort(key=lambda record: record.key)
    report = build_report(groups, records, config, len(pairs))
    report["error"] = error
    _LOGGER.info("GQPO accepted %s of %s groups", len(records), len(groups))
    return PipelineResult(records, groups, report, error)


def run_pipeline(
    trajectories: Sequence[Trajectory],
    act: ActPolicy,
    critic: QCritic,
    backend: ThinkBackend,
    config: GqpoConfig,
    seed: int,
    impressions_per_step: int = 1000,
    history: int = HISTORY,
) -> PipelineResult:
    """Blocking wrapper around async_run_pipeline()."""
    return asyncio.run(
        async_run_pipeline(trajectories, act, critic, backend, config, seed, impressions_per_step, history)
    )


def export_sft(
    records: Sequence[GqpoRecord],
    path: str | Path,
    beta: float,
    extra_header: dict[str, Any] | None = None,
) -> Path:
    """
    Write the fine-tuning dataset: a header line, then one record per line.

    Refuses records whose relative Q is not strictly positive or whose weight
    does not equal exp(beta * delta_q).
    """
    if not records:
        raise ValueError("export_sft() needs at least one record")
    for record in records:
        if not record.delta_q > 0:
            raise ValueError(f"record {record.key} has delta_q {record.delta_q} <= 0")
        if record.weight != math.exp(beta * record.delta_q):
            raise ValueError(f"record {record.key} has weight {record.weight} != exp(beta * delta_q)")
    header: dict[str, Any] = {
        "schema": SFT_SCHEMA,
        "count": len(records),
        "beta": beta,
        "recommended_finetune": dict(SFT_RECOMMENDED),
    }
    header.update(extra_header or {})
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as handle:
        handle.write(json.dumps(header, sort_keys=True) + "\n")
        for record in records:
            handle.write(json.dumps(record.to_json(), sort_keys=True) + "\n")
    _LOGGER.info("Exported %s SFT records to %s", len(records), path)
    return path


def read_sft(path: str | Path) -> tuple[dict[str, Any], list[GqpoRecord]]:
    """Read a file written by export_sft()."""
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"SFT file not found: {path}")
    lines = [line for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]
    if not lines:
        raise ArtifactMismatchError(f"{path} is empty")
    header = json.loads(lines[0])
    if header.get("schema") != SFT_SCHEMA:
        raise ArtifactMismatchError(f"{path}: schema {header.get('schema')}, expected {SFT_SCHEMA}")
    return header, [GqpoRecord.from_json(json.loads(line)) for line in lines[1:]]
