"""Bid formula, constraint accounting and the evaluation metrics."""

from __future__ import annotations

import csv
import io
import logging
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field
from typing import TYPE_CHECKING, Protocol

import numpy as np

from .const import EPS_DIV, SENTINEL_CPA_RATIO
from .exceptions import IncompleteEpisodeError

if TYPE_CHECKING:
    from .market import ImpressionOpportunity

_LOGGER = logging.getLogger(__name__)

METRIC_FIELDS = ("conversions", "budget_utilization", "cpa_ratio", "penalty", "score")


@dataclass(frozen=True)
class BidParams:
    """Bidding parameters: lambda0 weighs the value, lambdas weigh each constraint."""

    lambda0: float = 0.0
    lambdas: tuple[float, ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        if self.lambda0 < 0 or any(lam < 0 for lam in self.lambdas):
            raise ValueError(f"bidding parameters must be non-negative: {self}")


class EpisodeLog(Protocol):
    """Anything carrying the per-step accounting of one episode."""

    @property
    def rewards(self) -> np.ndarray: ...

    @property
    def costs(self) -> np.ndarray: ...

    @property
    def perfs(self) -> np.ndarray: ...

    @property
    def is_complete(self) -> bool: ...


@dataclass(frozen=True)
class MetricReport:
    """The five evaluation metrics of one episode (or an average of episodes)."""

    conversions: float
    budget_utilization: float
    cpa_ratio: float
    penalty: float
    score: float

    def as_dict(self) -> dict[str, float]:
        """Return the flat JSON object with fixed key names."""
        return {key: float(value) for key, value in asdict(self).items()}

    def csv_row(self) -> list[float]:
        """Return the metrics in METRIC_FIELDS order."""
        return [getattr(self, key) for key in METRIC_FIELDS]

    @classmethod
    def mean(cls, reports: Sequence[MetricReport]) -> MetricReport:
        """Average a non-empty list of reports field by field."""
        if not reports:
            raise ValueError("cannot average an empty list of reports")
        return cls(
            *(float(np.mean([getattr(r, key) for r in reports])) for key in METRIC_FIELDS)
        )


def compute_bid(
    params: BidParams, opp: ImpressionOpportunity, constraints: Sequence[float]
) -> float:
    """
    Return the optimal bid lambda0 * v + sum_j lambda_j * p_j * C_j.

    Parameters:
        params: bidding parameters, one lambda per constraint
        opp: the impression being bid on (supplies v and p_j)
        constraints: the constraint bounds C_j
    """
    if len(params.lambdas) != len(constraints):
        raise ValueError(
            f"{len(params.lambdas)} lambdas given for {len(constraints)} constraints"
        )
    perf = opp.perf_for(len(constraints))
    bid = params.lambda0 * opp.value
    for lam, p_j, c_j in zip(params.lambdas, perf, constraints):
        bid += lam * p_j * c_j
    return max(bid, 0.0)


def cpa_ratio(
    total_cost: float,
    total_perf: float,
    cpa_constraint: float,
    eps_div: float = EPS_DIV,
    sentinel: float = SENTINEL_CPA_RATIO,
) -> float:
    """
    Return realized CPA divided by the constraint.

    With no performance the ratio is undefined: spending something returns the
    sentinel, spending nothing returns 0.
    """
    if cpa_constraint <= 0:
        raise ValueError(f"cpa constraint must be positive, got {cpa_constraint}")
    if total_cost < 0 or total_perf < 0:
        raise ValueError(f"negative accounting: cost={total_cost} perf={total_perf}")
    if total_perf <= 0:
        return sentinel if total_cost > 0 else 0.0
    return (total_cost / max(total_perf, eps_div)) / cpa_constraint


def penalty(ratio: float) -> float:
    """Return min((1 / ratio)^2, 1); a ratio of 0 is not penalized."""
    if ratio <= 1.0:
        return 1.0
    return min((1.0 / ratio) ** 2, 1.0)


def score(conversions: float, ratio: float) -> float:
    """Return conversions scaled by the CPA penalty."""
    return conversions * penalty(ratio)


def evaluate_episode(
    log: EpisodeLog,
    cpa_constraint: float,
    budget: float,
    eps_div: float = EPS_DIV,
    sentinel: float = SENTINEL_CPA_RATIO,
) -> MetricReport:
    """Compute the MetricReport of one complete episode."""
    if not log.is_complete:
        raise IncompleteEpisodeError("evaluate_episode() needs a complete episode")
    if budget <= 0:
        raise ValueError(f"budget must be positive, got {budget}")
    conversions = float(np.sum(log.rewards))
    spend = float(np.sum(log.costs))
    ratio = cpa_ratio(spend, float(np.sum(log.perfs)), cpa_constraint, eps_div, sentinel)
    report = MetricReport(
        conversions=conversions,
        budget_utilization=min(spend / budget, 1.0),
        cpa_ratio=ratio,
        penalty=penalty(ratio),
        score=score(conversions, ratio),
    )
    _LOGGER.debug("Episode metrics: %s", report)
    return report


def reports_to_csv(
    rows: Sequence[tuple[dict[str, str | float | int], MetricReport]]
) -> str:
    """
    Render sweep rows as CSV text.

    Each row is (cell columns, report); the cell column names of the first row
    become the leading header columns.
    """
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    if not rows:
        writer.writerow(METRIC_FIELDS)
        return buffer.getvalue()
    cell_keys = list(rows[0][0].keys())
    writer.writerow([*cell_keys, *METRIC_FIELDS])
    for cell, report in rows:
        writer.writerow([*(cell[key] for key in cell_keys), *report.csv_row()])
    return buffer.getvalue()
