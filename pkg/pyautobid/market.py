"""
Synthetic ad-auction market.

Each episode is one delivery period split into num_steps decision intervals.
Every interval brings a batch of impressions; the advertiser bids
v * (lambda0 + lambda1 * p * C) on each of them, where lambda1 is the agent's
action, and wins an impression when its bid strictly exceeds every competing
bid, paying the highest competing bid.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Sequence
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Protocol

import numpy as np

from .bidding import BidParams, compute_bid, cpa_ratio
from .const import EPS_DIV, NUM_STEPS, ROLLING_WINDOW, SENTINEL_CPA_RATIO, STATE_DIM
from .exceptions import EpisodeFinishedError, InvalidOpportunityError
from .policies import make_policy
from .trajectory import DatasetStats, Trajectory, compute_stats, write_dataset

_LOGGER = logging.getLogger(__name__)

PERF_SOURCES = ("value", "constant")


@dataclass(frozen=True)
class ImpressionOpportunity:
    """One auction: the predicted conversion value and the competing bids."""

    value: float
    competitor_bids: tuple[float, ...]
    constraint_perf: tuple[float, ...] | None = None

    def __post_init__(self) -> None:
        if not 0.0 <= self.value <= 1.0:
            raise InvalidOpportunityError(f"value {self.value} outside [0, 1]")
        if not self.competitor_bids:
            raise InvalidOpportunityError("an opportunity needs at least one competing bid")
        if any(bid < 0 for bid in self.competitor_bids):
            raise InvalidOpportunityError(f"negative competing bid in {self.competitor_bids}")

    def perf_for(self, num_constraints: int) -> tuple[float, ...]:
        """Return p_ij for each of num_constraints constraints (1 when unset)."""
        if self.constraint_perf is None:
            return (1.0,) * num_constraints
        if len(self.constraint_perf) != num_constraints:
            raise ValueError(
                f"{len(self.constraint_perf)} performance values for {num_constraints} constraints"
            )
        return self.constraint_perf


@dataclass(frozen=True)
class AuctionOutcome:
    """Result of one auction from the advertiser's side."""

    won: int
    cost: float
    conversion_value: float


def resolve_auctions(
    bids: np.ndarray,
    competitor_bids: np.ndarray,
    values: np.ndarray,
    sparse_mode: bool,
    draws: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """
    Resolve a batch of second-price auctions.

    Parameters:
        bids: (n,) our bids
        competitor_bids: (n, k) competing bids, k >= 1
        values: (n,) conversion values in [0, 1]
        sparse_mode: realize conversions as Bernoulli(value) instead of value
        draws: (n,) uniforms in [0, 1) for the Bernoulli draws (sparse mode)

    Returns (won, costs, conversions, prices) where prices is the highest
    competing bid of each auction.
    """
    competitor_bids = np.asarray(competitor_bids, dtype=np.float64)
    if competitor_bids.ndim != 2 or competitor_bids.shape[1] == 0:
        raise InvalidOpportunityError("every auction needs at least one competing bid")
    prices = competitor_bids.max(axis=1)
    won = np.asarray(bids, dtype=np.float64) > prices
    costs = np.where(won, prices, 0.0)
    values = np.asarray(values, dtype=np.float64)
    if sparse_mode:
        if draws is None:
            raise ValueError("sparse mode needs uniform draws")
        realized = (np.asarray(draws) < values).astype(np.float64)
    else:
        realized = values
    conversions = np.where(won, realized, 0.0)
    return won, costs, conversions, prices


def run_auction(
    bid: float,
    opp: ImpressionOpportunity,
    sparse_mode: bool = False,
    rng: np.random.Generator | None = None,
) -> AuctionOutcome:
    """Resolve a single auction: win iff bid exceeds every competing bid."""
    if bid < 0:
        raise ValueError(f"bid must be non-negative, got {bid}")
    draws = None
    if sparse_mode:
        draws = np.array([(rng or np.random.default_rng()).random()])
    won, costs, conversions, _ = resolve_auctions(
        np.array([bid]), np.array([opp.competitor_bids]), np.array([opp.value]), sparse_mode, draws
    )
    return AuctionOutcome(int(won[0]), float(costs[0]), float(conversions[0]))


@dataclass(frozen=True)
class MarketModel:
    """Distribution of impression values and competing bids."""

    value_alpha: float = 2.0
    value_beta: float = 5.0
    num_competitors: int = 3
    market_scale: float = 8.0
    price_sigma: float = 0.5
    drift_amplitude: float = 0.3
    traffic_amplitude: float = 0.3

    def __post_init__(self) -> None:
        if self.num_competitors < 1:
            raise ValueError("the market needs at least one competitor")
        if self.value_alpha <= 0 or self.value_beta <= 0 or self.market_scale <= 0:
            raise ValueError(f"market parameters must be positive: {self}")
        if not 0 <= self.drift_amplitude < 1 or not 0 <= self.traffic_amplitude < 1:
            raise ValueError("drift and traffic amplitudes must lie in [0, 1)")


# pylint: disable=too-many-instance-attributes
@dataclass(frozen=True)
class EpisodeConfig:
    """Everything that fixes one episode."""

    budget: float
    cpa_constraint: float
    num_steps: int = NUM_STEPS
    impressions_per_step: int = 1000
    sparse_mode: bool = False
    rng_seed: int = 0
    lambda0: float = 0.0
    action_low: float = 0.0
    action_high: float = 10.0
    perf_source: str = "value"
    eps_div: float = EPS_DIV
    sentinel_cpa_ratio: float = SENTINEL_CPA_RATIO
    market: MarketModel = field(default_factory=MarketModel)

    def __post_init__(self) -> None:
        if self.budget <= 0:
            raise ValueError(f"budget must be positive, got {self.budget}")
        if self.cpa_constraint <= 0:
            raise ValueError(f"cpa_constraint must be positive, got {self.cpa_constraint}")
        if self.num_steps < 1 or self.impressions_per_step < 1:
            raise ValueError("num_steps and impressions_per_step must be at least 1")
        if not 0 <= self.action_low < self.action_high:
            raise ValueError(f"bad action range [{self.action_low}, {self.action_high}]")
        if self.perf_source not in PERF_SOURCES:
            raise ValueError(f"perf_source must be one of {PERF_SOURCES}")


@dataclass(frozen=True)
class ImpressionBatch:
    """The impressions of one interval, as arrays."""

    values: np.ndarray
    competitor_bids: np.ndarray
    draws: np.ndarray

    def __len__(self) -> int:
        return len(self.values)

    @classmethod
    def from_opportunities(
        cls, opportunities: Sequence[ImpressionOpportunity], draws: Sequence[float] | None = None
    ) -> ImpressionBatch:
        """Build a batch from explicit opportunities (all with the same competitor count)."""
        values = np.array([opp.value for opp in opportunities], dtype=np.float64)
        competitors = np.array([opp.competitor_bids for opp in opportunities], dtype=np.float64)
        uniforms = np.zeros(len(values)) if draws is None else np.asarray(draws, dtype=np.float64)
        return cls(values, competitors.reshape(len(values), -1), uniforms)


class ImpressionStream(Protocol):
    """Source of impression batches for an environment."""

    def next_batch(self, t: int) -> ImpressionBatch: ...

    def forecast(self, t: int) -> int: ...


class SyntheticStream:
    """Log-normal competing bids whose level drifts sinusoidally across the period."""

    def __init__(self, config: EpisodeConfig, rng: np.random.Generator) -> None:
        self._config = config
        self._market = config.market
        self._rng = rng
        self._price_phase = rng.uniform(0.0, 2 * math.pi)
        self._traffic_phase = rng.uniform(0.0, 2 * math.pi)

    def _wave(self, t: int, phase: float) -> float:
        return math.sin(2 * math.pi * t / self._config.num_steps + phase)

    def forecast(self, t: int) -> int:
        """Return the number of impressions arriving in interval t."""
        if t >= self._config.num_steps:
            return 0
        level = 1.0 + self._market.traffic_amplitude * self._wave(t, self._traffic_phase)
        return max(1, round(self._config.impressions_per_step * level))

    def next_batch(self, t: int) -> ImpressionBatch:
        market = self._market
        count = self.forecast(t)
        values = self._rng.beta(market.value_alpha, market.value_beta, size=count)
        drift = 1.0 + market.drift_amplitude * self._wave(t, self._price_phase)
        noise = self._rng.lognormal(0.0, market.price_sigma, size=(count, market.num_competitors))
        competitors = values[:, None] * market.market_scale * drift * noise
        return ImpressionBatch(values, competitors, self._rng.random(count))


class FixedStream:
    """Replays given batches; intervals past the end are empty of impressions."""

    def __init__(self, batches: Sequence[ImpressionBatch]) -> None:
        self._batches = list(batches)

    def forecast(self, t: int) -> int:
        return len(self._batches[t]) if t < len(self._batches) else 0

    def next_batch(self, t: int) -> ImpressionBatch:
        if t < len(self._batches):
            return self._batches[t]
        return ImpressionBatch(np.zeros(0), np.zeros((0, 1)), np.zeros(0))


@dataclass(frozen=True)
class IntervalLog:
    """What happened to every impression of the last interval."""

    bids: np.ndarray
    prices: np.ndarray
    won: np.ndarray
    costs: np.ndarray
    conversions: np.ndarray
    halted_at: int | None


class Environment:
    """
    One episode of the auction market.

    The environment is single-threaded; independent episodes may run in
    parallel on separate instances.
    """

    # pylint: disable=too-many-instance-attributes
    def __init__(self, config: EpisodeConfig, stream: ImpressionStream | None = None) -> None:
        self.config = config
        self._rng = np.random.default_rng(config.rng_seed)
        self.stream: ImpressionStream = stream or SyntheticStream(config, self._rng)
        self.t = 0
        self.remaining_budget = float(config.budget)
        self.actions: list[float] = []
        self.clamped: list[bool] = []
        self._rewards: list[float] = []
        self._costs: list[float] = []
        self._perfs: list[float] = []
        self._win_rates: list[float] = []
        self._mean_values: list[float] = []
        self._mean_prices: list[float] = []
        self._win_costs: list[float] = []
        self.last_interval: IntervalLog | None = None

    def __repr__(self) -> str:
        """Return representation of Environment object."""
        return f"Environment(t={self.t}/{self.config.num_steps}, remaining={self.remaining_budget})"

    @property
    def done(self) -> bool:
        """Return True once every interval has been played."""
        return self.t >= self.config.num_steps

    @property
    def is_complete(self) -> bool:
        """Alias of done, for metric evaluation."""
        return self.done

    @property
    def rewards(self) -> np.ndarray:
        """Return per-interval rewards so far."""
        return np.asarray(self._rewards, dtype=np.float64)

    @property
    def costs(self) -> np.ndarray:
        """Return per-interval costs so far."""
        return np.asarray(self._costs, dtype=np.float64)

    @property
    def perfs(self) -> np.ndarray:
        """Return per-interval constraint performance so far."""
        return np.asarray(self._perfs, dtype=np.float64)

    @property
    def spend(self) -> float:
        """Return the total cost so far."""
        return float(sum(self._costs))

    def bid_params(self, action: float) -> BidParams:
        """Return the bidding parameters an action sets."""
        return BidParams(self.config.lambda0, (action,))

    def bid_for(self, action: float, opp: ImpressionOpportunity) -> float:
        """Return the bid placed on one opportunity under an action."""
        perf = (opp.value,) if self.config.perf_source == "value" else None
        priced = ImpressionOpportunity(opp.value, opp.competitor_bids, perf)
        return compute_bid(self.bid_params(action), priced, (self.config.cpa_constraint,))

    def _bids(self, action: float, values: np.ndarray) -> np.ndarray:
        perf = values if self.config.perf_source == "value" else np.ones_like(values)
        # vectorized compute_bid with J = 1
        bids = self.config.lambda0 * values + action * perf * self.config.cpa_constraint
        return np.maximum(bids, 0.0)

    def step(self, action: float) -> tuple[np.ndarray, float]:
        """
        Play one interval under the given action and return (next state, reward).

        Actions outside the configured range are clamped and the clamp is recorded.
        """
        if self.done:
            raise EpisodeFinishedError(f"episode finished after {self.config.num_steps} steps")
        if not math.isfinite(action):
            raise ValueError(f"action must be finite, got {action}")
        config = self.config
        clamped_action = min(max(action, config.action_low), config.action_high)
        self.clamped.append(clamped_action != action)
        if clamped_action != action:
            _LOGGER.debug("Clamped action %s to %s at t=%s", action, clamped_action, self.t)

        batch = self.stream.next_batch(self.t)
        bids = self._bids(clamped_action, batch.values)
        if len(batch):
            won, costs, conversions, prices = resolve_auctions(
                bids, batch.competitor_bids, batch.values, config.sparse_mode, batch.draws
            )
        else:
            won = np.zeros(0, dtype=bool)
            costs = conversions = prices = np.zeros(0)

        # bidding stops at the first win the remaining budget cannot pay for
        halted_at = None
        overspend = np.flatnonzero(np.cumsum(costs) > self.remaining_budget + 1e-12)
        if overspend.size:
            halted_at = int(overspend[0])
            won[halted_at:] = False
            costs[halted_at:] = 0.0
            conversions[halted_at:] = 0.0
            bids[halted_at:] = 0.0

        cost = float(costs.sum())
        reward = float(conversions.sum())
        if config.perf_source == "value":
            perf = reward
        else:
            perf = float(won.sum())
        self.remaining_budget = max(self.remaining_budget - cost, 0.0)
        self.last_interval = IntervalLog(bids, prices, won, costs, conversions, halted_at)

        count = len(batch)
        wins = int(won.sum())
        self.actions.append(clamped_action)
        self._rewards.append(reward)
        self._costs.append(cost)
        self._perfs.append(perf)
        self._win_rates.append(wins / count if count else 0.0)
        self._mean_values.append(float(batch.values.mean()) if count else 0.0)
        self._mean_prices.append(float(prices.mean()) if count else 0.0)
        self._win_costs.append(cost / wins if wins else 0.0)
        self.t += 1
        _LOGGER.debug(
            "t=%s action=%s wins=%s/%s cost=%s reward=%s", self.t, clamped_action, wins, count, cost, reward
        )
        return self.build_state(), reward

    def build_state(self) -> np.ndarray:
        """Return the 16 state features, in const.STATE_FEATURES order."""
        config = self.config
        steps = config.num_steps
        budget = config.budget
        ratio_args = (config.cpa_constraint, config.eps_div, config.sentinel_cpa_ratio)
        last = len(self._rewards) > 0
        recent = slice(-ROLLING_WINDOW, None)
        state = np.array(
            [
                (steps - self.t) / steps,
                self.remaining_budget / budget,
                (self._costs[-1] / (budget / steps)) if last else 0.0,
                cpa_ratio(self.spend, float(sum(self._perfs)), *ratio_args),
                float(sum(self._rewards)),
                self.spend,
                self.actions[-1] if last else 0.0,
                self._mean_values[-1] if last else 0.0,
                self.stream.forecast(self.t) / config.impressions_per_step,
                self._win_rates[-1] if last else 0.0,
                self._rewards[-1] if last else 0.0,
                self._costs[-1] if last else 0.0,
                self._win_costs[-1] if last else 0.0,
                self._mean_prices[-1] if last else 0.0,
                float(np.mean(self._win_rates[recent])) if last else 0.0,
                cpa_ratio(sum(self._costs[recent]), sum(self._perfs[recent]), *ratio_args),
            ],
            dtype=np.float32,
        )
        assert state.shape == (STATE_DIM,)
        return state

    def to_trajectory(
        self, states: Sequence[np.ndarray], traj_id: str, policy_id: str
    ) -> Trajectory:
        """Package the played episode with the states observed before each action."""
        return Trajectory(
            traj_id=traj_id,
            states=np.asarray(states, dtype=np.float32),
            actions=np.asarray(self.actions, dtype=np.float32),
            rewards=self.rewards,
            costs=self.costs,
            perfs=self.perfs,
            budget=self.config.budget,
            cpa_constraint=self.config.cpa_constraint,
            seed=self.config.rng_seed,
            policy_id=policy_id,
            num_steps=self.config.num_steps,
        )


# pylint: disable=too-many-instance-attributes
@dataclass(frozen=True)
class SimulatorConfig:
    """The [simulator] section: how episodes and datasets are drawn."""

    budget_range: tuple[float, float] = (4000.0, 12000.0)
    cpa_range: tuple[float, float] = (6.0, 12.0)
    num_steps: int = NUM_STEPS
    impressions_per_step: int = 1000
    sparse_mode: bool = False
    lambda0: float = 0.0
    action_range: tuple[float, float] = (0.0, 10.0)
    perf_source: str = "value"
    eps_div: float = EPS_DIV
    sentinel_cpa_ratio: float = SENTINEL_CPA_RATIO
    market: MarketModel = field(default_factory=MarketModel)
    behavior_policies: tuple[str, ...] = ("random-walk", "noisy-pid", "constraint-aware")
    num_periods: int = 50
    binary: bool = False
    workers: int = 1

    def __post_init__(self) -> None:
        for name in ("budget_range", "cpa_range", "action_range"):
            low, high = getattr(self, name)
            if not 0 <= low <= high:
                raise ValueError(f"{name} must satisfy 0 <= low <= high, got {(low, high)}")
        if self.budget_range[0] <= 0 or self.cpa_range[0] <= 0:
            raise ValueError("budgets and CPA constraints must be positive")
        if self.perf_source not in PERF_SOURCES:
            raise ValueError(f"perf_source must be one of {PERF_SOURCES}")
        if self.workers < 1:
            raise ValueError("workers must be at least 1")

    def episode(self, rng_seed: int, budget_ratio: float = 1.0) -> EpisodeConfig:
        """
        Draw the episode of one delivery period.

        Budget and CPA constraint come from a generator seeded by rng_seed, so
        every policy replayed on the same period faces the same advertiser.
        """
        if budget_ratio <= 0:
            raise ValueError(f"budget_ratio must be positive, got {budget_ratio}")
        rng = np.random.default_rng([rng_seed, 0xB1D])
        budget = float(rng.uniform(*self.budget_range))
        cpa = float(rng.uniform(*self.cpa_range))
        return EpisodeConfig(
            budget=budget * budget_ratio,
            cpa_constraint=cpa,
            num_steps=self.num_steps,
            impressions_per_step=self.impressions_per_step,
            sparse_mode=self.sparse_mode,
            rng_seed=rng_seed,
            lambda0=self.lambda0,
            action_low=self.action_range[0],
            action_high=self.action_range[1],
            perf_source=self.perf_source,
            eps_div=self.eps_div,
            sentinel_cpa_ratio=self.sentinel_cpa_ratio,
            market=self.market,
        )


def period_seed(seed: int, period: int) -> int:
    """Return the market seed of one delivery period."""
    return int(np.random.SeedSequence([seed, period]).generate_state(1)[0])


def rollout(
    config: EpisodeConfig, policy_id: str, policy_seed: int, traj_id: str
) -> Trajectory:
    """Play one episode with a built-in behavior policy."""
    policy = make_policy(policy_id)
    policy.reset(np.random.default_rng(policy_seed), config.action_low, config.action_high)
    env = Environment(config)
    states = []
    state = env.build_state()
    while not env.done:
        states.append(state)
        state, _ = env.step(policy.act(state))
    return env.to_trajectory(states, traj_id, policy_id)


def _rollout_job(job: tuple[EpisodeConfig, str, int, str]) -> Trajectory:
    return rollout(*job)


def generate_trajectories(
    sim: SimulatorConfig, seed: int, num_periods: int, policies: Sequence[str] | None = None
) -> list[Trajectory]:
    """Play every (period, policy) pair, sharded over sim.workers processes."""
    policies = list(policies if policies is not None else sim.behavior_policies)
    if num_periods < 1:
        raise ValueError("num_periods must be at least 1")
    if not policies:
        raise ValueError("at least one behavior policy is required")
    for policy_id in policies:
        make_policy(policy_id)

    jobs = []
    for period in range(num_periods):
        episode = sim.episode(period_seed(seed, period))
        for index, policy_id in enumerate(policies):
            policy_seed = int(np.random.SeedSequence([seed, period, index]).generate_state(1)[0])
            jobs.append((episode, policy_id, policy_seed, f"p{period:05d}-{index}-{policy_id}"))

    if sim.workers > 1:
        with ProcessPoolExecutor(max_workers=sim.workers) as pool:
            # map() keeps job order, which is (period, policy index)
            return list(pool.map(_rollout_job, jobs, chunksize=max(1, len(jobs) // (4 * sim.workers))))
    return [_rollout_job(job) for job in jobs]


def generate_dataset(
    sim: SimulatorConfig,
    path: str | Path,
    seed: int,
    num_periods: int | None = None,
    policies: Sequence[str] | None = None,
    extra_header: dict[str, Any] | None = None,
) -> DatasetStats:
    """
    Generate num_periods x len(policies) trajectories and write them as traj-v1.

    Parameters:
        sim: simulator section of the run configuration
        path: output file
        seed: run seed; with the period index and policy index it fixes every episode
        num_periods: delivery periods to simulate (default sim.num_periods)
        policies: behavior policy ids (default sim.behavior_policies)
        extra_header: additional header keys (config hash, ...)
    """
    periods = sim.num_periods if num_periods is None else num_periods
    trajectories = generate_trajectories(sim, seed, periods, policies)
    stats = compute_stats(trajectories)
    header = {"seed": seed, "stats": stats.to_dict()}
    header.update(extra_header or {})
    write_dataset(path, trajectories, binary=sim.binary, extra_header=header)
    return stats
