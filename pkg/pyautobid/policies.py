"""Built-in behavior policies that generate the offline dataset."""

from __future__ import annotations

import logging
import math

import numpy as np

from .const import STATE_FEATURES

_LOGGER = logging.getLogger(__name__)

TIME_LEFT = STATE_FEATURES.index("time_left")
BUDGET_LEFT = STATE_FEATURES.index("budget_left")
CPA_RATIO = STATE_FEATURES.index("current_cpa_ratio")
ROLLING_CPA_RATIO = STATE_FEATURES.index("rolling_cpa_ratio")


class BehaviorPolicy:
    """Maps an interval state to a bidding parameter; reset() starts an episode."""

    policy_id = "base"

    def __init__(self) -> None:
        self.rng = np.random.default_rng(0)
        self.low = 0.0
        self.high = 10.0
        self.action = 1.0

    def __repr__(self) -> str:
        """Return representation of BehaviorPolicy object."""
        return f"{type(self).__name__}(action={self.action})"

    def reset(self, rng: np.random.Generator, low: float, high: float) -> None:
        """Start a new episode with its own random stream and action range."""
        self.rng = rng
        self.low = low
        self.high = high
        self.action = float(rng.uniform(0.5, 1.5))

    def _clip(self, action: float) -> float:
        return float(min(max(action, self.low), self.high))

    def act(self, state: np.ndarray) -> float:
        """Return the action for this interval."""
        raise NotImplementedError


class RandomWalkPolicy(BehaviorPolicy):
    """Multiplicative random walk on the bidding parameter."""

    policy_id = "random-walk"

    def __init__(self, step_std: float = 0.15) -> None:
        super().__init__()
        self.step_std = step_std

    def act(self, state: np.ndarray) -> float:
        self.action = self._clip(self.action * math.exp(self.rng.normal(0.0, self.step_std)))
        return self.action


class NoisyPidPolicy(BehaviorPolicy):
    """Budget pacing: steer spend towards a uniform schedule with a noisy PI controller."""

    policy_id = "noisy-pid"

    def __init__(self, kp: float = 2.0, ki: float = 0.2, noise_std: float = 0.05) -> None:
        super().__init__()
        self.kp = kp
        self.ki = ki
        self.noise_std = noise_std
        self._integral = 0.0
        self._base = 1.0

    def reset(self, rng: np.random.Generator, low: float, high: float) -> None:
        super().reset(rng, low, high)
        self._integral = 0.0
        self._base = self.action

    def act(self, state: np.ndarray) -> float:
        # positive error: spent less than the elapsed share of the period
        elapsed = 1.0 - float(state[TIME_LEFT])
        spent = 1.0 - float(state[BUDGET_LEFT])
        error = elapsed - spent
        self._integral += error
        control = self.kp * error + self.ki * self._integral
        noise = self.rng.normal(0.0, self.noise_std)
        self.action = self._clip(self._base * math.exp(control + noise))
        return self.action


class ConstraintAwarePolicy(BehaviorPolicy):
    """Lower the parameter while the CPA ratio exceeds 1, raise it otherwise."""

    policy_id = "constraint-aware"

    def __init__(self, step: float = 0.1, noise_std: float = 0.05) -> None:
        super().__init__()
        self.step = step
        self.noise_std = noise_std

    def act(self, state: np.ndarray) -> float:
        ratio = float(state[ROLLING_CPA_RATIO])
        budget_left = float(state[BUDGET_LEFT])
        time_left = float(state[TIME_LEFT])
        if time_left >= 1.0:
            return self.action
        if ratio > 1.0 or budget_left < 0.5 * time_left:
            factor = 1.0 - self.step
        else:
            factor = 1.0 + self.step
        self.action = self._clip(self.action * factor * math.exp(self.rng.normal(0.0, self.noise_std)))
        return self.action


POLICIES: dict[str, type[BehaviorPolicy]] = {
    RandomWalkPolicy.policy_id: RandomWalkPolicy,
    NoisyPidPolicy.policy_id: NoisyPidPolicy,
    ConstraintAwarePolicy.policy_id: ConstraintAwarePolicy,
}


def make_policy(policy_id: str) -> BehaviorPolicy:
    """Return a fresh built-in policy by id."""
    try:
        return POLICIES[policy_id]()
    except KeyError as error:
        raise ValueError(f"unknown behavior policy {policy_id!r}, choose from {sorted(POLICIES)}") from error
