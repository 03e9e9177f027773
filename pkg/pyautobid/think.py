"""
Reasoning client: prompt construction, CoT generation, parsing and scheduling.

A think backend turns a prompt into one or more chain-of-thought texts. The
scripted oracles derive the text from the prompt context directly; RemoteChat
asks a chat-completion service. Only two things in a CoT are consumed by the
rest of the system: the claimed CPA ratio and the final DIRECTION line.
"""

from __future__ import annotations

import asyncio
import logging
import re
import zlib
from collections.abc import Sequence
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Any, Literal, Protocol

import aiohttp
import numpy as np

from .bidding import cpa_ratio
from .chat import RemoteChat
from .const import EPS_DIV, PROMPT_VERSION, STATE_FEATURES
from .exceptions import BackendUnavailableError

_LOGGER = logging.getLogger(__name__)

Direction = Literal["INCREASE", "DECREASE", "NONE"]
Verdict = Literal["PASS", "FAIL", "PASS_WITH_WARNING"]

INCREASE: Direction = "INCREASE"
DECREASE: Direction = "DECREASE"
NONE: Direction = "NONE"
BACKENDS = ("scripted", "noisy", "remote")

HISTORY = 4
TEMPLATE_DIR = Path(__file__).parent / "templates"

DIRECTION_LINE_RE = re.compile(r"^\s*DIRECTION\s*:\s*(\S+)", re.IGNORECASE | re.MULTILINE)
CLAIMED_RATIO_RE = re.compile(
    r"CPA\s+ratio\s*(?:[:=]|\bis\b|\bof\b|\bequals\b)\s*(?:about\s+|approximately\s+)?"
    r"(\d+(?:\.\d+)?(?:[eE][-+]?\d+)?)",
    re.IGNORECASE,
)

_INDEX = {name: i for i, name in enumerate(STATE_FEATURES)}


@dataclass(frozen=True)
class StepIndicators:
    """Performance indicators of one past interval and the action taken in it."""

    t: int
    conversions: float
    spend: float
    remaining_budget: float
    cumulative_cost: float
    cumulative_conversions: float
    predicted_value: float
    action: float


@dataclass(frozen=True)
class PromptContext:
    """Everything the prompt shows: the recent history, the constraint and the step."""

    history: tuple[StepIndicators, ...]
    cpa_constraint: float
    budget: float
    t: int

    def cpa_ratio(self) -> float:
        """Return the CPA ratio implied by the most recent cumulative totals."""
        if not self.history:
            return 0.0
        last = self.history[-1]
        return cpa_ratio(last.cumulative_cost, last.cumulative_conversions, self.cpa_constraint)

    @classmethod
    def from_states(
        cls,
        states: Sequence[np.ndarray],
        actions: Sequence[float],
        t: int,
        cpa_constraint: float,
        budget: float,
        impressions_per_step: int,
        horizon: int = HISTORY,
    ) -> PromptContext:
        """
        Build the context for step t from recorded interval states.

        states[i] is the state observed before action i, so the outcome of
        interval i is read from states[i + 1].
        """
        if t < 1 or len(states) <= t or len(actions) < t:
            raise ValueError(f"step {t} needs states[0..{t}] and actions[0..{t - 1}]")
        rows = []
        for i in range(max(0, t - horizon), t):
            after, before = states[i + 1], states[i]
            count = float(before[_INDEX["impression_count_forecast"]]) * impressions_per_step
            rows.append(
                StepIndicators(
                    t=i,
                    conversions=float(after[_INDEX["last_step_reward"]]),
                    spend=float(after[_INDEX["last_step_cost"]]),
                    remaining_budget=float(after[_INDEX["budget_left"]]) * budget,
                    cumulative_cost=float(after[_INDEX["cumulative_cost"]]),
                    cumulative_conversions=float(after[_INDEX["cumulative_conversions"]]),
                    predicted_value=float(after[_INDEX["mean_impression_value"]]) * count,
                    action=float(actions[i]),
                )
            )
        return cls(tuple(rows), cpa_constraint, budget, t)


@dataclass(frozen=True)
class CotResponse:
    """A parsed chain-of-thought."""

    text: str
    direction: Direction
    claimed_cpa_ratio: float | None = None
    diagnostics: tuple[str, ...] = field(default_factory=tuple)


EMPTY_COT = CotResponse(text="", direction=NONE)


def _num(value: float) -> str:
    return f"{value:.6g}"


@lru_cache(maxsize=None)
def load_template(version: str = PROMPT_VERSION) -> str:
    """Return the prompt template text of a version."""
    return (TEMPLATE_DIR / f"{version}.txt").read_text(encoding="utf-8")


def build_prompt(ctx: PromptContext) -> str:
    """Render the prompt; raw indicators only, the ratio is left to the reasoner."""
    if not ctx.history:
        raise ValueError("build_prompt() needs at least one step of history")
    rows = "\n".join(
        f"step {row.t}: conversions {_num(row.conversions)}, spend {_num(row.spend)}, "
        f"remaining budget {_num(row.remaining_budget)}, cumulative cost {_num(row.cumulative_cost)}, "
        f"cumulative conversions {_num(row.cumulative_conversions)}, "
        f"predicted impression value {_num(row.predicted_value)}, bid parameter {_num(row.action)}"
        for row in ctx.history
    )
    return load_template(PROMPT_VERSION).format(
        version=PROMPT_VERSION,
        cpa_constraint=_num(ctx.cpa_constraint),
        budget=_num(ctx.budget),
        t=ctx.t,
        count=len(ctx.history),
        rows=rows,
    )


def parse_cot(text: str) -> CotResponse:
    """
    Extract the direction and the claimed CPA ratio from a CoT.

    The last DIRECTION line wins; a missing or unrecognized direction gives
    NONE. Never raises.
    """
    diagnostics = []
    matches = DIRECTION_LINE_RE.findall(text or "")
    direction: Direction = NONE
    if not matches:
        diagnostics.append("no DIRECTION line")
    else:
        if len(matches) > 1:
            diagnostics.append(f"{len(matches)} DIRECTION lines, the last one wins")
            _LOGGER.warning("CoT has %s DIRECTION lines, using the last", len(matches))
        word = matches[-1].strip(".,;!").upper()
        if word == INCREASE:
            direction = INCREASE
        elif word == DECREASE:
            direction = DECREASE
        else:
            diagnostics.append(f"unrecognized direction {matches[-1]!r}")

    claimed = None
    ratios = CLAIMED_RATIO_RE.findall(text or "")
    if ratios:
        try:
            claimed = float(ratios[-1])
        except ValueError:
            diagnostics.append(f"unreadable CPA ratio {ratios[-1]!r}")
    return CotResponse(text or "", direction, claimed, tuple(diagnostics))


def hallucination_check(ctx: PromptContext, cot: CotResponse, tol: float = 0.05) -> Verdict:
    """Compare the claimed CPA ratio with the one the context implies."""
    if cot.claimed_cpa_ratio is None:
        _LOGGER.warning("CoT for step %s claims no CPA ratio", ctx.t)
        return "PASS_WITH_WARNING"
    computed = ctx.cpa_ratio()
    error = abs(cot.claimed_cpa_ratio - computed) / max(computed, EPS_DIV)
    if error > tol:
        _LOGGER.debug(
            "Hallucinated ratio at step %s: claimed %s, computed %s", ctx.t, cot.claimed_cpa_ratio, computed
        )
        return "FAIL"
    return "PASS"


def instruction_cot(direction: Direction) -> CotResponse:
    """Return the fixed one-line CoT used to force a direction."""
    return parse_cot(f"DIRECTION: {direction}")


# backends


class ThinkBackend(Protocol):
    """Anything that can complete a prompt n times."""

    async def async_generate(self, prompt: str, n: int, context: PromptContext | None = None) -> list[str]: ...


class ScriptedOracle:
    """Rule-based reasoner: DECREASE iff the CPA ratio exceeds 1."""

    noise_rate = 0.0

    def __repr__(self) -> str:
        """Return representation of ScriptedOracle object."""
        return f"{type(self).__name__}(noise_rate={self.noise_rate})"

    def _flip(self, prompt: str, n: int) -> np.ndarray:
        return np.zeros(n, dtype=bool)

    def reason(self, ctx: PromptContext, flip: bool = False) -> str:
        """Write the CoT text for a context, optionally concluding the opposite direction."""
        ratio = ctx.cpa_ratio()
        direction = DECREASE if ratio > 1.0 else INCREASE
        if flip:
            direction = INCREASE if direction == DECREASE else DECREASE
        last = ctx.history[-1] if ctx.history else None
        recent_conv = sum(row.conversions for row in ctx.history)
        recent_spend = sum(row.spend for row in ctx.history)
        lines = [
            f"Over the last {len(ctx.history)} steps conversions totalled {_num(recent_conv)} "
            f"and spend totalled {_num(recent_spend)}.",
        ]
        if last is not None:
            lines.append(
                f"Cumulative cost is {_num(last.cumulative_cost)} against "
                f"{_num(last.cumulative_conversions)} cumulative conversions and a CPA constraint of "
                f"{_num(ctx.cpa_constraint)}, so the CPA ratio: {float(ratio)!r}."
            )
        if ratio > 1.0:
            lines.append("That is above 1, so the cost per conversion is above target.")
        else:
            lines.append("That is at most 1, so there is room to buy more conversions.")
        lines.append(f"DIRECTION: {direction}")
        return "\n".join(lines)

    async def async_generate(self, prompt: str, n: int, context: PromptContext | None = None) -> list[str]:
        """Return n CoTs for the context (the prompt only seeds the noise)."""
        if n < 1:
            raise ValueError(f"n must be at least 1, got {n}")
        if context is None:
            raise ValueError(f"{type(self).__name__} needs the prompt context")
        flips = self._flip(prompt, n)
        return [self.reason(context, bool(flip)) for flip in flips]


class NoisyOracle(ScriptedOracle):
    """ScriptedOracle whose direction is flipped with probability noise_rate."""

    def __init__(self, noise_rate: float, seed: int = 0) -> None:
        if not 0.0 <= noise_rate <= 1.0:
            raise ValueError(f"noise_rate must lie in [0, 1], got {noise_rate}")
        self.noise_rate = noise_rate
        self.seed = seed

    def _flip(self, prompt: str, n: int) -> np.ndarray:
        # draws depend on the prompt, not on call order
        rng = np.random.default_rng([self.seed, zlib.crc32(prompt.encode())])
        return rng.random(n) < self.noise_rate


async def async_generate_cot(
    backend: ThinkBackend, prompt: str, n: int, context: PromptContext | None = None
) -> list[CotResponse]:
    """Generate and parse n CoTs."""
    if n < 1:
        raise ValueError(f"n must be at least 1, got {n}")
    try:
        texts = await backend.async_generate(prompt, n, context)
    except BackendUnavailableError as error:
        error.partial = [parse_cot(text) if isinstance(text, str) else text for text in error.partial]
        raise
    return [parse_cot(text) for text in texts]


def generate_cot(
    backend: ThinkBackend, prompt: str, n: int, context: PromptContext | None = None
) -> list[CotResponse]:
    """Blocking wrapper around async_generate_cot()."""
    return asyncio.run(async_generate_cot(backend, prompt, n, context))


# pylint: disable=too-many-instance-attributes
@dataclass(frozen=True)
class ThinkConfig:
    """The [think] section."""

    backend: str = "scripted"
    noise_rate: float = 0.2
    history: int = HISTORY
    endpoint: str = ""
    model: str = ""
    temperature: float = 0.7
    max_tokens: int = 512
    timeout: float = 30.0
    max_retries: int = 3
    max_in_flight: int = 4
    deadline: float = 1.0
    auth_env: str = "AUTOBID_API_KEY"
    hallucination_tol: float = 0.05

    def __post_init__(self) -> None:
        if self.backend not in BACKENDS:
            raise ValueError(f"backend must be one of {BACKENDS}, got {self.backend!r}")
        if not 0.0 <= self.noise_rate <= 1.0:
            raise ValueError(f"noise_rate must lie in [0, 1], got {self.noise_rate}")
        if self.history < 1 or self.max_in_flight < 1 or self.max_retries < 0:
            raise ValueError("history and max_in_flight must be >= 1, max_retries >= 0")
        if self.timeout < 0 or self.deadline < 0:
            raise ValueError("timeout and deadline must be non-negative")
        if self.backend == "remote" and not (self.endpoint and self.model):
            raise ValueError("the remote backend needs endpoint and model")


def make_backend(
    config: ThinkConfig, seed: int = 0, session: aiohttp.ClientSession | None = None
) -> ThinkBackend:
    """Create the backend a ThinkConfig selects."""
    if config.backend == "scripted":
        return ScriptedOracle()
    if config.backend == "noisy":
        return NoisyOracle(config.noise_rate, seed)
    return RemoteChat.from_env(
        session,
        config.auth_env,
        endpoint=config.endpoint,
        model=config.model,
        temperature=config.temperature,
        max_tokens=config.max_tokens,
        timeout=config.timeout,
        max_retries=config.max_retries,
        max_in_flight=config.max_in_flight,
    )


class ThinkScheduler:
    """
    Runs CoT generation ahead of the decision loop.

    request() starts generation for a step; async_collect() waits for it at
    most until the deadline and falls back to the empty CoT on a miss.
    """

    def __init__(self, backend: ThinkBackend, deadline: float, max_in_flight: int = 4) -> None:
        self.backend = backend
        self.deadline = deadline
        self.misses = 0
        self.requests = 0
        self._semaphore = asyncio.Semaphore(max_in_flight)
        self._mailbox: dict[int, tuple[asyncio.Task[list[CotResponse]], float]] = {}

    def __repr__(self) -> str:
        """Return representation of ThinkScheduler object."""
        return f"ThinkScheduler({self.backend!r}, deadline={self.deadline}, misses={self.misses})"

    async def _async_run(self, ctx: PromptContext) -> list[CotResponse]:
        async with self._semaphore:
            return await async_generate_cot(self.backend, build_prompt(ctx), 1, ctx)

    def request(self, step: int, ctx: PromptContext) -> None:
        """Start generating the CoT for step; call from inside the running loop."""
        loop = asyncio.get_running_loop()
        self._mailbox[step] = (loop.create_task(self._async_run(ctx)), loop.time())
        self.requests += 1

    async def async_collect(self, step: int) -> CotResponse:
        """Return the CoT for step, or the empty CoT if it misses the deadline."""
        entry = self._mailbox.pop(step, None)
        if entry is None:
            return EMPTY_COT
        task, requested_at = entry
        if not task.done():
            remaining = self.deadline - (asyncio.get_running_loop().time() - requested_at)
            try:
                await asyncio.wait_for(asyncio.shield(task), max(remaining, 0.0))
            except asyncio.TimeoutError:
                task.cancel()
                self.misses += 1
                _LOGGER.warning("CoT for step %s missed its deadline of %ss", step, self.deadline)
                return EMPTY_COT
            except Exception:  # pylint: disable=broad-except
                pass  # reported below from the task itself
        if task.cancelled() or task.exception() is not None:
            self.misses += 1
            error = None if task.cancelled() else task.exception()
            _LOGGER.warning("CoT for step %s failed: %s", step, error)
            return EMPTY_COT
        return task.result()[0]

    async def async_close(self) -> None:
        """Cancel every outstanding request."""
        for task, _ in self._mailbox.values():
            task.cancel()
        if self._mailbox:
            await asyncio.gather(*(task for task, _ in self._mailbox.values()), return_exceptions=True)
        self._mailbox.clear()
