"""Exceptions raised by pyautobid."""

from __future__ import annotations

from typing import Any


class AutobidError(Exception):
    """Base class for every pyautobid error."""


class ConfigError(AutobidError, ValueError):
    """The run configuration failed schema validation."""

    def __init__(self, section: str, message: str) -> None:
        super().__init__(f"[{section}] {message}")
        self.section = section


class InvalidOpportunityError(AutobidError, ValueError):
    """An impression opportunity cannot be auctioned."""


class EpisodeFinishedError(AutobidError, RuntimeError):
    """The episode has already used all of its steps."""


class IncompleteEpisodeError(AutobidError, ValueError):
    """An operation needs a complete episode."""


class NumericError(AutobidError, ArithmeticError):
    """A tensor operation produced NaN or Inf."""


class BackendUnavailableError(AutobidError, RuntimeError):
    """The think backend failed after exhausting its retries."""

    def __init__(self, message: str, partial: list[Any] | None = None) -> None:
        super().__init__(message)
        self.partial: list[Any] = partial if partial is not None else []


class MissingArtifactError(AutobidError, FileNotFoundError):
    """A dataset, checkpoint or side-file does not exist."""


class ArtifactMismatchError(AutobidError, ValueError):
    """An artifact was produced under an incompatible format or roster."""
