"""The pyautobid.RemoteChat() class: chat-completion backend for the think client."""

from __future__ import annotations

import asyncio
import json
import logging
import os
from typing import Any

import aiohttp
import async_timeout

from .exceptions import BackendUnavailableError

_LOGGER = logging.getLogger(__name__)

DEFAULT_TIMEOUT = 30.0
SYSTEM_PROMPT = "You analyse advertising campaign performance and recommend bid adjustments."


# pylint: disable=too-many-instance-attributes
class RemoteChat:
    """
    Client for an HTTP JSON chat-completion endpoint.

    Requests carry the model name, the message list, the sampling temperature
    and the number of completions n; every request is bounded by a timeout,
    a retry budget and a limit on concurrent requests.
    """

    # pylint: disable=too-many-arguments
    def __init__(
        self,
        session: aiohttp.ClientSession | None,
        endpoint: str,
        model: str,
        temperature: float = 0.7,
        max_tokens: int = 512,
        timeout: float = DEFAULT_TIMEOUT,
        max_retries: int = 3,
        max_in_flight: int = 4,
        auth_token: str | None = None,
        backoff: float = 0.5,
    ) -> None:
        """
        Initialize the chat client.

        Parameters:
            session: aiohttp.ClientSession used for every request (required)
            endpoint: full URL of the chat-completion route
            model: model name sent with every request
            temperature: sampling temperature
            max_tokens: completion length limit
            timeout: seconds allowed per request
            max_retries: extra attempts after a failed request
            max_in_flight: concurrent requests allowed
            auth_token: bearer token (optional)
            backoff: base delay in seconds, doubled after every failed attempt
        """
        if max_retries < 0 or max_in_flight < 1:
            raise ValueError("max_retries must be >= 0 and max_in_flight >= 1")
        self.session = session
        self.endpoint = endpoint
        self.model = model
        self.temperature = temperature
        self.max_tokens = max_tokens
        self.timeout = timeout
        self.max_retries = max_retries
        self.backoff = backoff
        self._auth_token = auth_token
        self._semaphore = asyncio.Semaphore(max_in_flight)
        self.http_status: int | None = None
        self.failures = 0

    def __repr__(self) -> str:
        """Return representation of RemoteChat object."""
        return f"RemoteChat({self.endpoint}, {self.model}, timeout={self.timeout})"

    @classmethod
    def from_env(cls, session: aiohttp.ClientSession | None, auth_env: str, **kwargs: Any) -> RemoteChat:
        """Create a client whose bearer token comes from the environment variable auth_env."""
        token = os.environ.get(auth_env)
        if token is None:
            _LOGGER.warning("Environment variable %s is unset, sending requests without a token", auth_env)
        return cls(session, auth_token=token, **kwargs)

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        if self._auth_token:
            headers["Authorization"] = f"Bearer {self._auth_token}"
        return headers

    async def async_query(self, prompt: str, n: int) -> list[str] | None:
        """Send one request for n completions; return their texts, or None on failure."""
        payload = json.dumps(
            {
                "model": self.model,
                "messages": [
                    {"role": "system", "content": SYSTEM_PROMPT},
                    {"role": "user", "content": prompt},
                ],
                "temperature": self.temperature,
                "max_tokens": self.max_tokens,
                "n": n,
            }
        )
        _LOGGER.debug("URL: %s Data: %s", self.endpoint, payload)

        if self.session is None:
            raise ValueError("async_query() called with RemoteChat.session unset")

        try:
            async with async_timeout.timeout(self.timeout):
                response = await self.session.post(
                    self.endpoint, data=payload, headers=self._headers()
                )
                self.http_status = response.status

                if response.status != 200:
                    _LOGGER.info(
                        "Completion failed, response code: %s Full message: %s",
                        response.status,
                        response,
                    )
                    return None

                result_data = await response.json()

        except (asyncio.TimeoutError, aiohttp.ClientError) as error:
            _LOGGER.error("Failed communicating with %s: %s", self.endpoint, type(error))
            return None

        try:
            choices = result_data["choices"]
            texts = [choice["message"]["content"] for choice in choices]
        except (KeyError, TypeError):
            _LOGGER.error("Received invalid response: %s", result_data)
            return None
        if not all(isinstance(text, str) for text in texts):
            _LOGGER.error("Received invalid response: %s", result_data)
            return None
        return texts

    async def async_generate(self, prompt: str, n: int, context: Any = None) -> list[str]:
        """
        Return n completions of prompt, retrying failed requests.

        Raises BackendUnavailableError carrying the completions received so
        far once the retry budget is spent.
        """
        if n < 1:
            raise ValueError(f"n must be at least 1, got {n}")
        texts: list[str] = []
        attempt = 0
        while len(texts) < n:
            async with self._semaphore:
                result = await self.async_query(prompt, n - len(texts))
            if result:
                texts.extend(result[: n - len(texts)])
                continue
            self.failures += 1
            if attempt >= self.max_retries:
                _LOGGER.error(
                    "Giving up on %s after %s attempts (%s of %s completions)",
                    self.endpoint,
                    attempt + 1,
                    len(texts),
                    n,
                )
                raise BackendUnavailableError(
                    f"{self.endpoint} unavailable after {attempt + 1} attempts", partial=texts
                )
            await asyncio.sleep(self.backoff * 2**attempt)
            attempt += 1
        return texts
