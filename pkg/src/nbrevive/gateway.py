"""LLM gateway: token/cost accounting plus two interchangeable backends, a
deterministic scripted mock for tests and an HTTP chat-completion client.

The credential for the HTTP backend comes from an environment variable only;
config files never carry keys.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import random
import time
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Optional

from .errors import AuthError, GatewayError, GatewayTimeout, RateLimited

logger = logging.getLogger(__name__)

API_KEY_ENV = "NBREVIVE_API_KEY"


@dataclass(frozen=True)
class Usage:
    """Token usage split by billing class. Additive."""

    input_uncached: float = 0.0
    input_cached: float = 0.0
    output: float = 0.0

    def __post_init__(self):
        for name in ("input_uncached", "input_cached", "output"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    def __add__(self, other: "Usage") -> "Usage":
        return Usage(
            input_uncached=self.input_uncached + other.input_uncached,
            input_cached=self.input_cached + other.input_cached,
            output=self.output + other.output,
        )

    def total(self) -> float:
        return self.input_uncached + self.input_cached + self.output

    def to_dict(self) -> dict:
        return {
            "input_uncached": self.input_uncached,
            "input_cached": self.input_cached,
            "output": self.output,
        }

    @staticmethod
    def from_dict(d: dict) -> "Usage":
        return Usage(
            input_uncached=float(d.get("input_uncached", 0)),
            input_cached=float(d.get("input_cached", 0)),
            output=float(d.get("output", 0)),
        )


@dataclass(frozen=True)
class PriceTable:
    """USD per one million tokens, per billing class."""

    input_uncached: float
    input_cached: float
    output: float


def load_price_table(path: Optional[str | Path] = None) -> PriceTable:
    if path is None:
        with resources.files("nbrevive").joinpath("data", "prices.json").open("r", encoding="utf-8") as fh:
            data = json.load(fh)
    else:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    rates = data["rates"]
    return PriceTable(
        input_uncached=float(rates["input_uncached"]),
        input_cached=float(rates["input_cached"]),
        output=float(rates["output"]),
    )


def cost(usage: Usage, prices: PriceTable) -> float:
    """Dollar cost of a usage record. Linear in every field."""
    return (
        usage.input_uncached * prices.input_uncached
        + usage.input_cached * prices.input_cached
        + usage.output * prices.output
    ) / 1e6


def prompt_key(prompt: str) -> str:
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()


class MockGateway:
    """Scripted gateway keyed by sha256 of the prompt.

    The script maps a prompt hash (or the wildcard "*") to an entry with a
    "response" (string, or list of strings consumed in order across repeated
    calls) and an optional "usage" dict. Deterministic, no network.
    """

    def __init__(self, script: dict | str | Path):
        if not isinstance(script, dict):
            script = json.loads(Path(script).read_text(encoding="utf-8"))
        self._script = script
        self._cursors: dict[str, int] = {}

    def complete(self, prompt: str, params: Optional[dict] = None) -> tuple[str, Usage]:
        key = prompt_key(prompt)
        entry = self._script.get(key)
        if entry is None:
            entry = self._script.get("*")
        if entry is None:
            raise GatewayError(f"no scripted response for prompt hash {key[:12]}…")
        if isinstance(entry, str):
            entry = {"response": entry}
        response = entry["response"]
        if isinstance(response, list):
            cursor = self._cursors.get(key, 0)
            text = response[min(cursor, len(response) - 1)]
            self._cursors[key] = cursor + 1
        else:
            text = response
        usage = Usage.from_dict(entry.get("usage", {}))
        return text, usage


class HttpGateway:
    """JSON chat-completion client with bounded retries.

    Transient failures (timeouts, connection errors, 429, 5xx) are retried
    with exponential backoff plus jitter up to max_attempts; auth failures
    are raised immediately.
    """

    def __init__(
        self,
        base_url: str,
        model: str,
        api_key_env: str = API_KEY_ENV,
        timeout: float = 120.0,
        max_attempts: int = 3,
        backoff_base: float = 1.0,
        rng: Optional[random.Random] = None,
        sleep=time.sleep,
        session=None,
    ):
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.api_key_env = api_key_env
        self.timeout = timeout
        self.max_attempts = max_attempts
        self.backoff_base = backoff_base
        self._rng = rng or random.Random()
        self._sleep = sleep
        if session is None:
            import requests

            session = requests.Session()
        self._session = session

    def complete(self, prompt: str, params: Optional[dict] = None) -> tuple[str, Usage]:
        import requests

        key = os.environ.get(self.api_key_env)
        if not key:
            raise AuthError(f"no API key in ${self.api_key_env}")
        payload = {
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
        }
        if params:
            payload.update(params)
        last: Optional[GatewayError] = None
        for attempt in range(self.max_attempts):
            if attempt:
                delay = self.backoff_base * (2 ** (attempt - 1)) * (1.0 + self._rng.random())
                self._sleep(delay)
            try:
                resp = self._session.post(
                    f"{self.base_url}/chat/completions",
                    json=payload,
                    headers={"Authorization": f"Bearer {key}"},
                    timeout=self.timeout,
                )
            except requests.Timeout as exc:
                last = GatewayTimeout(f"request timed out: {exc}")
                continue
            except requests.ConnectionError as exc:
                last = GatewayTimeout(f"connection failed: {exc}")
                continue
            if resp.status_code in (401, 403):
                raise AuthError(f"credential rejected (HTTP {resp.status_code})")
            if resp.status_code == 429:
                last = RateLimited("rate limited (HTTP 429)")
                continue
            if resp.status_code >= 500:
                last = GatewayError(f"server error (HTTP {resp.status_code})")
                continue
            if resp.status_code != 200:
                raise GatewayError(f"unexpected HTTP {resp.status_code}: {resp.text[:200]}")
            return self._parse(resp.json())
        assert last is not None
        raise last

    @staticmethod
    def _parse(data: dict) -> tuple[str, Usage]:
        try:
            text = data["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise GatewayError(f"malformed completion payload: {exc}") from exc
        u = data.get("usage", {}) or {}
        cached = float((u.get("prompt_tokens_details") or {}).get("cached_tokens", 0))
        prompt_tokens = float(u.get("prompt_tokens", 0))
        return text, Usage(
            input_uncached=max(prompt_tokens - cached, 0.0),
            input_cached=cached,
            output=float(u.get("completion_tokens", 0)),
        )
