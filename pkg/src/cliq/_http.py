"""Shared HTTP POST helper with exponential-backoff retries.

Used by the remote embedding backend and the teacher chat client. The
transport (``post_fn``) and clock (``sleep``) are injectable so retry
behavior is testable without a network or a real clock.
"""

from __future__ import annotations

import json
import os
import random
import time
from typing import Callable

import requests

# Transport signature: (url, payload, headers, timeout) -> (status_code, body_text)
PostFn = Callable[[str, dict, dict, float], tuple[int, str]]

RETRYABLE_STATUS = frozenset({429} | set(range(500, 600)))

API_KEY_ENV = "CLIQ_API_KEY"
API_KEY_ENV_FALLBACK = "OPENAI_API_KEY"


def api_headers() -> dict:
    """Request headers; bearer token read from the environment, never stored."""
    headers = {"Content-Type": "application/json"}
    key = os.environ.get(API_KEY_ENV) or os.environ.get(API_KEY_ENV_FALLBACK)
    if key:
        headers["Authorization"] = f"Bearer {key}"
    return headers


class ApiError(RuntimeError):
    """A remote API call failed (transport error, bad status, or bad body)."""

    def __init__(self, message: str, *, attempts: int = 0):
        super().__init__(message)
        self.attempts = attempts


def default_post(url: str, payload: dict, headers: dict, timeout: float) -> tuple[int, str]:
    resp = requests.post(url, json=payload, headers=headers, timeout=timeout)
    return resp.status_code, resp.text


def post_json_with_retry(
    url: str,
    payload: dict,
    *,
    headers: dict | None = None,
    timeout: float,
    max_attempts: int,
    backoff_base: float,
    jitter: bool = False,
    post_fn: PostFn | None = None,
    sleep: Callable[[float], None] = time.sleep,
) -> dict:
    """POST JSON and return the decoded JSON response.

    Transport failures, 5xx, and 429 are retried up to ``max_attempts``
    times with delays backoff_base * 2**(attempt-1); other non-2xx
    statuses and undecodable bodies fail immediately.
    """
    if max_attempts < 1:
        raise ValueError("max_attempts must be >= 1")
    post = post_fn or default_post
    headers = headers or {}
    last_failure = ""
    for attempt in range(1, max_attempts + 1):
        try:
            status, body = post(url, payload, headers, timeout)
        except requests.RequestException as exc:
            last_failure = f"transport error: {exc}"
        else:
            if status in RETRYABLE_STATUS:
                last_failure = f"status {status}"
            elif not 200 <= status < 300:
                raise ApiError(
                    f"POST {url} failed with status {status}: {body[:500]}",
                    attempts=attempt,
                )
            else:
                try:
                    return json.loads(body)
                except (json.JSONDecodeError, ValueError) as exc:
                    raise ApiError(
                        f"POST {url} returned undecodable JSON body: {exc}",
                        attempts=attempt,
                    ) from exc
        if attempt < max_attempts:
            delay = backoff_base * 2 ** (attempt - 1)
            if jitter:
                delay = random.uniform(0.0, delay)
            sleep(delay)
    raise ApiError(
        f"POST {url} failed after {max_attempts} attempts (last: {last_failure})",
        attempts=max_attempts,
    )
