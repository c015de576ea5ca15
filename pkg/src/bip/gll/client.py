"""Narrow request/response client for an external text generator, configured from the environment."""

from __future__ import annotations

import json
import os
import urllib.error
import urllib.request
from collections.abc import Mapping
from dataclasses import dataclass
from typing import Any

from bip.errors import ConfigError, GenerationFailed

ENV_ENDPOINT = "BIP_LLM_ENDPOINT"
ENV_TOKEN = "BIP_LLM_TOKEN"
ENV_TIMEOUT = "BIP_LLM_TIMEOUT"


@dataclass(frozen=True)
class HttpTextClient:
    """POSTs ``{"prompt", "params"}`` as JSON and expects ``{"text": ...}`` back."""

    endpoint: str
    token: str | None = None
    timeout: float = 30.0

    @property
    def client_id(self) -> str:
        return self.endpoint

    @classmethod
    def from_env(cls, env: Mapping[str, str] | None = None) -> HttpTextClient:
        env = os.environ if env is None else env
        endpoint = env.get(ENV_ENDPOINT)
        if not endpoint:
            raise ConfigError(f"{ENV_ENDPOINT} is not set")
        try:
            timeout = float(env.get(ENV_TIMEOUT, "30"))
        except ValueError:
            raise ConfigError(f"{ENV_TIMEOUT} must be a number of seconds") from None
        return cls(endpoint, env.get(ENV_TOKEN) or None, timeout)

    def generate(self, prompt: str, params: Mapping[str, Any]) -> str:
        body = json.dumps({"prompt": prompt, "params": dict(params)}).encode("utf-8")
        req = urllib.request.Request(self.endpoint, data=body, method="POST",
                                     headers={"Content-Type": "application/json"})
        if self.token:
            req.add_header("Authorization", f"Bearer {self.token}")
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                payload = json.loads(resp.read().decode("utf-8"))
        except (urllib.error.URLError, TimeoutError, json.JSONDecodeError, OSError) as exc:
            raise GenerationFailed(f"text generator request failed: {exc}") from exc
        text = payload.get("text") if isinstance(payload, dict) else None
        if not isinstance(text, str):
            raise GenerationFailed("text generator response has no text field")
        return text
