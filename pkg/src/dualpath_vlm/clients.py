"""Text-completion client for the optional external expander and judge.

Every request is keyed by a SHA-256 of its payload and cached on disk, so a
directory of cached replies doubles as a replay fixture. Network use is off
unless explicitly enabled.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from pathlib import Path

from .errors import ConfigError, TransportError

log = logging.getLogger(__name__)


class TextClient:
    def __init__(self, url: str | None, key: str | None, cache_dir: str | Path,
                 allow_network: bool = False, model: str = "default", retries: int = 3, timeout: float = 30.0):
        self.url, self.key, self.model = url, key, model
        self.cache_dir = Path(cache_dir)
        self.allow_network = allow_network
        self.retries, self.timeout = retries, timeout

    @classmethod
    def from_env(cls, prefix: str, cache_dir: str | Path, allow_network: bool = False, **kw) -> "TextClient":
        """Read ``{prefix}_URL`` / ``{prefix}_KEY``; both are required."""
        url, key = os.environ.get(f"{prefix}_URL"), os.environ.get(f"{prefix}_KEY")
        if not url or not key:
            raise ConfigError(f"{prefix}_URL and {prefix}_KEY must be set to use the external client")
        return cls(url, key, cache_dir, allow_network=allow_network, **kw)

    def request_hash(self, prompt: str) -> str:
        payload = json.dumps({"model": self.model, "prompt": prompt}, sort_keys=True)
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()

    def _cache_path(self, prompt: str) -> Path:
        return self.cache_dir / f"{self.request_hash(prompt)}.json"

    def cached(self, prompt: str) -> str | None:
        path = self._cache_path(prompt)
        if path.exists():
            return json.loads(path.read_text(encoding="utf-8"))["reply"]
        return None

    def store(self, prompt: str, reply: str) -> None:
        self.cache_dir.mkdir(parents=True, exist_ok=True)
        self._cache_path(prompt).write_text(
            json.dumps({"model": self.model, "prompt": prompt, "reply": reply}, sort_keys=True, indent=1),
            encoding="utf-8")

    def complete(self, prompt: str) -> str:
        hit = self.cached(prompt)
        if hit is not None:
            return hit
        if not self.allow_network:
            raise TransportError("cache miss and network access is disabled")
        reply = self._post(prompt)
        self.store(prompt, reply)
        return reply

    def _post(self, prompt: str) -> str:
        import requests

        body = {"model": self.model, "messages": [{"role": "user", "content": prompt}], "temperature": 0}
        headers = {"Authorization": f"Bearer {self.key}", "Content-Type": "application/json"}
        last: Exception | None = None
        for attempt in range(self.retries):
            try:
                resp = requests.post(self.url, json=body, headers=headers, timeout=self.timeout)
                resp.raise_for_status()
                return resp.json()["choices"][0]["message"]["content"]
            except Exception as exc:  # noqa: BLE001 - retried, then surfaced as TransportError
                last = exc
                log.warning("request attempt %d failed: %s", attempt + 1, exc)
                time.sleep(min(2**attempt, 8))
        raise TransportError(f"request failed after {self.retries} attempts: {last}")
