"""LLM clients and class-description generation."""

from __future__ import annotations

import abc
import logging
import os
import time
from pathlib import Path
from typing import Callable, Sequence

import requests

from .data import DatasetManifest, DescriptionSet, fill_template, save_descriptions
from .errors import ClientUnavailable, PlaceholderMissing, RateLimited

log = logging.getLogger(__name__)

ENDPOINT_ENV = "NOLA_LLM_ENDPOINT"
KEY_ENV = "NOLA_LLM_KEY"

GENERIC_TEMPLATES = (
    "Describe what a(n) {} looks like",
    "What does a(n) {} look like?",
    "What characteristics can be used to differentiate a(n) {} from others based on just a photo?",
    "Describe an image from the internet of a(n) {}",
    "A caption of an image of a(n) {}:",
    "List how one can recognize the a(n) {} within an image.",
    "List the distinguishing features of the a(n) {}.",
    "List the visual cues that help in identifying the a(n) {}.",
    "List the visual characteristics that make the a(n) {} easily identifiable.",
    "List how one can identify the a(n) {} based on visual cues.",
)

AERIAL_TEMPLATES = (
    "Describe a satellite photo of a(n) {}",
    "Describe a(n) {} as it would appear in an aerial image",
    "How can you identify a(n) {} in an aerial photo?",
    "Describe the satellite photo of a(n) {}",
    "Describe an aerial photo of a(n) {}",
    "List how one can recognize the a(n) {} within an aerial image.",
    "List the distinguishing features of the a(n) {} in a satellite photo.",
    "List the visual cues that help in identifying the a(n) {} in an aerial image.",
    "List the visual characteristics that make the a(n) {} easily identifiable in a satellite image.",
    "List how one can identify the a(n) {} based on visual cues in an aerial photo.",
)

FLOWER_TEMPLATES = (
    "Describe how to identify a(n) {}, a type of flower.",
    "Describe a photo of a(n) {}, a type of flower.",
    "What does a(n) {} flower look like?",
    "List the distinguishing features of a(n) {} flower.",
    "How can you recognize a(n) {} flower in a photo?",
    "Describe the visual characteristics of a(n) {}, a flower of the {} category.",
    "What visual cues help identify a(n) {} flower?",
)

PET_TEMPLATES = (
    "Describe what a pet a(n) {} looks like.",
    "Describe a photo of a(n) {}, a type of pet.",
    "Visually describe a(n) {}, a type of pet.",
    "List the distinguishing features of a(n) {} pet.",
    "How can you recognize a(n) {} pet in a photo?",
    "Describe the visual characteristics of a pet a(n) {}.",
    "What visual cues help identify a(n) {} pet?",
    "Describe how to identify a pet a(n) {} in an image.",
)

TEMPLATE_SETS = {
    "generic": GENERIC_TEMPLATES,
    "aerial": AERIAL_TEMPLATES,
    "flowers": FLOWER_TEMPLATES,
    "pets": PET_TEMPLATES,
}

DATASET_TEMPLATE_SET = {
    "imagenet": "generic", "caltech101": "generic", "cifar10": "generic", "cifar100": "generic",
    "sun397": "generic", "eurosat": "aerial", "resisc45": "aerial",
    "flowers102": "flowers", "oxfordpets": "pets",
}


def templates_for(dataset: str) -> tuple[str, ...]:
    key = dataset.lower().replace("-", "").replace("_", "")
    return TEMPLATE_SETS[DATASET_TEMPLATE_SET.get(key, "generic")]


class LLMClient(abc.ABC):
    """Prompt string in, list of completions out."""

    @abc.abstractmethod
    def complete(self, prompt: str, n: int = 1) -> list[str]:
        ...


class MockLLMClient(LLMClient):
    """Offline client.

    ``responder(prompt, call_index)`` produces the completions; by default it
    echoes ``desc(<prompt>)``. ``fail_on`` maps 1-based call numbers to the
    exception raised on that call.
    """

    def __init__(self, responder: Callable[[str, int], list[str] | str] | None = None,
                 fail_on: dict[int, BaseException] | None = None):
        self.responder = responder
        self.fail_on = dict(fail_on or {})
        self.calls: list[str] = []

    def complete(self, prompt: str, n: int = 1) -> list[str]:
        self.calls.append(prompt)
        idx = len(self.calls)
        if idx in self.fail_on:
            raise self.fail_on[idx]
        if self.responder is None:
            return [f"desc({prompt})"] * n
        out = self.responder(prompt, idx)
        return [out] if isinstance(out, str) else list(out)


class HTTPLLMClient(LLMClient):
    """Chat-completions style HTTP backend.

    Posts ``{"model", "messages", "n", "temperature"}`` and reads
    ``choices[*].message.content``; this is the shape served by the common
    hosted and self-hosted chat APIs.
    """

    def __init__(self, endpoint: str | None = None, api_key: str | None = None,
                 model: str = "gpt-3.5-turbo", temperature: float = 0.99,
                 timeout: float = 60.0, session: requests.Session | None = None):
        self.endpoint = endpoint or os.environ.get(ENDPOINT_ENV)
        self.api_key = api_key or os.environ.get(KEY_ENV)
        if not self.endpoint:
            raise ClientUnavailable(f"no endpoint configured (set {ENDPOINT_ENV})")
        self.model = model
        self.temperature = temperature
        self.timeout = timeout
        self.session = session or requests.Session()

    def complete(self, prompt: str, n: int = 1) -> list[str]:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        body = {"model": self.model, "messages": [{"role": "user", "content": prompt}],
                "n": n, "temperature": self.temperature}
        try:
            resp = self.session.post(self.endpoint, json=body, headers=headers, timeout=self.timeout)
        except requests.Timeout as exc:
            raise RateLimited(f"timeout after {self.timeout}s") from exc
        except requests.RequestException as exc:
            raise ClientUnavailable(str(exc)) from exc
        if resp.status_code == 429:
            retry = resp.headers.get("Retry-After")
            raise RateLimited("HTTP 429", retry_after=float(retry) if retry else None)
        if resp.status_code in (401, 403):
            raise ClientUnavailable(f"authentication failed (HTTP {resp.status_code})")
        if resp.status_code >= 400:
            raise ClientUnavailable(f"HTTP {resp.status_code}: {resp.text[:200]}")
        choices = resp.json().get("choices", [])
        return [c["message"]["content"].strip() for c in choices if c.get("message", {}).get("content")]


def generate_descriptions(client: LLMClient, manifest: DatasetManifest, templates: Sequence[str],
                          *, n_per_prompt: int = 1, max_retries: int = 0, backoff: float = 1.0,
                          cache_path: str | Path | None = None) -> DescriptionSet:
    """Query ``client`` once per (class, template) pair.

    Throttled or timed-out calls are retried ``max_retries`` times and then
    skipped; if any pair is still missing once every pair has been tried,
    :class:`RateLimited` is raised with the completed descriptions attached.
    Authentication or connection failures abort immediately.
    """
    if not templates:
        raise PlaceholderMissing("no templates given")
    bad = [t for t in templates if "{}" not in t]
    if bad:
        raise PlaceholderMissing(f"templates without '{{}}': {bad}")

    per_class: dict[str, list[str]] = {c: [] for c in manifest.class_names}
    failed: list[tuple[str, str]] = []
    retry_after = None
    for name in manifest.class_names:
        for template in templates:
            prompt = fill_template(template, name)
            for attempt in range(max_retries + 1):
                try:
                    answers = client.complete(prompt, n_per_prompt)
                except (RateLimited, TimeoutError) as exc:
                    retry_after = getattr(exc, "retry_after", None) or retry_after
                    if attempt < max_retries:
                        time.sleep(backoff * 2 ** attempt)
                        continue
                    log.warning("giving up on %r: %s", prompt, exc)
                    failed.append((name, template))
                    break
                per_class[name].extend(a for a in answers if a and a.strip())
                break

    if failed:
        raise RateLimited(f"{len(failed)} of {len(manifest.class_names) * len(templates)} prompts failed",
                          retry_after=retry_after,
                          partial={c: list(d) for c, d in per_class.items() if d},
                          failed=failed)
    result = DescriptionSet(manifest.name, tuple(templates),
                            {c: tuple(d) for c, d in per_class.items()}, source="llm_client")
    if cache_path is not None:
        save_descriptions(result, cache_path)
    return result
