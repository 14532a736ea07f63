"""Teacher clients: a live HTTP client, a deterministic mock and a replay client."""

from __future__ import annotations

import base64
import hashlib
import io
import os
from typing import Iterable, Protocol, runtime_checkable

import numpy as np

from ..errors import AnnotationError, TransportError
from .parsing import format_actions, format_freeform
from .prompts import DEFAULT_VOCABULARY, PromptFamily, build_prompt
from .records import AnnotationRecord


@runtime_checkable
class VlmClient(Protocol):
    model_id: str

    def complete(self, image: np.ndarray, prompt: str, sample_id: str) -> str: ...


def prompt_family(prompt: str) -> PromptFamily:
    if prompt == build_prompt(PromptFamily.FREEFORM).render():
        return PromptFamily.FREEFORM
    if prompt == build_prompt(PromptFamily.ACTIONS).render():
        return PromptFamily.ACTIONS
    # custom wording: the action family is the one that lists choices
    return PromptFamily.ACTIONS if "action list" in prompt else PromptFamily.FREEFORM


def input_digest(image: np.ndarray, prompt: str) -> bytes:
    img = np.ascontiguousarray(image, dtype=np.uint8)
    h = hashlib.sha256()
    h.update(repr(img.shape).encode())
    h.update(img.tobytes())
    h.update(b"\x00")
    h.update(prompt.encode("utf-8"))
    return h.digest()


_SPEEDS = ("steadily", "slowly", "cautiously", "at a moderate speed")
_SCENES = (
    "a clear road ahead",
    "a vehicle ahead in the same lane",
    "a pedestrian near the crosswalk",
    "a traffic light at the intersection",
    "parked cars on the right side",
)
_INTENTS = (
    "continue along the current lane",
    "slow down before the intersection",
    "keep a safe distance from the lead vehicle",
    "prepare to turn at the next junction",
)


class MockVlmClient:
    """Deterministic stand-in for a teacher.

    The reply is a fixed function of a digest of (image, prompt), or the canned
    reply registered for the prompt family.
    """

    model_id = "mock-teacher-v1"

    def __init__(self, canned: dict[PromptFamily | str, str] | None = None, seed: int = 0):
        self.canned = {PromptFamily(k): v for k, v in (canned or {}).items()}
        self.seed = seed

    def complete(self, image: np.ndarray, prompt: str, sample_id: str = "") -> str:
        family = prompt_family(prompt)
        if family in self.canned:
            return self.canned[family]
        d = hashlib.sha256(self.seed.to_bytes(8, "little") + input_digest(image, prompt)).digest()
        if family is PromptFamily.ACTIONS:
            v = DEFAULT_VOCABULARY
            return format_actions(
                v.control[d[0] % 3],  # the mock never reverses
                v.turn[(0, 1, 3, 3, 3, 3)[d[1] % 6]],
                v.lane[(0, 1, 4, 4, 4, 4, 4, 4)[d[2] % 8]],
            )
        speed, scene, intent = _SPEEDS[d[3] % 4], _SCENES[d[4] % 5], _INTENTS[d[5] % 4]
        return format_freeform(
            f"The ego vehicle is driving {speed} with {scene}.",
            f"The ego vehicle will {intent}.",
            f"Because there is {scene}, the ego vehicle drives {speed} and will {intent} "
            "to stay safe and follow traffic rules.",
        )


class ReplayClient:
    """Serves the raw replies stored in earlier annotation records."""

    model_id = "replay"

    def __init__(self, records: Iterable[AnnotationRecord]):
        self.records = {r.sample_id: r for r in records}

    def _record(self, sample_id: str) -> AnnotationRecord:
        try:
            return self.records[sample_id]
        except KeyError:
            raise AnnotationError("no stored record to replay", sample_id) from None

    def complete(self, image: np.ndarray, prompt: str, sample_id: str) -> str:
        rec = self._record(sample_id)
        return rec.raw_p1 if prompt_family(prompt) is PromptFamily.FREEFORM else rec.raw_p2

    def teacher_for(self, sample_id: str) -> str:
        return self._record(sample_id).teacher_id

    def created_at_for(self, sample_id: str) -> str:
        return self._record(sample_id).created_at


class LiveVlmClient:
    """OpenAI-compatible chat-completions client.

    Reads ``VLM_ENDPOINT``, ``VLM_API_KEY`` and ``VLM_MODEL`` from the
    environment. ``decoding`` is forwarded verbatim in the request body
    (temperature, max_tokens, ...). The credential is never logged.
    """

    def __init__(
        self,
        endpoint: str | None = None,
        model: str | None = None,
        decoding: dict | None = None,
        timeout: float = 60.0,
    ):
        self.endpoint = endpoint or os.environ.get("VLM_ENDPOINT", "")
        self.model_id = model or os.environ.get("VLM_MODEL", "gpt-4o")
        self.decoding = dict(decoding or {})
        self.timeout = timeout
        if not self.endpoint:
            raise AnnotationError("VLM_ENDPOINT is not set")

    def _payload(self, image: np.ndarray, prompt: str) -> dict:
        from PIL import Image

        buf = io.BytesIO()
        Image.fromarray(np.asarray(image, dtype=np.uint8)).save(buf, format="PNG")
        url = "data:image/png;base64," + base64.b64encode(buf.getvalue()).decode()
        return {
            "model": self.model_id,
            "messages": [
                {
                    "role": "user",
                    "content": [
                        {"type": "text", "text": prompt},
                        {"type": "image_url", "image_url": {"url": url}},
                    ],
                }
            ],
            **self.decoding,
        }

    def complete(self, image: np.ndarray, prompt: str, sample_id: str = "") -> str:
        import httpx

        headers = {}
        key = os.environ.get("VLM_API_KEY")
        if key:
            headers["Authorization"] = f"Bearer {key}"
        try:
            resp = httpx.post(
                self.endpoint, json=self._payload(image, prompt), headers=headers, timeout=self.timeout
            )
        except httpx.HTTPError as exc:
            raise TransportError(f"{type(exc).__name__} while contacting the teacher") from None
        if resp.status_code == 429 or resp.status_code >= 500:
            raise TransportError(f"teacher returned HTTP {resp.status_code}")
        if resp.status_code >= 400:
            raise AnnotationError(f"teacher rejected the request with HTTP {resp.status_code}", sample_id)
        try:
            return resp.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError):
            raise AnnotationError("unexpected response body from teacher", sample_id) from None
