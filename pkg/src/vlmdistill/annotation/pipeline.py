from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from ..errors import AnnotationError, ParseError, TransportError
from .clients import VlmClient
from .parsing import parse_actions, parse_freeform
from .prompts import DEFAULT_VOCABULARY, ActionVocabulary, PromptFamily, build_prompt
from .records import AnnotationRecord
from .store import store_append, store_scan

log = logging.getLogger(__name__)

MAX_ATTEMPTS = 3


def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def query_with_retry(
    client: VlmClient,
    image: np.ndarray,
    prompt: str,
    sample_id: str,
    attempts: int = MAX_ATTEMPTS,
    backoff: float = 0.5,
    sleep: Callable[[float], None] = time.sleep,
) -> str:
    for attempt in range(attempts):
        try:
            return client.complete(image, prompt, sample_id)
        except TransportError as exc:
            if attempt == attempts - 1:
                raise AnnotationError(f"teacher unreachable after {attempts} attempts: {exc}", sample_id) from exc
            delay = backoff * 2**attempt
            log.warning("%s: attempt %d failed (%s), retrying in %.2fs", sample_id, attempt + 1, exc, delay)
            sleep(delay)
    raise AssertionError("unreachable")


def annotate(
    image: np.ndarray,
    client: VlmClient,
    sample_id: str,
    vocab: ActionVocabulary = DEFAULT_VOCABULARY,
    created_at: str | None = None,
    attempts: int = MAX_ATTEMPTS,
    backoff: float = 0.5,
    sleep: Callable[[float], None] = time.sleep,
) -> AnnotationRecord:
    """Query both prompt families independently and parse the replies.

    Parse failures propagate as :class:`ParseError` (or its
    :class:`OutOfVocabularyError` subclass) with the raw reply attached.
    """
    replies = {}
    for family in (PromptFamily.FREEFORM, PromptFamily.ACTIONS):
        prompt = build_prompt(family).render()
        replies[family] = query_with_retry(client, image, prompt, sample_id, attempts, backoff, sleep)
    freeform = parse_freeform(replies[PromptFamily.FREEFORM])
    actions = parse_actions(replies[PromptFamily.ACTIONS], vocab)

    teacher_for = getattr(client, "teacher_for", None)
    teacher = teacher_for(sample_id) if teacher_for else client.model_id
    if created_at is None:
        stamp_for = getattr(client, "created_at_for", None)
        created_at = stamp_for(sample_id) if stamp_for else _utc_now()
    return AnnotationRecord(
        sample_id=sample_id,
        freeform=freeform,
        actions=actions,
        teacher_id=teacher,
        raw_p1=replies[PromptFamily.FREEFORM],
        raw_p2=replies[PromptFamily.ACTIONS],
        created_at=created_at,
    )


@dataclass
class BatchSummary:
    written: list[str] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)
    quarantined: list[str] = field(default_factory=list)
    failed: list[tuple[str, str]] = field(default_factory=list)

    @property
    def has_errors(self) -> bool:
        return bool(self.quarantined or self.failed)


def annotate_batch(
    items: Iterable[tuple[str, Callable[[], np.ndarray]]],
    client: VlmClient,
    store_path: str | Path,
    quarantine_path: str | Path | None = None,
    vocab: ActionVocabulary = DEFAULT_VOCABULARY,
    max_workers: int = 4,
    created_at: str | None = None,
    **retry,
) -> BatchSummary:
    """Annotate ``(sample_id, load_image)`` items into the store.

    Samples already present in the store are skipped, so an interrupted run
    resumes without duplicates. Requests run on up to ``max_workers`` threads;
    appends happen on the calling thread in input order. Replies that fail to
    parse are written to ``quarantine_path`` instead of the store.
    """
    summary = BatchSummary()
    done = {r.sample_id for r in store_scan(store_path, lenient=True)}
    todo = []
    for sample_id, loader in items:
        if sample_id in done:
            summary.skipped.append(sample_id)
        else:
            done.add(sample_id)
            todo.append((sample_id, loader))

    def work(item):
        sample_id, loader = item
        try:
            image = loader()
        except (OSError, ValueError) as exc:
            return None, AnnotationError(f"cannot load image: {exc}", sample_id)
        try:
            return annotate(image, client, sample_id, vocab, created_at, **retry), None
        except (ParseError, AnnotationError) as exc:
            return None, exc

    with ThreadPoolExecutor(max_workers=max(1, max_workers)) as pool:
        for (sample_id, _), (record, exc) in zip(todo, pool.map(work, todo)):
            if record is not None:
                store_append(store_path, [record])
                summary.written.append(sample_id)
            elif isinstance(exc, ParseError):
                summary.quarantined.append(sample_id)
                log.warning("%s quarantined: %s", sample_id, exc)
                if quarantine_path is not None:
                    entry = {
                        "sample_id": sample_id,
                        "error": str(exc),
                        "phrase": getattr(exc, "phrase", None),
                        "raw": exc.raw,
                    }
                    with open(quarantine_path, "a", encoding="utf-8") as fh:
                        fh.write(json.dumps(entry, ensure_ascii=False) + "\n")
            else:
                summary.failed.append((sample_id, str(exc)))
                log.error("%s failed: %s", sample_id, exc)
    return summary

