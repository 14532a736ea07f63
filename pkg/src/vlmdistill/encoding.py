"""Supervision targets: text features for freeform answers, one-hot action labels."""

from __future__ import annotations

import hashlib
import json
import re
import threading
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Protocol, runtime_checkable

import numpy as np

from .annotation.prompts import ACTION_FAMILIES, DEFAULT_VOCABULARY, ActionVocabulary
from .annotation.records import StructuredActionAnnotation
from .errors import EncodingError

DEFAULT_EMBEDDING_DIM = 512


@runtime_checkable
class TextEncoder(Protocol):
    embedding_dim: int

    def embed(self, text: str) -> np.ndarray: ...


def hash_unit(seed: int, index: int, text: str) -> float:
    """Map ``(seed, index, text)`` to a float in [-1, 1] via keyed BLAKE2b."""
    digest = hashlib.blake2b(
        f"{index}\x1f{text}".encode("utf-8"), digest_size=8, key=seed.to_bytes(8, "little")
    ).digest()
    return int.from_bytes(digest, "little") / (2**64 - 1) * 2.0 - 1.0


class HashEncoder:
    """Whole-string hash embedding: ``embed(s)[k] = hash_unit(seed, k, s)``."""

    def __init__(self, embedding_dim: int = DEFAULT_EMBEDDING_DIM, seed: int = 0):
        if embedding_dim <= 0:
            raise ValueError("embedding_dim must be positive")
        self.embedding_dim = embedding_dim
        self.seed = seed
        self.model_id = f"hash-{embedding_dim}-s{seed}"

    def embed(self, text: str) -> np.ndarray:
        return np.array([hash_unit(self.seed, k, text) for k in range(self.embedding_dim)])


class TokenHashEncoder:
    """Bag-of-words variant: mean of per-token hash embeddings.

    Sentences that share words land near each other, which gives the toy
    teacher's templated language a class structure a planner can learn from.
    """

    def __init__(self, embedding_dim: int = DEFAULT_EMBEDDING_DIM, seed: int = 0):
        self._token = HashEncoder(embedding_dim, seed)
        self.embedding_dim = embedding_dim
        self.seed = seed
        self.model_id = f"token-hash-{embedding_dim}-s{seed}"
        self._cached = lru_cache(maxsize=65536)(self._token.embed)

    def embed(self, text: str) -> np.ndarray:
        tokens = re.findall(r"[\w']+", text.lower())
        if not tokens:
            return self._cached(text)
        return np.mean([self._cached(t) for t in tokens], axis=0)


class SerializingEncoder:
    """Wraps an encoder that is not thread-safe behind a lock."""

    def __init__(self, inner: TextEncoder):
        self.inner = inner
        self.embedding_dim = inner.embedding_dim
        self._lock = threading.Lock()

    def embed(self, text: str) -> np.ndarray:
        with self._lock:
            return self.inner.embed(text)


@dataclass(frozen=True)
class TextFeatureTriple:
    y_c: np.ndarray
    y_f: np.ndarray
    y_r: np.ndarray

    def stacked(self) -> np.ndarray:
        return np.stack([self.y_c, self.y_f, self.y_r])


@dataclass(frozen=True)
class ActionLabelTriple:
    y_control: np.ndarray
    y_turn: np.ndarray
    y_lane: np.ndarray

    def as_tuple(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.y_control, self.y_turn, self.y_lane

    def indices(self) -> tuple[int, int, int]:
        return tuple(int(np.argmax(v)) for v in self.as_tuple())


def encode_freeform(ann, enc: TextEncoder) -> TextFeatureTriple:
    out = []
    for name in ("current_action", "future_action", "reasoning"):
        text = getattr(ann, name)
        if not isinstance(text, str) or not text.strip():
            raise EncodingError("cannot encode an empty answer", name)
        try:
            vec = np.asarray(enc.embed(text), dtype=float)
        except Exception as exc:
            raise EncodingError(f"encoder failed: {exc}", name) from exc
        if vec.shape != (enc.embedding_dim,) or not np.all(np.isfinite(vec)):
            raise EncodingError("encoder returned a malformed vector", name)
        out.append(vec)
    return TextFeatureTriple(*out)


def one_hot(label: str, family: str, vocab: ActionVocabulary = DEFAULT_VOCABULARY) -> np.ndarray:
    labels = vocab.labels(family)
    if label not in labels:
        raise EncodingError(f"{label!r} is not a {family} label", family)
    vec = np.zeros(len(labels))
    vec[labels.index(label)] = 1.0
    return vec


def decode_one_hot(vec: np.ndarray, family: str, vocab: ActionVocabulary = DEFAULT_VOCABULARY) -> str:
    labels = vocab.labels(family)
    v = np.asarray(vec)
    if v.shape != (len(labels),) or np.count_nonzero(v == 1) != 1 or np.count_nonzero(v) != 1:
        raise EncodingError("not a one-hot vector of the right size", family)
    return labels[int(np.argmax(v))]


def encode_actions(
    ann: StructuredActionAnnotation, vocab: ActionVocabulary = DEFAULT_VOCABULARY
) -> ActionLabelTriple:
    return ActionLabelTriple(
        *(one_hot(label, fam, vocab) for fam, label in zip(ACTION_FAMILIES, ann.as_tuple()))
    )


def decode_actions(
    labels: ActionLabelTriple, vocab: ActionVocabulary = DEFAULT_VOCABULARY
) -> StructuredActionAnnotation:
    return StructuredActionAnnotation(
        *(decode_one_hot(v, fam, vocab) for fam, v in zip(ACTION_FAMILIES, labels.as_tuple()))
    )


# -- supervision cache -------------------------------------------------------


@dataclass(frozen=True)
class SupervisionEntry:
    sample_id: str
    text: TextFeatureTriple
    actions: ActionLabelTriple

    def to_dict(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "dim": int(self.text.y_c.shape[0]),
            "y_c": self.text.y_c.tolist(),
            "y_f": self.text.y_f.tolist(),
            "y_r": self.text.y_r.tolist(),
            "y_control": [int(x) for x in self.actions.y_control],
            "y_turn": [int(x) for x in self.actions.y_turn],
            "y_lane": [int(x) for x in self.actions.y_lane],
        }

    @classmethod
    def from_dict(cls, d: dict) -> SupervisionEntry:
        text = TextFeatureTriple(*(np.asarray(d[k], dtype=float) for k in ("y_c", "y_f", "y_r")))
        if any(v.shape != (d["dim"],) for v in (text.y_c, text.y_f, text.y_r)):
            raise EncodingError("cached feature does not match its declared dim", d.get("sample_id"))
        acts = ActionLabelTriple(*(np.asarray(d[k], dtype=float) for k in ("y_control", "y_turn", "y_lane")))
        return cls(d["sample_id"], text, acts)


def encode_record(record, enc: TextEncoder, vocab: ActionVocabulary = DEFAULT_VOCABULARY) -> SupervisionEntry:
    return SupervisionEntry(record.sample_id, encode_freeform(record.freeform, enc), encode_actions(record.actions, vocab))


def write_cache(path: str | Path, entries: Iterable[SupervisionEntry]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for e in entries:
            fh.write(json.dumps(e.to_dict()) + "\n")
            n += 1
    return n


def read_cache(path: str | Path) -> dict[str, SupervisionEntry]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                entry = SupervisionEntry.from_dict(json.loads(line))
                out[entry.sample_id] = entry
    return out
