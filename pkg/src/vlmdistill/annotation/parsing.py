"""Turn teacher replies into freeform and structured annotations.

Replies carry no format contract, so sections are recovered with three
strategies tried in order: numbered sections (``1.``, ``2)``, ``Q1-3:``),
labeled headers (``Current action:``), then a paragraph or line split.
"""

from __future__ import annotations

import re

from ..errors import OutOfVocabularyError, ParseError
from .prompts import ACTION_FAMILIES, DEFAULT_VOCABULARY, ActionVocabulary
from .records import FreeformAnnotation, StructuredActionAnnotation

_NUMBERED = re.compile(
    r"^[ \t>*#_]*(?:q\s*[12]\s*-\s*([1-3])\b[.):]?|\(?([1-3])[.):])[*_]*[ \t]*",
    re.IGNORECASE | re.MULTILINE,
)
_FREEFORM_HEADERS = {
    "current": r"current\s+actions?|current\s+status",
    "future": r"(?:predicted\s+)?future\s+actions?",
    "reasoning": r"reasoning|explanation",
}
_ACTION_HEADERS = {
    "control": r"control(?:\s+action)?",
    "turn": r"turn(?:\s+action)?",
    "lane": r"lane(?:\s+action)?",
}


def _clean(text: str) -> str:
    return " ".join(text.replace("**", " ").replace("__", " ").split())


def _numbered_sections(reply: str) -> list[str] | None:
    marks = [(m, int(m.group(1) or m.group(2))) for m in _NUMBERED.finditer(reply)]
    picked = []
    want = 1
    for m, n in marks:
        if n == want:
            picked.append(m)
            want += 1
            if want > 3:
                break
    if len(picked) != 3:
        return None
    bounds = [m.end() for m in picked]
    # a section runs until the next numbered marker of any number
    starts = sorted(m.start() for m, _ in marks)
    sections = []
    for end in bounds:
        nxt = next((s for s in starts if s >= end), len(reply))
        sections.append(_clean(reply[end:nxt]))
    return sections if all(sections) else None


def _header_sections(reply: str, headers: dict[str, str]) -> list[str] | None:
    pattern = re.compile(
        r"(?:^|(?<=[\s*#_.;]))[*_]*(?P<name>"
        + "|".join(f"(?P<{k}>{v})" for k, v in headers.items())
        + r")[*_]*\s*[:\-]\s*[*_]*",
        re.IGNORECASE | re.MULTILINE,
    )
    found: dict[str, re.Match] = {}
    for m in pattern.finditer(reply):
        key = next(k for k in headers if m.group(k))
        found.setdefault(key, m)
    if len(found) != len(headers):
        return None
    ordered = sorted(found.values(), key=lambda m: m.start())
    text = {}
    for i, m in enumerate(ordered):
        end = ordered[i + 1].start() if i + 1 < len(ordered) else len(reply)
        key = next(k for k in headers if m.group(k))
        text[key] = _clean(reply[m.end() : end])
    sections = [text[k] for k in headers]
    return sections if all(sections) else None


def _split_sections(reply: str, separators: str = "") -> list[str] | None:
    blocks = [_clean(b) for b in re.split(r"\n\s*\n", reply.strip())]
    blocks = [b for b in blocks if b]
    if len(blocks) == 3:
        return blocks
    lines = [_clean(line) for line in re.split(r"[\n" + separators + r"]", reply)]
    lines = [line for line in lines if line]
    return lines if len(lines) == 3 else None


def parse_freeform(reply: str) -> FreeformAnnotation:
    if not reply or not reply.strip():
        raise ParseError("empty reply", reply)
    sections = (
        _numbered_sections(reply)
        or _header_sections(reply, _FREEFORM_HEADERS)
        or _split_sections(reply)
    )
    if sections is None:
        raise ParseError("could not recover three answers from the reply", reply)
    return FreeformAnnotation(*sections)


def _normalize_phrase(text: str) -> str:
    text = text.lower().replace("’", "'")
    text = re.sub(r"[\"'`{}\[\]()]", " ", text)
    return " ".join(text.strip(" .,;:!").split()).strip(" .,;:!")


def resolve_action(phrase: str, family: str, vocab: ActionVocabulary = DEFAULT_VOCABULARY) -> str:
    """Map one answer onto a canonical label of ``family``.

    Only exact labels and documented synonyms match, after case, punctuation
    and header normalization. With ``vocab.loose_matching`` an answer that
    mentions exactly one label or synonym of the family is accepted too.
    """
    labels = vocab.labels(family)
    synonyms = vocab.synonyms_for(family)
    norm = _normalize_phrase(phrase)
    norm = re.sub(r"^" + _ACTION_HEADERS[family] + r"\s*[:\-]\s*", "", norm)
    if norm in labels:
        return norm
    if norm in synonyms:
        return synonyms[norm]
    if not vocab.loose_matching:
        raise OutOfVocabularyError(norm or phrase, family)
    table = {label: label for label in labels} | synonyms
    spans = []
    for key, canonical in table.items():
        for m in re.finditer(r"\b" + re.escape(key) + r"\b", norm):
            spans.append((m.start(), m.end(), canonical))
    # drop phrases nested inside a longer match
    spans = [s for s in spans if not any(o[0] <= s[0] and s[1] <= o[1] and o != s for o in spans)]
    hits = {canonical for _, _, canonical in spans}
    if len(hits) == 1:
        return hits.pop()
    raise OutOfVocabularyError(norm or phrase, family)


def parse_actions(reply: str, vocab: ActionVocabulary = DEFAULT_VOCABULARY) -> StructuredActionAnnotation:
    if not reply or not reply.strip():
        raise ParseError("empty reply", reply)
    sections = (
        _numbered_sections(reply)
        or _header_sections(reply, _ACTION_HEADERS)
        or _split_sections(reply, separators="/;")
    )
    if sections is None:
        raise ParseError("could not recover three action answers from the reply", reply)
    resolved = []
    for family, phrase in zip(ACTION_FAMILIES, sections):
        try:
            resolved.append(resolve_action(phrase, family, vocab))
        except OutOfVocabularyError as exc:
            raise OutOfVocabularyError(exc.phrase, family, raw=reply) from None
    return StructuredActionAnnotation(*resolved)


def format_actions(control: str, turn: str, lane: str) -> str:
    return f"1. {control}\n2. {turn}\n3. {lane}"


def format_freeform(current: str, future: str, reasoning: str) -> str:
    return f"1. {current}\n2. {future}\n3. {reasoning}"
