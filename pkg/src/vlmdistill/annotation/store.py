"""Append-only JSON-lines annotation store, one record per line."""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from ..errors import StoreError
from .records import SCHEMA_VERSION, AnnotationRecord

_WRITE_LOCK = threading.Lock()


def dumps_record(record: AnnotationRecord) -> str:
    return json.dumps(record.to_dict(), ensure_ascii=False)


def store_append(path: str | Path, records: Iterable[AnnotationRecord]) -> int:
    lines = [dumps_record(r) + "\n" for r in records]
    with _WRITE_LOCK, open(path, "a", encoding="utf-8") as fh:
        fh.writelines(lines)
    return len(lines)


@dataclass
class ScanResult:
    records: list[AnnotationRecord] = field(default_factory=list)
    errors: list[tuple[int, str]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)


def store_scan(path: str | Path, lenient: bool = False) -> ScanResult:
    """Read every record in file order.

    Corrupt lines raise unless ``lenient``, in which case they are reported as
    ``(line_number, message)`` and skipped. A schema-version mismatch always
    raises.
    """
    result = ScanResult()
    path = Path(path)
    if not path.exists():
        return result
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                data = json.loads(line)
                version = data.get("schema_version")
            except (json.JSONDecodeError, AttributeError) as exc:
                if not lenient:
                    raise StoreError(f"{path}:{lineno}: corrupt line ({exc})") from None
                result.errors.append((lineno, f"corrupt line: {exc}"))
                continue
            if version != SCHEMA_VERSION:
                raise StoreError(
                    f"{path}:{lineno}: schema version {version!r}, expected {SCHEMA_VERSION}"
                )
            try:
                result.records.append(AnnotationRecord.from_dict(data))
            except (KeyError, TypeError, ValueError) as exc:
                if not lenient:
                    raise StoreError(f"{path}:{lineno}: malformed record ({exc})") from None
                result.errors.append((lineno, f"malformed record: {exc}"))
    return result
