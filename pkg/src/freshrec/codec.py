"""Line-delimited JSON records.

Every text file the package reads or writes (event logs, album catalogs,
arm tables, metric reports) holds one JSON object per line. Keys are
written sorted and without whitespace so that equal records always encode
to equal bytes.
"""
from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Any, Iterable, Iterator, Union

PathLike = Union[str, os.PathLike]


def encode_record(record: dict[str, Any]) -> str:
    return json.dumps(record, sort_keys=True, separators=(",", ":"), allow_nan=False)


def decode_record(line: str) -> dict[str, Any]:
    obj = json.loads(line)
    if not isinstance(obj, dict):
        raise ValueError("record must be a JSON object")
    return obj


def write_records(path: PathLike, records: Iterable[dict[str, Any]]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(encode_record(rec))
            fh.write("\n")
            n += 1
    return n


def iter_lines(source: Union[PathLike, Iterable[str]]) -> Iterator[tuple[int, str]]:
    """Yield ``(line_no, text)`` pairs, 1-based, skipping blank lines.

    ``source`` is a path or any iterable of strings. A missing or unreadable
    path raises ``OSError`` immediately.
    """
    if isinstance(source, (str, os.PathLike)):
        with open(Path(source), "r", encoding="utf-8") as fh:
            for i, line in enumerate(fh, start=1):
                if line.strip():
                    yield i, line
        return
    for i, line in enumerate(source, start=1):
        if line.strip():
            yield i, line
