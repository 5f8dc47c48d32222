"""
Line-delimited JSON records for reports and per-layer logs.
"""

import json
from pathlib import Path
from typing import Any, Iterable, Optional, TextIO, Union

import numpy as np
import pint


class PowerEncoder(json.JSONEncoder):
    """Special json encoder for additional types like numpy, pint..."""

    def default(self, o: Any) -> Any:
        if isinstance(o, np.integer):
            return int(o)
        elif isinstance(o, np.floating):
            return float(o)
        elif isinstance(o, np.bool_):
            return bool(o)
        elif isinstance(o, np.ndarray):
            return o.tolist()
        elif isinstance(o, pint.Quantity):
            return f"{o:~}"  # abbreviated units with '~'
        elif isinstance(o, Path):
            return o.as_posix()
        return super().default(o)


def dumps(record: dict[str, Any]) -> str:
    """Serialize a record to a single line with sorted keys."""
    return json.dumps(record, cls=PowerEncoder, sort_keys=True, separators=(",", ":"))


class RecordWriter:
    """Write records as JSON lines, to a file path or an open text stream."""

    def __init__(self, target: Union[str, Path, TextIO, None] = None) -> None:
        self._own_file = isinstance(target, (str, Path))
        self._stream: Optional[TextIO]
        if isinstance(target, (str, Path)):
            self._stream = Path(target).open("w", encoding="utf-8", newline="\n")
        else:
            self._stream = target
        self.records: list[dict[str, Any]] = []

    def write(self, record: dict[str, Any]) -> None:
        self.records.append(record)
        if self._stream is not None:
            self._stream.write(dumps(record) + "\n")

    def write_all(self, records: Iterable[dict[str, Any]]) -> None:
        for record in records:
            self.write(record)

    def close(self) -> None:
        if self._own_file and self._stream is not None:
            self._stream.close()
        self._stream = None

    def __enter__(self) -> "RecordWriter":
        return self

    def __exit__(self, *args) -> None:
        self.close()


def read_records(path: Union[str, Path]) -> list[dict[str, Any]]:
    """Read a JSON lines file, skipping empty lines."""
    with Path(path).open("r", encoding="utf-8") as file:
        return [json.loads(line) for line in file if line.strip()]
