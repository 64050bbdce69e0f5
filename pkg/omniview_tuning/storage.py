import csv
import json
from collections.abc import Iterable, Iterator, Mapping, Sequence
from pathlib import Path
from typing import Any

import numpy as np
from numpy.typing import NDArray

from omniview_tuning.services.exceptions import CheckpointError, DatasetFormatError


CHECKPOINT_MAGIC = "ovt-checkpoint"
CHECKPOINT_VERSION = 1


def write_jsonl(path: Path, rows: Iterable[Mapping[str, Any]]) -> int:
    count = 0
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for row in rows:
            f.write(json.dumps(row, ensure_ascii=False, allow_nan=False))
            f.write("\n")
            count += 1
    return count


def read_jsonl(path: Path) -> Iterator[tuple[int, dict]]:
    """Yields (1-based line number, decoded object) pairs."""
    with open(path, encoding="utf-8") as f:
        for line_number, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as e:
                raise DatasetFormatError(line_number, f"invalid JSON ({e.msg})") from e
            if not isinstance(row, dict):
                raise DatasetFormatError(line_number, "expected a JSON object")
            yield line_number, row


def write_csv(
    path: Path, columns: Sequence[str], rows: Iterable[Mapping[str, Any]]
) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(columns), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({column: _csv_value(row.get(column)) for column in columns})


def write_json(path: Path, payload: Mapping[str, Any]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def write_checkpoint(
    path: Path, header: Mapping[str, Any], arrays: Mapping[str, NDArray[np.float64]]
) -> None:
    """One JSON header line, then raw little-endian float64 arrays in header order."""
    full_header = {
        "format": CHECKPOINT_MAGIC,
        "version": CHECKPOINT_VERSION,
        **header,
        "parameters": [
            {"name": name, "shape": list(np.shape(value))} for name, value in arrays.items()
        ],
    }
    with open(path, "wb") as f:
        f.write(json.dumps(full_header, sort_keys=True).encode("utf-8"))
        f.write(b"\n")
        for value in arrays.values():
            f.write(np.ascontiguousarray(value, dtype="<f8").tobytes())


def read_checkpoint(path: Path) -> tuple[dict, dict[str, NDArray[np.float64]]]:
    if not Path(path).is_file():
        raise CheckpointError(f"checkpoint {path} does not exist")
    raw = Path(path).read_bytes()
    header_end = raw.find(b"\n")
    if header_end < 0:
        raise CheckpointError(f"{path} is not a checkpoint file")
    try:
        header = json.loads(raw[:header_end])
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise CheckpointError(f"checkpoint {path} has a corrupt header") from e
    if not isinstance(header, dict) or header.get("format") != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint file")

    arrays = {}
    offset = header_end + 1
    for spec in header["parameters"]:
        shape = tuple(spec["shape"])
        size = int(np.prod(shape, dtype=np.int64)) * 8
        if offset + size > len(raw):
            raise CheckpointError(f"checkpoint {path} is truncated at {spec['name']}")
        arrays[spec["name"]] = (
            np.frombuffer(raw, dtype="<f8", count=size // 8, offset=offset)
            .astype(np.float64)
            .reshape(shape)
        )
        offset += size
    if offset != len(raw):
        raise CheckpointError(f"checkpoint {path} has {len(raw) - offset} trailing bytes")
    return header, arrays


def _csv_value(value: Any) -> Any:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return value
