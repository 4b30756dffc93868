"""Named-tensor archive.

Layout::

    STACKNMN-CHECKPOINT 1
    entries <n>
    <name> <d0,d1,...> <offset> <count>      (one line per tensor)
    meta <json>                               (optional)
    end
    <raw little-endian float64 payload>

Offsets and counts are in elements.  A scalar has the shape field ``-``.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple

import numpy as np

from .errors import CheckpointError

MAGIC = "STACKNMN-CHECKPOINT 1"
_LE_F8 = np.dtype("<f8")


def _shape_field(shape: Tuple[int, ...]) -> str:
    return ",".join(str(d) for d in shape) if shape else "-"


def _parse_shape(text: str) -> Tuple[int, ...]:
    if text == "-":
        return ()
    return tuple(int(d) for d in text.split(","))


def save_checkpoint(path: Path, tensors: Mapping[str, np.ndarray], meta: Optional[Dict[str, Any]] = None) -> Path:
    path = Path(path)
    lines = [MAGIC, f"entries {len(tensors)}"]
    chunks = []
    offset = 0
    for name, value in tensors.items():
        if not name or any(ch.isspace() for ch in name):
            raise CheckpointError(f"tensor name {name!r} must be non-empty without whitespace")
        arr = np.ascontiguousarray(value, dtype=_LE_F8)
        lines.append(f"{name} {_shape_field(arr.shape)} {offset} {arr.size}")
        chunks.append(arr.reshape(-1).tobytes())
        offset += arr.size
    if meta is not None:
        lines.append("meta " + json.dumps(meta, sort_keys=True, separators=(",", ":")))
    lines.append("end")
    header = ("\n".join(lines) + "\n").encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(header + b"".join(chunks))
    tmp.replace(path)
    return path


def load_checkpoint(path: Path) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    raw = Path(path).read_bytes()
    pos = 0
    header = []
    while True:
        nl = raw.find(b"\n", pos)
        if nl < 0:
            raise CheckpointError(f"{path}: truncated header")
        line = raw[pos:nl].decode("utf-8", errors="replace")
        pos = nl + 1
        header.append(line)
        if line == "end":
            break
        if len(header) == 1 and line != MAGIC:
            raise CheckpointError(f"{path}: not a stacknmn checkpoint")

    try:
        count = int(header[1].split()[1])
    except (IndexError, ValueError):
        raise CheckpointError(f"{path}: malformed entries line") from None
    if (len(raw) - pos) % _LE_F8.itemsize:
        raise CheckpointError(f"{path}: truncated payload")
    payload = np.frombuffer(raw[pos:], dtype=_LE_F8)
    tensors: Dict[str, np.ndarray] = {}
    meta: Dict[str, Any] = {}
    for line in header[2:-1]:
        if line.startswith("meta "):
            try:
                meta = json.loads(line[5:])
            except json.JSONDecodeError as exc:
                raise CheckpointError(f"{path}: bad meta line: {exc}") from exc
            continue
        try:
            name, shape_text, offset_text, size_text = line.split()
            shape = _parse_shape(shape_text)
            offset, size = int(offset_text), int(size_text)
        except ValueError:
            raise CheckpointError(f"{path}: malformed entry {line!r}") from None
        if offset + size > payload.size or int(np.prod(shape, dtype=np.int64)) != size:
            raise CheckpointError(f"{path}: entry {name!r} out of payload bounds")
        tensors[name] = payload[offset:offset + size].reshape(shape).astype(np.float64)
    if len(tensors) != count:
        raise CheckpointError(f"{path}: header lists {count} entries, found {len(tensors)}")
    return tensors, meta
