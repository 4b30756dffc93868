"""Per-step execution traces and their on-disk form.

``export_trace`` writes ``trace_<id>.json`` plus one ``trace_<id>_t<t>.pgm``
plain graymap per step, holding the stack-top attention after that step.
"""
from __future__ import annotations

import json
import logging
import re
from pathlib import Path
from typing import List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

logger = logging.getLogger(__name__)

TRACE_VERSION = 1
TOP_WORDS = 3


class TraceStep(BaseModel):
    model_config = ConfigDict(extra="forbid")

    t: int = Field(ge=0)
    module_weights: List[float]
    argmax_module: str
    word_attention: List[float]
    top_words: List[str]
    stack_top_attention: List[List[float]]
    partial_answer_logits: Optional[List[float]] = None


class Trace(BaseModel):
    model_config = ConfigDict(extra="forbid")

    trace_version: Literal[1] = TRACE_VERSION
    example_id: str
    mode: str = "soft"
    tokens: List[str] = Field(default_factory=list)
    steps: List[TraceStep] = Field(default_factory=list)
    answer_distribution: Optional[List[float]] = None
    predicted_answer: Optional[str] = None
    bbox: Optional[Tuple[float, float, float, float]] = None


def top_words(scores: Sequence[float], words: Sequence[str], k: int = TOP_WORDS) -> List[str]:
    """Tokens with the ``k`` largest scores, ties broken by position."""
    order = sorted(range(len(scores)), key=lambda s: (-float(scores[s]), s))
    return [words[s] for s in order[:k]]


def _safe_id(example_id: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]", "_", example_id) or "example"


def heatmap_levels(attention: np.ndarray) -> np.ndarray:
    """Min-max scale to 0..255; a constant map is mid-gray."""
    a = np.asarray(attention, dtype=np.float64)
    lo, hi = float(a.min()), float(a.max())
    if hi - lo <= 0.0:
        return np.full(a.shape, 128, dtype=np.int64)
    return np.rint((a - lo) / (hi - lo) * 255.0).astype(np.int64)


def write_pgm(path: Path, levels: np.ndarray) -> None:
    h, w = levels.shape
    rows = "\n".join(" ".join(str(int(v)) for v in row) for row in levels)
    Path(path).write_text(f"P2\n{w} {h}\n255\n{rows}\n", encoding="ascii")


def read_pgm(path: Path) -> np.ndarray:
    fields = [tok for line in Path(path).read_text(encoding="ascii").splitlines()
              if not line.startswith("#") for tok in line.split()]
    if not fields or fields[0] != "P2":
        raise ValueError(f"{path}: not a plain graymap")
    w, h = int(fields[1]), int(fields[2])
    return np.array([int(v) for v in fields[4:4 + w * h]], dtype=np.int64).reshape(h, w)


def export_trace(trace: Trace, out_dir: Path) -> List[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = f"trace_{_safe_id(trace.example_id)}"
    written: List[Path] = []
    path = out_dir / f"{stem}.json"
    path.write_text(json.dumps(trace.model_dump(), indent=2) + "\n", encoding="utf-8")
    written.append(path)
    for step in trace.steps:
        pgm = out_dir / f"{stem}_t{step.t}.pgm"
        write_pgm(pgm, heatmap_levels(np.asarray(step.stack_top_attention)))
        written.append(pgm)
    logger.debug("wrote trace %s (%d files)", trace.example_id, len(written))
    return written


def read_trace(path: Path) -> Trace:
    return Trace.model_validate_json(Path(path).read_text(encoding="utf-8"))
