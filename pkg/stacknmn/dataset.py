"""Dataset files: one JSON task record per line plus vocabulary files."""
from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Mapping, Sequence

from pydantic import ValidationError

from .config import DataConfig
from .errors import DatasetParseError
from .gridworld import SplitStats, TaskRecord, build_answer_vocabulary, build_vocabulary, generate_split

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
VOCAB_FILE = "vocab.txt"
ANSWERS_FILE = "answers.txt"
STATS_FILE = "dataset_stats.json"


def write_dataset(path: Path, records: Iterable[TaskRecord]) -> int:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n = 0
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for record in records:
            fh.write(record.model_dump_json())
            fh.write("\n")
            n += 1
    return n


def read_dataset(path: Path) -> Iterator[TaskRecord]:
    with Path(path).open("rb") as fh:
        for lineno, raw in enumerate(fh, start=1):
            try:
                line = raw.decode("utf-8")
                if not line.strip():
                    continue
                record = TaskRecord.model_validate_json(line)
            except UnicodeDecodeError as exc:
                raise DatasetParseError(f"invalid UTF-8 at byte {exc.start}", line_number=lineno) from exc
            except ValidationError as exc:
                first = exc.errors()[0]
                where = ".".join(str(p) for p in first.get("loc", ())) or "record"
                raise DatasetParseError(f"{where}: {first.get('msg')}", line_number=lineno) from exc
            yield record


def load_split(path: Path) -> List[TaskRecord]:
    return list(read_dataset(path))


def write_words(path: Path, words: Sequence[str]) -> None:
    Path(path).write_text("".join(f"{w}\n" for w in words), encoding="utf-8")


def read_words(path: Path) -> List[str]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise DatasetParseError(f"{path}: invalid UTF-8 at byte {exc.start}") from exc
    return [line.strip() for line in text.splitlines() if line.strip()]


def generate_dataset(out_dir: Path, data: DataConfig, *, steps: int = 6, tasks: Sequence[str] = ("vqa", "ref")) -> Dict[str, object]:
    """Generate every split into ``out_dir``; returns the statistics written to ``dataset_stats.json``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    sizes = {"train": data.train_size, "val": data.val_size, "test": data.test_size}
    stats: Dict[str, object] = {"seed": data.seed, "grid": data.grid, "steps": steps, "splits": {}}
    for index, split in enumerate(SPLITS):
        records, split_stats = generate_split(split, sizes[split], data, steps=steps, split_index=index, tasks=tasks)
        write_dataset(out_dir / f"{split}.jsonl", records)
        stats["splits"][split] = split_stats.to_dict()  # type: ignore[index]
        logger.info("%s: %d records (%d retried, %d over the majority cap)",
                    split, split_stats.records, split_stats.rejected_retry, split_stats.rejected_majority)
    write_words(out_dir / VOCAB_FILE, build_vocabulary())
    write_words(out_dir / ANSWERS_FILE, build_answer_vocabulary(data.max_objects))
    (out_dir / STATS_FILE).write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return stats


def answer_histogram(records: Iterable[TaskRecord]) -> Mapping[str, int]:
    counts: Dict[str, int] = {}
    for r in records:
        if r.answer is not None:
            counts[r.answer] = counts.get(r.answer, 0) + 1
    return counts


__all__ = [
    "SPLITS",
    "SplitStats",
    "generate_dataset",
    "load_split",
    "read_dataset",
    "read_words",
    "write_dataset",
    "write_words",
]
