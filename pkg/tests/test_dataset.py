from __future__ import annotations

import json

import pytest

from stacknmn.dataset import (
    ANSWERS_FILE,
    SPLITS,
    STATS_FILE,
    VOCAB_FILE,
    answer_histogram,
    generate_dataset,
    load_split,
    read_dataset,
    read_words,
    write_dataset,
    write_words,
)
from stacknmn.errors import DatasetParseError
from stacknmn.gridworld import build_vocabulary


def test_write_then_read_preserves_records(tmp_path, small_corpus):
    path = tmp_path / "train.jsonl"
    assert write_dataset(path, small_corpus) == len(small_corpus)
    assert load_split(path) == small_corpus
    assert path.read_text(encoding="utf-8").count("\n") == len(small_corpus)


def test_empty_file_yields_nothing(tmp_path):
    path = tmp_path / "empty.jsonl"
    path.write_text("", encoding="utf-8")
    assert list(read_dataset(path)) == []


def test_blank_lines_are_skipped(tmp_path, small_corpus):
    path = tmp_path / "gaps.jsonl"
    path.write_text("\n" + small_corpus[0].model_dump_json() + "\n\n", encoding="utf-8")
    assert load_split(path) == small_corpus[:1]


def test_truncated_line_reports_line_number(tmp_path, small_corpus):
    path = tmp_path / "bad.jsonl"
    good = small_corpus[0].model_dump_json()
    path.write_text(good + "\n" + good[: len(good) // 2] + "\n", encoding="utf-8")
    with pytest.raises(DatasetParseError) as excinfo:
        load_split(path)
    assert excinfo.value.line_number == 2
    assert "line 2" in str(excinfo.value)


def test_invalid_utf8_reports_line_number(tmp_path, small_corpus):
    path = tmp_path / "binary.jsonl"
    path.write_bytes(small_corpus[0].model_dump_json().encode("utf-8") + b"\n\xff\xfe{}\n")
    with pytest.raises(DatasetParseError) as excinfo:
        load_split(path)
    assert excinfo.value.line_number == 2
    assert "UTF-8" in str(excinfo.value)

    words = tmp_path / "vocab.txt"
    words.write_bytes(b"red\n\xff\n")
    with pytest.raises(DatasetParseError):
        read_words(words)


def test_unknown_field_is_rejected(tmp_path, small_corpus):
    data = json.loads(small_corpus[0].model_dump_json())
    data["extra"] = 1
    path = tmp_path / "extra.jsonl"
    path.write_text(json.dumps(data) + "\n", encoding="utf-8")
    with pytest.raises(DatasetParseError):
        load_split(path)


def test_words_round_trip(tmp_path):
    path = tmp_path / VOCAB_FILE
    write_words(path, build_vocabulary())
    assert read_words(path) == build_vocabulary()


def test_generate_dataset_writes_every_file(tmp_path, tiny_data_config):
    stats = generate_dataset(tmp_path, tiny_data_config)
    for split in SPLITS:
        assert (tmp_path / f"{split}.jsonl").is_file()
    assert len(load_split(tmp_path / "train.jsonl")) == 2 * tiny_data_config.train_size
    assert len(load_split(tmp_path / "val.jsonl")) == 2 * tiny_data_config.val_size
    assert read_words(tmp_path / ANSWERS_FILE)[:2] == ["yes", "no"]
    on_disk = json.loads((tmp_path / STATS_FILE).read_text(encoding="utf-8"))
    assert on_disk == json.loads(json.dumps(stats))
    assert on_disk["splits"]["test"]["records"] == 2 * tiny_data_config.test_size


def test_splits_differ(tmp_path, tiny_data_config):
    generate_dataset(tmp_path, tiny_data_config, tasks=("vqa",))
    train = load_split(tmp_path / "train.jsonl")
    val = load_split(tmp_path / "val.jsonl")
    assert all(r.kind == "vqa" for r in train)
    assert [r.tokens for r in train[: len(val)]] != [r.tokens for r in val]


def test_answer_histogram(small_corpus):
    counts = answer_histogram(small_corpus)
    assert sum(counts.values()) == sum(r.kind == "vqa" for r in small_corpus)
