from __future__ import annotations

from typing import List

import numpy as np
import pytest

from stacknmn.config import DataConfig, ModelConfig
from stacknmn.gridworld import (
    SceneObject,
    SceneRecord,
    TaskRecord,
    build_answer_vocabulary,
    build_vocabulary,
    generate_split,
)
from stacknmn.model import StackNMN


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_model_config() -> ModelConfig:
    return ModelConfig(hidden=8, steps=6)


@pytest.fixture
def tiny_data_config() -> DataConfig:
    return DataConfig(grid=4, min_objects=2, max_objects=6, train_size=14, val_size=7, test_size=7, seed=7)


@pytest.fixture
def small_corpus(tiny_data_config: DataConfig) -> List[TaskRecord]:
    records, _ = generate_split("train", 14, tiny_data_config, steps=6)
    return records


@pytest.fixture
def tiny_model(tiny_model_config: ModelConfig, tiny_data_config: DataConfig) -> StackNMN:
    return StackNMN(tiny_model_config, build_vocabulary(), build_answer_vocabulary(tiny_data_config.max_objects), seed=3)


def make_scene(*objects: tuple, grid: int = 5, cell: float = 32.0) -> SceneRecord:
    """Scene from ``(row, col, color, shape, size)`` tuples with centred boxes."""
    built = []
    for row, col, color, shape, size in objects:
        half = (0.2 if size == "small" else 0.35) * cell
        cx, cy = (col + 0.5) * cell, (row + 0.5) * cell
        built.append(SceneObject(row=row, col=col, color=color, shape=shape, size=size,
                                 box=(cx - half, cy - half, cx + half, cy + half)))
    return SceneRecord(grid=grid, cell_size=cell, objects=built)


@pytest.fixture
def scene_factory():
    return make_scene
