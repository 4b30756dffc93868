from __future__ import annotations

import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExecMode, ExecutionConfig, ModelConfig
from .controller import init_controller
from .errors import CheckpointError, VocabularyError
from .executor import ExecutionResult, execute, init_bbox_head
from .gridworld import TaskRecord, render_features
from .modules import init_modules
from .nn import ParameterStore

logger = logging.getLogger(__name__)


class StackNMN:
    """Parameters, vocabularies and configuration of one trained or fresh model."""

    def __init__(self, config: ModelConfig, vocab: Sequence[str], answers: Sequence[str], *, seed: int = 0) -> None:
        self.config = config
        self.vocab = list(vocab)
        self.answers = list(answers)
        self.word_index: Dict[str, int] = {w: i for i, w in enumerate(self.vocab)}
        self.answer_index: Dict[str, int] = {a: i for i, a in enumerate(self.answers)}
        self.params = ParameterStore(seed)
        init_controller(self.params, len(self.vocab), config)
        init_modules(self.params, config.feature_dim, config.hidden, len(self.answers), config.conv_kernel)
        init_bbox_head(self.params, config.feature_dim)

    def token_ids(self, tokens: Sequence[str]) -> List[int]:
        missing = [t for t in tokens if t not in self.word_index]
        if missing:
            raise VocabularyError(f"unknown tokens {missing}")
        return [self.word_index[t] for t in tokens]

    def answer_id(self, answer: str) -> int:
        try:
            return self.answer_index[answer]
        except KeyError:
            raise VocabularyError(f"answer {answer!r} not in the answer vocabulary") from None

    def execution_config(self, mode: ExecMode = "soft", task: str = "both", **overrides: Any) -> ExecutionConfig:
        return ExecutionConfig.from_model(self.config, mode=mode, task=task, **overrides)

    def run(
        self,
        record: TaskRecord,
        mode: ExecMode = "soft",
        *,
        forced_layout: Optional[Sequence] = None,
        record_trace: bool = False,
        **overrides: Any,
    ) -> ExecutionResult:
        config = self.execution_config(mode, record.kind, **overrides)
        result = execute(
            self.token_ids(record.tokens),
            render_features(record.scene),
            self.params,
            config,
            forced_layout=forced_layout,
            words=record.tokens,
            example_id=record.id,
            record_trace=record_trace,
        )
        if result.trace is not None and record.kind == "vqa":
            result.trace.predicted_answer = self.predict_answer(result)
        return result

    def predict_answer(self, result: ExecutionResult) -> str:
        return self.answers[int(np.argmax(result.answer_logits.data))]

    def save(self, path: Path, extra: Optional[Dict[str, Any]] = None) -> Path:
        meta = {"model": self.config.model_dump(), "vocab": self.vocab, "answers": self.answers}
        if extra:
            meta["extra"] = extra
        return save_checkpoint(path, self.params.state_dict(), meta)

    @classmethod
    def from_checkpoint(cls, path: Path) -> "StackNMN":
        tensors, meta = load_checkpoint(path)
        try:
            config = ModelConfig(**meta["model"])
            model = cls(config, meta["vocab"], meta["answers"])
        except (KeyError, TypeError, ValueError) as exc:
            raise CheckpointError(f"{path}: checkpoint metadata is unusable: {exc}") from exc
        try:
            model.params.load_state_dict(tensors)
        except (KeyError, ValueError) as exc:
            raise CheckpointError(f"{path}: {exc}") from exc
        logger.debug("loaded %d tensors from %s", len(tensors), path)
        return model
