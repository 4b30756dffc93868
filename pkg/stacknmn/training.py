"""Losses, the training loop and evaluation metrics."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from . import tensor as T
from .config import ExecMode, RunConfig, TrainConfig
from .controller import layout_supervision_loss
from .dataset import answer_histogram
from .errors import TrainingError
from .executor import ExecutionResult, cell_of_point, encode_offsets, iou
from .gridworld import TaskRecord
from .model import StackNMN
from .modules import MODULE_INDEX
from .optim import Adam, clip_grad_norm
from .tensor import Tensor

logger = logging.getLogger(__name__)

METRICS_FILE = "metrics.jsonl"
CHECKPOINT_DIR = "checkpoints"
BEST_CHECKPOINT = "best.ckpt"


class Metrics(BaseModel):
    model_config = ConfigDict(extra="forbid")

    mode: str = "soft"
    vqa_examples: int = 0
    ref_examples: int = 0
    vqa_accuracy: Optional[float] = Field(None, ge=0.0, le=1.0)
    ref_grid_accuracy: Optional[float] = Field(None, ge=0.0, le=1.0)
    ref_iou_at_0_5: Optional[float] = Field(None, ge=0.0, le=1.0)
    mean_module_weight_entropy: float = Field(0.0, ge=0.0)
    loss: Optional[float] = None

    @property
    def score(self) -> float:
        parts = [v for v in (self.vqa_accuracy, self.ref_grid_accuracy) if v is not None]
        return float(np.mean(parts)) if parts else 0.0


class EpochRecord(BaseModel):
    model_config = ConfigDict(extra="forbid")

    epoch: int
    train_loss: float
    steps: int = 0
    clipped_steps: int = 0
    val: Optional[Metrics] = None


# -- losses ---------------------------------------------------------------
def vqa_loss(result: ExecutionResult, answer_id: int) -> Tensor:
    return T.log_softmax(result.answer_logits)[int(answer_id)] * -1.0


def ref_targets(record: TaskRecord, cell_size: float) -> Tuple[Tuple[int, int], np.ndarray]:
    """Grid cell holding the box centre and the box offsets relative to that cell."""
    x0, y0, x1, y1 = record.target_box  # type: ignore[misc]
    cell = cell_of_point((x0 + x1) / 2.0, (y0 + y1) / 2.0, cell_size, record.scene.grid)
    return cell, encode_offsets(record.target_box, cell, cell_size)  # type: ignore[arg-type]


def ref_loss(result: ExecutionResult, gt_cell: Tuple[int, int], gt_offsets: np.ndarray, bbox_weight: float = 0.1) -> Tensor:
    h, w = result.final_attention.shape
    index = gt_cell[0] * w + gt_cell[1]
    ce = T.log_softmax(result.final_attention.reshape(h * w))[index] * -1.0
    if result.offsets is None:
        return ce
    return ce + T.smooth_l1(result.offsets, gt_offsets) * bbox_weight


def example_loss(model: StackNMN, record: TaskRecord, train: TrainConfig, mode: ExecMode = "soft") -> Tuple[Tensor, ExecutionResult]:
    result = model.run(record, mode)
    if record.kind == "vqa":
        loss = vqa_loss(result, model.answer_id(record.answer))  # type: ignore[arg-type]
    else:
        cell, offsets = ref_targets(record, model.config.cell_size)
        loss = ref_loss(result, cell, offsets, train.bbox_loss_weight)
    if train.layout_supervision:
        expert = [MODULE_INDEX[m] for m in record.expert_modules]
        loss = loss + layout_supervision_loss(result.steps, expert) * train.layout_loss_weight
    return loss, result


# -- evaluation -----------------------------------------------------------
def evaluate(model: StackNMN, records: Sequence[TaskRecord], mode: ExecMode = "soft", *, train: Optional[TrainConfig] = None) -> Metrics:
    vqa_hits = ref_hits = iou_hits = 0
    n_vqa = n_ref = 0
    entropies: List[float] = []
    losses: List[float] = []
    train = train or TrainConfig()
    with T.no_grad():
        for record in records:
            loss, result = example_loss(model, record, train, mode)
            losses.append(loss.item())
            entropies.extend(result.entropies)
            if record.kind == "vqa":
                n_vqa += 1
                vqa_hits += int(model.predict_answer(result) == record.answer)
            else:
                n_ref += 1
                cell, _ = ref_targets(record, model.config.cell_size)
                ref_hits += int(result.anchor == cell)
                iou_hits += int(iou(result.bbox, record.target_box) >= 0.5)  # type: ignore[arg-type]
    return Metrics(
        mode=mode,
        vqa_examples=n_vqa,
        ref_examples=n_ref,
        vqa_accuracy=vqa_hits / n_vqa if n_vqa else None,
        ref_grid_accuracy=ref_hits / n_ref if n_ref else None,
        ref_iou_at_0_5=iou_hits / n_ref if n_ref else None,
        mean_module_weight_entropy=float(np.mean(entropies)) if entropies else 0.0,
        loss=float(np.mean(losses)) if losses else None,
    )


def majority_baseline(train_records: Sequence[TaskRecord], eval_records: Sequence[TaskRecord]) -> Optional[float]:
    """Accuracy of always answering the most common training answer."""
    counts = answer_histogram(train_records)
    targets = [r.answer for r in eval_records if r.kind == "vqa"]
    if not counts or not targets:
        return None
    top = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[0][0]
    return sum(a == top for a in targets) / len(targets)


# -- training -------------------------------------------------------------
def select_tasks(records: Sequence[TaskRecord], task_mix: str) -> List[TaskRecord]:
    if task_mix == "both":
        return list(records)
    return [r for r in records if r.kind == task_mix]


def schedule_batches(records: Sequence[TaskRecord], batch_size: int, rng: np.random.Generator) -> List[List[TaskRecord]]:
    """Shuffle each task separately, cut into batches and alternate tasks batch by batch."""
    per_task: List[List[List[TaskRecord]]] = []
    for kind in ("vqa", "ref"):
        pool = [r for r in records if r.kind == kind]
        if not pool:
            continue
        order = rng.permutation(len(pool))
        shuffled = [pool[int(i)] for i in order]
        per_task.append([shuffled[i:i + batch_size] for i in range(0, len(shuffled), batch_size)])
    batches: List[List[TaskRecord]] = []
    for i in range(max((len(b) for b in per_task), default=0)):
        for task_batches in per_task:
            if i < len(task_batches):
                batches.append(task_batches[i])
    return batches


@dataclass
class TrainResult:
    model: StackNMN
    history: List[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_metrics: Optional[Metrics] = None


def _abort(model: StackNMN, record: TaskRecord, loss: float) -> TrainingError:
    norms = model.params.norms()
    return TrainingError(
        f"non-finite loss {loss} on example {record.id}",
        diagnostics={"example_id": record.id, "loss": loss, "param_norms": norms},
    )


def train_epoch(model: StackNMN, optimizer: Adam, batches: Sequence[Sequence[TaskRecord]], train: TrainConfig) -> Tuple[float, int]:
    """One pass over ``batches``; returns the mean example loss and the number of clipped steps."""
    total, count, clipped = 0.0, 0, 0
    for batch in batches:
        model.params.zero_grad()
        scale = 1.0 / len(batch)
        for record in batch:
            loss, _ = example_loss(model, record, train)
            value = loss.item()
            if not math.isfinite(value):
                raise _abort(model, record, value)
            (loss * scale).backward()
            total += value
            count += 1
        grads = model.params.grads()
        if clip_grad_norm(grads, train.grad_clip) > train.grad_clip:
            clipped += 1
        optimizer.step(grads)
    return (total / count if count else 0.0), clipped


def probe_loss(model: StackNMN, records: Sequence[TaskRecord], train: TrainConfig) -> float:
    with T.no_grad():
        values = [example_loss(model, r, train)[0].item() for r in records[: train.probe_size]]
    return float(np.mean(values)) if values else 0.0


def train(
    config: RunConfig,
    train_records: Sequence[TaskRecord],
    val_records: Sequence[TaskRecord],
    vocab: Sequence[str],
    answers: Sequence[str],
    out_dir: Optional[Path] = None,
) -> TrainResult:
    """Train from scratch; returns the model restored to its best validation epoch.

    With ``out_dir`` set, writes one checkpoint per epoch, ``best.ckpt`` and
    one ``metrics.jsonl`` line per epoch (epoch 0 is the untrained probe).
    """
    tc = config.train
    model = StackNMN(config.model, vocab, answers, seed=tc.seed)
    optimizer = Adam(model.params, lr=tc.lr, beta1=tc.beta1, beta2=tc.beta2, eps=tc.eps)
    rng = np.random.default_rng(tc.seed)
    train_set = select_tasks(train_records, tc.task_mix)
    val_set = select_tasks(val_records, tc.task_mix)
    if not train_set:
        raise TrainingError(f"no training records for task mix {tc.task_mix!r}")

    metrics_path: Optional[Path] = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        (out_dir / CHECKPOINT_DIR).mkdir(parents=True, exist_ok=True)
        metrics_path = out_dir / METRICS_FILE
        metrics_path.write_text("", encoding="utf-8")

    result = TrainResult(model=model)

    def record_epoch(entry: EpochRecord) -> None:
        result.history.append(entry)
        if metrics_path is not None:
            with metrics_path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(entry.model_dump(), sort_keys=True) + "\n")

    initial = probe_loss(model, train_set, tc)
    record_epoch(EpochRecord(epoch=0, train_loss=initial))
    logger.info("epoch 0: probe loss %.4f on %d examples", initial, min(len(train_set), tc.probe_size))

    best_state: Optional[Dict[str, np.ndarray]] = None
    best_score = -math.inf
    for epoch in range(1, tc.epochs + 1):
        batches = schedule_batches(train_set, tc.batch_size, rng)
        loss, clipped = train_epoch(model, optimizer, batches, tc)
        val = evaluate(model, val_set, tc.eval_mode, train=tc) if val_set else None
        record_epoch(EpochRecord(epoch=epoch, train_loss=loss, steps=len(batches), clipped_steps=clipped, val=val))
        if clipped * 2 > len(batches):
            logger.warning("epoch %d: gradient clipping fired on %d of %d steps", epoch, clipped, len(batches))
        logger.info(
            "epoch %d: train loss %.4f | val vqa %s ref %s entropy %.4f",
            epoch, loss,
            _fmt(val.vqa_accuracy if val else None),
            _fmt(val.ref_grid_accuracy if val else None),
            val.mean_module_weight_entropy if val else float("nan"),
        )
        score = val.score if val is not None else -loss
        if score > best_score:
            best_score, best_state = score, model.params.state_dict()
            result.best_epoch, result.best_metrics = epoch, val
        if out_dir is not None:
            model.save(out_dir / CHECKPOINT_DIR / f"epoch_{epoch:03d}.ckpt", extra={"epoch": epoch})

    if best_state is not None:
        model.params.load_state_dict(best_state)
    if out_dir is not None:
        model.save(out_dir / BEST_CHECKPOINT, extra={"epoch": result.best_epoch})
    logger.info("best epoch %d", result.best_epoch)
    return result


def _fmt(value: Optional[float]) -> str:
    return "-" if value is None else f"{value:.3f}"
