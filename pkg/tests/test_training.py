from __future__ import annotations

import json
import logging
import math

import numpy as np
import pytest

from stacknmn import tensor as T
from stacknmn import training
from stacknmn.config import ModelConfig, RunConfig, TrainConfig
from stacknmn.errors import RetrySignal, TrainingError
from stacknmn.executor import ExecutionResult, init_stack
from stacknmn.gridworld import build_answer_vocabulary, build_vocabulary, generate_scene, generate_task
from stacknmn.model import StackNMN
from stacknmn.optim import Adam
from stacknmn.training import (
    BEST_CHECKPOINT,
    CHECKPOINT_DIR,
    METRICS_FILE,
    Metrics,
    evaluate,
    example_loss,
    majority_baseline,
    ref_loss,
    ref_targets,
    schedule_batches,
    select_tasks,
    train,
    vqa_loss,
)


def _result(answers: int = 4, grid: int = 5, offsets=None) -> ExecutionResult:
    return ExecutionResult(
        answer_logits=T.zeros(answers),
        final_attention=T.zeros((grid, grid)),
        steps=[],
        executed_weights=[],
        final_stack=init_stack(grid, grid, 3),
        offsets=offsets,
    )


def _family_records(families, n, seed, *, grid=3, steps=3):
    """``n`` records drawn from ``families`` on small grids, skipping draws that do not apply."""
    rng = np.random.default_rng(seed)
    records = []
    while len(records) < n:
        family = families[len(records) % len(families)]
        scene = generate_scene(grid, int(rng.integers(2, 6)), rng)
        try:
            records.append(generate_task(scene, family, rng, steps=steps, task_id=f"{family}-{len(records)}"))
        except RetrySignal:
            continue
    return records


def test_vqa_loss_uniform_logits():
    assert vqa_loss(_result(answers=4), 2).item() == pytest.approx(math.log(4))


def test_ref_loss_uniform_attention_is_log_cell_count():
    loss = ref_loss(_result(grid=5), (2, 3), np.zeros(4))
    assert loss.item() == pytest.approx(math.log(25))


def test_ref_loss_adds_weighted_box_term():
    result = _result(grid=5, offsets=T.constant([0.5, 0.0, 0.0, 0.0]))
    loss = ref_loss(result, (0, 0), np.zeros(4), bbox_weight=0.1)
    assert loss.item() == pytest.approx(math.log(25) + 0.1 * 0.125)


def test_ref_targets_use_box_centre_cell(small_corpus):
    record = next(r for r in small_corpus if r.kind == "ref")
    cell, offsets = ref_targets(record, 32.0)
    assert cell == record.target_cell
    assert abs(offsets[0]) <= 0.1 + 1e-9 and abs(offsets[1]) <= 0.1 + 1e-9


def test_example_loss_with_layout_supervision(tiny_model, small_corpus):
    record = next(r for r in small_corpus if r.kind == "vqa")
    plain, _ = example_loss(tiny_model, record, TrainConfig())
    supervised, _ = example_loss(tiny_model, record, TrainConfig(layout_supervision=True))
    assert supervised.item() > plain.item()
    assert math.isfinite(supervised.item())


def test_select_and_schedule(small_corpus, rng):
    assert all(r.kind == "ref" for r in select_tasks(small_corpus, "ref"))
    assert len(select_tasks(small_corpus, "both")) == len(small_corpus)
    batches = schedule_batches(small_corpus, 4, rng)
    kinds = [b[0].kind for b in batches]
    assert kinds[:4] == ["vqa", "ref", "vqa", "ref"]
    assert all(len({r.kind for r in b}) == 1 for b in batches)
    assert sorted(r.id for b in batches for r in b) == sorted(r.id for r in small_corpus)


def test_evaluate_counts_and_ranges(tiny_model, small_corpus):
    metrics = evaluate(tiny_model, small_corpus, "soft")
    assert metrics.vqa_examples == sum(r.kind == "vqa" for r in small_corpus)
    assert metrics.ref_examples == sum(r.kind == "ref" for r in small_corpus)
    for value in (metrics.vqa_accuracy, metrics.ref_grid_accuracy, metrics.ref_iou_at_0_5):
        assert 0.0 <= value <= 1.0
    assert 0.0 <= metrics.mean_module_weight_entropy <= math.log(9) + 1e-9
    hard = evaluate(tiny_model, small_corpus, "discretized")
    assert hard.mode == "discretized"


def test_evaluate_leaves_no_gradients(tiny_model, small_corpus):
    evaluate(tiny_model, small_corpus[:3])
    assert all(p.grad is None for _, p in tiny_model.params.items())


def test_metrics_score():
    assert Metrics(vqa_accuracy=0.5, ref_grid_accuracy=1.0).score == 0.75
    assert Metrics(vqa_accuracy=0.4).score == 0.4
    assert Metrics().score == 0.0


def test_majority_baseline(small_corpus):
    vqa = [r for r in small_corpus if r.kind == "vqa"]
    rate = majority_baseline(vqa, vqa)
    assert 0.0 < rate <= 1.0
    assert majority_baseline([], vqa) is None


def test_train_writes_metrics_and_checkpoints(tmp_path, tiny_model_config, small_corpus, tiny_data_config):
    config = RunConfig(model=tiny_model_config, train=TrainConfig(epochs=2, batch_size=5, lr=1e-3, probe_size=8))
    result = train(config, small_corpus, small_corpus[:6], build_vocabulary(),
                   build_answer_vocabulary(tiny_data_config.max_objects), tmp_path)
    lines = [json.loads(line) for line in (tmp_path / METRICS_FILE).read_text(encoding="utf-8").splitlines()]
    assert [entry["epoch"] for entry in lines] == [0, 1, 2]
    assert lines[0]["val"] is None
    assert lines[1]["val"]["mode"] == "soft"
    assert (tmp_path / CHECKPOINT_DIR / "epoch_001.ckpt").is_file()
    assert (tmp_path / CHECKPOINT_DIR / "epoch_002.ckpt").is_file()
    assert (tmp_path / BEST_CHECKPOINT).is_file()
    assert result.best_epoch in (1, 2)
    restored = StackNMN.from_checkpoint(tmp_path / BEST_CHECKPOINT)
    for name, value in result.model.params.state_dict().items():
        np.testing.assert_array_equal(restored.params[name].data, value)


def test_training_is_deterministic(tiny_model_config, small_corpus, tiny_data_config):
    config = RunConfig(model=tiny_model_config, train=TrainConfig(epochs=1, batch_size=7, lr=1e-3, probe_size=4))
    answers = build_answer_vocabulary(tiny_data_config.max_objects)
    a = train(config, small_corpus, [], build_vocabulary(), answers)
    b = train(config, small_corpus, [], build_vocabulary(), answers)
    assert a.history[-1].train_loss == b.history[-1].train_loss


def test_empty_task_selection_is_an_error(tiny_model_config, small_corpus):
    vqa_only = [r for r in small_corpus if r.kind == "vqa"]
    config = RunConfig(model=tiny_model_config, train=TrainConfig(epochs=1, task_mix="ref"))
    with pytest.raises(TrainingError):
        train(config, vqa_only, [], build_vocabulary(), build_answer_vocabulary(6))


def test_non_finite_loss_aborts_with_diagnostics(monkeypatch, tiny_model_config, small_corpus):
    def broken(model, record, train_config, mode="soft"):
        return T.Tensor(np.array(np.nan), requires_grad=True), None

    monkeypatch.setattr(training, "example_loss", broken)
    config = RunConfig(model=tiny_model_config, train=TrainConfig(epochs=1, batch_size=4, probe_size=1))
    with pytest.raises(TrainingError) as excinfo:
        train(config, small_corpus, [], build_vocabulary(), build_answer_vocabulary(6))
    diagnostics = excinfo.value.diagnostics
    assert diagnostics["example_id"] in {r.id for r in small_corpus}
    assert "find/conv1_w" in diagnostics["param_norms"]


def test_heavy_clipping_is_logged(caplog, tiny_model_config, small_corpus):
    config = RunConfig(model=tiny_model_config, train=TrainConfig(epochs=1, batch_size=7, grad_clip=1e-9, probe_size=2))
    with caplog.at_level(logging.WARNING, logger="stacknmn.training"):
        result = train(config, small_corpus, [], build_vocabulary(), build_answer_vocabulary(6))
    assert result.history[-1].clipped_steps == result.history[-1].steps
    assert any("clipping" in rec.getMessage() for rec in caplog.records)


@pytest.mark.slow
def test_training_lowers_the_loss():
    records = _family_records(("exist", "query_attr"), 40, seed=5)
    config = RunConfig(
        model=ModelConfig(hidden=16, steps=3),
        train=TrainConfig(epochs=15, batch_size=4, lr=3e-3, probe_size=64, task_mix="vqa"),
    )
    result = train(config, records, [], build_vocabulary(), build_answer_vocabulary(5))
    assert result.history[-1].train_loss < 0.8 * result.history[0].train_loss


@pytest.mark.slow
def test_forced_find_answer_attends_to_the_red_object(scene_factory):
    """After training on Find/Answer programs the Find map peaks at the only red object."""
    records = _family_records(("exist",), 60, seed=9)
    config = RunConfig(
        model=ModelConfig(hidden=16, steps=3),
        train=TrainConfig(epochs=20, batch_size=4, lr=3e-3, layout_supervision=True, task_mix="vqa"),
    )
    model = train(config, records, [], build_vocabulary(), build_answer_vocabulary(5)).model

    query = records[0].model_copy(update={
        "tokens": ["is", "there", "a", "red", "thing"],
        "scene": scene_factory(
            (0, 0, "blue", "circle", "small"),
            (1, 2, "red", "square", "large"),
            (2, 1, "green", "triangle", "small"),
            grid=3,
        ),
    })
    result = model.run(query, "soft", forced_layout=["Find", "Answer"], record_trace=True)
    first = np.asarray(result.trace.steps[0].stack_top_attention)
    assert np.unravel_index(int(np.argmax(first)), first.shape) == (1, 2)


def test_zero_learning_rate_leaves_parameters_unchanged(tiny_model_config, small_corpus):
    config = RunConfig(model=tiny_model_config, train=TrainConfig(epochs=1, batch_size=7, lr=0.0, probe_size=2, seed=4))
    vocab, answers = build_vocabulary(), build_answer_vocabulary(6)
    untouched = StackNMN(tiny_model_config, vocab, answers, seed=4)
    result = train(config, small_corpus, [], vocab, answers)
    assert result.history[-1].steps > 0
    for name, value in untouched.params.state_dict().items():
        np.testing.assert_array_equal(result.model.params[name].data, value)


def test_checkpoint_reproduces_metrics(tmp_path, tiny_model, small_corpus):
    restored = StackNMN.from_checkpoint(tiny_model.save(tmp_path / "m.ckpt"))
    for mode in ("soft", "discretized"):
        assert evaluate(restored, small_corpus, mode) == evaluate(tiny_model, small_corpus, mode)


@pytest.mark.slow
def test_single_example_can_be_overfit():
    record = _family_records(("query_attr",), 1, seed=11)[0]
    model = StackNMN(ModelConfig(hidden=16, steps=3), build_vocabulary(), build_answer_vocabulary(5), seed=2)
    optimizer = Adam(model.params, lr=1e-2)
    losses = []
    for _ in range(500):
        model.params.zero_grad()
        loss, _ = example_loss(model, record, TrainConfig())
        losses.append(loss.item())
        if losses[-1] < 0.01:
            break
        loss.backward()
        optimizer.step(model.params.grads())
    assert min(losses) < 0.01


@pytest.fixture(scope="module")
def supervised_and_free_runs():
    """Matched-seed runs with and without layout supervision on a 3x3 grid."""
    families = ("exist", "query_attr", "count")
    train_set = _family_records(families, 150, seed=21)
    val_set = _family_records(families, 60, seed=22)
    runs = {}
    for supervised in (True, False):
        config = RunConfig(
            model=ModelConfig(hidden=16, steps=3),
            train=TrainConfig(epochs=25, batch_size=8, lr=3e-3, layout_supervision=supervised,
                              task_mix="vqa", probe_size=32, seed=5),
        )
        runs[supervised] = train(config, train_set, val_set, build_vocabulary(), build_answer_vocabulary(5)).model
    return runs, train_set, val_set


@pytest.mark.slow
def test_layout_supervision_lowers_module_entropy(supervised_and_free_runs):
    runs, _, val_set = supervised_and_free_runs
    supervised = evaluate(runs[True], val_set).mean_module_weight_entropy
    free = evaluate(runs[False], val_set).mean_module_weight_entropy
    assert supervised < 0.01
    assert supervised < free


@pytest.mark.slow
def test_discretization_gap_is_small_once_weights_are_confident(supervised_and_free_runs):
    runs, _, val_set = supervised_and_free_runs
    soft = evaluate(runs[True], val_set, "soft")
    hard = evaluate(runs[True], val_set, "discretized")
    assert soft.mean_module_weight_entropy < 0.1
    assert abs(soft.vqa_accuracy - hard.vqa_accuracy) <= 0.05


@pytest.mark.slow
def test_trained_runs_beat_the_majority_baseline(supervised_and_free_runs):
    runs, train_set, val_set = supervised_and_free_runs
    baseline = majority_baseline(train_set, val_set)
    supervised = evaluate(runs[True], val_set).vqa_accuracy
    free = evaluate(runs[False], val_set).vqa_accuracy
    assert supervised >= baseline + 0.25
    assert free >= baseline + 0.25
    assert supervised >= free
