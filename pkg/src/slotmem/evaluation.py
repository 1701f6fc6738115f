"""Dialogue-level inference and every reported metric.

Inference carries the model's own predicted state from turn to turn unless
the previous-state toggle substitutes the gold one. The other two toggles
substitute gold operations (derived against whatever previous state the
pipeline is using) and gold update values; with both on, the pipeline
reproduces the gold state exactly, which pins the grid's reference cells.
"""

from __future__ import annotations

import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .corpus import Dialogue, Schema, TurnExample, build_examples
from .decoder import DecodeJob
from .encoder import PaddedBatch
from .encoding import encode_turn
from .model import Tracker
from .state import (
    DialogueState,
    GENERATING_OPS,
    Operation,
    apply_turn,
    derive_gold_operations,
    render_decoder_target,
    serialize_state,
)

__all__ = [
    "Toggles",
    "TurnPrediction",
    "MetricsReport",
    "run_inference",
    "joint_goal_accuracy",
    "slot_accuracy",
    "domain_specific_accuracy",
    "operation_f1",
    "efficiency_stats",
    "error_grid",
    "slot_value_vocabulary",
    "compute_metrics",
    "predictions_to_jsonl",
]


@dataclass(frozen=True)
class Toggles:
    """Ground-truth substitutions for error decomposition."""

    gt_prev_state: bool = False
    gt_operations: bool = False
    gt_values: bool = False


@dataclass
class TurnPrediction:
    dialogue_id: str
    turn_index: int
    operations: tuple[Operation, ...]  # what the pipeline applied
    generated_values: dict[int, tuple[str, ...]]
    predicted_state: DialogueState
    gold_state: DialogueState
    gold_operations: tuple[Operation, ...]  # derived from gold states
    decode_invocations: int
    latency_s: Optional[float] = None

    def to_json(self) -> dict:
        return {
            "dialogue_id": self.dialogue_id,
            "turn_index": self.turn_index,
            "operations": [op.value for op in self.operations],
            "gold_operations": [op.value for op in self.gold_operations],
            "generated_values": {str(self.predicted_state.slots[j]): " ".join(v)
                                 for j, v in sorted(self.generated_values.items())},
            "predicted_state": serialize_state(self.predicted_state),
            "gold_state": serialize_state(self.gold_state),
            "decode_invocations": self.decode_invocations,
            "latency_ms": None if self.latency_s is None else self.latency_s * 1e3,
        }


def _infer_chunk(
    dialogues: Sequence[Dialogue],
    model: Tracker,
    toggles: Toggles,
    max_len: int,
    measure_latency: bool,
) -> list[TurnPrediction]:
    """Run a group of dialogues in lockstep, one turn at a time."""
    vocab, schema, opset = model.vocab, model.schema, model.opset
    examples = {d.dialogue_id: build_examples([d], opset) for d in dialogues}
    states = {d.dialogue_id: DialogueState.initial(schema.slots) for d in dialogues}
    preds: dict[str, list[TurnPrediction]] = {d.dialogue_id: [] for d in dialogues}
    max_turns = max(len(d.turns) for d in dialogues)

    for t in range(1, max_turns + 1):
        active = [d for d in dialogues if len(d.turns) >= t]
        turn_examples: list[TurnExample] = [examples[d.dialogue_id][t - 1] for d in active]
        prev_states = [ex.prev_state if toggles.gt_prev_state else states[d.dialogue_id]
                       for d, ex in zip(active, turn_examples)]
        encoded = [encode_turn(ex, vocab, mode="eval", max_len=max_len, prev_state=ps)
                   for ex, ps in zip(turn_examples, prev_states)]
        padded = PaddedBatch.collate(encoded, vocab.pad_id)
        started = time.perf_counter() if measure_latency else None
        with ad.no_grad():
            enc_out = model.encoder.encode(padded)
            prediction = model.encoder.predict_operations(enc_out, opset)

        ops_used: list[list[Operation]] = []
        gold_targets: list[dict[int, tuple[str, ...]]] = []
        for i, (ex, prev) in enumerate(zip(turn_examples, prev_states)):
            if toggles.gt_operations:
                ops, values = derive_gold_operations(prev, ex.gold_state, opset)
                ops_used.append(ops)
                gold_targets.append(values)
            else:
                ops_used.append(prediction.operations[i])
                gold_targets.append({j: render_decoder_target(ex.gold_state.values[j])
                                     for j in range(schema.n_slots)})

        jobs: list[DecodeJob] = []
        for i, ops in enumerate(ops_used):
            jobs.extend(DecodeJob(i, j) for j, op in enumerate(ops) if op in GENERATING_OPS)
        values_used: list[dict[int, tuple[str, ...]]] = [{} for _ in active]
        if toggles.gt_values:
            for job in jobs:
                values_used[job.batch_index][job.slot_index] = \
                    gold_targets[job.batch_index][job.slot_index]
        elif jobs:
            with ad.no_grad():
                decoded = model.decoder.decode_greedy(enc_out, jobs)
            for job, ids in zip(jobs, decoded.token_ids):
                values_used[job.batch_index][job.slot_index] = \
                    tuple(vocab.token_of(k) for k in ids)
        elapsed = (time.perf_counter() - started) if measure_latency else None

        for i, (d, ex) in enumerate(zip(active, turn_examples)):
            prev = prev_states[i]
            new_state = apply_turn(prev, ops_used[i], values_used[i], strict=False)
            states[d.dialogue_id] = new_state
            count = sum(1 for op in ops_used[i] if op in GENERATING_OPS)
            preds[d.dialogue_id].append(TurnPrediction(
                dialogue_id=d.dialogue_id,
                turn_index=t,
                operations=tuple(ops_used[i]),
                generated_values=values_used[i],
                predicted_state=new_state,
                gold_state=ex.gold_state,
                gold_operations=ex.gold_ops,
                decode_invocations=count,
                latency_s=elapsed,
            ))
    return [p for d in dialogues for p in preds[d.dialogue_id]]


def run_inference(
    dialogues: Sequence[Dialogue],
    model: Tracker,
    *,
    toggles: Toggles = Toggles(),
    max_len: int = 256,
    batch_size: int = 32,
    measure_latency: bool = False,
    workers: int = 1,
) -> list[TurnPrediction]:
    """Track every dialogue turn by turn and record per-turn predictions."""
    if not dialogues:
        return []
    if measure_latency:
        batch_size, workers = 1, 1  # latency is defined at batch size one
    chunks = [dialogues[i:i + batch_size] for i in range(0, len(dialogues), batch_size)]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(
                lambda c: _infer_chunk(c, model, toggles, max_len, measure_latency), chunks))
    else:
        parts = [_infer_chunk(c, model, toggles, max_len, measure_latency) for c in chunks]
    return [p for part in parts for p in part]


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def joint_goal_accuracy(preds: Sequence[TurnPrediction]) -> float:
    """Fraction of turns whose whole predicted state matches the gold state."""
    if not preds:
        raise ValueError("no predictions")
    hits = sum(1 for p in preds if p.predicted_state == p.gold_state)
    return hits / len(preds)


def slot_accuracy(preds: Sequence[TurnPrediction]) -> float:
    if not preds:
        raise ValueError("no predictions")
    total = correct = 0
    for p in preds:
        for a, b in zip(p.predicted_state.values, p.gold_state.values):
            total += 1
            correct += a == b
    return correct / total


def domain_specific_accuracy(preds: Sequence[TurnPrediction],
                             schema: Schema) -> dict[str, dict[str, float]]:
    out = {}
    for domain in schema.domains:
        idx = schema.domain_slot_indices(domain)
        joint = np.mean([
            all(p.predicted_state.values[j] == p.gold_state.values[j] for j in idx)
            for p in preds])
        slot = np.mean([
            p.predicted_state.values[j] == p.gold_state.values[j]
            for p in preds for j in idx])
        out[domain] = {"joint_accuracy": float(joint), "slot_accuracy": float(slot)}
    return out


def operation_f1(preds: Sequence[TurnPrediction], opset) -> dict[str, dict]:
    """One-vs-rest precision/recall/F1 of applied vs gold operations."""
    out = {}
    for op in opset.members:
        tp = fp = fn = gold_n = 0
        for p in preds:
            for got, want in zip(p.operations, p.gold_operations):
                if want is op:
                    gold_n += 1
                if got is op and want is op:
                    tp += 1
                elif got is op:
                    fp += 1
                elif want is op:
                    fn += 1
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        out[op.value] = {"precision": precision, "recall": recall, "f1": f1,
                         "support": gold_n, "zero_support": gold_n == 0}
    return out


def efficiency_stats(preds: Sequence[TurnPrediction], n_slots: int) -> dict:
    """Update-set sizes, the complexity class, and measured latency."""
    counts = np.array([p.decode_invocations for p in preds])
    if counts.min() < 0 or counts.max() > n_slots:
        raise AssertionError("update counts escaped [0, J]")
    latencies = [p.latency_s for p in preds if p.latency_s is not None]
    return {
        "update_count_min": int(counts.min()),
        "update_count_avg": float(counts.mean()),
        "update_count_max": int(counts.max()),
        "itc_best_case": "Omega(1)",
        "itc_worst_case": "O(J)",
        "mean_latency_ms": float(np.mean(latencies) * 1e3) if latencies else None,
    }


def slot_value_vocabulary(dialogues: Sequence[Dialogue]) -> dict:
    """Distinct text values observed per slot (the M of the complexity report)."""
    seen: dict[str, set] = {}
    for d in dialogues:
        for t in d.turns:
            for slot, value in zip(t.gold_state.slots, t.gold_state.values):
                if value.is_text:
                    seen.setdefault(slot.canonical, set()).add(value.render())
    sizes = {k: len(v) for k, v in sorted(seen.items())}
    return {
        "per_slot": sizes,
        "max": max(sizes.values(), default=0),
        "avg": float(np.mean(list(sizes.values()))) if sizes else 0.0,
    }


_GRID_CELLS = (
    ("model_ops_model_values", False, False),
    ("model_ops_gold_values", False, True),
    ("gold_ops_model_values", True, False),
    ("gold_ops_gold_values", True, True),
)


def error_grid(dialogues: Sequence[Dialogue], model: Tracker, *,
               max_len: int = 256, batch_size: int = 32, workers: int = 1) -> dict:
    """Accuracy under all eight ground-truth substitution combinations.

    Within each previous-state block, the relative error rate scales each
    cell's error by the block's no-substitution error (that cell reads 100).
    """
    grid: dict[str, dict] = {}
    for block, gt_prev in (("predicted_prev_state", False), ("gold_prev_state", True)):
        cells = {}
        for cell, gt_ops, gt_vals in _GRID_CELLS:
            preds = run_inference(
                dialogues, model,
                toggles=Toggles(gt_prev_state=gt_prev, gt_operations=gt_ops,
                                gt_values=gt_vals),
                max_len=max_len, batch_size=batch_size, workers=workers)
            cells[cell] = {"joint_goal_accuracy": joint_goal_accuracy(preds)}
        base_error = 1.0 - cells["model_ops_model_values"]["joint_goal_accuracy"]
        for cell in cells.values():
            err = 1.0 - cell["joint_goal_accuracy"]
            cell["relative_error_rate"] = 100.0 * err / base_error if base_error > 0 else 0.0
        grid[block] = cells
    return grid


@dataclass
class MetricsReport:
    joint_goal_accuracy: float
    slot_accuracy: float
    per_domain: dict
    operation_f1: dict
    error_grid: Optional[dict]
    efficiency: dict
    slot_value_vocabulary: dict
    n_turns: int

    def to_json(self) -> dict:
        return asdict(self)


def compute_metrics(
    preds: Sequence[TurnPrediction],
    model: Tracker,
    dialogues: Sequence[Dialogue],
    *,
    grid: Optional[dict] = None,
) -> MetricsReport:
    return MetricsReport(
        joint_goal_accuracy=joint_goal_accuracy(preds),
        slot_accuracy=slot_accuracy(preds),
        per_domain=domain_specific_accuracy(preds, model.schema),
        operation_f1=operation_f1(preds, model.opset),
        error_grid=grid,
        efficiency=efficiency_stats(preds, model.schema.n_slots),
        slot_value_vocabulary=slot_value_vocabulary(dialogues),
        n_turns=len(preds),
    )


def predictions_to_jsonl(preds: Sequence[TurnPrediction]) -> str:
    return "\n".join(json.dumps(p.to_json(), sort_keys=True) for p in preds) + "\n"
