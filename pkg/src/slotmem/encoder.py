"""Turn encoder and the classification heads on top of it.

The encoder sums token, segment, and position embeddings, runs a
transformer stack, and exposes three readouts: the hidden sequence, one
vector per slot (taken at that slot's marker token), and a pooled summary
of the whole input. Two linear heads classify the per-slot operation and
the turn's domain.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoding import EncodedInput
from .layers import EncoderLayer, Linear, LayerNorm, ParamRegistry, trunc_normal
from .state import Operation, OperationSet

__all__ = ["PaddedBatch", "EncoderOutput", "OperationPrediction", "OperationPredictor"]

NEG_INF = -1e9
PROB_FLOOR = 1e-12


@dataclass
class PaddedBatch:
    """A batch of encoded turns padded to a common length."""

    token_ids: np.ndarray  # (B, T) int64
    segment_ids: np.ndarray  # (B, T) int64
    position_ids: np.ndarray  # (B, T) int64
    slot_positions: np.ndarray  # (B, J) int64
    lengths: np.ndarray  # (B,) int64
    attn_mask: np.ndarray  # (B, 1, 1, T) additive, NEG_INF at padding
    copy_mask: np.ndarray  # (B, T) additive, NEG_INF at padding

    @classmethod
    def collate(cls, inputs: Sequence[EncodedInput], pad_id: int,
                dtype=np.float64) -> "PaddedBatch":
        batch = len(inputs)
        lengths = np.array([len(e) for e in inputs], dtype=np.int64)
        width = int(lengths.max())
        n_slots = len(inputs[0].slot_positions)
        token_ids = np.full((batch, width), pad_id, dtype=np.int64)
        segment_ids = np.zeros((batch, width), dtype=np.int64)
        position_ids = np.zeros((batch, width), dtype=np.int64)
        slot_positions = np.zeros((batch, n_slots), dtype=np.int64)
        for i, e in enumerate(inputs):
            n = len(e)
            token_ids[i, :n] = e.token_ids
            segment_ids[i, :n] = e.segment_ids
            position_ids[i, :n] = e.position_ids
            slot_positions[i] = e.slot_positions
        pad = np.arange(width)[None, :] >= lengths[:, None]
        copy_mask = np.where(pad, NEG_INF, 0.0).astype(dtype)
        attn_mask = copy_mask[:, None, None, :]
        return cls(token_ids, segment_ids, position_ids, slot_positions,
                   lengths, attn_mask, copy_mask)

    @property
    def size(self) -> int:
        return self.token_ids.shape[0]


@dataclass
class EncoderOutput:
    batch: PaddedBatch
    hidden: Tensor  # (B, T, d)
    cls_vec: Tensor  # (B, d)
    slot_vecs: Tensor  # (B, J, d)
    pooled: Tensor  # (B, d), tanh of the pooler on the [CLS] vector


@dataclass
class OperationPrediction:
    """Per-slot operation distributions plus the discrete decisions."""

    op_probs: Tensor  # (B, J, |O|)
    domain_probs: Tensor  # (B, n_domains)
    operations: list[list[Operation]]  # argmax per example per slot
    update_sets: list[list[int]]  # slots whose operation generates a value


def sinusoid_table(max_positions: int, d_model: int) -> np.ndarray:
    """Fixed sin/cos position encodings; adjacent rows vary smoothly, which
    makes position-relative attention easy to pick up from scratch."""
    pos = np.arange(max_positions)[:, None].astype(np.float64)
    idx = np.arange(d_model)[None, :].astype(np.float64)
    angle = pos / np.power(10000.0, 2.0 * (idx // 2) / d_model)
    table = np.where(idx % 2 == 0, np.sin(angle), np.cos(angle))
    return table


class OperationPredictor:
    def __init__(self, reg: ParamRegistry, embedding: ad.Parameter, *,
                 d_model: int, n_layers: int, n_heads: int, d_ffn: int,
                 max_positions: int, n_ops: int, n_domains: int,
                 rng: np.random.Generator, pre_norm: bool = True,
                 positions: str = "sinusoidal"):
        self.embedding = embedding
        self.d_model = d_model
        self.max_positions = max_positions
        self.segment_emb = reg.make("encoder.segment_emb", trunc_normal(rng, (2, d_model)))
        if positions == "learned":
            self.position_emb = reg.make("encoder.position_emb",
                                         trunc_normal(rng, (max_positions, d_model)))
        elif positions == "sinusoidal":
            self.position_emb = Tensor(sinusoid_table(max_positions, d_model))
        else:
            raise ValueError(f"positions must be 'learned' or 'sinusoidal', not {positions!r}")
        self.emb_norm = LayerNorm(reg, "encoder.emb_norm", d_model)
        self.blocks = [EncoderLayer(reg, f"encoder.block{i}", d_model, n_heads, d_ffn,
                                    rng, pre_norm=pre_norm)
                       for i in range(n_layers)]
        self.final_norm = LayerNorm(reg, "encoder.final_norm", d_model) if pre_norm else None
        self.pooler = Linear(reg, "encoder.pooler", d_model, d_model, rng, bias=False)
        self.op_head = Linear(reg, "encoder.op_head", d_model, n_ops, rng, bias=False)
        self.domain_head = Linear(reg, "encoder.domain_head", d_model, n_domains, rng, bias=False)

    def encode(self, batch: PaddedBatch, *, train: bool = False,
               dropout: float = 0.0, rng: Optional[np.random.Generator] = None) -> EncoderOutput:
        if batch.token_ids.shape[1] > self.max_positions:
            raise ad.ShapeMismatch(
                f"input length {batch.token_ids.shape[1]} exceeds "
                f"{self.max_positions} positions")
        x = ad.embedding(self.embedding, batch.token_ids)
        x = x + ad.embedding(self.segment_emb, batch.segment_ids)
        x = x + ad.embedding(self.position_emb, batch.position_ids)
        x = self.emb_norm(x)
        drop = dropout if train else 0.0
        if drop > 0.0:
            x = ad.dropout(x, drop, rng)
        for block in self.blocks:
            x = block(x, batch.attn_mask, dropout=drop, rng=rng)
        if self.final_norm is not None:
            x = self.final_norm(x)
        cls_vec = ad.reshape(ad.take_rows(x, np.zeros((batch.size, 1), dtype=np.int64)),
                             (batch.size, self.d_model))
        slot_vecs = ad.take_rows(x, batch.slot_positions)
        pooled = ad.tanh(self.pooler(cls_vec))
        return EncoderOutput(batch, x, cls_vec, slot_vecs, pooled)

    def predict_operations(self, enc: EncoderOutput, opset: OperationSet) -> OperationPrediction:
        op_probs = ad.softmax(self.op_head(enc.slot_vecs), axis=-1)
        domain_probs = ad.softmax(self.domain_head(enc.pooled), axis=-1)
        picks = op_probs.data.argmax(axis=-1)  # first max wins: lowest member index
        operations = [[opset.members[k] for k in row] for row in picks]
        update_sets = [[j for j, op in enumerate(row) if op in (Operation.UPDATE, Operation.NON_CARRYOVER)]
                       for row in operations]
        return OperationPrediction(op_probs, domain_probs, operations, update_sets)

    def operation_loss(
        self,
        pred: OperationPrediction,
        gold_op_idx: np.ndarray,  # (B, J) indices into opset.members
        gold_domain_idx: np.ndarray,  # (B,)
        class_weights: Optional[np.ndarray] = None,
    ) -> tuple[Tensor, Tensor]:
        """Average negative log-likelihood of operations (over slots) and domain."""
        b, j, n_ops = pred.op_probs.shape
        flat = ad.reshape(pred.op_probs, (b * j, n_ops))
        picked = ad.gather_index(flat, gold_op_idx.reshape(-1))
        logs = ad.log(ad.clip_min(picked, PROB_FLOOR))
        if class_weights is not None:
            w = class_weights[gold_op_idx.reshape(-1)].astype(logs.data.dtype)
            loss_op = ad.sum_all(logs * Tensor(w)) * (-1.0 / w.sum())
        else:
            loss_op = ad.sum_all(logs) * (-1.0 / (b * j))
        picked_dom = ad.gather_index(pred.domain_probs, gold_domain_idx)
        loss_dom = ad.sum_all(ad.log(ad.clip_min(picked_dom, PROB_FLOOR))) * (-1.0 / b)
        return loss_op, loss_dom
