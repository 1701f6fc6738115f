"""Recurrent value generator with a soft-gated copy over the input.

Decoding runs only for the slots whose predicted operation writes a new
value. Each step mixes a vocabulary distribution with a copy distribution
over input positions (scattered onto the token ids found there), gated by a
sigmoid of the hidden state, the input embedding, and the attention context.
All requested slots decode together as one batch of jobs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoder import NEG_INF, PROB_FLOOR, EncoderOutput
from .layers import GRUCell, Linear, ParamRegistry

__all__ = ["DecodeJob", "DecodeResult", "StepTrace", "ValueGenerator", "MissingGold"]


class MissingGold(Exception):
    """Teacher-forced decoding was requested without gold targets."""


@dataclass(frozen=True)
class DecodeJob:
    """One slot to decode: which batch row, which slot, and its loss weight."""

    batch_index: int
    slot_index: int
    weight: float = 1.0  # 1 / (batch size * |update set of this turn|)


@dataclass
class StepTrace:
    """Raw per-step distributions, kept only when tracing is requested."""

    p_vocab: np.ndarray
    p_context: np.ndarray
    p_value: np.ndarray
    gate: np.ndarray


@dataclass
class DecodeResult:
    token_ids: list[list[int]]  # generated ids per job, end marker excluded
    steps: list[int]  # decode steps per job, end marker included
    loss: Optional[Tensor] = None  # weighted generation loss (train mode)
    traces: list[StepTrace] = field(default_factory=list)


class ValueGenerator:
    def __init__(self, reg: ParamRegistry, embedding: ad.Parameter, *,
                 d_model: int, max_decode_len: int, eos_id: int, pad_id: int,
                 rng: np.random.Generator):
        self.embedding = embedding
        self.d_model = d_model
        self.max_decode_len = max_decode_len
        self.eos_id = eos_id
        self.pad_id = pad_id
        self.gru = GRUCell(reg, "decoder.gru", d_model, rng)
        self.copy_gate = Linear(reg, "decoder.copy_gate", 3 * d_model, 1, rng, bias=False)
        self.invocations = 0  # decode jobs ever requested; the efficiency contract

    # ------------------------------------------------------------------ setup
    def _gather_job_views(self, enc: EncoderOutput, jobs: Sequence[DecodeJob]):
        rows = np.array([job.batch_index for job in jobs], dtype=np.int64)
        slots = np.array([job.slot_index for job in jobs], dtype=np.int64)
        b, n_slots, d = enc.slot_vecs.shape
        slot_flat = ad.reshape(enc.slot_vecs, (b * n_slots, d))
        first_input = ad.embedding(slot_flat, rows * n_slots + slots)  # (S, d)
        hidden0 = ad.embedding(enc.pooled, rows)  # (S, d)
        context_h = ad.embedding(enc.hidden, rows)  # (S, T, d)
        token_ids = enc.batch.token_ids[rows]  # (S, T)
        copy_mask = enc.batch.copy_mask[rows]  # (S, T) additive
        return first_input, hidden0, context_h, token_ids, copy_mask

    def _step(self, hidden: Tensor, inputs: Tensor, context_h: Tensor,
              token_ids: np.ndarray, copy_mask: np.ndarray, vocab_size: int,
              trace: Optional[list[StepTrace]]):
        s, d = hidden.shape
        hidden = self.gru.step(hidden, inputs)
        p_vocab = ad.softmax(ad.linear(hidden, self.embedding), axis=-1)  # (S, V)
        scores = ad.reshape(ad.matmul(context_h, ad.reshape(hidden, (s, d, 1))), token_ids.shape)
        p_context = ad.softmax(scores + ad.constant(copy_mask, dtype=scores.data.dtype), axis=-1)
        context = ad.reshape(ad.matmul(ad.reshape(p_context, (s, 1, -1)), context_h), (s, d))
        gate = ad.sigmoid(self.copy_gate(ad.concat([hidden, inputs, context], axis=-1)))  # (S, 1)
        p_copy = ad.scatter_sum(p_context, token_ids, vocab_size)
        p_value = gate * p_vocab + (1.0 - gate) * p_copy
        if trace is not None:
            trace.append(StepTrace(p_vocab.data.copy(), p_context.data.copy(),
                                   p_value.data.copy(), gate.data.copy()))
        return hidden, p_value

    # ------------------------------------------------------------------ train
    def decode_teacher(
        self,
        enc: EncoderOutput,
        jobs: Sequence[DecodeJob],
        targets: Sequence[Sequence[int]],  # per job: value token ids + end marker
        forced: Sequence[bool],  # teacher forcing coin per job (per sequence)
        *,
        collect_traces: bool = False,
    ) -> DecodeResult:
        """Teacher-supervised decoding; returns the weighted generation loss."""
        if len(targets) != len(jobs):
            raise MissingGold(f"{len(jobs)} jobs but {len(targets)} gold targets")
        self.invocations += len(jobs)
        n_jobs = len(jobs)
        vocab_size = self.embedding.shape[0]
        steps = max(len(t) for t in targets)
        gold = np.full((n_jobs, steps), self.pad_id, dtype=np.int64)
        valid = np.zeros((n_jobs, steps), dtype=bool)
        for i, t in enumerate(targets):
            if len(t) == 0:
                raise MissingGold(f"empty gold target for job {i}")
            gold[i, : len(t)] = t
            valid[i, : len(t)] = True
        forced = np.asarray(forced, dtype=bool)
        job_w = np.array([job.weight for job in jobs])
        lengths = valid.sum(axis=1)

        inputs, hidden, context_h, token_ids, copy_mask = self._gather_job_views(enc, jobs)
        trace_sink: Optional[list[StepTrace]] = [] if collect_traces else None
        step_losses = []
        out_ids: list[list[int]] = [[] for _ in jobs]
        for k in range(steps):
            hidden, p_value = self._step(hidden, inputs, context_h, token_ids,
                                         copy_mask, vocab_size, trace_sink)
            picked = ad.gather_index(p_value, gold[:, k])
            nll = ad.log(ad.clip_min(picked, PROB_FLOOR)) * -1.0  # (S,)
            # per-job: weight / K_j, zero once past the target length
            w = np.where(valid[:, k], job_w / lengths, 0.0)
            step_losses.append(ad.sum_all(nll * Tensor(w.astype(nll.data.dtype))))
            own = p_value.data.argmax(axis=-1)
            for i in range(n_jobs):
                if valid[i, k] and gold[i, k] != self.eos_id:
                    out_ids[i].append(int(own[i]))
            if k + 1 < steps:
                next_ids = np.where(forced, gold[:, k], own)
                inputs = ad.embedding(self.embedding, next_ids)
        total = step_losses[0]
        for extra in step_losses[1:]:
            total = total + extra
        return DecodeResult(
            token_ids=out_ids,
            steps=[int(n) for n in lengths],
            loss=total,
            traces=trace_sink or [],
        )

    # ------------------------------------------------------------------- eval
    def decode_greedy(self, enc: EncoderOutput, jobs: Sequence[DecodeJob], *,
                      collect_traces: bool = False) -> DecodeResult:
        """Greedy decoding until the end marker or the step limit."""
        self.invocations += len(jobs)
        if not jobs:
            return DecodeResult(token_ids=[], steps=[])
        vocab_size = self.embedding.shape[0]
        inputs, hidden, context_h, token_ids, copy_mask = self._gather_job_views(enc, jobs)
        n_jobs = len(jobs)
        finished = np.zeros(n_jobs, dtype=bool)
        out_ids: list[list[int]] = [[] for _ in jobs]
        steps = np.zeros(n_jobs, dtype=np.int64)
        trace_sink: Optional[list[StepTrace]] = [] if collect_traces else None
        for _ in range(self.max_decode_len):
            hidden, p_value = self._step(hidden, inputs, context_h, token_ids,
                                         copy_mask, vocab_size, trace_sink)
            scores = p_value.data.copy()
            scores[:, self.pad_id] = NEG_INF  # generated values never contain padding
            picks = scores.argmax(axis=-1)
            for i in range(n_jobs):
                if finished[i]:
                    continue
                steps[i] += 1
                if picks[i] == self.eos_id:
                    finished[i] = True
                else:
                    out_ids[i].append(int(picks[i]))
            finished |= steps >= self.max_decode_len
            if finished.all():
                break
            inputs = ad.embedding(self.embedding, picks)
        return DecodeResult(token_ids=out_ids, steps=[int(s) for s in steps],
                            traces=trace_sink or [])
