"""Joint training: operation + domain + generation losses, two schedules.

The pipeline is teacher-forced: encoder inputs render the gold previous
state, and the decoder runs on the gold update set. Model selection uses
full-inference validation accuracy (the model carries its own predicted
state turn to turn).
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .corpus import Dialogue, Schema, TurnExample
from .decoder import DecodeJob
from .encoder import PaddedBatch
from .encoding import Vocabulary, encode_turn, example_rng
from .model import ModelConfig, Tracker
from .optim import WarmupAdam, clip_global_norm
from .state import Operation, OperationSet

__all__ = [
    "TrainConfig",
    "TrainReport",
    "Trainer",
    "DivergenceDetected",
    "OrphanParameter",
    "partition_parameters",
    "train",
    "toy_overrides",
]


class DivergenceDetected(Exception):
    """Training loss became non-finite."""


class OrphanParameter(Exception):
    """A parameter fell outside the encoder/decoder partition."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    enc_peak_lr: float = 4e-5
    enc_warmup: float = 0.1
    dec_peak_lr: float = 1e-4
    dec_warmup: float = 0.1
    dropout: float = 0.1
    word_dropout: float = 0.1
    shuffle_rate: float = 0.5
    teacher_forcing: float = 0.5
    max_len: int = 256
    opset: str = "four"
    seed: int = 13
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    min_count: int = 1
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    d_ffn: int = 512
    max_decode_len: int = 16
    pre_norm: bool = True
    positions: str = "sinusoidal"
    class_weighting: bool = False  # inverse-frequency operation loss, experiment hook
    embedding_schedule: str = "encoder"  # which schedule owns the shared embedding
    eval_batch_size: int = 32

    def __post_init__(self):
        for name in ("enc_warmup", "dec_warmup", "dropout", "word_dropout",
                     "shuffle_rate", "teacher_forcing"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.embedding_schedule not in ("encoder", "decoder"):
            raise ValueError("embedding_schedule must be 'encoder' or 'decoder'")

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            d_model=self.d_model, n_layers=self.n_layers, n_heads=self.n_heads,
            d_ffn=self.d_ffn, max_positions=self.max_len, dropout=self.dropout,
            max_decode_len=self.max_decode_len, pre_norm=self.pre_norm,
            positions=self.positions)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_mapping(cls, raw: Mapping[str, str]) -> "TrainConfig":
        fields = {f.name: f.type for f in cls.__dataclass_fields__.values()}
        unknown = set(raw) - set(fields)
        if unknown:
            raise ValueError(f"unknown train-config keys: {sorted(unknown)}")
        coerce = {"int": int, "float": float, "str": str,
                  "bool": lambda s: str(s).lower() in ("1", "true", "yes")}
        kwargs = {k: coerce[fields[k]](v) for k, v in raw.items()}
        return cls(**kwargs)


def toy_overrides() -> dict:
    """Desk-scale profile: a from-scratch encoder needs a larger learning
    rate than the fine-tuning defaults, and far fewer epochs suffice."""
    return {
        "epochs": 10,
        "enc_peak_lr": 4e-4,
        "dec_peak_lr": 1e-3,
    }


@dataclass
class TrainReport:
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_accuracy: float = -1.0

    def to_json(self, clock: bool = True) -> dict:
        epochs = self.epochs if clock else [
            {k: v for k, v in e.items() if k != "seconds"} for e in self.epochs]
        return {"epochs": epochs, "best_epoch": self.best_epoch,
                "best_accuracy": self.best_accuracy}


def partition_parameters(model: Tracker, embedding_schedule: str = "encoder"
                         ) -> tuple[list[Parameter], list[Parameter]]:
    """Disjoint, exhaustive split of parameters between the two schedules."""
    enc, dec = [], []
    for p in model.parameters():
        if p.name.startswith("decoder."):
            dec.append(p)
        elif p.name.startswith("embedding."):
            (dec if embedding_schedule == "decoder" else enc).append(p)
        elif p.name.startswith("encoder."):
            enc.append(p)
        else:
            raise OrphanParameter(p.name)
    total = {p.name for p in enc} | {p.name for p in dec}
    if len(total) != len(model.parameters()) or len(enc) + len(dec) != len(model.parameters()):
        raise OrphanParameter("partition is not a disjoint cover")
    return enc, dec


def operation_class_weights(examples: Sequence[TurnExample], opset: OperationSet) -> np.ndarray:
    """Inverse-frequency weights, normalized to mean one."""
    counts = np.zeros(len(opset))
    for ex in examples:
        for op in ex.gold_ops:
            counts[opset.index(op)] += 1
    weights = 1.0 / np.maximum(counts, 1.0)
    return weights * (len(weights) / weights.sum())


@dataclass
class PreparedBatch:
    padded: PaddedBatch
    gold_op_idx: np.ndarray  # (B, J)
    gold_domain_idx: np.ndarray  # (B,)
    jobs: list[DecodeJob]
    targets: list[list[int]]
    forced: list[bool]


def prepare_batch(
    examples: Sequence[TurnExample],
    vocab: Vocabulary,
    schema: Schema,
    opset: OperationSet,
    config: TrainConfig,
    epoch: int,
    train: bool = True,
) -> PreparedBatch:
    encoded = []
    gold_op_idx = np.zeros((len(examples), schema.n_slots), dtype=np.int64)
    gold_domain_idx = np.zeros(len(examples), dtype=np.int64)
    jobs: list[DecodeJob] = []
    targets: list[list[int]] = []
    forced: list[bool] = []
    for i, ex in enumerate(examples):
        rng = example_rng(config.seed, epoch, ex.dialogue_id, ex.turn_index)
        encoded.append(encode_turn(
            ex, vocab, mode="train" if train else "eval", max_len=config.max_len,
            shuffle_rate=config.shuffle_rate if train else 0.0,
            word_dropout=config.word_dropout if train else 0.0,
            rng=rng))
        gold_op_idx[i] = [opset.index(op) for op in ex.gold_ops]
        gold_domain_idx[i] = schema.domains.index(ex.gold_domain)
        update_slots = sorted(ex.gold_update_values)
        for j in update_slots:
            jobs.append(DecodeJob(batch_index=i, slot_index=j,
                                  weight=1.0 / (len(examples) * len(update_slots))))
            targets.append(vocab.ids_of(ex.gold_update_values[j]) + [vocab.eos_id])
            forced.append(bool(rng.random() < config.teacher_forcing) if train else True)
    padded = PaddedBatch.collate(encoded, vocab.pad_id)
    return PreparedBatch(padded, gold_op_idx, gold_domain_idx, jobs, targets, forced)


class Trainer:
    def __init__(
        self,
        config: TrainConfig,
        schema: Schema,
        vocab: Vocabulary,
        train_examples: Sequence[TurnExample],
        valid_dialogues: Sequence[Dialogue],
    ):
        if not train_examples:
            raise ValueError("no training examples")
        self.config = config
        self.schema = schema
        self.vocab = vocab
        self.examples = list(train_examples)
        self.valid_dialogues = list(valid_dialogues)
        self.opset = OperationSet.from_variant(config.opset)
        self.model = Tracker(config.model_config(), vocab, schema, self.opset, config.seed)
        enc_params, dec_params = partition_parameters(self.model, config.embedding_schedule)
        self.steps_per_epoch = math.ceil(len(self.examples) / config.batch_size)
        total_steps = config.epochs * self.steps_per_epoch
        self.opt_encoder = WarmupAdam(enc_params, config.enc_peak_lr, config.enc_warmup,
                                      total_steps, config.weight_decay)
        self.opt_decoder = WarmupAdam(dec_params, config.dec_peak_lr, config.dec_warmup,
                                      total_steps, config.weight_decay)
        self.class_weights = (operation_class_weights(self.examples, self.opset)
                              if config.class_weighting else None)
        self.epochs_done = 0
        self.report = TrainReport()
        self.best_arrays: Optional[dict[str, np.ndarray]] = None

    # ----------------------------------------------------------------- steps
    def _batch_loss(self, batch: PreparedBatch, rng: np.random.Generator
                    ) -> tuple[Tensor, dict[str, float]]:
        enc_out = self.model.encoder.encode(
            batch.padded, train=True, dropout=self.config.dropout, rng=rng)
        pred = self.model.encoder.predict_operations(enc_out, self.opset)
        loss_op, loss_dom = self.model.encoder.operation_loss(
            pred, batch.gold_op_idx, batch.gold_domain_idx, self.class_weights)
        joint = loss_op + loss_dom
        loss_value = 0.0
        if batch.jobs:
            decoded = self.model.decoder.decode_teacher(
                enc_out, batch.jobs, batch.targets, batch.forced)
            joint = joint + decoded.loss
            loss_value = decoded.loss.item()
        parts = {
            "loss_op": loss_op.item(),
            "loss_domain": loss_dom.item(),
            "loss_value": loss_value,
            "loss_joint": joint.item(),
        }
        return joint, parts

    def train_epoch(self) -> dict[str, float]:
        epoch = self.epochs_done
        cfg = self.config
        order_rng = np.random.default_rng([cfg.seed, 1009, epoch])
        order = order_rng.permutation(len(self.examples))
        sums = {"loss_op": 0.0, "loss_domain": 0.0, "loss_value": 0.0, "loss_joint": 0.0}
        for b in range(self.steps_per_epoch):
            chunk = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            batch = prepare_batch([self.examples[i] for i in chunk], self.vocab,
                                  self.schema, self.opset, cfg, epoch)
            model_rng = np.random.default_rng([cfg.seed, 2003, epoch, b])
            joint, parts = self._batch_loss(batch, model_rng)
            if not np.isfinite(parts["loss_joint"]):
                raise DivergenceDetected(f"non-finite loss at epoch {epoch} batch {b}")
            ad.backward(joint)
            clip_global_norm(self.model.parameters(), cfg.clip_norm)
            self.opt_encoder.step()
            self.opt_decoder.step()
            for k, v in parts.items():
                sums[k] += v
        self.epochs_done += 1
        return {k: v / self.steps_per_epoch for k, v in sums.items()}

    def validate(self) -> float:
        from .evaluation import joint_goal_accuracy, run_inference
        if not self.valid_dialogues:
            return 0.0
        preds = run_inference(self.valid_dialogues, self.model,
                              max_len=self.config.max_len,
                              batch_size=self.config.eval_batch_size)
        return joint_goal_accuracy(preds)

    def run(self, log_fn: Optional[Callable[[dict], None]] = None,
            stop_after: Optional[int] = None) -> TrainReport:
        """Train to the configured horizon, optionally pausing earlier.

        `stop_after` bounds the number of epochs run now without touching the
        schedule horizon, so a paused-and-resumed run matches an unbroken one.
        """
        horizon = self.config.epochs if stop_after is None else min(
            self.config.epochs, stop_after)
        while self.epochs_done < horizon:
            start = time.perf_counter()
            losses = self.train_epoch()
            accuracy = self.validate()
            entry = {"epoch": self.epochs_done, **losses,
                     "valid_joint_goal_accuracy": accuracy,
                     "seconds": round(time.perf_counter() - start, 3)}
            self.report.epochs.append(entry)
            if accuracy > self.report.best_accuracy:
                self.report.best_accuracy = accuracy
                self.report.best_epoch = self.epochs_done
                self.best_arrays = {k: v.copy() for k, v in
                                    self.model.parameter_arrays().items()}
            if log_fn:
                log_fn(entry)
        return self.report

    # ----------------------------------------------------- training state io
    def save_state(self, path) -> None:
        """Full training state: parameters now, moments, progress counters."""
        arrays = dict(self.model.parameter_arrays())
        arrays.update(self.opt_encoder.moment_arrays("opt_encoder"))
        arrays.update(self.opt_decoder.moment_arrays("opt_decoder"))
        if self.best_arrays:
            arrays.update({f"best.{k}": v for k, v in self.best_arrays.items()})
        meta = self.model.checkpoint_meta()
        meta.update({
            "train_config": self.config.to_json(),
            "opt_encoder": self.opt_encoder.state_meta(),
            "opt_decoder": self.opt_decoder.state_meta(),
            # noise streams are derived per (seed, epoch, ...), so the counters
            # below are the complete rng state
            "rng_state": {"seed": self.config.seed, "epochs_done": self.epochs_done},
            "report": self.report.to_json(clock=False),
        })
        save_checkpoint(path, meta, arrays)

    def load_state(self, path) -> None:
        ckpt = load_checkpoint(path)
        saved_total = int(ckpt.meta["opt_encoder"]["total_steps"])
        if saved_total != self.opt_encoder.total_steps:
            raise ValueError(
                f"resume config disagrees with the saved schedule: "
                f"{self.opt_encoder.total_steps} total steps here, {saved_total} saved")
        self.model.load_parameter_arrays(
            {k: v for k, v in ckpt.arrays.items() if not k.startswith(("opt_", "best."))})
        self.opt_encoder.load_state(ckpt.meta["opt_encoder"], ckpt.arrays, "opt_encoder")
        self.opt_decoder.load_state(ckpt.meta["opt_decoder"], ckpt.arrays, "opt_decoder")
        self.epochs_done = int(ckpt.meta["rng_state"]["epochs_done"])
        report = ckpt.meta["report"]
        self.report = TrainReport(report["epochs"], report["best_epoch"],
                                  report["best_accuracy"])
        best = {k[len("best."):]: v for k, v in ckpt.arrays.items() if k.startswith("best.")}
        self.best_arrays = best or None

    def best_model(self) -> Tracker:
        """The tracker with the best validation epoch's parameters loaded."""
        if self.best_arrays is not None:
            self.model.load_parameter_arrays(self.best_arrays)
        return self.model


def train(
    config: TrainConfig,
    schema: Schema,
    vocab: Vocabulary,
    train_examples: Sequence[TurnExample],
    valid_dialogues: Sequence[Dialogue],
    log_fn: Optional[Callable[[dict], None]] = None,
) -> tuple[Tracker, TrainReport]:
    trainer = Trainer(config, schema, vocab, train_examples, valid_dialogues)
    report = trainer.run(log_fn)
    return trainer.best_model(), report
