"""The joint tracker: shared embedding, turn encoder, heads, value decoder."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .autodiff import Parameter
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .corpus import Schema
from .decoder import ValueGenerator
from .encoder import OperationPredictor
from .encoding import Vocabulary
from .layers import ParamRegistry, trunc_normal
from .state import OperationSet

__all__ = ["ModelConfig", "Tracker"]


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    d_ffn: int = 512
    max_positions: int = 256
    dropout: float = 0.1
    max_decode_len: int = 16
    pre_norm: bool = True  # normalize sublayer inputs; reliable from scratch
    positions: str = "sinusoidal"  # or "learned"

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "ModelConfig":
        return cls(**obj)


class Tracker:
    """Everything trainable, plus the vocabulary/schema/opset it was built for."""

    def __init__(self, config: ModelConfig, vocab: Vocabulary, schema: Schema,
                 opset: OperationSet, seed: int):
        self.config = config
        self.vocab = vocab
        self.schema = schema
        self.opset = opset
        self.seed = seed
        rng = np.random.default_rng([seed, 0xC0DE])
        self.registry = ParamRegistry()
        self.embedding = self.registry.make(
            "embedding.weight", trunc_normal(rng, (len(vocab), config.d_model)))
        self.encoder = OperationPredictor(
            self.registry, self.embedding,
            d_model=config.d_model, n_layers=config.n_layers, n_heads=config.n_heads,
            d_ffn=config.d_ffn, max_positions=config.max_positions,
            n_ops=len(opset), n_domains=schema.n_domains, rng=rng,
            pre_norm=config.pre_norm, positions=config.positions)
        self.decoder = ValueGenerator(
            self.registry, self.embedding,
            d_model=config.d_model, max_decode_len=config.max_decode_len,
            eos_id=vocab.eos_id, pad_id=vocab.pad_id, rng=rng)

    # ------------------------------------------------------------- parameters
    def parameters(self) -> list[Parameter]:
        return self.registry.all()

    def parameter_arrays(self) -> dict[str, np.ndarray]:
        return {p.name: p.data for p in self.parameters()}

    def load_parameter_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for p in self.parameters():
            if p.name not in arrays:
                raise KeyError(f"checkpoint missing parameter {p.name}")
            src = arrays[p.name]
            if src.shape != p.data.shape:
                raise ValueError(f"{p.name}: checkpoint shape {src.shape} != {p.data.shape}")
            p.data = src.astype(np.float64).copy()
            p.grad = None

    def cast(self, dtype) -> None:
        """Switch parameter precision in place (float32 inference mode)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)

    # ------------------------------------------------------------ checkpoints
    def checkpoint_meta(self) -> dict:
        return {
            "model_config": self.config.to_json(),
            "vocab": list(self.vocab.tokens),
            "schema": self.schema.to_json(),
            "opset": self.opset.variant,
            "seed": self.seed,
        }

    def save(self, path, extra_meta: Optional[dict] = None,
             extra_arrays: Optional[dict[str, np.ndarray]] = None) -> None:
        meta = self.checkpoint_meta()
        if extra_meta:
            meta.update(extra_meta)
        arrays = dict(self.parameter_arrays())
        if extra_arrays:
            arrays.update(extra_arrays)
        save_checkpoint(path, meta, arrays)

    @classmethod
    def from_checkpoint_data(cls, ckpt: Checkpoint) -> "Tracker":
        meta = ckpt.meta
        model = cls(
            ModelConfig.from_json(meta["model_config"]),
            Vocabulary(list(meta["vocab"])),
            Schema.from_json(meta["schema"]),
            OperationSet.from_variant(meta["opset"]),
            int(meta["seed"]),
        )
        model.load_parameter_arrays(ckpt.arrays)
        return model

    @classmethod
    def load(cls, path) -> "Tracker":
        return cls.from_checkpoint_data(load_checkpoint(path))
