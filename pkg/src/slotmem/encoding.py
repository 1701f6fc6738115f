"""Token-level model input: vocabulary, special tokens, segments, positions.

A turn input is `[CLS]` + previous-turn utterances + current-turn utterances
+ the serialized previous state. Each utterance block is rendered as
`system ; user [SEP]`; each slot block as `[SLOT] <domain> <slot name> -
<value>`. Training-time noise (slot-order shuffling, word dropout) happens
here so the rest of the stack sees plain id sequences.
"""

from __future__ import annotations

import re
import zlib
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .corpus import Dialogue, Schema, TurnExample
from .state import DialogueState, SlotValue

__all__ = [
    "Vocabulary",
    "EncodedInput",
    "EmptyCorpus",
    "StateBlockOverflow",
    "tokenize",
    "build_vocabulary",
    "encode_turn",
    "example_rng",
]

PAD, UNK, CLS, SEP, SLOT, NULL_TOKEN, EOS, SEMI, DASH = SPECIALS = (
    "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[SLOT]", "[NULL]", "[EOS]", ";", "-",
)

_TOKEN_RE = re.compile(r"[\w:']+|[^\w\s]")


class EmptyCorpus(Exception):
    """No tokens to build a vocabulary from."""


class StateBlockOverflow(Exception):
    """The state block alone does not fit in the maximum input length."""


def tokenize(text: str) -> list[str]:
    """Lowercase, detach punctuation, split on whitespace."""
    return _TOKEN_RE.findall(text.lower())


@dataclass
class Vocabulary:
    """Token table with the special tokens pinned at the front."""

    tokens: list[str]

    def __post_init__(self):
        if tuple(self.tokens[: len(SPECIALS)]) != SPECIALS:
            raise ValueError("vocabulary must start with the special tokens")
        self.index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("vocabulary contains duplicate tokens")

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def unk_id(self) -> int:
        return 1

    @property
    def cls_id(self) -> int:
        return 2

    @property
    def sep_id(self) -> int:
        return 3

    @property
    def slot_id(self) -> int:
        return 4

    @property
    def null_id(self) -> int:
        return 5

    @property
    def eos_id(self) -> int:
        return 6

    def id_of(self, token: str) -> int:
        return self.index.get(token, self.unk_id)

    def ids_of(self, tokens: Sequence[str]) -> list[int]:
        return [self.index.get(t, self.unk_id) for t in tokens]

    def token_of(self, idx: int) -> str:
        return self.tokens[idx]

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write("\n".join(self.tokens) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        with open(path, "r", encoding="utf-8") as f:
            return cls([line.rstrip("\n") for line in f if line.rstrip("\n")])


def _state_render_tokens(value: SlotValue) -> list[str]:
    if value.is_null:
        return [NULL_TOKEN]
    if value.is_dontcare:
        return ["dont", "care"]
    return list(value.tokens)


def build_vocabulary(dialogues: Sequence[Dialogue], schema: Schema, min_count: int = 1) -> Vocabulary:
    """Count corpus tokens and assemble the table.

    Ordering is deterministic: specials first, then every kept token by
    descending count with alphabetical tie-break. Schema name tokens and the
    state-rendering words are always kept so any state serializes without
    unknowns.
    """
    counts: Counter[str] = Counter()
    for dialogue in dialogues:
        for turn in dialogue.turns:
            counts.update(tokenize(turn.system))
            counts.update(tokenize(turn.user))
            for value in turn.gold_state.values:
                if value.is_text:
                    counts.update(value.tokens)
    if not counts:
        raise EmptyCorpus("corpus has no tokens")

    always = {"dont", "care", "yes", "no"}
    for slot in schema.slots:
        always.update(tokenize(slot.domain))
        always.update(tokenize(slot.slot_name))
    kept = {t for t, c in counts.items() if c >= min_count} | always
    kept -= set(SPECIALS)
    ordered = sorted(kept, key=lambda t: (-counts[t], t))
    return Vocabulary(list(SPECIALS) + ordered)


@dataclass
class EncodedInput:
    """One model input: ids plus the bookkeeping the heads need."""

    token_ids: np.ndarray  # int64, length <= max_len
    segment_ids: np.ndarray  # 0 for [CLS] and the previous-turn block, 1 after
    position_ids: np.ndarray
    cls_index: int
    slot_positions: np.ndarray  # index of each slot's [SLOT] token, schema order
    slot_order: tuple[int, ...]  # serialization order used for this example

    def __len__(self) -> int:
        return len(self.token_ids)


def example_rng(seed: int, epoch: int, dialogue_id: str, turn_index: int) -> np.random.Generator:
    """Per-example stream so encoding noise is reproducible and order-free."""
    return np.random.default_rng(
        [seed, epoch, zlib.crc32(dialogue_id.encode("utf-8")), turn_index]
    )


def encode_turn(
    example: TurnExample,
    vocab: Vocabulary,
    *,
    mode: str = "eval",
    max_len: int = 256,
    shuffle_rate: float = 0.0,
    word_dropout: float = 0.0,
    rng: Optional[np.random.Generator] = None,
    prev_state: Optional[DialogueState] = None,
) -> EncodedInput:
    """Build the token-id input for one turn.

    `prev_state` overrides the example's gold previous state (used when the
    pipeline carries its own predicted state). Training mode applies slot
    shuffling and word dropout from `rng`; eval mode is deterministic.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', not {mode!r}")
    train = mode == "train"
    if train and (shuffle_rate > 0 or word_dropout > 0) and rng is None:
        raise ValueError("training-time noise requires an rng")
    state = prev_state if prev_state is not None else example.prev_state

    prev_block: list[str] = []
    if example.turn_index > 1:
        prev_block = tokenize(example.prev_system) + [SEMI] + tokenize(example.prev_user) + [SEP]
    curr_block = tokenize(example.system) + [SEMI] + tokenize(example.user) + [SEP]

    n_slots = len(state)
    order = list(range(n_slots))
    if train and shuffle_rate > 0 and rng.random() < shuffle_rate:
        order = list(rng.permutation(n_slots))
    state_block: list[str] = []
    slot_offsets = np.zeros(n_slots, dtype=np.int64)
    for k in order:
        slot, value = state.slots[k], state.values[k]
        slot_offsets[k] = len(state_block)
        state_block += [SLOT, *tokenize(slot.domain), *tokenize(slot.slot_name), DASH,
                        *_state_render_tokens(value)]

    head_len = 1 + len(state_block)
    if head_len > max_len:
        raise StateBlockOverflow(
            f"state block needs {head_len} tokens but max_len is {max_len}")
    overflow = head_len + len(prev_block) + len(curr_block) - max_len
    if overflow > 0:
        cut = min(overflow, len(prev_block))
        prev_block = prev_block[cut:]
        overflow -= cut
    if overflow > 0:
        curr_block = curr_block[overflow:]

    tokens = [CLS] + prev_block + curr_block + state_block
    state_start = 1 + len(prev_block) + len(curr_block)
    slot_positions = state_start + slot_offsets

    if train and word_dropout > 0:
        specials = set(SPECIALS)
        drop = rng.random(len(tokens)) < word_dropout
        tokens = [UNK if drop[i] and tok not in specials else tok
                  for i, tok in enumerate(tokens)]

    segment_ids = np.zeros(len(tokens), dtype=np.int64)
    segment_ids[1 + len(prev_block):] = 1

    return EncodedInput(
        token_ids=np.asarray(vocab.ids_of(tokens), dtype=np.int64),
        segment_ids=segment_ids,
        position_ids=np.arange(len(tokens), dtype=np.int64),
        cls_index=0,
        slot_positions=slot_positions,
        slot_order=tuple(order),
    )
