"""Dialogue state as a fixed-size slot memory with discrete overwrite operations.

A state maps every slot of a schema to a value; values are either one of the
two specials (no-information, indifferent) or a normalized token sequence.
Turn-to-turn changes are expressed as one operation per slot: keep, clear,
mark indifferent, or write a newly generated value.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Mapping, Optional, Sequence

__all__ = [
    "SlotId",
    "SlotValue",
    "NULL",
    "DONTCARE",
    "DialogueState",
    "Operation",
    "OperationSet",
    "PreconditionViolated",
    "MissingGeneratedValue",
    "UnexpectedGeneratedValue",
    "apply_operation",
    "apply_turn",
    "derive_gold_operations",
    "normalize_text",
    "render_decoder_target",
    "value_from_tokens",
    "serialize_state",
]

_WS = re.compile(r"\s+")

# Token strings that stand in for the special values when a value has to be
# written as plain text (decoder targets, reduced operation sets, ingestion).
NULL_TOKEN = "[NULL]"
DONTCARE_STRINGS = frozenset({"dont care", "dontcare", "do n't care", "don't care"})


class PreconditionViolated(Exception):
    """An operation is illegal for the slot's previous value."""

    def __init__(self, message: str, slot: Optional["SlotId"] = None):
        super().__init__(message if slot is None else f"{slot}: {message}")
        self.slot = slot


class MissingGeneratedValue(Exception):
    """An operation that writes a new value got no generated tokens."""

    def __init__(self, message: str, slot: Optional["SlotId"] = None):
        super().__init__(message if slot is None else f"{slot}: {message}")
        self.slot = slot


class UnexpectedGeneratedValue(Exception):
    """Generated tokens were supplied for an operation that takes none."""

    def __init__(self, message: str, slot: Optional["SlotId"] = None):
        super().__init__(message if slot is None else f"{slot}: {message}")
        self.slot = slot


def normalize_text(text: str) -> str:
    """Lowercase, collapse internal whitespace, strip the ends."""
    return _WS.sub(" ", text.lower()).strip()


@dataclass(frozen=True, order=True)
class SlotId:
    """A schema slot, named by domain and slot name ("hotel-area")."""

    domain: str
    slot_name: str

    def __post_init__(self):
        if not self.domain or not self.slot_name:
            raise ValueError("slot domain and name must be non-empty")

    @property
    def canonical(self) -> str:
        return f"{self.domain}-{self.slot_name}"

    @classmethod
    def parse(cls, canonical: str) -> "SlotId":
        domain, sep, name = canonical.partition("-")
        if not sep:
            raise ValueError(f"slot id {canonical!r} is not 'domain-slot_name'")
        return cls(domain, name)

    def __str__(self) -> str:
        return self.canonical


@dataclass(frozen=True)
class SlotValue:
    """Tagged value of a slot: special 'null'/'dontcare', or normalized text tokens."""

    kind: str  # "null" | "dontcare" | "text"
    tokens: tuple[str, ...] = ()

    @classmethod
    def text(cls, value: str | Sequence[str]) -> "SlotValue":
        if isinstance(value, str):
            toks = tuple(normalize_text(value).split())
        else:
            toks = tuple(normalize_text(" ".join(value)).split())
        if not toks:
            raise ValueError("text slot value must be non-empty")
        rendering = " ".join(toks)
        if rendering in DONTCARE_STRINGS or rendering in ("none", NULL_TOKEN.lower()):
            raise ValueError(f"{rendering!r} is reserved for a special value")
        return cls("text", toks)

    @property
    def is_null(self) -> bool:
        return self.kind == "null"

    @property
    def is_dontcare(self) -> bool:
        return self.kind == "dontcare"

    @property
    def is_text(self) -> bool:
        return self.kind == "text"

    def render(self) -> str:
        """Canonical text rendering ("none" / "dont care" / the joined tokens)."""
        if self.kind == "null":
            return "none"
        if self.kind == "dontcare":
            return "dont care"
        return " ".join(self.tokens)


NULL = SlotValue("null")
DONTCARE = SlotValue("dontcare")


def value_from_tokens(tokens: Sequence[str]) -> SlotValue:
    """Map a generated/annotated token sequence to a slot value.

    The strings that stand in for the specials map back to them; everything
    else becomes a text value. An empty sequence maps to the null special.
    """
    toks = tuple(tokens)
    if not toks:
        return NULL
    joined = normalize_text(" ".join(toks))
    if joined in DONTCARE_STRINGS:
        return DONTCARE
    if joined in ("none", NULL_TOKEN.lower()):
        return NULL
    return SlotValue.text(joined)


def render_decoder_target(value: SlotValue) -> tuple[str, ...]:
    """Token sequence a generator must produce to write `value`."""
    if value.is_null:
        return (NULL_TOKEN,)
    if value.is_dontcare:
        return ("dont", "care")
    return value.tokens


@dataclass(frozen=True)
class DialogueState:
    """Fixed-size memory: one value per schema slot, in schema order."""

    slots: tuple[SlotId, ...]
    values: tuple[SlotValue, ...]

    def __post_init__(self):
        if len(self.slots) != len(self.values):
            raise ValueError("state must hold exactly one value per slot")

    @classmethod
    def initial(cls, slots: Sequence[SlotId]) -> "DialogueState":
        """The state before any turn: every slot carries the null special."""
        slots = tuple(slots)
        return cls(slots, (NULL,) * len(slots))

    @classmethod
    def from_mapping(
        cls, slots: Sequence[SlotId], values: Mapping[SlotId, SlotValue]
    ) -> "DialogueState":
        slots = tuple(slots)
        return cls(slots, tuple(values.get(s, NULL) for s in slots))

    def __len__(self) -> int:
        return len(self.slots)

    def value_of(self, slot: SlotId) -> SlotValue:
        return self.values[self.slots.index(slot)]

    def replace(self, updates: Mapping[int, SlotValue]) -> "DialogueState":
        vals = list(self.values)
        for j, v in updates.items():
            vals[j] = v
        return DialogueState(self.slots, tuple(vals))

    def as_dict(self) -> dict[SlotId, SlotValue]:
        return dict(zip(self.slots, self.values))


def serialize_state(state: DialogueState) -> list[str]:
    """Canonical serialization: ordered '"domain-slot: value"' lines."""
    return [f"{slot.canonical}: {value.render()}" for slot, value in zip(state.slots, state.values)]


class Operation(Enum):
    CARRYOVER = "carryover"
    DELETE = "delete"
    DONTCARE = "dontcare"
    UPDATE = "update"
    YES = "yes"
    NO = "no"
    NON_CARRYOVER = "non-carryover"

    def __str__(self) -> str:
        return self.value


#: Operations whose application consumes a generated token sequence.
GENERATING_OPS = frozenset({Operation.UPDATE, Operation.NON_CARRYOVER})


@dataclass(frozen=True)
class OperationSet:
    """The discrete operation vocabulary the classifier chooses from.

    Member order is the label order; ties in the classifier break toward the
    lowest index, so carryover always comes first.
    """

    variant: str
    members: tuple[Operation, ...]

    _VARIANTS = {
        "four": (Operation.CARRYOVER, Operation.DELETE, Operation.DONTCARE, Operation.UPDATE),
        "two": (Operation.CARRYOVER, Operation.NON_CARRYOVER),
        "three_dontcare": (Operation.CARRYOVER, Operation.DONTCARE, Operation.UPDATE),
        "three_delete": (Operation.CARRYOVER, Operation.DELETE, Operation.UPDATE),
        "six": (
            Operation.CARRYOVER,
            Operation.DELETE,
            Operation.DONTCARE,
            Operation.UPDATE,
            Operation.YES,
            Operation.NO,
        ),
    }

    @classmethod
    def from_variant(cls, variant: str) -> "OperationSet":
        key = variant.lower().replace("-", "_")
        if key not in cls._VARIANTS:
            raise ValueError(f"unknown operation set variant {variant!r}; "
                             f"expected one of {sorted(cls._VARIANTS)}")
        return cls(key, cls._VARIANTS[key])

    @classmethod
    def variants(cls) -> tuple[str, ...]:
        return tuple(cls._VARIANTS)

    def __len__(self) -> int:
        return len(self.members)

    def __contains__(self, op: Operation) -> bool:
        return op in self.members

    def index(self, op: Operation) -> int:
        return self.members.index(op)

    @property
    def generator_op(self) -> Operation:
        """The member that writes generated text (non-carryover under 'two')."""
        return Operation.NON_CARRYOVER if self.variant == "two" else Operation.UPDATE


def apply_operation(
    prev: SlotValue,
    op: Operation,
    generated: Optional[Sequence[str]] = None,
    *,
    strict: bool = True,
) -> SlotValue:
    """Apply one operation to one slot value.

    In strict mode the preconditions are enforced: clearing an already-null
    slot, marking an already-indifferent slot, and regenerating the previous
    value are all rejected. Non-strict mode (used when applying raw model
    predictions) clamps instead of raising.
    """
    if op in GENERATING_OPS:
        if generated is None or len(generated) == 0:
            if strict:
                raise MissingGeneratedValue(f"operation {op} requires a generated value")
            return NULL
        new_value = value_from_tokens(generated)
        if strict and new_value == prev:
            raise PreconditionViolated(f"operation {op} must produce a value different from the previous one")
        return new_value

    if generated is not None:
        raise UnexpectedGeneratedValue(f"operation {op} takes no generated value")

    if op is Operation.CARRYOVER:
        return prev
    if op is Operation.DELETE:
        if strict and prev.is_null:
            raise PreconditionViolated("delete on a slot that is already null")
        return NULL
    if op is Operation.DONTCARE:
        if strict and prev.is_dontcare:
            raise PreconditionViolated("dontcare on a slot that is already dontcare")
        return DONTCARE
    if op is Operation.YES:
        return SlotValue.text("yes")
    if op is Operation.NO:
        return SlotValue.text("no")
    raise ValueError(f"unhandled operation {op}")


def apply_turn(
    prev_state: DialogueState,
    ops: Sequence[Operation],
    generated: Mapping[int, Sequence[str]],
    *,
    strict: bool = True,
) -> DialogueState:
    """Apply one operation per slot, writing generated values where required."""
    if len(ops) != len(prev_state):
        raise ValueError(f"expected {len(prev_state)} operations, got {len(ops)}")
    if strict:
        need = {j for j, op in enumerate(ops) if op in GENERATING_OPS}
        have = set(generated)
        for j in sorted(need - have):
            raise MissingGeneratedValue("no generated value", slot=prev_state.slots[j])
        for j in sorted(have - need):
            if not 0 <= j < len(ops):
                raise UnexpectedGeneratedValue(f"generated value for out-of-range slot index {j}")
            raise UnexpectedGeneratedValue(
                f"generated value supplied for {ops[j]}", slot=prev_state.slots[j]
            )
    new_values = []
    for j, (slot, prev, op) in enumerate(zip(prev_state.slots, prev_state.values, ops)):
        gen = generated.get(j) if op in GENERATING_OPS else None
        try:
            new_values.append(apply_operation(prev, op, gen, strict=strict))
        except (PreconditionViolated, MissingGeneratedValue, UnexpectedGeneratedValue) as exc:
            raise type(exc)(str(exc), slot=slot) from None
    return DialogueState(prev_state.slots, tuple(new_values))


def derive_gold_operations(
    prev: DialogueState,
    curr: DialogueState,
    opset: OperationSet,
) -> tuple[list[Operation], dict[int, tuple[str, ...]]]:
    """Label every slot with the operation (and value) that turns `prev` into `curr`.

    Routing: unchanged slots carry over; transitions into a special use that
    special's dedicated operation when the set has one, and otherwise fall
    back to the set's generating operation with the special's stand-in string
    as the target, so applying the result always reproduces `curr`.
    """
    if prev.slots != curr.slots:
        raise ValueError("states must share a schema")
    gen_op = opset.generator_op
    ops: list[Operation] = []
    values: dict[int, tuple[str, ...]] = {}
    for j, (before, after) in enumerate(zip(prev.values, curr.values)):
        if before == after:
            ops.append(Operation.CARRYOVER)
            continue
        if after.is_null and Operation.DELETE in opset:
            ops.append(Operation.DELETE)
            continue
        if after.is_dontcare and Operation.DONTCARE in opset:
            ops.append(Operation.DONTCARE)
            continue
        if opset.variant == "six" and after.is_text and after.tokens in (("yes",), ("no",)):
            ops.append(Operation.YES if after.tokens == ("yes",) else Operation.NO)
            continue
        ops.append(gen_op)
        values[j] = render_decoder_target(after)
    return ops, values


def gold_update_set(ops: Iterable[Operation]) -> list[int]:
    """Indices of slots whose operation requires value generation."""
    return [j for j, op in enumerate(ops) if op in GENERATING_OPS]
