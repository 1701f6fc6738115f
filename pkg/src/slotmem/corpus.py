"""Corpus ingestion, turn-example construction, and synthetic corpus generation.

The on-disk corpus format is a JSON list of dialogues:

    [{"dialogue_id": "d1", "domains": ["hotel"],
      "turns": [{"system": "", "user": "...",
                 "state": {"hotel-area": "centre"}, "domain": "hotel"}]}]

Slots absent from "state" are null; the strings "dont care"/"dontcare"/
"do n't care" mean the indifferent special.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .state import (
    DONTCARE,
    NULL,
    DialogueState,
    Operation,
    OperationSet,
    SlotId,
    SlotValue,
    derive_gold_operations,
    normalize_text,
)

log = logging.getLogger(__name__)

__all__ = [
    "Schema",
    "Turn",
    "Dialogue",
    "TurnExample",
    "ParseError",
    "SchemaMismatch",
    "InvalidConfig",
    "LoadResult",
    "load_corpus",
    "build_examples",
    "ToyCorpusConfig",
    "synthesize_corpus",
    "toy_schema",
    "dialogues_to_json",
    "save_corpus",
]


class ParseError(Exception):
    """Corpus file is malformed."""


class SchemaMismatch(Exception):
    """Corpus mentions a domain or slot outside the schema (strict mode)."""


class InvalidConfig(Exception):
    """Synthetic-corpus configuration is out of range."""


@dataclass(frozen=True)
class Schema:
    """The fixed slot universe: ordered domains and alphabetically sorted slots."""

    domains: tuple[str, ...]
    slots: tuple[SlotId, ...]

    def __post_init__(self):
        if not self.domains or not self.slots:
            raise ValueError("schema needs at least one domain and one slot")
        for slot in self.slots:
            if slot.domain not in self.domains:
                raise ValueError(f"slot {slot} outside schema domains {self.domains}")
        if list(self.slots) != sorted(self.slots, key=lambda s: s.canonical):
            raise ValueError("schema slots must be sorted alphabetically")

    @classmethod
    def build(cls, domains: Iterable[str], slots: Iterable[SlotId]) -> "Schema":
        return cls(tuple(domains), tuple(sorted(slots, key=lambda s: s.canonical)))

    @classmethod
    def infer(cls, dialogues: Sequence["Dialogue"]) -> "Schema":
        """Recover a schema from data: union of domains and of state slots."""
        domains: set[str] = set()
        slots: set[SlotId] = set()
        for d in dialogues:
            for t in d.turns:
                domains.add(t.gold_domain)
                slots.update(t.gold_state.slots)
        return cls.build(sorted(domains), slots)

    @property
    def n_slots(self) -> int:
        return len(self.slots)

    @property
    def n_domains(self) -> int:
        return len(self.domains)

    def domain_slot_indices(self, domain: str) -> list[int]:
        return [j for j, s in enumerate(self.slots) if s.domain == domain]

    def to_json(self) -> dict:
        return {"domains": list(self.domains), "slots": [s.canonical for s in self.slots]}

    @classmethod
    def from_json(cls, obj: Mapping) -> "Schema":
        return cls.build(obj["domains"], [SlotId.parse(s) for s in obj["slots"]])


@dataclass(frozen=True)
class Turn:
    system: str
    user: str
    gold_state: DialogueState
    gold_domain: str


@dataclass(frozen=True)
class Dialogue:
    dialogue_id: str
    turns: tuple[Turn, ...]

    def __post_init__(self):
        if not self.turns:
            raise ValueError(f"dialogue {self.dialogue_id} has no turns")


@dataclass(frozen=True)
class TurnExample:
    """One supervised instance: previous/current utterances, states, and labels."""

    dialogue_id: str
    turn_index: int  # 1-based; turn 1 has an empty previous-turn block
    prev_system: str
    prev_user: str
    system: str
    user: str
    prev_state: DialogueState
    gold_state: DialogueState
    gold_ops: tuple[Operation, ...]
    gold_update_values: dict[int, tuple[str, ...]]
    gold_domain: str


@dataclass
class LoadResult:
    dialogues: list[Dialogue]
    dropped_slot_count: int = 0
    dropped_turn_count: int = 0


def _parse_value(raw: str) -> SlotValue:
    text = normalize_text(str(raw))
    if text in ("", "none", "[null]"):
        return NULL
    if text in ("dont care", "dontcare", "do n't care", "don't care"):
        return DONTCARE
    return SlotValue.text(text)


def load_corpus(path: str | Path, schema: Schema, *, strict: bool = False) -> LoadResult:
    """Read a corpus JSON file, keeping only in-schema domains and slots."""
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    if not isinstance(data, list):
        raise ParseError(f"{path}: top level must be a list of dialogues")

    slot_index = {s.canonical: s for s in schema.slots}
    result = LoadResult([])
    for d_i, obj in enumerate(data):
        try:
            dialogue_id = str(obj["dialogue_id"])
            raw_turns = obj["turns"]
        except (TypeError, KeyError) as exc:
            raise ParseError(f"{path}: dialogue #{d_i} missing {exc}") from None
        turns = []
        for t_i, raw in enumerate(raw_turns):
            try:
                system = str(raw.get("system", ""))
                user = str(raw["user"])
                domain = str(raw["domain"])
                raw_state = raw.get("state", {})
            except (TypeError, KeyError) as exc:
                raise ParseError(f"{path}: {dialogue_id} turn {t_i + 1} missing {exc}") from None
            if not user.strip():
                raise ParseError(f"{path}: {dialogue_id} turn {t_i + 1} has an empty user utterance")
            if domain not in schema.domains:
                if strict:
                    raise SchemaMismatch(f"{dialogue_id} turn {t_i + 1}: unknown domain {domain!r}")
                result.dropped_turn_count += 1
                log.warning("%s turn %d: dropping turn with out-of-schema domain %r",
                            dialogue_id, t_i + 1, domain)
                continue
            values: dict[SlotId, SlotValue] = {}
            for key, raw_value in raw_state.items():
                slot = slot_index.get(key)
                if slot is None:
                    if strict:
                        raise SchemaMismatch(f"{dialogue_id} turn {t_i + 1}: unknown slot {key!r}")
                    result.dropped_slot_count += 1
                    log.warning("%s turn %d: dropping out-of-schema slot %r", dialogue_id, t_i + 1, key)
                    continue
                values[slot] = _parse_value(raw_value)
            turns.append(Turn(system, user, DialogueState.from_mapping(schema.slots, values), domain))
        if turns:
            result.dialogues.append(Dialogue(dialogue_id, tuple(turns)))
    return result


def build_examples(dialogues: Sequence[Dialogue], opset: OperationSet) -> list[TurnExample]:
    """One example per turn, labeled against the gold previous state."""
    examples = []
    for dialogue in dialogues:
        prev_state: Optional[DialogueState] = None
        prev_turn: Optional[Turn] = None
        for t, turn in enumerate(dialogue.turns, start=1):
            if prev_state is None:
                prev_state = DialogueState.initial(turn.gold_state.slots)
            ops, values = derive_gold_operations(prev_state, turn.gold_state, opset)
            examples.append(TurnExample(
                dialogue_id=dialogue.dialogue_id,
                turn_index=t,
                prev_system=prev_turn.system if prev_turn else "",
                prev_user=prev_turn.user if prev_turn else "",
                system=turn.system,
                user=turn.user,
                prev_state=prev_state,
                gold_state=turn.gold_state,
                gold_ops=tuple(ops),
                gold_update_values=values,
                gold_domain=turn.gold_domain,
            ))
            prev_state = turn.gold_state
            prev_turn = turn
    return examples


# ---------------------------------------------------------------------------
# Synthetic corpus with a known generative process.
# ---------------------------------------------------------------------------

DOMAIN_POOL = ("hotel", "restaurant", "train", "taxi", "museum", "cinema", "gym", "cafe")
SLOT_NAME_POOL = ("area", "day", "food", "name", "parking", "price", "stars", "time", "type", "people")
VALUE_POOL = (
    "north", "south", "east", "west", "centre",
    "monday", "friday", "sunday",
    "cheap", "moderate", "expensive",
    "italian", "chinese", "indian",
    "small", "red", "blue",
    "early", "late", "two", "four", "six",
    "golden palace", "royal garden", "blue lion",
)

UPDATE_TEMPLATE = "i want the {domain} {slot} to be {value}"
DONTCARE_TEMPLATE = "i dont care about the {domain} {slot}"
DELETE_TEMPLATE = "please forget the {domain} {slot}"
FILLER_TEMPLATES = ("tell me more about the {domain}",)
SYSTEM_UTTERANCE = "okay . anything else ?"


@dataclass(frozen=True)
class ToyCorpusConfig:
    """Knobs of the synthetic generator; every field has a working default.

    Each turn picks an active domain; every slot of that domain independently
    changes with probability `update_prob`, and each change is verbalized
    with a template that spells out the new value, so copying from the input
    can always succeed.
    """

    n_dialogues: int = 100
    turns_per_dialogue: int = 6
    n_domains: int = 2
    slots_per_domain: int = 5
    values_per_slot: int = 4
    update_prob: float = 0.25
    dontcare_prob: float = 0.08
    delete_prob: float = 0.05
    domain_switch_prob: float = 0.3

    def validate(self) -> None:
        for name in ("update_prob", "dontcare_prob", "delete_prob", "domain_switch_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise InvalidConfig(f"{name}={p} outside [0, 1]")
        if self.dontcare_prob + self.delete_prob > 1.0:
            raise InvalidConfig("dontcare_prob + delete_prob exceed 1")
        if min(self.n_dialogues, self.turns_per_dialogue, self.n_domains,
               self.slots_per_domain) < 1:
            raise InvalidConfig("counts must be >= 1")
        if self.values_per_slot < 2:
            raise InvalidConfig("values_per_slot must be >= 2 so updates can change values")
        if self.n_domains > len(DOMAIN_POOL):
            raise InvalidConfig(f"at most {len(DOMAIN_POOL)} domains available")
        if self.slots_per_domain > len(SLOT_NAME_POOL):
            raise InvalidConfig(f"at most {len(SLOT_NAME_POOL)} slots per domain available")
        if self.values_per_slot > len(VALUE_POOL):
            raise InvalidConfig(f"at most {len(VALUE_POOL)} values per slot available")

    @classmethod
    def from_mapping(cls, raw: Mapping[str, str]) -> "ToyCorpusConfig":
        unknown = set(raw) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidConfig(f"unknown toy-corpus keys: {sorted(unknown)}")
        kwargs = {}
        for name, value in raw.items():
            try:
                kwargs[name] = float(value) if name.endswith("_prob") else int(value)
            except ValueError as exc:
                raise InvalidConfig(f"bad value for {name}: {value!r}") from exc
        return cls(**kwargs)


def toy_schema(config: ToyCorpusConfig) -> Schema:
    """Schema implied by a toy config; depends only on the config, not the seed."""
    config.validate()
    domains = DOMAIN_POOL[: config.n_domains]
    slots = []
    for i, domain in enumerate(domains):
        for k in range(config.slots_per_domain):
            name = SLOT_NAME_POOL[(i * config.slots_per_domain + k) % len(SLOT_NAME_POOL)]
            slots.append(SlotId(domain, name))
    if len(set(slots)) != len(slots):
        raise InvalidConfig("domain/slot pools too small for distinct slots")
    return Schema.build(domains, slots)


def synthesize_corpus(config: ToyCorpusConfig, seed: int) -> list[Dialogue]:
    """Generate dialogues from the templated process; deterministic under seed."""
    config.validate()
    schema = toy_schema(config)
    rng = np.random.default_rng(seed)

    slot_values: dict[SlotId, list[SlotValue]] = {}
    for slot in schema.slots:
        picks = rng.choice(len(VALUE_POOL), size=config.values_per_slot, replace=False)
        slot_values[slot] = [SlotValue.text(VALUE_POOL[i]) for i in sorted(picks)]

    dialogues = []
    for d in range(config.n_dialogues):
        dialogue_id = f"toy{d:05d}"
        state = DialogueState.initial(schema.slots)
        domain = schema.domains[int(rng.integers(schema.n_domains))]
        turns = []
        for t in range(1, config.turns_per_dialogue + 1):
            if t > 1 and schema.n_domains > 1 and rng.random() < config.domain_switch_prob:
                others = [x for x in schema.domains if x != domain]
                domain = others[int(rng.integers(len(others)))]
            phrases = []
            updates: dict[int, SlotValue] = {}
            for j in schema.domain_slot_indices(domain):
                if rng.random() >= config.update_prob:
                    continue
                slot, before = schema.slots[j], state.values[j]
                r = rng.random()
                if r < config.dontcare_prob and not before.is_dontcare:
                    updates[j] = DONTCARE
                    phrases.append(DONTCARE_TEMPLATE.format(domain=slot.domain, slot=slot.slot_name))
                elif r < config.dontcare_prob + config.delete_prob and not before.is_null:
                    updates[j] = NULL
                    phrases.append(DELETE_TEMPLATE.format(domain=slot.domain, slot=slot.slot_name))
                else:
                    pool = [v for v in slot_values[slot] if v != before]
                    value = pool[int(rng.integers(len(pool)))]
                    updates[j] = value
                    phrases.append(UPDATE_TEMPLATE.format(
                        domain=slot.domain, slot=slot.slot_name, value=value.render()))
            if phrases:
                user = " and ".join(phrases)
            else:
                user = FILLER_TEMPLATES[int(rng.integers(len(FILLER_TEMPLATES)))].format(domain=domain)
            state = state.replace(updates)
            turns.append(Turn(system="" if t == 1 else SYSTEM_UTTERANCE,
                              user=user, gold_state=state, gold_domain=domain))
        dialogues.append(Dialogue(dialogue_id, tuple(turns)))
    return dialogues


def dialogues_to_json(dialogues: Sequence[Dialogue]) -> list[dict]:
    out = []
    for d in dialogues:
        turns = []
        for t in d.turns:
            turns.append({
                "system": t.system,
                "user": t.user,
                "state": {s.canonical: v.render() for s, v in zip(t.gold_state.slots, t.gold_state.values)
                          if not v.is_null},
                "domain": t.gold_domain,
            })
        out.append({
            "dialogue_id": d.dialogue_id,
            "domains": sorted({t.gold_domain for t in d.turns}),
            "turns": turns,
        })
    return out


def save_corpus(dialogues: Sequence[Dialogue], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(dialogues_to_json(dialogues), f, indent=1, sort_keys=True)
        f.write("\n")
