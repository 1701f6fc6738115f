"""Shared random generators for state/corpus tests."""

from __future__ import annotations

import numpy as np

from slotmem.state import DONTCARE, NULL, DialogueState, SlotId, SlotValue

WORDS = [
    "north", "south", "east", "west", "centre", "cheap", "expensive",
    "monday", "friday", "italian", "chinese", "palace", "hotel", "garden",
    "yes", "no", "early", "late", "blue", "golden",
]


def small_slots(n: int = 5) -> tuple[SlotId, ...]:
    names = ["area", "day", "food", "name", "price", "stars", "time", "type"]
    return tuple(sorted(
        (SlotId("hotel" if i % 2 == 0 else "cafe", names[i % len(names)]) for i in range(n)),
        key=lambda s: s.canonical,
    ))


def random_value(rng: np.random.Generator) -> SlotValue:
    r = rng.random()
    if r < 0.30:
        return NULL
    if r < 0.45:
        return DONTCARE
    k = 1 if rng.random() < 0.7 else 2
    toks = rng.choice(WORDS, size=k, replace=False)
    return SlotValue.text(" ".join(toks))


def random_state(slots, rng: np.random.Generator) -> DialogueState:
    return DialogueState(tuple(slots), tuple(random_value(rng) for _ in slots))
