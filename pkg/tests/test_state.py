import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from slotmem.state import (
    DONTCARE,
    NULL,
    DialogueState,
    MissingGeneratedValue,
    Operation,
    OperationSet,
    PreconditionViolated,
    SlotId,
    SlotValue,
    UnexpectedGeneratedValue,
    apply_operation,
    apply_turn,
    derive_gold_operations,
    gold_update_set,
    normalize_text,
    serialize_state,
    value_from_tokens,
)

from helpers import random_state, random_value, small_slots

SLOTS = small_slots(5)


def test_normalize_text():
    assert normalize_text("  Palace   HOTEL ") == "palace hotel"
    assert normalize_text("cheap") == "cheap"


def test_slot_id_parse_and_order():
    s = SlotId.parse("hotel-book day")
    assert s.domain == "hotel" and s.slot_name == "book day"
    assert s.canonical == "hotel-book day"
    slots = [SlotId("train", "day"), SlotId("hotel", "area")]
    assert sorted(slots)[0].domain == "hotel"
    with pytest.raises(ValueError):
        SlotId("", "area")


def test_slot_value_constructors():
    v = SlotValue.text("  Palace  Hotel ")
    assert v.tokens == ("palace", "hotel")
    assert v == SlotValue.text("palace hotel")
    with pytest.raises(ValueError):
        SlotValue.text("dont care")
    with pytest.raises(ValueError):
        SlotValue.text("")
    assert value_from_tokens(["dont", "care"]) == DONTCARE
    assert value_from_tokens(["DONTCARE"]) == DONTCARE
    assert value_from_tokens(["[NULL]"]) == NULL
    assert value_from_tokens([]) == NULL
    assert value_from_tokens(["cheap"]) == SlotValue.text("cheap")


def test_apply_operation_cases():
    cheap = SlotValue.text("cheap")
    assert apply_operation(cheap, Operation.CARRYOVER) == cheap
    assert apply_operation(cheap, Operation.DELETE) == NULL
    assert apply_operation(cheap, Operation.DONTCARE) == DONTCARE
    assert apply_operation(NULL, Operation.UPDATE, ["palace", "hotel"]) == SlotValue.text("palace hotel")
    assert apply_operation(cheap, Operation.YES) == SlotValue.text("yes")
    assert apply_operation(cheap, Operation.NO) == SlotValue.text("no")


def test_apply_operation_preconditions():
    with pytest.raises(PreconditionViolated):
        apply_operation(NULL, Operation.DELETE)
    with pytest.raises(PreconditionViolated):
        apply_operation(DONTCARE, Operation.DONTCARE)
    with pytest.raises(PreconditionViolated):
        apply_operation(SlotValue.text("cheap"), Operation.UPDATE, ["cheap"])
    with pytest.raises(MissingGeneratedValue):
        apply_operation(NULL, Operation.UPDATE)
    with pytest.raises(UnexpectedGeneratedValue):
        apply_operation(NULL, Operation.CARRYOVER, ["cheap"])
    # lenient mode clamps instead
    assert apply_operation(NULL, Operation.DELETE, strict=False) == NULL
    assert apply_operation(DONTCARE, Operation.DONTCARE, strict=False) == DONTCARE
    assert apply_operation(NULL, Operation.UPDATE, strict=False) == NULL


def test_generated_specials_map_back():
    assert apply_operation(SlotValue.text("cheap"), Operation.UPDATE, ["dont", "care"]) == DONTCARE
    assert apply_operation(SlotValue.text("cheap"), Operation.NON_CARRYOVER, ["[NULL]"]) == NULL


def test_apply_turn_identity_and_single_change():
    state = random_state(SLOTS, np.random.default_rng(0))
    same = apply_turn(state, [Operation.CARRYOVER] * len(SLOTS), {})
    assert same == state
    ops = [Operation.CARRYOVER] * len(SLOTS)
    ops[0] = Operation.UPDATE
    out = apply_turn(DialogueState.initial(SLOTS), ops, {0: ("14:30",)})
    assert out.values[0] == SlotValue.text("14:30")
    assert all(v == NULL for v in out.values[1:])


def test_apply_turn_key_mismatch():
    state = DialogueState.initial(SLOTS)
    ops = [Operation.CARRYOVER] * len(SLOTS)
    ops[1] = Operation.UPDATE
    with pytest.raises(MissingGeneratedValue):
        apply_turn(state, ops, {})
    with pytest.raises(UnexpectedGeneratedValue):
        apply_turn(state, [Operation.CARRYOVER] * len(SLOTS), {2: ("west",)})


def _oracle_apply(prev, op, gen):
    """Independent per-slot re-statement of the overwrite semantics."""
    if op is Operation.CARRYOVER:
        return prev
    if op is Operation.DELETE:
        return NULL
    if op is Operation.DONTCARE:
        return DONTCARE
    if op is Operation.YES:
        return SlotValue.text("yes")
    if op is Operation.NO:
        return SlotValue.text("no")
    return value_from_tokens(gen)


def _random_legal_op(prev, rng):
    """Draw an operation legal for `prev`, plus its generated tokens if any."""
    while True:
        op = Operation(rng.choice([o.value for o in OperationSet.from_variant("six").members]))
        if op is Operation.DELETE and prev.is_null:
            continue
        if op is Operation.DONTCARE and prev.is_dontcare:
            continue
        if op is Operation.UPDATE:
            for _ in range(20):
                v = random_value(rng)
                if v.is_text and v != prev:
                    return op, v.tokens
            continue
        return op, None


def test_apply_turn_matches_per_slot_oracle():
    rng = np.random.default_rng(7)
    for _ in range(300):
        prev = random_state(SLOTS, rng)
        ops, gen = [], {}
        for j, pv in enumerate(prev.values):
            op, tokens = _random_legal_op(pv, rng)
            ops.append(op)
            if tokens is not None:
                gen[j] = tokens
        got = apply_turn(prev, ops, gen)
        want = tuple(_oracle_apply(pv, op, gen.get(j)) for j, (pv, op) in enumerate(zip(prev.values, ops)))
        assert got.values == want


@pytest.mark.parametrize("variant", OperationSet.variants())
def test_derive_round_trip(variant):
    opset = OperationSet.from_variant(variant)
    rng = np.random.default_rng(11)
    for _ in range(400):
        prev = random_state(SLOTS, rng)
        curr = random_state(SLOTS, rng)
        ops, values = derive_gold_operations(prev, curr, opset)
        assert all(op in opset for op in ops)
        assert apply_turn(prev, ops, values) == curr


def test_derive_never_violates_preconditions():
    rng = np.random.default_rng(3)
    opset = OperationSet.from_variant("four")
    for _ in range(300):
        prev = random_state(SLOTS, rng)
        curr = random_state(SLOTS, rng)
        ops, _ = derive_gold_operations(prev, curr, opset)
        for op, before in zip(ops, prev.values):
            assert not (op is Operation.DELETE and before.is_null)
            assert not (op is Operation.DONTCARE and before.is_dontcare)


def test_derive_examples():
    prev = DialogueState.initial(SLOTS)
    ops, values = derive_gold_operations(prev, prev, OperationSet.from_variant("four"))
    assert all(op is Operation.CARRYOVER for op in ops)
    assert values == {}
    curr = prev.replace({0: SlotValue.text("14:30")})
    ops, values = derive_gold_operations(prev, curr, OperationSet.from_variant("four"))
    assert ops[0] is Operation.UPDATE and values[0] == ("14:30",)
    assert gold_update_set(ops) == [0]


def test_opset_variants():
    four = OperationSet.from_variant("four")
    assert len(four) == 4 and four.members[0] is Operation.CARRYOVER
    two = OperationSet.from_variant("two")
    assert two.members == (Operation.CARRYOVER, Operation.NON_CARRYOVER)
    six = OperationSet.from_variant("six")
    assert Operation.YES in six and Operation.NO in six
    assert len(OperationSet.from_variant("three_dontcare")) == 3
    with pytest.raises(ValueError):
        OperationSet.from_variant("five")


def test_serialize_state():
    state = DialogueState.initial(SLOTS).replace({0: SlotValue.text("centre"), 1: DONTCARE})
    lines = serialize_state(state)
    assert lines[0] == f"{SLOTS[0].canonical}: centre"
    assert lines[1] == f"{SLOTS[1].canonical}: dont care"
    assert all(line.endswith(": none") for line in lines[2:])


@st.composite
def state_pairs(draw):
    seed = draw(st.integers(0, 2**32 - 1))
    rng = np.random.default_rng(seed)
    return random_state(SLOTS, rng), random_state(SLOTS, rng)


@settings(max_examples=200, deadline=None)
@given(pair=state_pairs(), variant=st.sampled_from(OperationSet.variants()))
def test_round_trip_property(pair, variant):
    prev, curr = pair
    ops, values = derive_gold_operations(prev, curr, OperationSet.from_variant(variant))
    assert apply_turn(prev, ops, values) == curr
