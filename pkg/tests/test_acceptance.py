"""Acceptance suite: one test per exit criterion, at its stated tolerance.

Each criterion prints a `[PASS]`/`[FAIL]` line (visible with `pytest -s`).
The end-to-end criterion trains the full desk-scale model once; expect the
module to take tens of minutes on a small machine.
"""

import contextlib
import json
import time

import numpy as np
import pytest

import slotmem.autodiff as ad
from slotmem.autodiff import Tensor
from slotmem.corpus import ToyCorpusConfig, build_examples, synthesize_corpus, toy_schema
from slotmem.decoder import DecodeJob
from slotmem.encoder import PaddedBatch
from slotmem.encoding import build_vocabulary, encode_turn
from slotmem.evaluation import (
    Toggles,
    compute_metrics,
    efficiency_stats,
    error_grid,
    joint_goal_accuracy,
    run_inference,
)
from slotmem.layers import GRUCell, LayerNorm, MultiHeadSelfAttention, ParamRegistry
from slotmem.model import ModelConfig, Tracker
from slotmem.state import (
    DONTCARE,
    NULL,
    DialogueState,
    Operation,
    OperationSet,
    PreconditionViolated,
    SlotValue,
    apply_operation,
    apply_turn,
    derive_gold_operations,
    value_from_tokens,
)
from slotmem.training import TrainConfig, train

from gradcheck import finite_diff_check, param
from helpers import random_state, random_value

FOUR = OperationSet.from_variant("four")


@contextlib.contextmanager
def criterion(number: int, label: str):
    try:
        yield
    except BaseException:
        print(f"[FAIL] criterion {number}: {label}")
        raise
    print(f"[PASS] criterion {number}: {label}")


# --------------------------------------------------------------------------
# shared tiny fixtures (criteria 3-6, 8, 9 use small models)
# --------------------------------------------------------------------------

TINY_MODEL = ModelConfig(d_model=16, n_layers=1, n_heads=2, d_ffn=32,
                         max_positions=128, dropout=0.0, max_decode_len=8)


@pytest.fixture(scope="module")
def tiny():
    config = ToyCorpusConfig(n_dialogues=12, turns_per_dialogue=4)
    dialogues = synthesize_corpus(config, seed=71)
    schema = toy_schema(config)
    vocab = build_vocabulary(dialogues, schema)
    model = Tracker(TINY_MODEL, vocab, schema, FOUR, seed=11)
    examples = build_examples(dialogues, FOUR)
    return model, dialogues, examples


def _collate(model, examples):
    encoded = [encode_turn(ex, model.vocab, mode="eval") for ex in examples]
    return PaddedBatch.collate(encoded, model.vocab.pad_id)


# --------------------------------------------------------------------------
# criterion 1: operation semantics oracle
# --------------------------------------------------------------------------

def _oracle_apply(prev, op, gen):
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


def test_criterion_1_operation_semantics():
    with criterion(1, "apply_turn matches the per-slot oracle on 1,000 triples; "
                      "precondition violations rejected; < 1 s"):
        slots = toy_schema(ToyCorpusConfig()).slots  # J = 10
        rng = np.random.default_rng(111)
        six = OperationSet.from_variant("six")
        started = time.perf_counter()
        for _ in range(1000):
            prev = random_state(slots, rng)
            ops, gen = [], {}
            for j, before in enumerate(prev.values):
                while True:
                    op = six.members[int(rng.integers(len(six)))]
                    if op is Operation.DELETE and before.is_null:
                        continue
                    if op is Operation.DONTCARE and before.is_dontcare:
                        continue
                    if op is Operation.UPDATE:
                        value = random_value(rng)
                        if not value.is_text or value == before:
                            continue
                        gen[j] = value.tokens
                    if op is Operation.NON_CARRYOVER:
                        op = Operation.CARRYOVER
                    break
                ops.append(op)
            got = apply_turn(prev, ops, gen)
            want = tuple(_oracle_apply(v, op, gen.get(j))
                         for j, (v, op) in enumerate(zip(prev.values, ops)))
            assert got.values == want
        elapsed = time.perf_counter() - started
        # every precondition violation must be rejected
        with pytest.raises(PreconditionViolated):
            apply_operation(NULL, Operation.DELETE)
        with pytest.raises(PreconditionViolated):
            apply_operation(DONTCARE, Operation.DONTCARE)
        ops = [Operation.DELETE] + [Operation.CARRYOVER] * (len(slots) - 1)
        with pytest.raises(PreconditionViolated):
            apply_turn(DialogueState.initial(slots), ops, {})
        assert elapsed < 1.0, f"{elapsed:.2f}s for 1,000 triples"


# --------------------------------------------------------------------------
# criterion 2: label round-trip over every operation set
# --------------------------------------------------------------------------

def test_criterion_2_label_round_trip():
    with criterion(2, "derive-then-apply round-trips 10,000 state pairs under "
                      "all five operation sets; < 10 s"):
        slots = toy_schema(ToyCorpusConfig()).slots
        opsets = [OperationSet.from_variant(v) for v in OperationSet.variants()]
        rng = np.random.default_rng(222)
        started = time.perf_counter()
        for _ in range(10_000):
            prev = random_state(slots, rng)
            curr = random_state(slots, rng)
            for opset in opsets:
                ops, values = derive_gold_operations(prev, curr, opset)
                assert apply_turn(prev, ops, values) == curr
        elapsed = time.perf_counter() - started
        assert elapsed < 10.0, f"{elapsed:.2f}s for 10,000 pairs x 5 opsets"


# --------------------------------------------------------------------------
# criterion 3: gradient correctness of every layer at d = 16
# --------------------------------------------------------------------------

def test_criterion_3_gradient_checks(tiny):
    model, dialogues, examples = tiny
    with criterion(3, "finite-difference checks pass for attention, layernorm, "
                      "GRU step, copy mixture, both heads, all three losses; "
                      "rel err < 1e-4; < 60 s"):
        started = time.perf_counter()
        rng = np.random.default_rng(333)

        reg = ParamRegistry()
        attn = MultiHeadSelfAttention(reg, "attn", 16, 2, rng)
        x = param("x", (2, 5, 16), rng)
        mask = np.zeros((2, 1, 1, 5))
        mask[1, :, :, 4] = -1e9
        finite_diff_check(reg.all() + [x], lambda: ad.mean_all(ad.tanh(attn(x, mask))))

        reg = ParamRegistry()
        ln = LayerNorm(reg, "ln", 16)
        y = param("y", (3, 16), rng, scale=2.0)
        w = Tensor(rng.normal(size=(3, 16)))
        finite_diff_check(reg.all() + [y], lambda: ad.sum_all(ln(y) * w))

        reg = ParamRegistry()
        gru = GRUCell(reg, "gru", 16, rng)
        h = param("h", (3, 16), rng)
        e = param("e", (3, 16), rng)
        finite_diff_check(reg.all() + [h, e], lambda: ad.mean_all(ad.tanh(gru.step(h, e))))

        # copy mixture, both heads, and the three losses, through the real model
        sample = [ex for ex in examples if ex.gold_update_values][:2]
        batch = _collate(model, sample)
        gold_ops = np.array([[model.opset.index(op) for op in ex.gold_ops] for ex in sample])
        gold_dom = np.array([model.schema.domains.index(ex.gold_domain) for ex in sample])
        jobs, targets = [], []
        for i, ex in enumerate(sample):
            upd = sorted(ex.gold_update_values)
            for j in upd:
                jobs.append(DecodeJob(i, j, weight=1.0 / (len(sample) * len(upd))))
                targets.append(model.vocab.ids_of(ex.gold_update_values[j])
                               + [model.vocab.eos_id])

        def joint_loss():
            enc = model.encoder.encode(batch)
            pred = model.encoder.predict_operations(enc, model.opset)
            loss_op, loss_dom = model.encoder.operation_loss(pred, gold_ops, gold_dom)
            decoded = model.decoder.decode_teacher(enc, jobs, targets, [True] * len(jobs))
            return loss_op + loss_dom + decoded.loss

        names = {p.name: p for p in model.parameters()}
        checked = [names[n] for n in (
            "decoder.copy_gate.weight",       # the copy-mixture gate
            "decoder.gru.w_input", "decoder.gru.b_hidden",
            "encoder.op_head.weight",         # operation head
            "encoder.domain_head.weight",     # domain head
            "encoder.pooler.weight",
            "embedding.weight",               # shared vocabulary projection
            "encoder.block0.attn.q.weight",
            "encoder.block0.ln_ffn.gain",
            "encoder.segment_emb",
        )]
        finite_diff_check(checked, joint_loss)
        elapsed = time.perf_counter() - started
        assert elapsed < 60.0, f"{elapsed:.1f}s"


# --------------------------------------------------------------------------
# criterion 4: distribution validity on 1,000 random forward passes
# --------------------------------------------------------------------------

def test_criterion_4_distribution_validity(tiny):
    model, dialogues, examples = tiny
    with criterion(4, "operation, domain, vocabulary, copy, and mixture "
                      "distributions sum to 1 +/- 1e-6; gate in [0, 1]; "
                      "1,000 forward passes"):
        passes = 0
        batch_size = 25
        pool = examples * 3
        while passes < 1000:
            chunk = pool[passes % len(pool):][:batch_size] or pool[:batch_size]
            batch = _collate(model, chunk)
            with ad.no_grad():
                enc = model.encoder.encode(batch)
                pred = model.encoder.predict_operations(enc, model.opset)
                np.testing.assert_allclose(pred.op_probs.data.sum(-1), 1.0, atol=1e-6)
                np.testing.assert_allclose(pred.domain_probs.data.sum(-1), 1.0, atol=1e-6)
                jobs = [DecodeJob(i, j) for i, upd in enumerate(pred.update_sets)
                        for j in upd]
                if not jobs:
                    jobs = [DecodeJob(0, 0)]
                decoded = model.decoder.decode_greedy(enc, jobs, collect_traces=True)
                for trace in decoded.traces:
                    np.testing.assert_allclose(trace.p_vocab.sum(-1), 1.0, atol=1e-6)
                    np.testing.assert_allclose(trace.p_context.sum(-1), 1.0, atol=1e-6)
                    np.testing.assert_allclose(trace.p_value.sum(-1), 1.0, atol=1e-6)
                    assert (trace.gate >= 0.0).all() and (trace.gate <= 1.0).all()
            passes += len(chunk)


# --------------------------------------------------------------------------
# criterion 5: efficiency contract
# --------------------------------------------------------------------------

def test_criterion_5_efficiency_contract(tiny):
    model, dialogues, examples = tiny
    with criterion(5, "decode jobs equal the update set under every toggle "
                      "combination; all-carryover turns decode nothing; stats "
                      "match an independent recount"):
        for gt_prev in (False, True):
            for gt_ops in (False, True):
                for gt_vals in (False, True):
                    toggles = Toggles(gt_prev, gt_ops, gt_vals)
                    before = model.decoder.invocations
                    preds = run_inference(dialogues, model, toggles=toggles, max_len=128)
                    actual_jobs = model.decoder.invocations - before
                    recount = [sum(1 for op in p.operations if op in
                                   (Operation.UPDATE, Operation.NON_CARRYOVER))
                               for p in preds]
                    assert [p.decode_invocations for p in preds] == recount
                    if gt_vals:
                        assert actual_jobs == 0  # substitution bypasses the decoder
                    else:
                        assert actual_jobs == sum(recount)
                    stats = efficiency_stats(preds, model.schema.n_slots)
                    assert stats["update_count_min"] == min(recount)
                    assert stats["update_count_max"] == max(recount)
                    assert stats["update_count_avg"] == pytest.approx(np.mean(recount))

        # an all-carryover predictor performs zero decode work
        saved = model.encoder.op_head.weight.data.copy()
        model.encoder.op_head.weight.data = np.zeros_like(saved)
        try:
            before = model.decoder.invocations
            preds = run_inference(dialogues, model, max_len=128)
            assert model.decoder.invocations == before
            assert all(p.decode_invocations == 0 for p in preds)
            stats = efficiency_stats(preds, model.schema.n_slots)
            assert stats["update_count_min"] == stats["update_count_avg"] == \
                stats["update_count_max"] == 0
        finally:
            model.encoder.op_head.weight.data = saved


# --------------------------------------------------------------------------
# criterion 6: ground-truth operations + values are exact
# --------------------------------------------------------------------------

def test_criterion_6_gt_substitution_exact(tiny):
    model, dialogues, examples = tiny
    with criterion(6, "gold operations + gold values give joint goal accuracy "
                      "exactly 1.0 and relative error 0.00"):
        for corpus_seed in (71, 72):
            corpus = synthesize_corpus(
                ToyCorpusConfig(n_dialogues=8, turns_per_dialogue=4), seed=corpus_seed)
            preds = run_inference(corpus, model,
                                  toggles=Toggles(False, True, True), max_len=128)
            assert joint_goal_accuracy(preds) == 1.0
        grid = error_grid(dialogues[:6], model, max_len=128)
        for block in grid.values():
            cell = block["gold_ops_gold_values"]
            assert cell["joint_goal_accuracy"] == 1.0
            assert cell["relative_error_rate"] == 0.0


# --------------------------------------------------------------------------
# criterion 7: toy end-to-end experiment
# --------------------------------------------------------------------------

TOY_EXPERIMENT = TrainConfig(
    epochs=8,
    batch_size=32,
    enc_peak_lr=6e-4,
    dec_peak_lr=1.5e-3,
    seed=7,
    d_model=128, n_layers=4, n_heads=4, d_ffn=512,
)


@pytest.fixture(scope="module")
def toy_experiment():
    corpus_config = ToyCorpusConfig(n_dialogues=800, turns_per_dialogue=6,
                                    n_domains=2, slots_per_domain=5,
                                    update_prob=0.25)
    started = time.perf_counter()
    train_d = synthesize_corpus(corpus_config, seed=101)
    valid_d = synthesize_corpus(
        ToyCorpusConfig(n_dialogues=100, turns_per_dialogue=6), seed=102)
    test_d = synthesize_corpus(
        ToyCorpusConfig(n_dialogues=100, turns_per_dialogue=6), seed=103)
    schema = toy_schema(corpus_config)
    vocab = build_vocabulary(train_d, schema)
    examples = build_examples(train_d, FOUR)
    model, report = train(TOY_EXPERIMENT, schema, vocab, examples, valid_d)
    elapsed = time.perf_counter() - started
    return model, report, test_d, vocab, elapsed


def test_criterion_7_toy_end_to_end(toy_experiment):
    model, report, test_d, vocab, train_seconds = toy_experiment
    with criterion(7, "desk-scale experiment reaches test joint goal accuracy "
                      ">= 0.95 and update F1 >= 0.90 within 30 epochs"):
        assert len(vocab) <= 80, "vocabulary should stay near 60 tokens"
        assert TOY_EXPERIMENT.epochs <= 30
        preds = run_inference(test_d, model, batch_size=32)
        grid = error_grid(test_d, model, batch_size=32)
        metrics = compute_metrics(preds, model, test_d, grid=grid)
        print(f"    test joint goal accuracy: {metrics.joint_goal_accuracy:.4f}")
        print(f"    update F1: {metrics.operation_f1['update']['f1']:.4f}")
        print(f"    training wall-clock: {train_seconds / 60:.1f} min "
              f"(target < 30 min on a laptop-class machine)")
        assert metrics.joint_goal_accuracy >= 0.95
        assert metrics.operation_f1["update"]["f1"] >= 0.90
        for block in grid.values():
            base = block["model_ops_model_values"]["joint_goal_accuracy"]
            assert block["gold_ops_gold_values"]["joint_goal_accuracy"] == 1.0
            for cell in ("model_ops_gold_values", "gold_ops_model_values",
                         "gold_ops_gold_values"):
                assert block[cell]["joint_goal_accuracy"] >= base - 1e-9
        assert grid["gold_prev_state"]["model_ops_model_values"][
            "joint_goal_accuracy"] >= grid["predicted_prev_state"][
            "model_ops_model_values"]["joint_goal_accuracy"] - 1e-9


# --------------------------------------------------------------------------
# criterion 8: operation-set ablation harness
# --------------------------------------------------------------------------

def test_criterion_8_opset_ablations(tmp_path):
    with criterion(8, "two-, three-, and six-way operation sets train and the "
                      "metrics JSON reports per-opset joint goal accuracy"):
        corpus_config = ToyCorpusConfig(n_dialogues=60, turns_per_dialogue=4)
        train_d = synthesize_corpus(corpus_config, seed=81)
        valid_d = synthesize_corpus(
            ToyCorpusConfig(n_dialogues=10, turns_per_dialogue=4), seed=82)
        schema = toy_schema(corpus_config)
        vocab = build_vocabulary(train_d, schema)
        results = {}
        for variant in ("two", "three_dontcare", "three_delete", "six"):
            config = TrainConfig(epochs=2, batch_size=16, d_model=32, n_layers=1,
                                 n_heads=2, d_ffn=64, max_len=160,
                                 enc_peak_lr=1e-3, dec_peak_lr=1e-3,
                                 opset=variant, seed=5)
            opset = OperationSet.from_variant(variant)
            examples = build_examples(train_d, opset)
            model, report = train(config, schema, vocab, examples, valid_d[:4])
            preds = run_inference(valid_d, model, max_len=160)
            results[variant] = joint_goal_accuracy(preds)
        out = tmp_path / "ablations.json"
        out.write_text(json.dumps({"per_opset_joint_goal_accuracy": results},
                                  sort_keys=True, indent=1))
        parsed = json.loads(out.read_text())["per_opset_joint_goal_accuracy"]
        assert set(parsed) == {"two", "three_dontcare", "three_delete", "six"}
        assert all(0.0 <= v <= 1.0 for v in parsed.values())


# --------------------------------------------------------------------------
# criterion 9: determinism
# --------------------------------------------------------------------------

def test_criterion_9_determinism(tmp_path):
    with criterion(9, "identical config and seed give bitwise-identical "
                      "checkpoints and identical metrics JSON"):
        corpus_config = ToyCorpusConfig(n_dialogues=24, turns_per_dialogue=4)
        train_d = synthesize_corpus(corpus_config, seed=91)
        valid_d = synthesize_corpus(
            ToyCorpusConfig(n_dialogues=8, turns_per_dialogue=4), seed=92)
        schema = toy_schema(corpus_config)
        vocab = build_vocabulary(train_d, schema)
        config = TrainConfig(epochs=2, batch_size=16, d_model=32, n_layers=1,
                             n_heads=2, d_ffn=64, max_len=160,
                             enc_peak_lr=1e-3, dec_peak_lr=1e-3, seed=29)
        examples = build_examples(train_d, FOUR)
        paths, metrics = [], []
        for run in (0, 1):
            model, report = train(config, schema, vocab, examples, valid_d)
            path = tmp_path / f"run{run}.ckpt"
            model.save(path, extra_meta={"train_config": config.to_json(),
                                         "train_report": report.to_json(clock=False)})
            preds = run_inference(valid_d, model, max_len=160)
            grid = error_grid(valid_d, model, max_len=160)
            body = compute_metrics(preds, model, valid_d, grid=grid).to_json()
            metrics.append(json.dumps(body, sort_keys=True))
            paths.append(path)
        assert paths[0].read_bytes() == paths[1].read_bytes()
        assert metrics[0] == metrics[1]
