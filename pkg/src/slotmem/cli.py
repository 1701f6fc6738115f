"""Command-line entry point: synth, build-vocab, train, eval, analyze, bench.

Config files are flat `key = value` lines ('#' starts a comment). Every
training hyperparameter and toy-corpus knob is addressable there and can be
overridden on the command line with repeated `--set key=value` flags.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .checkpoint import CheckpointVersionMismatch
from .corpus import (
    InvalidConfig,
    ParseError,
    Schema,
    SchemaMismatch,
    ToyCorpusConfig,
    build_examples,
    load_corpus,
    save_corpus,
    synthesize_corpus,
    toy_schema,
)
from .encoding import EmptyCorpus, StateBlockOverflow, Vocabulary, build_vocabulary
from .evaluation import (
    Toggles,
    compute_metrics,
    efficiency_stats,
    error_grid,
    predictions_to_jsonl,
    run_inference,
    slot_value_vocabulary,
)
from .model import Tracker
from .state import OperationSet
from .training import DivergenceDetected, OrphanParameter, TrainConfig, Trainer

KNOWN_ERRORS = (
    ParseError, SchemaMismatch, InvalidConfig, EmptyCorpus, StateBlockOverflow,
    CheckpointVersionMismatch, DivergenceDetected, OrphanParameter,
    ValueError, KeyError, FileNotFoundError, AssertionError,
)


def read_kv_file(path: str | Path) -> dict[str, str]:
    out: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def _collect_settings(config_path: str | None, overrides: list[str]) -> dict[str, str]:
    settings = read_kv_file(config_path) if config_path else {}
    for item in overrides or []:
        if "=" not in item:
            raise ValueError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        settings[key.strip()] = value.strip()
    return settings


def _write_json(path: str, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=1, sort_keys=True)
        f.write("\n")


def _load_schema_and_corpus(corpus_path: str, schema_path: str | None,
                            schema: Schema | None = None):
    if schema is None and schema_path:
        with open(schema_path, "r", encoding="utf-8") as f:
            schema = Schema.from_json(json.load(f))
    if schema is not None:
        return schema, load_corpus(corpus_path, schema)
    # two passes: infer the slot universe, then load against it
    probe = json.loads(Path(corpus_path).read_text(encoding="utf-8"))
    domains, slots = set(), set()
    if not isinstance(probe, list):
        raise ParseError(f"{corpus_path}: top level must be a list of dialogues")
    for dlg in probe:
        for turn in dlg.get("turns", []):
            domains.add(turn.get("domain"))
            slots.update(turn.get("state", {}))
    from .state import SlotId
    schema = Schema.build(sorted(d for d in domains if d),
                          [SlotId.parse(s) for s in slots])
    return schema, load_corpus(corpus_path, schema)


# ---------------------------------------------------------------- commands

def cmd_synth(args) -> int:
    config = ToyCorpusConfig.from_mapping(_collect_settings(args.config, args.set))
    dialogues = synthesize_corpus(config, args.seed)
    save_corpus(dialogues, args.out)
    if args.schema_out:
        _write_json(args.schema_out, toy_schema(config).to_json())
    print(f"wrote {len(dialogues)} dialogues to {args.out}")
    return 0


def cmd_build_vocab(args) -> int:
    schema, result = _load_schema_and_corpus(args.corpus, args.schema)
    vocab = build_vocabulary(result.dialogues, schema, args.min_count)
    vocab.save(args.out)
    print(f"wrote {len(vocab)} tokens to {args.out}")
    return 0


def cmd_train(args) -> int:
    config = TrainConfig.from_mapping(_collect_settings(args.config, args.set))
    schema, train_result = _load_schema_and_corpus(args.corpus, args.schema)
    valid_result = load_corpus(args.valid, schema)
    if args.vocab:
        vocab = Vocabulary.load(args.vocab)
    else:
        vocab = build_vocabulary(train_result.dialogues, schema, config.min_count)
    opset = OperationSet.from_variant(config.opset)
    examples = build_examples(train_result.dialogues, opset)
    trainer = Trainer(config, schema, vocab, examples, valid_result.dialogues)
    if args.resume:
        trainer.load_state(args.resume)

    log_handle = open(args.log, "w", encoding="utf-8") if args.log else None

    def log_fn(entry: dict) -> None:
        line = json.dumps(entry, sort_keys=True)
        print(line)
        if log_handle:
            log_handle.write(line + "\n")
            log_handle.flush()

    try:
        report = trainer.run(log_fn, stop_after=args.stop_after)
    finally:
        if log_handle:
            log_handle.close()
    if args.save_state:
        trainer.save_state(args.save_state)
    model = trainer.best_model()
    model.save(args.out_checkpoint,
               extra_meta={"train_config": config.to_json(),
                           "train_report": report.to_json(clock=False)})
    print(f"best epoch {report.best_epoch} "
          f"(validation joint goal accuracy {report.best_accuracy:.4f}); "
          f"checkpoint at {args.out_checkpoint}")
    return 0


def _toggles_from(arg: str | None) -> Toggles:
    if not arg:
        return Toggles()
    valid = {"gt_prev_state", "gt_operations", "gt_values"}
    chosen = {t.strip() for t in arg.split(",") if t.strip()}
    unknown = chosen - valid
    if unknown:
        raise ValueError(f"unknown toggles {sorted(unknown)}; valid: {sorted(valid)}")
    return Toggles(**{t: True for t in chosen})


def cmd_eval(args) -> int:
    model = Tracker.load(args.checkpoint)
    result = load_corpus(args.corpus, model.schema)
    toggles = _toggles_from(args.toggles)
    preds = run_inference(result.dialogues, model, toggles=toggles,
                          max_len=model.config.max_positions,
                          batch_size=args.batch_size, workers=args.workers)
    grid = error_grid(result.dialogues, model,
                      max_len=model.config.max_positions,
                      batch_size=args.batch_size, workers=args.workers)
    report = compute_metrics(preds, model, result.dialogues, grid=grid)
    _write_json(args.out, report.to_json())
    if args.dump:
        with open(args.dump, "w", encoding="utf-8") as f:
            f.write(predictions_to_jsonl(preds))
    print(f"joint goal accuracy {report.joint_goal_accuracy:.4f} "
          f"over {report.n_turns} turns; metrics at {args.out}")
    return 0


def cmd_analyze(args) -> int:
    model = Tracker.load(args.checkpoint)
    result = load_corpus(args.corpus, model.schema)
    grid = error_grid(result.dialogues, model,
                      max_len=model.config.max_positions,
                      batch_size=args.batch_size, workers=args.workers)
    _write_json(args.out, grid)
    print(f"error grid at {args.out}")
    return 0


def cmd_bench(args) -> int:
    model = Tracker.load(args.checkpoint)
    result = load_corpus(args.corpus, model.schema)
    preds = run_inference(result.dialogues, model,
                          max_len=model.config.max_positions, measure_latency=True)
    stats = efficiency_stats(preds, model.schema.n_slots)
    stats["slot_value_vocabulary"] = slot_value_vocabulary(result.dialogues)
    stats["n_turns"] = len(preds)
    _write_json(args.out, stats)
    print(f"avg updates/turn {stats['update_count_avg']:.3f}, "
          f"mean latency {stats['mean_latency_ms']:.2f} ms; report at {args.out}")
    return 0


# ------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="slotmem",
        description="Slot-memory dialogue state tracking: synthesize data, "
                    "train, evaluate, analyze errors, benchmark efficiency.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    p.add_argument("--config", help="toy-corpus key=value file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config key")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--schema-out", help="also write the schema JSON here")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("build-vocab", help="build a vocabulary file from a corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--schema", help="schema JSON (inferred from the corpus if absent)")
    p.add_argument("--min-count", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_build_vocab)

    p = sub.add_parser("train", help="train a tracker")
    p.add_argument("--corpus", required=True)
    p.add_argument("--valid", required=True)
    p.add_argument("--config", help="training key=value file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--schema")
    p.add_argument("--vocab")
    p.add_argument("--out-checkpoint", required=True)
    p.add_argument("--log", help="line-delimited JSON epoch log")
    p.add_argument("--resume", help="resume from a saved training state")
    p.add_argument("--save-state", help="write the full training state here")
    p.add_argument("--stop-after", type=int,
                   help="pause after this many epochs (schedule horizon unchanged)")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="full metrics report on a corpus")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--toggles", help="comma list: gt_prev_state,gt_operations,gt_values")
    p.add_argument("--dump", help="write per-turn predictions here (ndjson)")
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("analyze", help="8-cell ground-truth substitution grid")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(fn=cmd_analyze)

    p = sub.add_parser("bench", help="latency and update-count statistics")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_bench)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except KNOWN_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
