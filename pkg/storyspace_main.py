"""
Storyspace - Command Line

    storyspace synth        build a synthetic chain corpus
    storyspace train        train a network (any ablation variant)
    storyspace generate     tell a story for one feature file (--hide for the hiding test)
    storyspace interpolate  five photos in, nine sentences out
    storyspace evaluate     BLEU / ROUGE-L / masked-slot accuracy on a corpus
    storyspace gradcheck    finite-difference gradient suite

Shared flags: --config FILE, --seed, --precision {f32,f64}, --out DIR,
--print-config. Results go to stdout as `key: value` lines; progress and
warnings go to stderr.
"""

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np
from pydantic import ValidationError

from storyspace_checkpoint import CheckpointError, load_checkpoint
from storyspace_data import (
    FeatureFileError,
    Vocabulary,
    build_vocab,
    corpus_sentences,
    decode,
    read_corpus,
    read_features,
    write_synthetic_dataset,
)
from storyspace_generation import DecoderFactory, generate_story, interpolate_story, is_inserted_slot
from storyspace_gradcheck import format_gradcheck_table, run_gradcheck_suite
from storyspace_inputs import ConfigError, RunConfig, format_run_config, load_run_config
from storyspace_metrics import evaluate, evaluate_interpolation, format_report
from storyspace_model import INetModel, MaskPattern
from storyspace_tensor import set_precision
from storyspace_training import (
    DivergenceError,
    encode_corpus,
    model_from_checkpoint,
    train,
)
from storyspace_variants import list_ablation_variants, preview_ablation_variant


USAGE_ERRORS = (ConfigError, ValidationError)


def _emit(key: str, value: Any) -> None:
    print(f"{key}: {value}")


def _log(message: str) -> None:
    print(message, file=sys.stderr)


def _require(value: Optional[str], flag: str, command: str) -> str:
    if not value:
        raise ConfigError(f"{command} needs {flag}")
    return value


def _load_vocab(config: RunConfig, command: str) -> Vocabulary:
    path = Path(_require(config.vocab, "--vocab", command))
    if not path.is_file():
        raise FileNotFoundError(f"vocabulary not found: {path}")
    return Vocabulary.load(path)


def _load_model(config: RunConfig, command: str) -> INetModel:
    record = load_checkpoint(_require(config.checkpoint, "--checkpoint", command))
    return model_from_checkpoint(record)


def _template_tokens(path: Optional[str]) -> List[str]:
    """Template tokens from synthetic.json, or one token per line."""
    if not path:
        return []
    text = Path(path).read_text(encoding="utf-8")
    if path.endswith(".json"):
        return list(json.loads(text).get("template_tokens", []))
    return [line.strip() for line in text.splitlines() if line.strip()]


def _decoder(model: INetModel, config: RunConfig):
    return DecoderFactory.create(model, beam=config.beam, max_len=config.max_len,
                                 length_normalize=config.length_normalize)


# ============================================================================
# COMMANDS
# ============================================================================

def cmd_synth(args: argparse.Namespace, config: RunConfig) -> int:
    spec = config.synthetic_spec()
    paths = write_synthetic_dataset(config.out, spec)
    _log(f"✓ Synthetic corpus: {spec.stories} train / {spec.test_stories} test stories, {spec.topics} topics")
    for key, path in paths.items():
        _emit(key, path)
    return 0


def cmd_train(args: argparse.Namespace, config: RunConfig) -> int:
    set_precision(config.precision)
    corpus_path = _require(config.corpus, "--corpus", "train")
    records = read_corpus(corpus_path)
    if not records:
        raise ConfigError(f"corpus is empty: {corpus_path}")

    out = Path(config.out)
    if config.vocab and Path(config.vocab).is_file():
        vocab = Vocabulary.load(config.vocab)
    else:
        vocab = build_vocab(corpus_sentences(records), config.min_count)
        vocab.save(out / "vocab.txt")
        _log(f"✓ Vocabulary built: {len(vocab)} ids -> {out / 'vocab.txt'}")

    features = records[0].load_features()
    inet = config.inet_config(n_slots=features.shape[0], feature_dim=features.shape[1], vocab_size=len(vocab))
    checkpoint_path = Path(config.checkpoint) if config.checkpoint else out / "checkpoint.inck"

    resume = None
    if args.resume and checkpoint_path.is_file():
        resume = load_checkpoint(checkpoint_path)
        if resume.config != inet:
            raise ConfigError("checkpoint was written for a different network configuration")
        _log(f"✓ Resuming from epoch {resume.epoch}")

    model = INetModel(inet, rng=np.random.default_rng(config.seed))
    _log(preview_ablation_variant(model.variant).rstrip())
    result = train(model, encode_corpus(records, vocab), config.train_config(),
                   checkpoint_path=checkpoint_path, resume=resume, verbose=True)

    log_path = out / "loss_history.jsonl"
    log_path.parent.mkdir(parents=True, exist_ok=True)
    log_path.write_text("".join(json.dumps(asdict(log), sort_keys=True) + "\n" for log in result.history),
                        encoding="utf-8")
    _emit("variant", model.variant.label)
    _emit("checkpoint", checkpoint_path)
    _emit("loss_log", log_path)
    _emit("epochs", len(result.history))
    if result.history:
        _emit("final_loss", f"{result.history[-1].loss:.6f}")
    return 0


def cmd_generate(args: argparse.Namespace, config: RunConfig) -> int:
    model = _load_model(config, "generate")
    vocab = _load_vocab(config, "generate")
    features = read_features(_require(config.features, "--features", "generate"))
    n_slots = features.shape[0]

    mask = None
    if args.hide is not None:
        if not 1 <= args.hide <= n_slots:
            raise ConfigError(f"--hide {args.hide} is outside slots 1..{n_slots}")
        mask = MaskPattern.hiding(n_slots, [args.hide - 1])

    story = generate_story(model, features, mask, _decoder(model, config))
    for slot, ids in enumerate(story, start=1):
        label = f"slot {slot} [hidden]" if mask is not None and slot - 1 in mask.hidden_slots else f"slot {slot}"
        _emit(label, decode(vocab, ids))
    return 0


def cmd_interpolate(args: argparse.Namespace, config: RunConfig) -> int:
    model = _load_model(config, "interpolate")
    vocab = _load_vocab(config, "interpolate")
    features = read_features(_require(config.features, "--features", "interpolate"))
    story = interpolate_story(model, features, _decoder(model, config))
    for index, ids in enumerate(story):
        label = f"slot {index + 1} [inserted]" if is_inserted_slot(index) else f"slot {index + 1}"
        _emit(label, decode(vocab, ids))
    return 0


def cmd_evaluate(args: argparse.Namespace, config: RunConfig) -> int:
    model = _load_model(config, "evaluate")
    vocab = _load_vocab(config, "evaluate")
    records = read_corpus(_require(config.corpus, "--corpus", "evaluate"))
    options = config.evaluation_options(_template_tokens(config.templates), hide_one_slot=bool(args.hide_one_slot))
    report = evaluate(model, records, vocab, options)
    if args.interpolation:
        report = report.model_copy(update={
            "interpolation_consistency": evaluate_interpolation(model, records, vocab, options)
        })
    print(format_report(report, args.format))
    return 0


def cmd_gradcheck(args: argparse.Namespace, config: RunConfig) -> int:
    _log("Running gradient checks (64-bit, central differences)...")
    results = run_gradcheck_suite(points=args.points, seed=config.seed, instances=args.instances)
    print(format_gradcheck_table(results))
    failed = [r.name for r in results if not r.passed]
    if failed:
        _log(f"✗ {len(failed)} gradient checks failed: {', '.join(failed)}")
        return 1
    _log(f"✓ All {len(results)} gradient checks passed")
    return 0


# ============================================================================
# PARSER
# ============================================================================

def _shared_flags() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", help="key = value config file (flags win)")
    shared.add_argument("--seed", type=int)
    shared.add_argument("--precision", choices=["f32", "f64"])
    shared.add_argument("--out", help="output directory")
    shared.add_argument("--print-config", action="store_true", help="print the resolved config and exit")
    return shared


def _model_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--hidden", type=int)
    parser.add_argument("--inner-dim", type=int)
    parser.add_argument("--decoder-hidden", type=int)
    parser.add_argument("--max-len", type=int)
    parser.add_argument("--ablation", help=" | ".join(list_ablation_variants()))
    parser.add_argument("--curriculum", choices=["staged", "fixed"])
    parser.add_argument("--fixed-hidden", type=int)
    parser.add_argument("--word-embedding", type=int)
    parser.add_argument("--scheduled-sampling", type=float)


def _decode_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--checkpoint")
    parser.add_argument("--vocab")
    parser.add_argument("--beam", type=int)
    parser.add_argument("--max-len", type=int)
    parser.add_argument("--length-normalize", action="store_true", default=None)


def build_parser() -> argparse.ArgumentParser:
    shared = _shared_flags()
    parser = argparse.ArgumentParser(prog="storyspace", description="Hide-and-tell visual storytelling")
    commands = parser.add_subparsers(dest="command", required=True)

    synth = commands.add_parser("synth", parents=[shared], help="build a synthetic chain corpus")
    synth.add_argument("--topics", type=int)
    synth.add_argument("--slots", type=int)
    synth.add_argument("--stories", type=int)
    synth.add_argument("--test-stories", type=int)
    synth.add_argument("--feature-dim", type=int)
    synth.add_argument("--noise", type=float)
    synth.set_defaults(handler=cmd_synth)

    train_cmd = commands.add_parser("train", parents=[shared], help="train a network")
    train_cmd.add_argument("--corpus")
    train_cmd.add_argument("--vocab")
    train_cmd.add_argument("--checkpoint")
    train_cmd.add_argument("--min-count", type=int)
    _model_flags(train_cmd)
    train_cmd.add_argument("--lr", type=float)
    train_cmd.add_argument("--alpha", type=int)
    train_cmd.add_argument("--beta", type=int)
    train_cmd.add_argument("--batch-size", type=int)
    train_cmd.add_argument("--epochs", type=int)
    train_cmd.add_argument("--checkpoint-every", type=int)
    train_cmd.add_argument("--clip-norm", type=float)
    train_cmd.add_argument("--resume", action="store_true", help="continue from --checkpoint if present")
    train_cmd.set_defaults(handler=cmd_train)

    generate = commands.add_parser("generate", parents=[shared], help="tell a story for a feature file")
    _decode_flags(generate)
    generate.add_argument("--features")
    generate.add_argument("--hide", type=int, help="1-based slot to hide")
    generate.set_defaults(handler=cmd_generate)

    interpolate = commands.add_parser("interpolate", parents=[shared], help="insert blank slots, decode nine")
    _decode_flags(interpolate)
    interpolate.add_argument("--features")
    interpolate.set_defaults(handler=cmd_interpolate)

    evaluate_cmd = commands.add_parser("evaluate", parents=[shared], help="score a corpus")
    _decode_flags(evaluate_cmd)
    evaluate_cmd.add_argument("--corpus")
    evaluate_cmd.add_argument("--templates", help="synthetic.json or a token-per-line file")
    evaluate_cmd.add_argument("--hide-one-slot", action="store_true")
    evaluate_cmd.add_argument("--interpolation", action="store_true", help="also score interpolation")
    evaluate_cmd.add_argument("--smooth-bleu", action="store_true", default=None)
    evaluate_cmd.add_argument("--format", choices=["text", "json"], default="text")
    evaluate_cmd.set_defaults(handler=cmd_evaluate)

    gradcheck = commands.add_parser("gradcheck", parents=[shared], help="finite-difference gradient suite")
    gradcheck.add_argument("--points", type=int, default=50, help="coordinates per tensor")
    gradcheck.add_argument("--instances", type=int, default=1, help="random draws per case (worst reported)")
    gradcheck.set_defaults(handler=cmd_gradcheck)
    return parser


def _flag_values(args: argparse.Namespace) -> Dict[str, Any]:
    skip = {"command", "config", "print_config", "handler"}
    return {key: value for key, value in vars(args).items() if key not in skip}


def _report(error: Exception) -> None:
    message = " ".join(str(error).split())
    print(f"error: {type(error).__name__}: {message}", file=sys.stderr)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    handler: Callable[[argparse.Namespace, RunConfig], int] = args.handler
    try:
        config = load_run_config(args.config, _flag_values(args))
        if args.print_config:
            print(format_run_config(config))
            return 0
        return handler(args, config)
    except USAGE_ERRORS as e:
        _report(e)
        return 2
    except (FileNotFoundError, FeatureFileError, CheckpointError, DivergenceError, ValueError, OSError) as e:
        _report(e)
        return 1


if __name__ == "__main__":
    sys.exit(main())
