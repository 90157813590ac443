"""Command-line entry point wiring corpus, training, and evaluation into
reproducible runs.

Every command writes a manifest next to its outputs recording the command,
config, seed and sub-seed names, library versions, and input file hashes.
Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure (non-finite
loss or a failed gradient check).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .corpus import (
    CorpusError,
    ParseError,
    RelationVocab,
    Vocabulary,
    load_embedding_file,
    normalize_dataset,
    parse_corpus_file,
    split_dense_subset,
    write_corpus_file,
)
from .evaluation import (
    EvaluationError,
    metrics_report,
    gold_facts,
    rank_facts,
    records_from_pairs,
    score_bags,
    write_metrics_report,
    write_pr_csv,
    write_predictions,
)
from .gradcheck import full_model_gradcheck
from .model import ConfigError, GpGnn, predict_pairs
from .synth import SynthSpec, synthesize_multihop_corpus
from .training import SUB_SEEDS, TrainConfig, TrainingError, build_model, named_rngs, run_training

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # exit 1 on usage problems, not argparse's 2
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = _build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError(_build_parser().format_usage())
        return args.func(args, argv)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    except (CorpusError, EvaluationError, ConfigError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def _build_parser() -> _Parser:
    parser = _Parser(prog="gpgnn", description=__doc__)
    sub = parser.add_subparsers(dest="command")
    parser.set_defaults(command=None)

    p = sub.add_parser("preprocess", help="normalize a corpus and split it")
    p.add_argument("--input", required=True)
    p.add_argument("--relations", required=True)
    p.add_argument("--inverse-map", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--splits", default="0.8,0.1,0.1", help="train,valid,test fractions")
    p.add_argument("--dense", action="store_true", help="also split the test set by denseness")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("synth", help="generate a synthetic multi-hop corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--spec", default=None, help="JSON file of generator settings")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sentences", type=int, default=100)
    p.add_argument("--entities", type=int, default=40)
    p.add_argument("--relations", type=int, default=3)
    p.add_argument("--chains", type=int, default=1)
    p.add_argument("--mid-tokens", default="1,1")
    p.add_argument("--splits", default="0.8,0.1,0.1")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--train", required=True)
    p.add_argument("--valid", required=True)
    p.add_argument("--relations", required=True)
    p.add_argument("--inverse-map", default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--embeddings", default=None, help="pretrained word vectors, text format")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--layers", type=int, default=None)
    p.add_argument("--workers", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--model-dir", required=True, help="a train output directory")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--population", choices=("predictions", "gold-size"), default="predictions")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="write pair predictions for a data file")
    p.add_argument("--model-dir", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("gradcheck", help="run the full-model gradient oracle")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)
    return parser


# ---------------------------------------------------------------------------
# helpers


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _parse_splits(text: str) -> tuple[float, float, float]:
    try:
        parts = tuple(float(x) for x in text.split(","))
    except ValueError:
        raise UsageError(f"bad --splits value {text!r}") from None
    if len(parts) != 3 or any(p < 0 for p in parts) or abs(sum(parts) - 1.0) > 1e-9:
        raise UsageError(f"--splits needs three nonnegative fractions summing to 1, got {text!r}")
    return parts


def _write_manifest(out_dir: Path, command: str, argv, seed, inputs, outputs, counts, config=None):
    manifest = {
        "command": command,
        "argv": list(argv),
        "package_version": __version__,
        "numpy_version": np.__version__,
        "seed": seed,
        "sub_seeds": list(SUB_SEEDS),
        "inputs": {str(p): _sha256(p) for p in inputs},
        "outputs": sorted(str(Path(o).name) for o in outputs),
        "counts": counts,
    }
    if config is not None:
        cfg_json = json.dumps(config, sort_keys=True)
        manifest["config"] = config
        manifest["config_sha256"] = hashlib.sha256(cfg_json.encode()).hexdigest()
    path = out_dir / "manifest.json"
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return path


# ---------------------------------------------------------------------------
# commands


def cmd_preprocess(args, argv) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    relations = RelationVocab.from_files(args.relations, args.inverse_map)
    errors: list[ParseError] = []
    parsed = list(parse_corpus_file(args.input, errors))
    normalized, skips = normalize_dataset(parsed, relations)
    rng = np.random.default_rng(args.seed)
    order = rng.permutation(len(normalized))
    fr = _parse_splits(args.splits)
    n_train = int(round(len(normalized) * fr[0]))
    n_valid = int(round(len(normalized) * fr[1]))
    splits = {
        "train": [normalized[i] for i in order[:n_train]],
        "valid": [normalized[i] for i in order[n_train : n_train + n_valid]],
        "test": [normalized[i] for i in order[n_train + n_valid :]],
    }
    outputs = []
    for name, sentences in splits.items():
        path = out / f"{name}.jsonl"
        write_corpus_file(path, sentences)
        outputs.append(path)
    counts = {
        "parsed": len(parsed),
        "parse_errors": len(errors),
        "normalized": len(normalized),
        "skipped": dict(sorted(skips.items())),
        "split_sizes": {k: len(v) for k, v in splits.items()},
    }
    if args.dense:
        dense, rest = split_dense_subset(splits["test"])
        for name, sentences in (("test_dense", dense), ("test_rest", rest)):
            path = out / f"{name}.jsonl"
            write_corpus_file(path, sentences)
            outputs.append(path)
        counts["dense"] = {"dense": len(dense), "rest": len(rest)}
    for err in errors:
        print(f"{args.input}:{err.line_no}: {err.message}", file=sys.stderr)
    inputs = [args.input, args.relations] + ([args.inverse_map] if args.inverse_map else [])
    _write_manifest(out, "preprocess", argv, args.seed, inputs, outputs, counts)
    print(json.dumps(counts, sort_keys=True))
    return EXIT_OK


def cmd_synth(args, argv) -> int:
    out = Path(args.out)
    if args.spec:
        with open(args.spec, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
        raw.setdefault("seed", args.seed)
        if "composition" in raw and raw["composition"] is not None:
            raw["composition"] = [tuple(rule) for rule in raw["composition"]]
        for key in ("mid_tokens", "splits"):
            if key in raw:
                raw[key] = tuple(raw[key])
        spec = SynthSpec(**raw)
        inputs = [args.spec]
    else:
        spec = SynthSpec(
            n_entities=args.entities,
            n_relations=args.relations,
            n_sentences=args.sentences,
            seed=args.seed,
            chains_per_sentence=args.chains,
            mid_tokens=tuple(int(x) for x in args.mid_tokens.split(",")),
            splits=_parse_splits(args.splits),
        )
        inputs = []
    result = synthesize_multihop_corpus(spec)
    paths = result.write_files(out)
    counts = {
        "train": len(result.train),
        "valid": len(result.valid),
        "test": len(result.test),
        "relations": len(result.relations),
    }
    _write_manifest(out, "synth", argv, spec.seed, inputs, list(paths.values()), counts)
    print(json.dumps(counts, sort_keys=True))
    return EXIT_OK


def _load_split(path, relations: RelationVocab):
    sentences = list(parse_corpus_file(path))
    normalized, skips = normalize_dataset(sentences, relations)
    return normalized, dict(sorted(skips.items()))


def cmd_train(args, argv) -> int:
    config = TrainConfig.load(args.config) if args.config else TrainConfig()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.layers is not None:
        overrides["layers"] = args.layers
    if args.workers is not None:
        overrides["workers"] = args.workers
    if overrides:
        config = TrainConfig.from_dict({**config.to_dict(), **overrides})
    if config.workers > 1:
        print("workers > 1 runs the serial reference path; results are identical", file=sys.stderr)

    relations = RelationVocab.from_files(args.relations, args.inverse_map)
    train, train_skips = _load_split(args.train, relations)
    valid, valid_skips = _load_split(args.valid, relations)
    vocab = Vocabulary.build(train)
    word_table = None
    if args.embeddings:
        if config.word_dim != 50:
            raise ConfigError("pretrained embeddings are 50-wide; set word_dim to 50")
        word_table = load_embedding_file(args.embeddings, vocab, named_rngs(config.seed)["init"])
    model = build_model(config, vocab, relations, word_table=word_table)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = run_training(config, train, valid, model, out_dir=out)
    _write_model_json(out / "model.json", config, vocab, relations)
    inputs = [args.train, args.valid, args.relations]
    if args.inverse_map:
        inputs.append(args.inverse_map)
    if args.config:
        inputs.append(args.config)
    if args.embeddings:
        inputs.append(args.embeddings)
    counts = {
        "train_sentences": len(train),
        "valid_sentences": len(valid),
        "train_skips": train_skips,
        "valid_skips": valid_skips,
        "best_epoch": result.best_epoch,
        "best_macro_f1": result.best_macro_f1,
        "epochs_run": result.epochs_run,
        "parameters": model.store.total_parameters(),
    }
    _write_manifest(out, "train", argv, config.seed, inputs,
                    ["checkpoint.bin", "run_log.jsonl", "model.json"], counts, config=config.to_dict())
    print(json.dumps({"best_epoch": result.best_epoch, "best_macro_f1": result.best_macro_f1},
                     sort_keys=True))
    return EXIT_OK


def _write_model_json(path, config: TrainConfig, vocab: Vocabulary, relations: RelationVocab):
    obj = {
        "config": config.to_dict(),
        "vocab": vocab.to_list(),
        "relations": relations.names,
        "inverse": relations.inverse,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, ensure_ascii=False, sort_keys=True, indent=2)
        fh.write("\n")


def load_trained_model(model_dir) -> tuple[GpGnn, TrainConfig, RelationVocab]:
    model_dir = Path(model_dir)
    with open(model_dir / "model.json", "r", encoding="utf-8") as fh:
        obj = json.load(fh)
    config = TrainConfig.from_dict(obj["config"])
    vocab = Vocabulary(obj["vocab"])
    relations = RelationVocab(obj["relations"], obj.get("inverse"))
    model = build_model(config, vocab, relations)
    model.store.load(model_dir / "checkpoint.bin")
    return model, config, relations


def cmd_eval(args, argv) -> int:
    model, config, relations = load_trained_model(args.model_dir)
    data, skips = _load_split(args.data, relations)
    records = records_from_pairs(predict_pairs(model, data))
    report = metrics_report(records, relations, population=args.population)
    report["counts"]["normalization_skips"] = skips
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_metrics_report(out / "metrics.json", report)
    write_predictions(out / "predictions.jsonl", records)
    outputs = ["metrics.json", "predictions.jsonl"]
    bags = score_bags(records)
    gold = gold_facts(records)
    if bags and gold:
        ranked = rank_facts(bags, gold, relations, population=args.population)
        write_pr_csv(out / "pr_curve.csv", ranked, len(gold))
        outputs.append("pr_curve.csv")
    inputs = [args.data, Path(args.model_dir) / "model.json", Path(args.model_dir) / "checkpoint.bin"]
    _write_manifest(out, "eval", argv, config.seed, inputs, outputs,
                    {"records": len(records), "skips": skips}, config=config.to_dict())
    print(json.dumps({"accuracy": report["accuracy"], "macro_f1": report["macro_f1"]}, sort_keys=True))
    return EXIT_OK


def cmd_predict(args, argv) -> int:
    model, config, relations = load_trained_model(args.model_dir)
    data, skips = _load_split(args.data, relations)
    records = records_from_pairs(predict_pairs(model, data))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_predictions(out / "predictions.jsonl", records)
    inputs = [args.data, Path(args.model_dir) / "model.json", Path(args.model_dir) / "checkpoint.bin"]
    _write_manifest(out, "predict", argv, config.seed, inputs, ["predictions.jsonl"],
                    {"records": len(records), "skips": skips})
    print(json.dumps({"records": len(records)}, sort_keys=True))
    return EXIT_OK


def cmd_gradcheck(args, argv) -> int:
    check = full_model_gradcheck(seed=args.seed, layers=args.layers, step=args.step, tol=args.tol)
    print(
        f"gradcheck: {check.n_parameters} parameters, {check.n_coordinates} coordinates, "
        f"max relative error {check.max_rel_error:.3e} (worst: {check.worst_parameter})"
    )
    if not check.passed:
        print(f"gradient check FAILED at tol {args.tol}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
