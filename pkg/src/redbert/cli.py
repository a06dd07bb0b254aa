"""Command-line entry point wiring the whole pipeline.

Subcommands: gen-corpus, pretrain, finetune, eval, project. Option
precedence is flags > config file (flat key=value lines) > built-in
defaults. Every run writes a manifest (resolved config, seed, paths,
code version) into its run directory before any computation starts, so a
run is reproducible from the manifest alone.

Exit codes: 0 success, 1 usage error, 2 data/config/run error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import __version__
from .analyze import emit_figure, project_sentence
from .datapipe import (GeneratorSpec, SplitSpec, build_grammar_vocab,
                       build_pretraining_instances, generate_synthetic_corpus,
                       load_corpus, load_task_dataset,
                       make_synthetic_dep_embeddings, save_corpus,
                       save_task_dataset, split)
from .depinject import InjectedModel, SideTransformer, load_dep_embeddings
from .encoder import ModelConfig, init_random
from .errors import ConfigError, RedbertError
from .objectives import load_label_set
from .tokenizer import Vocab, load_vocab, save_vocab
from .trainkit import (TrainRunConfig, evaluate_f1, fine_tune, load_model,
                       load_task_head, model_out_dim, predict_task, pretrain)
from .trainkit import _encode_task, _task_scheme  # shared task plumbing


class UsageError(Exception):
    """Bad command line; maps to exit code 1."""


class _CliParser(argparse.ArgumentParser):
    def error(self, message):  # argparse would sys.exit(2)
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


# Per-command option defaults. These materialize into the manifest, so
# every knob has an explicit resolved value.
DEFAULTS = {
    "gen-corpus": {
        "num_docs": 2000, "chat_fraction": 0.2, "task_examples": 500,
        "seed": 0,
    },
    "pretrain": {
        "layers": 2, "hidden": 64, "heads": 4, "max_seq_len": 128,
        "dropout": 0.1, "dep_dim": 300, "inject_deps": False,
        "num_docs": 2000, "chat_fraction": 0.2, "train_fraction": 0.9,
        "batch_size": 32, "lr": 2e-5, "max_epochs": 10, "patience": 3,
        "eval_every": 1, "seed": 0,
    },
    "finetune": {
        "max_seq_len": 64, "freeze_encoder": False, "batch_size": 32,
        "lr": 2e-5, "max_epochs": 10, "patience": 3, "eval_every": 1,
        "seed": 0,
    },
    "eval": {"batch_size": 32, "max_seq_len": 64, "seed": 0},
    "project": {"seed": 0},
}


def build_parser() -> _CliParser:
    parser = _CliParser(prog="redbert", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--out", help="run directory (default: "
                       "$REDBERT_RUN_DIR or ./runs, plus the command name)")
        p.add_argument("--seed", type=int)
        return p

    p = add("gen-corpus", "generate the synthetic retail corpus + task data")
    p.add_argument("--num-docs", type=int)
    p.add_argument("--chat-fraction", type=float)
    p.add_argument("--task-examples", type=int)

    p = add("pretrain", "masked-token + next-sentence pretraining")
    p.add_argument("--corpus", help="corpus JSON-lines (default: generate)")
    p.add_argument("--vocab", help="vocabulary file (default: built from "
                   "the generator grammar)")
    p.add_argument("--layers", type=int)
    p.add_argument("--hidden", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--max-seq-len", type=int)
    p.add_argument("--dropout", type=float)
    p.add_argument("--inject-deps", action="store_true", default=None)
    p.add_argument("--dep-embeddings", help="embedding text file for the "
                   "dependency table (default: synthesized)")
    p.add_argument("--dep-dim", type=int)
    p.add_argument("--num-docs", type=int)
    p.add_argument("--chat-fraction", type=float)
    p.add_argument("--train-fraction", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--eval-every", type=int)

    p = add("finetune", "train a task head on a labeled dataset")
    p.add_argument("--task", required=True,
                   choices=["intent", "ner", "sentiment", "title",
                            "proactive"])
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="task dataset JSON-lines")
    p.add_argument("--vocab")
    p.add_argument("--labels", help="label set file to validate against")
    p.add_argument("--freeze-encoder", action="store_true", default=None)
    p.add_argument("--max-seq-len", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--eval-every", type=int)

    p = add("eval", "evaluate a fine-tuned checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--vocab")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--max-seq-len", type=int)

    p = add("project", "PCA-project one sentence under two models")
    p.add_argument("--sentence", required=True)
    p.add_argument("--model-a", required=True)
    p.add_argument("--model-b", required=True)
    p.add_argument("--vocab")
    return parser


# ------------------------------------------------------------ config files


def load_config_file(path) -> dict:
    values = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value, "
                                  f"got {line!r}")
            key, _, value = line.partition("=")
            values[key.strip().replace("-", "_")] = value.strip()
    return values


def _convert(raw: str, template):
    if isinstance(template, bool):
        lowered = raw.lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"expected a boolean, got {raw!r}")
    if isinstance(template, int):
        return int(raw)
    if isinstance(template, float):
        return float(raw)
    return raw


def resolve_options(command: str, args) -> dict:
    """flags > config file > defaults, all materialized."""
    defaults = DEFAULTS[command]
    file_cfg = load_config_file(args.config) if args.config else {}
    unknown = set(file_cfg) - set(defaults)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)} "
                          f"(valid: {sorted(defaults)})")
    resolved = {}
    for key, default in defaults.items():
        flag = getattr(args, key, None)
        if flag is not None:
            resolved[key] = flag
        elif key in file_cfg:
            resolved[key] = _convert(file_cfg[key], default)
        else:
            resolved[key] = default
    return resolved


# -------------------------------------------------------------- run plumbing


def resolve_run_dir(args) -> Path:
    if args.out:
        run_dir = Path(args.out)
    else:
        root = Path(os.environ.get("REDBERT_RUN_DIR", "runs"))
        run_dir = root / args.command
    run_dir.mkdir(parents=True, exist_ok=True)
    return run_dir


def write_manifest(run_dir: Path, command: str, options: dict, inputs: dict,
                   outputs: dict):
    manifest = {
        "command": command,
        "config": options,
        "seed": options.get("seed", 0),
        "inputs": inputs,
        "outputs": outputs,
        "code_version": __version__,
    }
    with open(run_dir / "manifest.json", "w", encoding="utf-8") as fh:
        fh.write(json.dumps(manifest, sort_keys=True, indent=2) + "\n")


def _resolve_vocab_path(flag_value, anchor_path) -> Path:
    """--vocab wins; otherwise look for vocab.txt beside the anchor file."""
    if flag_value:
        return Path(flag_value)
    sibling = Path(anchor_path).parent / "vocab.txt"
    if sibling.exists():
        return sibling
    raise ConfigError(f"no --vocab given and {sibling} does not exist")


def write_report_csv(path, report):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("label,precision,recall,f1,support\n")
        for name, m in report.per_class.items():
            fh.write(f"{name},{m.precision!r},{m.recall!r},{m.f1!r},"
                     f"{m.support}\n")
        fh.write(f"macro,,,{report.macro_f1!r},{report.total}\n")
        fh.write(f"micro,,,{report.micro_f1!r},{report.total}\n")


# ---------------------------------------------------------------- commands


def cmd_gen_corpus(args) -> int:
    opts = resolve_options("gen-corpus", args)
    run_dir = resolve_run_dir(args)
    outputs = {
        "corpus": str(run_dir / "corpus.jsonl"),
        "vocab": str(run_dir / "vocab.txt"),
        "dep_embeddings": str(run_dir / "dep_embeddings.txt"),
        "tasks": {name: str(run_dir / f"{name}.jsonl")
                  for name in ("intent", "ner", "sentiment", "title",
                               "proactive")},
    }
    write_manifest(run_dir, "gen-corpus", opts, inputs={}, outputs=outputs)
    spec = GeneratorSpec(num_docs=opts["num_docs"],
                         chat_fraction=opts["chat_fraction"],
                         task_examples=opts["task_examples"])
    docs, tasks = generate_synthetic_corpus(spec, seed=opts["seed"])
    save_corpus(outputs["corpus"], docs)
    vocab = Vocab(build_grammar_vocab())
    save_vocab(outputs["vocab"], vocab.tokens)
    make_synthetic_dep_embeddings(outputs["dep_embeddings"], vocab, dim=300,
                                  seed=opts["seed"])
    for name, ds in tasks.items():
        save_task_dataset(outputs["tasks"][name], ds)
    print(f"wrote {len(docs)} documents and 5 task datasets to {run_dir}")
    return 0


def cmd_pretrain(args) -> int:
    opts = resolve_options("pretrain", args)
    run_dir = resolve_run_dir(args)
    inputs = {"corpus": args.corpus, "vocab": args.vocab,
              "dep_embeddings": args.dep_embeddings}
    outputs = {"checkpoint": str(run_dir / "best.ckpt"),
               "metrics": str(run_dir / "metrics.csv"),
               "log": str(run_dir / "run.log.jsonl")}
    write_manifest(run_dir, "pretrain", opts, inputs, outputs)

    if args.vocab:
        vocab = load_vocab(args.vocab)
    else:
        vocab = Vocab(build_grammar_vocab())
    save_vocab(run_dir / "vocab.txt", vocab.tokens)

    if args.corpus:
        docs = load_corpus(args.corpus)
    else:
        spec = GeneratorSpec(num_docs=opts["num_docs"],
                             chat_fraction=opts["chat_fraction"],
                             task_examples=0)
        docs, _ = generate_synthetic_corpus(spec, seed=opts["seed"])
        save_corpus(run_dir / "corpus.jsonl", docs)
    train_docs, _ = split(docs, SplitSpec(opts["train_fraction"],
                                          seed=opts["seed"]))
    instances = build_pretraining_instances(train_docs, vocab,
                                            max_len=opts["max_seq_len"],
                                            seed=opts["seed"])

    config = ModelConfig(vocab_size=len(vocab), num_layers=opts["layers"],
                         hidden_size=opts["hidden"], num_heads=opts["heads"],
                         max_len=opts["max_seq_len"],
                         dropout=opts["dropout"], dep_dim=opts["dep_dim"])
    model = init_random(config, seed=opts["seed"])
    if opts["inject_deps"]:
        dep_path = args.dep_embeddings
        if not dep_path:
            dep_path = run_dir / "dep_embeddings.txt"
            make_synthetic_dep_embeddings(dep_path, vocab,
                                          dim=opts["dep_dim"],
                                          seed=opts["seed"])
        table = load_dep_embeddings(dep_path, vocab,
                                    dep_dim=opts["dep_dim"],
                                    seed=opts["seed"])
        side = SideTransformer(opts["dep_dim"], opts["max_seq_len"],
                               seed=opts["seed"])
        model = InjectedModel(model, table, side)

    run_config = TrainRunConfig(batch_size=opts["batch_size"],
                                learning_rate=opts["lr"],
                                max_epochs=opts["max_epochs"],
                                patience=opts["patience"],
                                eval_every=opts["eval_every"],
                                seed=opts["seed"])
    result, _ = pretrain(model, instances, run_config, run_dir=run_dir)
    print(f"pretrained on {len(instances)} instances; best validation loss "
          f"{result.best_val_loss:.4f}; checkpoint {outputs['checkpoint']}")
    return 0


def cmd_finetune(args) -> int:
    opts = resolve_options("finetune", args)
    run_dir = resolve_run_dir(args)
    inputs = {"checkpoint": args.checkpoint, "data": args.data,
              "vocab": args.vocab, "labels": args.labels}
    outputs = {"checkpoint": str(run_dir / "finetuned.ckpt"),
               "metrics": str(run_dir / "metrics.csv"),
               "report": str(run_dir / "report.csv")}
    write_manifest(run_dir, "finetune", opts, inputs, outputs)

    model, _, _ = load_model(args.checkpoint)
    vocab = load_vocab(_resolve_vocab_path(args.vocab, args.checkpoint))
    dataset = load_task_dataset(args.data)
    if dataset.name != args.task:
        raise ConfigError(f"--task {args.task} but {args.data} holds "
                          f"{dataset.name!r} examples")
    labels = load_label_set(args.labels) if args.labels else None
    config = TrainRunConfig(batch_size=opts["batch_size"],
                            learning_rate=opts["lr"],
                            max_epochs=opts["max_epochs"],
                            patience=opts["patience"],
                            eval_every=opts["eval_every"],
                            seed=opts["seed"])
    result = fine_tune(model, dataset, vocab, config,
                       max_len=opts["max_seq_len"],
                       freeze_encoder=opts["freeze_encoder"], labels=labels,
                       run_dir=run_dir)
    write_report_csv(outputs["report"], result.report)
    print(f"fine-tuned {args.task}: best validation macro-F1 "
          f"{result.best_val_f1:.4f} over {result.trainable_count} "
          f"trainable parameters; report {outputs['report']}")
    return 0


def cmd_eval(args) -> int:
    opts = resolve_options("eval", args)
    run_dir = resolve_run_dir(args)
    outputs = {"report": str(run_dir / "report.csv")}
    write_manifest(run_dir, "eval", opts,
                   inputs={"checkpoint": args.checkpoint, "data": args.data,
                           "vocab": args.vocab},
                   outputs=outputs)
    model, leftover, extra = load_model(args.checkpoint)
    if "task" not in extra or "task_kind" not in extra:
        raise ConfigError(f"{args.checkpoint} is not a fine-tuned "
                          "checkpoint (no task head recorded)")
    vocab = load_vocab(_resolve_vocab_path(args.vocab, args.checkpoint))
    head = load_task_head(extra["task_kind"], model_out_dim(model),
                          extra["labels"], leftover)
    dataset = load_task_dataset(args.data)
    if list(dataset.labels) != list(extra["labels"]):
        raise ConfigError(f"label set mismatch: checkpoint carries "
                          f"{extra['labels']}, dataset {dataset.labels}")
    encoded = _encode_task(dataset, vocab, opts["max_seq_len"])
    pred, gold = predict_task(model, head, dataset.kind, encoded,
                              batch_size=opts["batch_size"])
    report = evaluate_f1(pred, gold, _task_scheme(dataset.kind),
                         dataset.labels)
    write_report_csv(outputs["report"], report)
    print(f"{extra['task']}: macro-F1 {report.macro_f1:.4f}, micro-F1 "
          f"{report.micro_f1:.4f} over {report.total} predictions")
    return 0


def cmd_project(args) -> int:
    opts = resolve_options("project", args)
    run_dir = resolve_run_dir(args)
    outputs = {"svg": str(run_dir / "projection.svg"),
               "csv": str(run_dir / "projection.csv"),
               "distances": str(run_dir / "distances.csv")}
    write_manifest(run_dir, "project", opts,
                   inputs={"model_a": args.model_a, "model_b": args.model_b,
                           "vocab": args.vocab},
                   outputs=outputs)
    model_a, _, _ = load_model(args.model_a)
    model_b, _, _ = load_model(args.model_b)
    vocab = load_vocab(_resolve_vocab_path(args.vocab, args.model_a))
    names = (Path(args.model_a).stem, Path(args.model_b).stem)
    if names[0] == names[1]:
        names = (f"a:{names[0]}", f"b:{names[1]}")
    report = project_sentence(model_a, model_b, args.sentence, vocab,
                              model_names=names)
    emit_figure(report, outputs["svg"])
    with open(outputs["distances"], "w", encoding="utf-8") as fh:
        fh.write("token_i,token_j,model,distance,space\n")
        for name, table in ((names[0], report.distances_a),
                            (names[1], report.distances_b)):
            for i, tok_i in enumerate(report.tokens):
                for j, tok_j in enumerate(report.tokens):
                    if j <= i:
                        continue
                    fh.write(f"{tok_i},{tok_j},{name},"
                             f"{float(table[i, j])!r},full_hidden\n")
    print(f"projected {len(report.tokens)} tokens under two models; "
          f"figure {outputs['svg']}")
    return 0


COMMANDS = {
    "gen-corpus": cmd_gen_corpus,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "project": cmd_project,
}


def cli_dispatch(argv) -> int:
    try:
        args = build_parser().parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except SystemExit as exc:  # argparse --help / --version
        code = exc.code
        return int(code) if code else 0
    except (RedbertError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main():
    sys.exit(cli_dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
