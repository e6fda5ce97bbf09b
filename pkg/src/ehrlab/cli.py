"""Command-line entry point: ``ehrlab <subcommand> [--config FILE] [--seed N] [--out DIR]``.

Exit status is 0 on success, 2 for invalid input or configuration and 1 when
a run fails.
"""

from __future__ import annotations

import argparse
import csv
import datetime as dt
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as cfg
from .ablation import (
    AblationTrace,
    evaluate_config,
    load_metric_table,
    materialize,
    prepare_tasks,
    pretrain,
    censored_sequences,
    replay,
    run_plan,
    shipped_table_path,
    split_test,
    write_report,
)
from .cohort import LabeledExample, label_patients
from .evaluation import auprc, auroc
from .pipeline import Vocabulary, build_vocabulary, process_population, sequence_for, write_sequences
from .records import read_population, write_population
from .synth import generate_population
from .training import PretrainModel, SequenceClassifier, fit_finetune

log = logging.getLogger("ehrlab")

EXIT_OK, EXIT_RUNTIME, EXIT_INVALID = 0, 1, 2


class UsageError(Exception):
    pass


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _population(path) -> list:
    if path is None:
        raise UsageError("--input is required")
    if not Path(path).is_dir():
        raise UsageError(f"input directory {path} does not exist")
    return read_population(path)


def _write_examples(path: Path, examples) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("patient_id", "label", "censor", "index"))
        for ex in examples:
            writer.writerow((ex.patient_id, ex.label, ex.censor.isoformat() if ex.censor else "",
                             ex.index.isoformat() if ex.index else ""))


def read_examples(path) -> list[LabeledExample]:
    with open(path, encoding="utf-8") as fh:
        return [LabeledExample(r["patient_id"], int(r["label"]),
                               dt.datetime.fromisoformat(r["censor"]) if r["censor"] else None,
                               dt.datetime.fromisoformat(r["index"]) if r["index"] else None)
                for r in csv.DictReader(fh)]


# --------------------------------------------------------------------------- subcommands

def cmd_synth(args, config) -> None:
    spec = cfg.generator_spec(config, args.seed)
    if args.n_patients is not None:
        spec = type(spec)(**{**spec.__dict__, "n_patients": args.n_patients})
    population = generate_population(spec)
    write_population(population, _out(args))
    print(f"wrote {len(population)} patients to {args.out}")


def cmd_process(args, config) -> None:
    rep = cfg.representation_config(config)
    population = process_population(_population(args.input))
    out = _out(args)
    write_population(population, out)
    vocab = build_vocabulary(population, rep)
    vocab.write(out / "vocab.tsv")
    n = write_sequences(out / "sequences.bin", (s for s in (sequence_for(p, vocab, rep) for p in population)
                                                if s is not None))
    print(f"processed {len(population)} patients; {n} sequences; vocabulary of {vocab.size} tokens")


def cmd_label(args, config) -> None:
    tasks = cfg.task_definitions(config, args.task)
    if not tasks:
        raise UsageError("no task given; use --task or a 'tasks' config section")
    seed = 0 if args.seed is None else args.seed
    population = _population(args.input)
    out = _out(args)
    for task in tasks:
        examples = label_patients(population, task, seed=seed)
        name = task.name.replace(" ", "_").lower()
        _write_examples(out / f"labels_{name}.csv", examples)
        print(f"{task.name}: {sum(e.label for e in examples)} positives, "
              f"{sum(1 - e.label for e in examples)} negatives")


def cmd_pretrain(args, config) -> None:
    settings = cfg.run_settings(config, args.seed)
    experiment = materialize({}, settings, settings.seed)
    population = _population(args.input)
    vocab, model, result = pretrain(population, experiment, settings.seed, settings.pretrain_validation_fraction)
    out = _out(args)
    vocab.write(out / "vocab.tsv")
    model.save(out / "pretrain.npz")
    result.write_history(out / "history_pretrain.csv")
    print(f"saved {out / 'pretrain.npz'}")


def _finetune_inputs(args, config):
    settings = cfg.run_settings(config, args.seed)
    tasks = cfg.task_definitions(config, args.task)
    if not tasks:
        raise UsageError("no task given; use --task or a 'tasks' config section")
    if args.checkpoint is None:
        raise UsageError("--checkpoint (a pretrain.npz) is required")
    vocab_path = Path(args.vocab) if args.vocab else Path(args.checkpoint).with_name("vocab.tsv")
    if not vocab_path.exists():
        raise UsageError(f"vocabulary {vocab_path} not found; pass --vocab")
    return settings, tasks, vocab_path


def cmd_finetune(args, config) -> None:
    settings, tasks, vocab_path = _finetune_inputs(args, config)
    population = _population(args.input)
    model = PretrainModel.load(args.checkpoint)
    vocab = Vocabulary.read(vocab_path)
    experiment = materialize({}, settings, settings.seed)
    by_id = {p.patient_id: p for p in population}
    out = _out(args)
    for data in prepare_tasks(population, tasks, settings):
        seqs = censored_sequences(by_id, data.pool + data.test, vocab, experiment.representation)
        pool = [ex for ex in data.pool if ex.patient_id in seqs]
        test = [ex for ex in data.test if ex.patient_id in seqs]
        train, val = split_test(pool, 1.0 / settings.folds, settings.seed + 1)
        clf = SequenceClassifier.from_pretrained(model, experiment.finetune.pooling, settings.seed)
        result = fit_finetune(clf, [seqs[e.patient_id] for e in train], [e.label for e in train],
                              [seqs[e.patient_id] for e in val], [e.label for e in val], experiment.finetune)
        name = data.task.name.replace(" ", "_").lower()
        clf.save(out / f"finetune_{name}.npz")
        result.write_history(out / f"history_{name}.csv")
        scores = clf.predict([seqs[e.patient_id] for e in test])
        labels = np.array([e.label for e in test])
        with open(out / f"predictions_{name}.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(("patient_id", "label", "score"))
            for e, s in zip(test, scores):
                writer.writerow((e.patient_id, e.label, format(s, ".17g")))
        print(f"{data.task.name}: best epoch {result.best_epoch}, test AUROC {auroc(scores, labels):.4f}, "
              f"AUPRC {auprc(scores, labels):.4f}")


def cmd_evaluate(args, config) -> None:
    """Score prediction files, or run cross-validation on a population."""
    if args.predictions:
        rows = []
        for path in args.predictions:
            with open(path, encoding="utf-8") as fh:
                data = list(csv.DictReader(fh))
            s = np.array([float(r["score"]) for r in data])
            y = np.array([int(r["label"]) for r in data])
            rows.append((Path(path).stem, auroc(s, y), auprc(s, y)))
        out = _out(args)
        with open(out / "metrics.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(("source", "auroc", "auprc"))
            for name, a, p in rows:
                writer.writerow((name, format(a, ".17g"), format(p, ".17g")))
                print(f"{name}: AUROC {a:.4f}  AUPRC {p:.4f}")
        return
    settings = cfg.run_settings(config, args.seed)
    tasks = cfg.task_definitions(config, args.task)
    if not tasks:
        raise UsageError("no task given; use --task or a 'tasks' config section")
    population = _population(args.input)
    result = evaluate_config(population, prepare_tasks(population, tasks, settings), {}, settings, label="model")
    out = _out(args)
    with open(out / "metrics.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("task", "auroc_mean", "auroc_sd"))
        for t, mean in result.per_task.items():
            writer.writerow((t, format(mean, ".17g"), format(result.per_task_sd[t], ".17g")))
            print(f"{t}: AUROC {mean:.4f} ± {result.per_task_sd[t]:.4f}")


def _print_trace(trace: AblationTrace) -> None:
    for s in trace.steps:
        verdict = f"accepted {s.accepted}" if s.accepted else "kept incumbent"
        print(f"{s.step}: {verdict}")
    print("accepted path: " + (", ".join(trace.accepted) or "(none)"))


def cmd_ablate(args, config) -> None:
    plan = cfg.plan(config)
    settings = cfg.run_settings(config, args.seed)
    tasks = cfg.task_definitions(config, args.task) or None
    population = _population(args.input)
    out = _out(args)
    trace = run_plan(plan, population, settings, tasks, trace_path=out / "trace.json")
    write_report(trace, out)
    _print_trace(trace)


def cmd_replay(args, config) -> None:
    plan = cfg.plan(config)
    table_path = Path(args.table) if args.table else shipped_table_path()
    if not table_path.exists():
        raise UsageError(f"metric table {table_path} not found")
    try:
        table = load_metric_table(table_path, args.metric)
        trace = replay(plan, table)
    except KeyError as exc:
        raise UsageError(str(exc)) from exc
    out = _out(args)
    trace.save(out / "trace.json")
    write_report(trace, out)
    _print_trace(trace)


def cmd_report(args, config) -> None:
    path = Path(args.trace) if args.trace else Path(args.out) / "trace.json"
    if not path.exists():
        raise UsageError(f"trace {path} not found")
    try:
        trace = AblationTrace.load(path)
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise UsageError(f"{path}: not an ablation trace ({exc})") from exc
    files = write_report(trace, _out(args))
    print(files["table"].read_text(encoding="utf-8"), end="")


COMMANDS = {
    "synth": (cmd_synth, "generate a synthetic population"),
    "process": (cmd_process, "clean records, build the vocabulary and token sequences"),
    "label": (cmd_label, "label patients for prediction tasks"),
    "pretrain": (cmd_pretrain, "masked-language-model pretraining"),
    "finetune": (cmd_finetune, "fine-tune a pretrained encoder on tasks"),
    "evaluate": (cmd_evaluate, "score predictions or cross-validate on tasks"),
    "ablate": (cmd_ablate, "run an incremental ablation plan"),
    "replay": (cmd_replay, "replay plan decisions over a metric table"),
    "report": (cmd_report, "render tables and CSVs from an ablation trace"),
}


def _seed(text: str) -> int:
    value = int(text)
    if not 0 <= value < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def build_parser() -> argparse.ArgumentParser:
    def common(top: bool) -> argparse.ArgumentParser:
        # global flags may come before or after the subcommand; only the top level sets defaults
        p = argparse.ArgumentParser(add_help=False)
        default = (lambda v: v) if top else (lambda v: argparse.SUPPRESS)
        p.add_argument("--config", default=default(None), help="YAML experiment file")
        p.add_argument("--seed", type=_seed, default=default(None), help="overrides every seed in the config")
        p.add_argument("--out", default=default("."), help="output directory (default: current)")
        p.add_argument("-v", "--verbose", action="store_true", default=default(False))
        return p

    parser = argparse.ArgumentParser(prog="ehrlab", description=__doc__.splitlines()[0], parents=[common(True)])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, parents=[common(False)])
        if name == "synth":
            p.add_argument("--n-patients", type=int)
        if name in ("process", "label", "pretrain", "finetune", "evaluate", "ablate"):
            p.add_argument("--input", help="population directory (patients.tsv, events.tsv)")
        if name in ("label", "finetune", "evaluate", "ablate"):
            p.add_argument("--task", action="append", help="condition name, shipped task or task YAML; repeatable")
        if name == "finetune":
            p.add_argument("--checkpoint")
            p.add_argument("--vocab")
        if name == "evaluate":
            p.add_argument("--predictions", nargs="+", help="prediction CSVs (patient_id,label,score)")
        if name == "replay":
            p.add_argument("--table", help="config,task,metric,mean,sd CSV (default: the shipped table)")
            p.add_argument("--metric", default="auroc", choices=("auroc", "auprc"))
        if name == "report":
            p.add_argument("--trace", help="trace.json (default: OUT/trace.json)")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INVALID if exc.code not in (0, None) else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    handler = COMMANDS[args.command][0]
    try:
        config = cfg.load_config(args.config)
    except cfg.ConfigError as exc:
        print(f"ehrlab: {exc}", file=sys.stderr)
        return EXIT_INVALID
    try:
        handler(args, config)
    except (UsageError, cfg.ConfigError) as exc:
        print(f"ehrlab: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - any failure of the run itself
        log.debug("run failed", exc_info=True)
        print(f"ehrlab: {args.command} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
