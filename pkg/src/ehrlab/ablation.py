"""Incremental configuration search: accept a change only if the task-averaged AUROC rises."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import os
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import yaml

from .cohort import (LabeledExample, TaskDefinition, censor_sequences, condition_task, kfold_split, label_patients,
                     shipped_task)
from .evaluation import MetricsReport, cross_validate
from .model import ModelConfig
from .pipeline import RepresentationConfig, TokenSequence, Vocabulary, build_vocabulary, sequence_for
from .records import PatientRecord
from .training import FitResult, PretrainModel, SequenceClassifier, TrainSpec, fit_finetune, fit_pretrain, plos_label

NAMESPACES = ("representation", "model", "pretrain", "finetune")
_FIELDS = {
    "representation": {f.name for f in dataclasses.fields(RepresentationConfig)},
    "model": {f.name for f in dataclasses.fields(ModelConfig)} - {"vocab_size"},
    "pretrain": {f.name for f in dataclasses.fields(TrainSpec)} - {"phase"},
    "finetune": {f.name for f in dataclasses.fields(TrainSpec)} - {"phase"},
}


def check_field(key: str) -> None:
    namespace, _, name = key.partition(".")
    if namespace not in _FIELDS or name not in _FIELDS[namespace]:
        raise ValueError(f"unknown configuration field {key!r}")


# --------------------------------------------------------------------------- plans

@dataclass(frozen=True)
class Candidate:
    label: str
    changes: Mapping[str, object]

    def __post_init__(self):
        for key in self.changes:
            check_field(key)


@dataclass(frozen=True)
class Step:
    name: str
    candidates: tuple[Candidate, ...]

    def __post_init__(self):
        if not self.candidates:
            raise ValueError(f"step {self.name!r} has no candidates")
        for c in self.candidates:
            if not c.changes:
                raise ValueError(f"candidate {c.label!r} of step {self.name!r} changes nothing")

    @property
    def fields(self) -> set[str]:
        return {k for c in self.candidates for k in c.changes}


@dataclass(frozen=True)
class AblationPlan:
    baseline: Candidate
    steps: tuple[Step, ...] = ()
    tasks: tuple[str, ...] = ("Pain Treatment", "Death", "Infection")
    repeats: int = 1

    def __post_init__(self):
        if not self.tasks:
            raise ValueError("the task set is empty")
        if self.repeats < 1:
            raise ValueError("repeats must be >= 1")

    @classmethod
    def from_mapping(cls, data: Mapping) -> "AblationPlan":
        def candidate(d):
            return Candidate(str(d["label"]), dict(d.get("changes") or {}))

        base = data.get("baseline") or {}
        baseline = Candidate(str(base.get("label", "baseline")), dict(base.get("changes") or {}))
        steps = tuple(Step(str(s["name"]), tuple(candidate(c) for c in s["candidates"]))
                      for s in data.get("steps") or ())
        kwargs = {}
        if "tasks" in data:
            kwargs["tasks"] = tuple(data["tasks"])
        if "repeats" in data:
            kwargs["repeats"] = int(data["repeats"])
        return cls(baseline, steps, **kwargs)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "AblationPlan":
        with open(path, encoding="utf-8") as fh:
            return cls.from_mapping(yaml.safe_load(fh) or {})


def reference_plan() -> AblationPlan:
    with resources.files("ehrlab.data").joinpath("reference_plan.yaml").open(encoding="utf-8") as fh:
        return AblationPlan.from_mapping(yaml.safe_load(fh))


# --------------------------------------------------------------------------- decisions

def decide(incumbent: float, candidates: Mapping[str, float]) -> str | None:
    """Best candidate label if it strictly beats the incumbent, else ``None``.

    Ties among candidates go to the earliest one listed.
    """
    best_label, best_value = None, incumbent
    for label, value in candidates.items():
        if value > best_value:
            best_label, best_value = label, value
    return best_label


@dataclass
class CandidateResult:
    label: str
    changes: dict
    per_task: dict[str, float]  # mean AUROC per task
    per_task_sd: dict[str, float] = field(default_factory=dict)

    @property
    def average(self) -> float:
        return float(np.mean(list(self.per_task.values())))


@dataclass
class StepRecord:
    step: str
    incumbent: str
    incumbent_average: float
    candidates: list[CandidateResult]
    accepted: str | None
    running_config: dict


@dataclass
class AblationTrace:
    baseline: CandidateResult
    baseline_config: dict
    steps: list[StepRecord] = field(default_factory=list)

    @property
    def accepted(self) -> list[str]:
        return [s.accepted for s in self.steps if s.accepted is not None]

    @property
    def rejected(self) -> list[str]:
        return [c.label for s in self.steps for c in s.candidates if c.label != s.accepted]

    @property
    def running_config(self) -> dict:
        return self.steps[-1].running_config if self.steps else self.baseline_config

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping) -> "AblationTrace":
        steps = [StepRecord(**{**s, "candidates": [CandidateResult(**c) for c in s["candidates"]]})
                 for s in data["steps"]]
        return cls(CandidateResult(**data["baseline"]), dict(data["baseline_config"]), steps)

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "AblationTrace":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _advance(trace: AblationTrace, step: Step, current: CandidateResult, results: list[CandidateResult]
             ) -> CandidateResult:
    accepted = decide(current.average, {r.label: r.average for r in results})
    running = dict(trace.running_config)
    winner = current
    if accepted is not None:
        winner = next(r for r in results if r.label == accepted)
        running.update(winner.changes)
    trace.steps.append(StepRecord(step.name, current.label, current.average, results, accepted, running))
    return winner


# --------------------------------------------------------------------------- replay

def load_metric_table(source, metric: str = "auroc") -> dict[str, dict[str, tuple[float, float]]]:
    """``config -> task -> (mean, sd)`` from a ``config,task,metric,mean,sd`` CSV (path or text)."""
    is_path = isinstance(source, os.PathLike) or (isinstance(source, str) and "\n" not in source)
    text = Path(source).read_text(encoding="utf-8") if is_path else str(source)
    table: dict[str, dict[str, tuple[float, float]]] = {}
    reader = csv.DictReader(io.StringIO(text))
    missing = {"config", "task", "metric", "mean"} - set(reader.fieldnames or ())
    if missing:
        raise ValueError(f"metric table lacks columns {sorted(missing)}")
    for row in reader:
        if row["metric"].strip().lower() != metric:
            continue
        sd = float(row["sd"]) if row.get("sd") not in (None, "") else float("nan")
        table.setdefault(row["config"].strip(), {})[row["task"].strip()] = (float(row["mean"]), sd)
    return table


def shipped_table_path() -> Path:
    return Path(str(resources.files("ehrlab.data").joinpath("published_ablation.csv")))


def _lookup(table, label: str, changes: dict, tasks: Sequence[str]) -> CandidateResult:
    if label not in table:
        raise KeyError(f"metric table has no row {label!r}")
    row = table[label]
    absent = [t for t in tasks if t not in row]
    if absent:
        raise KeyError(f"row {label!r} lacks tasks {absent}")
    return CandidateResult(label, dict(changes), {t: row[t][0] for t in tasks}, {t: row[t][1] for t in tasks})


def replay(plan: AblationPlan, table: Mapping[str, Mapping[str, tuple[float, float]]]) -> AblationTrace:
    """Run ``decide`` over externally measured results instead of training."""
    tasks = plan.tasks
    baseline = _lookup(table, plan.baseline.label, plan.baseline.changes, tasks)
    trace = AblationTrace(baseline, dict(plan.baseline.changes))
    current = baseline
    for step in plan.steps:
        results = [_lookup(table, c.label, c.changes, tasks) for c in step.candidates]
        current = _advance(trace, step, current, results)
    return trace


# --------------------------------------------------------------------------- training runs

@dataclass(frozen=True)
class RunSettings:
    """Everything except the searched fields: sizes, schedules, splits and seeds."""

    model: Mapping[str, object] = field(default_factory=lambda: {"layers": 1, "heads": 2, "hidden": 16,
                                                                 "intermediate": 16, "dropout": 0.0})
    representation: Mapping[str, object] = field(default_factory=lambda: {"context_length": 64})
    pretrain: Mapping[str, object] = field(default_factory=lambda: {"epochs": 5, "batch_size": 64, "lr": 3e-3,
                                                                    "warmup_epochs": 1})
    finetune: Mapping[str, object] = field(default_factory=lambda: {"epochs": 10, "batch_size": 64, "lr": 3e-3,
                                                                    "warmup_epochs": 1})
    folds: int = 5
    test_fraction: float = 0.2
    pretrain_validation_fraction: float = 0.1
    min_events: int = 1
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.test_fraction < 1.0:
            raise ValueError("test_fraction must lie in (0, 1)")
        if not 0.0 < self.pretrain_validation_fraction < 1.0:
            raise ValueError("pretrain_validation_fraction must lie in (0, 1)")
        if self.folds < 2:
            raise ValueError("folds must be >= 2")


@dataclass
class Experiment:
    representation: RepresentationConfig
    model: dict
    pretrain: TrainSpec
    finetune: TrainSpec


def materialize(running: Mapping[str, object], settings: RunSettings, seed: int = 0) -> Experiment:
    """Split a flat ``namespace.field`` mapping into the four config objects."""
    parts: dict[str, dict] = {ns: dict(getattr(settings, ns)) for ns in NAMESPACES}
    for key, value in running.items():
        check_field(key)
        namespace, _, name = key.partition(".")
        parts[namespace][name] = value
    rep = parts["representation"]
    if "truncation_lengths" in rep:
        rep["truncation_lengths"] = tuple(tuple(x) for x in rep["truncation_lengths"])
    model = parts["model"]
    model.setdefault("context_length", rep.get("context_length", RepresentationConfig.context_length))
    ModelConfig(vocab_size=64, **model)  # validate now; the vocabulary size is known only after processing
    return Experiment(RepresentationConfig(**rep), model,
                      TrainSpec.pretrain(**{**parts["pretrain"], "seed": seed}),
                      TrainSpec.finetune(**{**parts["finetune"], "seed": seed}))


def split_test(examples: Sequence[LabeledExample], fraction: float, seed: int
               ) -> tuple[list[LabeledExample], list[LabeledExample]]:
    """Stratified hold-out: roughly ``fraction`` of each class goes to the test set."""
    k = max(2, int(round(1.0 / fraction)))
    folds = kfold_split(examples, k, seed)
    test_ids = {id(ex) for ex in folds[0]}
    return [ex for ex in examples if id(ex) not in test_ids], list(folds[0])


@dataclass
class TaskData:
    """A task's labelled examples; sequences are built per representation."""

    task: TaskDefinition
    pool: list[LabeledExample]
    test: list[LabeledExample]


def prepare_tasks(population: Sequence[PatientRecord], tasks: Sequence[TaskDefinition], settings: RunSettings
                  ) -> list[TaskData]:
    out = []
    for task in tasks:
        examples = label_patients(population, task, seed=settings.seed, min_events=settings.min_events)
        pool, test = split_test(examples, settings.test_fraction, settings.seed)
        out.append(TaskData(task, pool, test))
    return out


def censored_sequences(population: Mapping[str, PatientRecord], examples: Sequence[LabeledExample],
                       vocab: Vocabulary, rep: RepresentationConfig) -> dict[str, TokenSequence]:
    out = {}
    for ex in examples:
        patient = population[ex.patient_id]
        if ex.censor is not None:
            patient = censor_sequences(patient, ex.censor)
        seq = sequence_for(patient, vocab, rep)
        if seq is not None:
            out[ex.patient_id] = seq
    return out


def pretrain_corpus(population: Sequence[PatientRecord], rep: RepresentationConfig
                    ) -> tuple[Vocabulary, list[TokenSequence], list[int]]:
    vocab = build_vocabulary(population, rep)
    seqs, plos = [], []
    for patient in population:
        seq = sequence_for(patient, vocab, rep)
        if seq is not None:
            seqs.append(seq)
            plos.append(plos_label(patient))
    return vocab, seqs, plos


def pretrain(population: Sequence[PatientRecord], experiment: Experiment, seed: int,
             validation_fraction: float = 0.1) -> tuple[Vocabulary, PretrainModel, FitResult]:
    vocab, seqs, plos = pretrain_corpus(population, experiment.representation)
    n_val = max(1, int(round(len(seqs) * validation_fraction)))
    order = np.random.default_rng([seed, 11]).permutation(len(seqs))
    val, train = order[:n_val], order[n_val:]
    config = ModelConfig(vocab_size=vocab.size, **experiment.model)
    model = PretrainModel(config, seed=seed, plos=experiment.pretrain.plos)
    result = fit_pretrain(model, [seqs[i] for i in train], [seqs[i] for i in val], experiment.pretrain,
                          [plos[i] for i in train], [plos[i] for i in val])
    return vocab, model, result


def finetune_scorer(model: PretrainModel, sequences: Mapping[str, TokenSequence], spec: TrainSpec
                    ) -> Callable[[Sequence, Sequence, int], Callable]:
    """A ``train_fn`` for :func:`cross_validate` that fine-tunes ``model`` on each fold."""

    def train_fn(train, validation, run_seed):
        train = [ex for ex in train if ex.patient_id in sequences]
        validation = [ex for ex in validation if ex.patient_id in sequences]
        clf = SequenceClassifier.from_pretrained(model, spec.pooling, seed=run_seed)
        fit_finetune(clf, [sequences[ex.patient_id] for ex in train], [ex.label for ex in train],
                     [sequences[ex.patient_id] for ex in validation], [ex.label for ex in validation],
                     spec.replace(seed=run_seed))
        return lambda exs: clf.decision_function([sequences[ex.patient_id] for ex in exs], spec.batch_size)

    return train_fn


def evaluate_config(population: Sequence[PatientRecord], tasks: Sequence[TaskData], running: Mapping[str, object],
                    settings: RunSettings, repeats: int = 1, label: str = "") -> CandidateResult:
    """Pretrain, then k-fold fine-tune and test per task; per-task AUROC means averaged over repeats."""
    by_id = {p.patient_id: p for p in population}
    per_task: dict[str, list[float]] = {t.task.name: [] for t in tasks}
    per_task_sd: dict[str, list[float]] = {t.task.name: [] for t in tasks}
    for r in range(repeats):
        seed = settings.seed + 1000 * r
        experiment = materialize(running, settings, seed)
        vocab, model, _ = pretrain(population, experiment, seed, settings.pretrain_validation_fraction)
        for data in tasks:
            seqs = censored_sequences(by_id, data.pool + data.test, vocab, experiment.representation)
            test = [ex for ex in data.test if ex.patient_id in seqs]
            pool = [ex for ex in data.pool if ex.patient_id in seqs]
            report: MetricsReport = cross_validate(pool, settings.folds, finetune_scorer(model, seqs,
                                                   experiment.finetune), test, seed=seed, task=data.task.name,
                                                   model=label)
            per_task[data.task.name].append(report.auroc_mean)
            per_task_sd[data.task.name].append(report.auroc_sd)
    return CandidateResult(label, dict(running), {k: float(np.mean(v)) for k, v in per_task.items()},
                           {k: float(np.mean(v)) for k, v in per_task_sd.items()})


def resolve_task(name_or_task) -> TaskDefinition:
    """A task object, a condition name, or the stem of a shipped task file."""
    if isinstance(name_or_task, TaskDefinition):
        return name_or_task
    name = str(name_or_task)
    try:
        return condition_task(name)
    except KeyError:
        return shipped_task(name)


def run_plan(plan: AblationPlan, population: Sequence[PatientRecord], settings: RunSettings | None = None,
             tasks: Sequence[TaskDefinition] | None = None, trace_path: str | os.PathLike | None = None,
             evaluate: Callable[..., CandidateResult] | None = None) -> AblationTrace:
    """Train and evaluate every candidate step by step, keeping only strict improvements.

    ``population`` must be processed. The trace is written to ``trace_path``
    after every step, and also when a run fails part-way.
    """
    settings = settings or RunSettings()
    task_defs = [resolve_task(t) for t in (tasks if tasks is not None else plan.tasks)]
    evaluate = evaluate or evaluate_config
    prepared = prepare_tasks(population, task_defs, settings)

    def save(trace):
        if trace_path is not None and trace is not None:
            trace.save(trace_path)

    base_changes = dict(plan.baseline.changes)
    baseline = evaluate(population, prepared, base_changes, settings, plan.repeats, plan.baseline.label)
    baseline.changes = base_changes
    trace = AblationTrace(baseline, base_changes)
    save(trace)
    current = baseline
    try:
        for step in plan.steps:
            results = []
            for cand in step.candidates:
                running = {**trace.running_config, **cand.changes}
                res = evaluate(population, prepared, running, settings, plan.repeats, cand.label)
                res.changes = dict(cand.changes)
                results.append(res)
            current = _advance(trace, step, current, results)
            save(trace)
    except Exception:
        save(trace)
        raise
    return trace


# --------------------------------------------------------------------------- reports

def _configs(trace: AblationTrace) -> list[tuple[CandidateResult, bool]]:
    accepted = set(trace.accepted)
    rows = [(trace.baseline, True)]
    rows += [(c, c.label in accepted) for s in trace.steps for c in s.candidates]
    return rows


def trace_table(trace: AblationTrace) -> str:
    """Configs as rows, tasks plus the average as columns; accepted rows are starred."""
    tasks = list(trace.baseline.per_task)
    header = ["Model", *tasks, "Average"]
    lines = [header]
    for res, accepted in _configs(trace):
        cells = []
        for t in tasks:
            mean, sd = res.per_task[t], res.per_task_sd.get(t, float("nan"))
            cells.append(f"{mean:.2f}" if sd != sd else f"{mean:.2f}±{sd:.2f}")
        lines.append([("*" if accepted else " ") + res.label, *cells, f"{res.average:.3f}"])
    widths = [max(len(row[i]) for row in lines) for i in range(len(header))]
    return "\n".join("  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(row, widths)))
                     for row in lines) + "\n"


def trace_cells_csv(trace: AblationTrace) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(("config", "task", "auroc_mean", "auroc_sd", "accepted"))
    for res, accepted in _configs(trace):
        for t, mean in res.per_task.items():
            writer.writerow((res.label, t, format(mean, ".17g"), format(res.per_task_sd.get(t, float("nan")), ".17g"),
                             int(accepted)))
    return buf.getvalue()


def trace_delta_csv(trace: AblationTrace) -> str:
    """Change of each candidate's average over the incumbent of its step."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(("step", "candidate", "incumbent", "delta_average", "accepted"))
    for s in trace.steps:
        for c in s.candidates:
            writer.writerow((s.step, c.label, s.incumbent, format(c.average - s.incumbent_average, ".17g"),
                             int(c.label == s.accepted)))
    return buf.getvalue()


def write_report(trace: AblationTrace, out_dir: str | os.PathLike) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {"table": out / "ablation_table.txt", "cells": out / "ablation_cells.csv",
             "deltas": out / "ablation_deltas.csv"}
    files["table"].write_text(trace_table(trace), encoding="utf-8")
    files["cells"].write_text(trace_cells_csv(trace), encoding="utf-8")
    files["deltas"].write_text(trace_delta_csv(trace), encoding="utf-8")
    return files
