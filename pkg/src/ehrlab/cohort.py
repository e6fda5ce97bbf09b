"""Phenotype rules, labelling, censoring, class weights and data splits."""

from __future__ import annotations

import datetime as dt
import re
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import yaml

from .pipeline import age_in_years, is_code
from .records import Event, PatientRecord

DEATH_RULE = "@death"

_UNITS = {"h": 1 / 24, "hr": 1 / 24, "d": 1, "w": 7, "mo": 30, "yr": 365}
_DURATION_RE = re.compile(r"^\s*(\d+(?:\.\d+)?)\s*(h|hr|d|w|mo|yr)\s*$")


def parse_duration(text: str | int | float | dt.timedelta) -> dt.timedelta:
    """``"7d"``, ``"1mo"`` (30 days), ``"1yr"`` (365 days), ``"24h"``; bare numbers are days."""
    if isinstance(text, dt.timedelta):
        return text
    if isinstance(text, (int, float)):
        return dt.timedelta(days=text)
    m = _DURATION_RE.match(text)
    if not m:
        raise ValueError(f"cannot parse duration {text!r}")
    return dt.timedelta(days=float(m.group(1)) * _UNITS[m.group(2)])


def expand_rule(rule: str) -> list[str]:
    """Expand a code range such as ``DG00-DG07`` or ``DN109A-DN109C`` into prefixes."""
    if "-" not in rule or not all(is_code(part) for part in rule.split("-")):
        return [rule]
    lo, hi = rule.split("-")
    k = 0
    while k < min(len(lo), len(hi)) and lo[k] == hi[k]:
        k += 1
    stem, a, b = lo[:k], lo[k:], hi[k:]
    if a.isdigit() and b.isdigit() and len(a) == len(b) and int(a) <= int(b):
        return [f"{stem}{n:0{len(a)}d}" for n in range(int(a), int(b) + 1)]
    if len(a) == len(b) == 1 and a.isalpha() and b.isalpha() and a <= b:
        return [stem + chr(c) for c in range(ord(a), ord(b) + 1)]
    raise ValueError(f"cannot expand code range {rule!r}")


@dataclass(frozen=True)
class RuleSet:
    """Code prefixes plus lower-case free-text substrings."""

    prefixes: tuple[str, ...] = ()
    substrings: tuple[str, ...] = ()
    death: bool = False

    @classmethod
    def parse(cls, rules: Iterable[str]) -> "RuleSet":
        prefixes, substrings, death = [], [], False
        for raw in rules:
            rule = str(raw).strip()
            if not rule:
                continue
            if rule == DEATH_RULE:
                death = True
            elif is_code(rule.split("-")[0]):
                prefixes.extend(expand_rule(rule))
            else:
                substrings.append(" ".join(rule.lower().split()))
        return cls(tuple(dict.fromkeys(prefixes)), tuple(dict.fromkeys(substrings)), death)

    def __bool__(self) -> bool:
        return bool(self.prefixes or self.substrings or self.death)

    def matches(self, concept: str | None) -> bool:
        if not concept:
            return False
        if is_code(concept):
            return concept.startswith(self.prefixes) if self.prefixes else False
        text = concept.lower()
        return any(s in text for s in self.substrings)


@dataclass(frozen=True)
class TaskDefinition:
    name: str
    include: RuleSet
    window: dt.timedelta
    exclude: RuleSet = RuleSet()
    age_min: float | None = None
    age_max: float | None = None
    sex: str | None = None
    exclude_patients: bool = False  # exclude rules disqualify the patient instead of the event

    def __post_init__(self):
        if not self.include:
            raise ValueError(f"task {self.name!r}: include rules must be non-empty")
        if self.window <= dt.timedelta(0):
            raise ValueError(f"task {self.name!r}: prediction window must be positive")
        if self.sex not in (None, "male", "female"):
            raise ValueError(f"task {self.name!r}: sex filter must be male or female")

    @classmethod
    def from_mapping(cls, data: Mapping) -> "TaskDefinition":
        known = {"name", "include", "exclude", "window", "age_min", "age_max", "sex", "exclude_patients"}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown task fields: {sorted(unknown)}")
        if data.get("window") is None:
            raise ValueError(f"task {data.get('name')!r}: a prediction window is required")
        return cls(
            name=str(data["name"]),
            include=RuleSet.parse(data.get("include") or ()),
            exclude=RuleSet.parse(data.get("exclude") or ()),
            window=parse_duration(data["window"]),
            age_min=data.get("age_min"),
            age_max=data.get("age_max"),
            sex=data.get("sex"),
            exclude_patients=bool(data.get("exclude_patients", False)),
        )


def load_task(path: str | Path) -> TaskDefinition:
    with open(path, encoding="utf-8") as fh:
        return TaskDefinition.from_mapping(yaml.safe_load(fh))


def shipped_task(stem: str) -> TaskDefinition:
    """A task file bundled under ``data/tasks`` (e.g. ``"synthetic_outcome"``)."""
    text = resources.files("ehrlab").joinpath(f"data/tasks/{stem}.yaml").read_text(encoding="utf-8")
    return TaskDefinition.from_mapping(yaml.safe_load(text))


def condition_table() -> dict[str, dict]:
    """The shipped condition definitions keyed by condition name."""
    text = resources.files("ehrlab").joinpath("data/conditions.yaml").read_text(encoding="utf-8")
    return yaml.safe_load(text)["conditions"]


def condition_task(name: str, **overrides) -> TaskDefinition:
    table = condition_table()
    if name not in table:
        raise KeyError(f"unknown condition {name!r}")
    return TaskDefinition.from_mapping({"name": name, **table[name], **overrides})


# --------------------------------------------------------------------------- labelling

def match_phenotype(event: Event | str, task: TaskDefinition) -> bool:
    concept = event if isinstance(event, str) or event is None else event.concept
    return task.include.matches(concept) and not task.exclude.matches(concept)


@dataclass(frozen=True)
class LabeledExample:
    patient_id: str
    label: int
    censor: dt.datetime | None
    index: dt.datetime | None = None


def index_instant(patient: PatientRecord, task: TaskDefinition) -> dt.datetime | None:
    """Earliest outcome instant, or ``None`` when the patient never has the outcome."""
    hits = [ev.timestamp for ev in patient.events if ev.timestamp is not None and match_phenotype(ev, task)]
    if task.include.death and patient.deathdate is not None:
        hits.append(dt.datetime.combine(patient.deathdate, dt.time()))
    return min(hits) if hits else None


def _eligible(patient: PatientRecord, task: TaskDefinition) -> bool:
    if task.sex is not None and patient.sex != task.sex:
        return False
    if task.exclude_patients and any(task.exclude.matches(ev.concept) for ev in patient.events):
        return False
    return True


def _age_ok(patient: PatientRecord, task: TaskDefinition, when: dt.datetime) -> bool:
    age = age_in_years(when, patient.birthdate)
    return (task.age_min is None or age >= task.age_min) and (task.age_max is None or age <= task.age_max)


def censor_sequences(patient: PatientRecord, censor: dt.datetime) -> PatientRecord:
    """Keep only events strictly before ``censor``."""
    return replace(patient, events=[ev for ev in patient.events if ev.timestamp is not None and ev.timestamp < censor])


def assign_negative_censoring(positives: Sequence[LabeledExample], negatives: Sequence[LabeledExample],
                              seed: int = 0) -> list[LabeledExample]:
    """Draw each negative's censor instant from the positives' censor instants, with replacement."""
    if not positives:
        raise ValueError("negative censoring needs at least one positive example")
    pool = np.array(sorted(p.censor for p in positives), dtype="datetime64[us]")
    rng = np.random.default_rng(seed)
    picks = pool[rng.integers(len(pool), size=len(negatives))].astype(dt.datetime)
    return [replace(n, censor=c) for n, c in zip(negatives, picks)]


def label_patients(population: Sequence[PatientRecord], task: TaskDefinition, seed: int = 0,
                   min_events: int = 1) -> list[LabeledExample]:
    """Positives, censored negatives and filters, in population order.

    Age filters are evaluated at the censor instant, and examples left with
    fewer than ``min_events`` visible events are dropped.
    """
    by_id = {p.patient_id: p for p in population}
    positives, negatives = [], []
    for patient in population:
        if not _eligible(patient, task):
            continue
        idx = index_instant(patient, task)
        if idx is not None:
            ex = LabeledExample(patient.patient_id, 1, idx - task.window, idx)
            if _age_ok(patient, task, ex.censor):
                positives.append(ex)
        else:
            negatives.append(LabeledExample(patient.patient_id, 0, None))
    if not positives:
        raise ValueError(f"task {task.name!r}: no positive patients")
    negatives = assign_negative_censoring(positives, negatives, seed)
    negatives = [n for n in negatives if _age_ok(by_id[n.patient_id], task, n.censor)]
    order = {p.patient_id: i for i, p in enumerate(population)}
    kept = [ex for ex in positives + negatives
            if len(censor_sequences(by_id[ex.patient_id], ex.censor).events) >= min_events]
    return sorted(kept, key=lambda ex: order[ex.patient_id])


# --------------------------------------------------------------------------- balancing and folds

def class_sampling_weights(labels: Sequence[int]) -> dict[int, float]:
    """``1 / sqrt(frequency)`` per class."""
    labels = np.asarray(labels)
    classes, counts = np.unique(labels, return_counts=True)
    if len(classes) < 2:
        raise ValueError("class weights need both classes present")
    freq = counts / counts.sum()
    return {int(c): float(1.0 / np.sqrt(f)) for c, f in zip(classes, freq)}


def example_sampling_probabilities(labels: Sequence[int]) -> np.ndarray:
    labels = np.asarray(labels)
    weights = class_sampling_weights(labels)
    w = np.array([weights[int(y)] for y in labels])
    return w / w.sum()


def kfold_split(examples: Sequence[LabeledExample], k: int, seed: int = 0) -> list[list[LabeledExample]]:
    """Stratified folds: shuffled positives dealt round-robin, negatives continue the deal."""
    if k < 2:
        raise ValueError("k must be >= 2")
    if len(examples) < k:
        raise ValueError(f"need at least {k} examples for {k} folds")
    pos = [i for i, ex in enumerate(examples) if ex.label == 1]
    neg = [i for i, ex in enumerate(examples) if ex.label == 0]
    if len(pos) < k:
        raise ValueError(f"need at least {k} positives for {k} folds, got {len(pos)}")
    rng = np.random.default_rng(seed)
    pos = [pos[i] for i in rng.permutation(len(pos))]
    neg = [neg[i] for i in rng.permutation(len(neg))]
    folds: list[list[LabeledExample]] = [[] for _ in range(k)]
    for slot, i in enumerate(pos + neg):
        folds[slot % k].append(examples[i])
    return folds


# --------------------------------------------------------------------------- out-of-time

@dataclass(frozen=True)
class OutOfTimeBoundaries:
    train_end: dt.datetime = dt.datetime(2020, 1, 1)
    validation_start: dt.datetime = dt.datetime(2020, 3, 1)
    validation_end: dt.datetime = dt.datetime(2021, 6, 30)
    test_start: dt.datetime = dt.datetime(2021, 9, 1)

    def __post_init__(self):
        if not self.train_end <= self.validation_start <= self.validation_end <= self.test_start:
            raise ValueError("out-of-time boundaries must be ordered")


def _partition(name: str, population, task, seed, keep, positive) -> list[LabeledExample]:
    members = [p for p in population if keep(index_instant(p, task))]
    positives, negatives = [], []
    for patient in members:
        if not _eligible(patient, task):
            continue
        idx = index_instant(patient, task)
        if idx is not None and positive(idx):
            ex = LabeledExample(patient.patient_id, 1, idx - task.window, idx)
            if _age_ok(patient, task, ex.censor):
                positives.append(ex)
        else:
            negatives.append(LabeledExample(patient.patient_id, 0, None))
    if not positives:
        raise ValueError(f"out-of-time partition {name!r} is empty (no positive outcomes)")
    by_id = {p.patient_id: p for p in members}
    negatives = assign_negative_censoring(positives, negatives, seed)
    negatives = [n for n in negatives if _age_ok(by_id[n.patient_id], task, n.censor)]
    order = {p.patient_id: i for i, p in enumerate(members)}
    out = [ex for ex in positives + negatives if censor_sequences(by_id[ex.patient_id], ex.censor).events]
    if not out:
        raise ValueError(f"out-of-time partition {name!r} is empty")
    return sorted(out, key=lambda ex: order[ex.patient_id])


def split_out_of_time(population: Sequence[PatientRecord], task: TaskDefinition,
                      boundaries: OutOfTimeBoundaries = OutOfTimeBoundaries(),
                      seed: int = 0) -> dict[str, list[LabeledExample]]:
    """Chronologically separated train / validation / test examples.

    Train sees only data before ``train_end`` and labels outcomes before it.
    Validation labels outcomes from ``validation_start`` through the whole day
    of ``validation_end`` and drops patients with an earlier outcome; test labels outcomes from
    ``test_start`` on and drops patients with an earlier outcome.
    """
    b = boundaries
    return {
        "train": _partition("train", population, task, seed,
                            keep=lambda idx: True,
                            positive=lambda idx: idx < b.train_end),
        "validation": _partition("validation", population, task, seed + 1,
                                 keep=lambda idx: idx is None or idx >= b.validation_start,
                                 positive=lambda idx: idx < b.validation_end + dt.timedelta(days=1)),
        "test": _partition("test", population, task, seed + 2,
                           keep=lambda idx: idx is None or idx >= b.test_start,
                           positive=lambda idx: True),
    }
