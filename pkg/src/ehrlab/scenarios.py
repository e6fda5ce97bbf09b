"""Synthetic study designs with a known answer, used by the acceptance suite and the demos."""

from __future__ import annotations

import datetime as dt
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .cohort import LabeledExample, TaskDefinition, censor_sequences, label_patients, shipped_task
from .evaluation import auroc
from .pipeline import process_population
from .records import PatientRecord
from .synth import GeneratorSpec, SignalPlant, code_vocabulary, generate_population, is_carrier, plant_outcome_signal

OUTCOME = "DZ99"
# one winter season; a purely calendar-driven outcome
SEASON = ((dt.datetime(2017, 11, 1), dt.datetime(2018, 4, 1)),)


def outcome_task() -> TaskDefinition:
    return shipped_task("synthetic_outcome")


def oracle_auroc(population: Sequence[PatientRecord], examples: Sequence[LabeledExample], plant: SignalPlant
                 ) -> float:
    """AUROC of "a precursor is visible before the censoring time" on a labelled cohort."""
    by_id = {p.patient_id: p for p in population}
    scores = [float(is_carrier(censor_sequences(by_id[e.patient_id], e.censor) if e.censor else
                               by_id[e.patient_id], plant)) for e in examples]
    return auroc(scores, [e.label for e in examples])


@dataclass
class PlantedCohort:
    population: list[PatientRecord]  # processed, with outcome events
    plant: SignalPlant
    examples: list[LabeledExample]
    oracle: float


def planted_cohort(background: Sequence[PatientRecord], plant: SignalPlant, task: TaskDefinition | None = None,
                   seed: int = 0) -> PlantedCohort:
    task = task or outcome_task()
    population = process_population(plant_outcome_signal(background, plant, seed=seed))
    examples = label_patients(population, task, seed=seed)
    return PlantedCohort(population, plant, examples, oracle_auroc(population, examples, plant))


def calibrate_cohort_effect(background: Sequence[PatientRecord], plant: SignalPlant, target: float,
                            task: TaskDefinition | None = None, seed: int = 0, low: float = 0.0,
                            high: float = 8.0, iterations: int = 12) -> tuple[float, float]:
    """Bisect the plant's effect until the cohort oracle AUROC reaches ``target``.

    Returns ``(effect, achieved oracle AUROC)``.
    """
    best = (high, planted_cohort(background, replace(plant, effect=high), task, seed).oracle)
    for _ in range(iterations):
        mid = 0.5 * (low + high)
        achieved = planted_cohort(background, replace(plant, effect=mid), task, seed).oracle
        if abs(achieved - target) < abs(best[1] - target):
            best = (mid, achieved)
        if achieved < target:
            low = mid
        else:
            high = mid
    return best


def background(n_patients: int, seed: int = 0, **overrides) -> list[PatientRecord]:
    return generate_population(GeneratorSpec(n_patients=n_patients, seed=seed, **overrides))


def precursor_code(kind: str, seed: int = 0, index: int = 5, **overrides) -> str:
    """A stem from the generated vocabulary, ``kind`` being "diagnosis" or "medication"."""
    vocab = code_vocabulary(GeneratorSpec(seed=seed, **overrides))
    stems = list(vocab.diagnosis if kind == "diagnosis" else vocab.medication)
    return stems[index % len(stems)]


def medication_plant(seed: int = 0, effect: float = 3.0, base: float = -2.5) -> SignalPlant:
    """Outcome driven only by one medication stem, invisible without medication tokens."""
    return SignalPlant(OUTCOME, (precursor_code("medication", seed),), effect=effect, base=base)


def season_plant(effect: float = 3.0, base: float = -2.5) -> SignalPlant:
    """Outcome driven only by having any contact during :data:`SEASON`."""
    return SignalPlant(OUTCOME, (), effect=effect, base=base, windows=SEASON)


def diagnosis_plant(seed: int = 0, effect: float = 3.0, base: float = -2.5) -> SignalPlant:
    return SignalPlant(OUTCOME, (precursor_code("diagnosis", seed),), effect=effect, base=base)


def permuted(examples: Sequence[LabeledExample], seed: int = 0) -> list[LabeledExample]:
    """Same patients and censoring times with labels shuffled."""
    labels = np.random.default_rng(seed).permutation([e.label for e in examples])
    return [replace(e, label=int(y)) for e, y in zip(examples, labels)]


@dataclass
class EndToEndResult:
    test_auroc: float
    permuted_auroc: float
    oracle_test_auroc: float
    n_train: int
    n_test: int
    pretrain_epochs: int


def end_to_end(cohort: PlantedCohort, settings, seed: int = 0) -> EndToEndResult:
    """Pretrain on the population, then fine-tune and test once on true and once on shuffled labels."""
    from .ablation import censored_sequences, materialize, pretrain, split_test
    from .training import SequenceClassifier, fit_finetune

    experiment = materialize({}, settings, seed)
    vocab, model, _ = pretrain(cohort.population, experiment, seed, settings.pretrain_validation_fraction)
    by_id = {p.patient_id: p for p in cohort.population}
    seqs = censored_sequences(by_id, cohort.examples, vocab, experiment.representation)
    examples = [e for e in cohort.examples if e.patient_id in seqs]

    def fit(labelled):
        pool, test = split_test(labelled, settings.test_fraction, seed)
        train, val = split_test(pool, 1.0 / settings.folds, seed + 1)
        clf = SequenceClassifier.from_pretrained(model, experiment.finetune.pooling, seed)
        fit_finetune(clf, [seqs[e.patient_id] for e in train], [e.label for e in train],
                     [seqs[e.patient_id] for e in val], [e.label for e in val], experiment.finetune)
        scores = clf.decision_function([seqs[e.patient_id] for e in test])
        return auroc(scores, [e.label for e in test]), pool, test

    real, pool, test = fit(examples)
    # the control shuffles every label, test included, and reruns the same split and fit
    control, _, _ = fit(permuted(examples, seed))
    oracle = oracle_auroc(cohort.population, test, cohort.plant)
    return EndToEndResult(real, control, oracle, len(pool), len(test), experiment.pretrain.epochs)


def desk_settings(seed: int = 0, folds: int = 2, **overrides):
    """Small encoder and short schedules that train in seconds per fold."""
    from .ablation import RunSettings

    kw = dict(model={"layers": 1, "heads": 2, "hidden": 32, "intermediate": 32, "dropout": 0.0},
              representation={"context_length": 64},
              pretrain={"epochs": 5, "batch_size": 64, "lr": 3e-3, "warmup_epochs": 1},
              finetune={"epochs": 10, "batch_size": 64, "lr": 3e-3, "warmup_epochs": 1, "pooling": "mean"},
              folds=folds, seed=seed)
    kw.update(overrides)
    return RunSettings(**kw)


SENSITIVITY_STEPS = {
    "medication": ("+Medication", {"representation.include_medication": True}),
    "timing": ("+t2v(timestamps)", {"representation.include_abstime": True, "model.abstime_embedding": "time2vec"}),
}


@dataclass
class SensitivityRun:
    kind: str
    seed: int
    oracle: float
    accepted: bool
    baseline_auroc: float
    candidate_auroc: float


def sensitivity_run(kind: str, seed: int, n_patients: int = 2000, settings=None) -> SensitivityRun:
    """One-step ablation where only the step under test can expose the planted signal."""
    from .ablation import AblationPlan, Candidate, Step, run_plan

    plant = medication_plant(seed) if kind == "medication" else season_plant()
    cohort = planted_cohort(background(n_patients, seed), plant, seed=seed)
    label, changes = SENSITIVITY_STEPS[kind]
    task = outcome_task()
    plan = AblationPlan(Candidate("baseline", {}), (Step(kind, (Candidate(label, changes),)),), tasks=(task.name,))
    trace = run_plan(plan, cohort.population, settings or desk_settings(seed), [task])
    step = trace.steps[0]
    return SensitivityRun(kind, seed, cohort.oracle, step.accepted == label, step.incumbent_average,
                          step.candidates[0].average)
