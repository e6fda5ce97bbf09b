"""Synthetic patients with hierarchical codes, missingness and planted outcome signals."""

from __future__ import annotations

import bisect
import datetime as dt
import math
import string
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.optimize import brentq

from .records import Event, PatientRecord, write_population

_MINUTES_PER_DAY = 24 * 60


@dataclass(frozen=True)
class SignalPlant:
    """Outcome code given with higher probability to carriers of a precursor.

    A patient is a carrier when some event matches one of ``precursors`` (code
    prefixes) and, if ``windows`` is set, falls inside one of those calendar
    windows. With no precursors, any event inside a window qualifies, which
    plants a purely timing-based signal.
    """

    outcome: str
    precursors: tuple[str, ...] = ()
    effect: float = 2.0
    base: float = -2.0
    lag_days: tuple[float, float] = (60.0, 365.0)
    windows: tuple[tuple[dt.datetime, dt.datetime], ...] = ()

    def __post_init__(self):
        if not self.precursors and not self.windows:
            raise ValueError("a plant needs precursor codes or calendar windows")
        lo, hi = self.lag_days
        if lo < 0 or hi < lo:
            raise ValueError(f"invalid lag range {self.lag_days}")

    @property
    def carrier_probability(self) -> float:
        return logistic(self.base + self.effect)

    @property
    def background_probability(self) -> float:
        return logistic(self.base)


@dataclass(frozen=True)
class GeneratorSpec:
    n_patients: int = 1000
    start: dt.date = dt.date(2016, 1, 1)
    end: dt.date = dt.date(2022, 12, 31)
    birth_start: dt.date = dt.date(1930, 1, 1)
    birth_end: dt.date = dt.date(2012, 12, 31)
    visit_rate: float = 2.0  # mean visits per patient-year
    events_per_visit: float = 3.0  # mean, at least one
    n_diagnosis_stems: int = 40
    n_medication_stems: int = 30
    leaf_fanout: int = 4
    medication_fraction: float = 0.4
    inpatient_fraction: float = 0.3
    max_admission_days: float = 20.0
    missing_concept: float = 0.0
    missing_timestamp: float = 0.0
    missing_admission: float = 0.0
    text_fraction: float = 0.5  # missing-concept events that keep a free-text description
    male_fraction: float = 0.5
    death_fraction: float = 0.05
    plants: tuple[SignalPlant, ...] = ()
    seed: int = 0

    def validate(self) -> None:
        for name in ("medication_fraction", "inpatient_fraction", "missing_concept", "missing_timestamp",
                     "missing_admission", "text_fraction", "male_fraction", "death_fraction"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {value}")
        if self.n_patients < 0:
            raise ValueError("n_patients must be >= 0")
        if self.leaf_fanout < 1 or self.n_diagnosis_stems + self.n_medication_stems < 1:
            raise ValueError("empty code vocabulary")
        if self.n_diagnosis_stems < 0 or self.n_medication_stems < 0:
            raise ValueError("stem counts must be >= 0")
        if self.events_per_visit < 1:
            raise ValueError("events_per_visit must be >= 1")
        if self.end < self.start or self.birth_end < self.birth_start:
            raise ValueError("date ranges must be ordered")


@dataclass(frozen=True)
class CodeVocabulary:
    """Stems (level-four codes) and their full-depth leaves."""

    diagnosis: dict[str, tuple[str, ...]] = field(default_factory=dict)
    medication: dict[str, tuple[str, ...]] = field(default_factory=dict)

    def all_codes(self) -> list[str]:
        return [leaf for table in (self.diagnosis, self.medication) for leaves in table.values() for leaf in leaves]

    def has_prefix(self, prefix: str) -> bool:
        return any(code.startswith(prefix) for code in self.all_codes())


def logistic(x: float) -> float:
    if x == math.inf:
        return 1.0
    if x == -math.inf:
        return 0.0
    return 1.0 / (1.0 + math.exp(-x))


def code_vocabulary(spec: GeneratorSpec) -> CodeVocabulary:
    """Deterministic code hierarchy for ``spec`` (independent of plants and patient count)."""
    rng = np.random.default_rng([spec.seed, 0xC0DE])
    # Z is left free for planted outcome codes
    letters = string.ascii_uppercase[:25]
    diag: dict[str, tuple[str, ...]] = {}
    while len(diag) < spec.n_diagnosis_stems:
        stem = f"D{letters[rng.integers(len(letters))]}{rng.integers(100):02d}"
        if stem in diag:
            continue
        digits = rng.choice(10, size=min(spec.leaf_fanout, 10), replace=False)
        leaves = []
        for j, d in enumerate(sorted(digits)):
            leaves.append(f"{stem}{d}" + ("A" if j % 3 == 2 else ""))
        while len(leaves) < spec.leaf_fanout:
            leaves.append(f"{stem}9{string.ascii_uppercase[len(leaves) % 26]}")
        diag[stem] = tuple(leaves)
    med: dict[str, tuple[str, ...]] = {}
    while len(med) < spec.n_medication_stems:
        stem = (f"M{letters[rng.integers(22)]}{rng.integers(1, 100):02d}"
                f"{string.ascii_uppercase[rng.integers(8)]}{string.ascii_uppercase[rng.integers(8)]}")
        if stem in med:
            continue
        nums = rng.choice(np.arange(1, 100), size=spec.leaf_fanout, replace=False)
        med[stem] = tuple(f"{stem}{n:02d}" for n in sorted(nums))
    return CodeVocabulary(diagnosis=diag, medication=med)


def _zipf_weights(n: int) -> np.ndarray:
    w = 1.0 / np.arange(1, n + 1) ** 0.8
    return w / w.sum()


def _minutes(ts: dt.datetime, origin: dt.datetime) -> int:
    return int((ts - origin).total_seconds() // 60)


def _background_patient(i: int, spec: GeneratorSpec, vocab: CodeVocabulary,
                        diag_stems: list[str], med_stems: list[str]) -> PatientRecord:
    rng = np.random.default_rng([spec.seed, i])
    pid = f"P{i:06d}"
    sex = "male" if rng.random() < spec.male_fraction else "female"
    birth = spec.birth_start + dt.timedelta(days=int(rng.integers((spec.birth_end - spec.birth_start).days + 1)))
    obs_start = dt.datetime.combine(max(spec.start, birth), dt.time())
    obs_end = dt.datetime.combine(spec.end, dt.time())
    death = None
    if rng.random() < spec.death_fraction:
        span = max((spec.end - max(spec.start, birth)).days, 0)
        death = max(spec.start, birth) + dt.timedelta(days=int(rng.integers(span + 1)))

    events: list[Event] = []
    total_minutes = _minutes(obs_end, obs_start)
    if total_minutes > 0:
        years = total_minutes / (_MINUTES_PER_DAY * 365.25)
        n_visits = rng.poisson(spec.visit_rate * years)
        starts = np.sort(rng.integers(0, total_minutes, size=n_visits))
        diag_w = _zipf_weights(len(diag_stems)) if diag_stems else None
        med_w = _zipf_weights(len(med_stems)) if med_stems else None
        for k, start_min in enumerate(starts):
            admission = f"{pid}-A{k}"
            if rng.random() < spec.inpatient_fraction:
                span = rng.uniform(0.0, spec.max_admission_days) * _MINUTES_PER_DAY
            else:
                span = rng.uniform(0.0, 4 * 60)
            n_events = 1 + rng.poisson(spec.events_per_visit - 1)
            offsets = np.sort(rng.uniform(0.0, span, size=n_events))
            offsets[0] = 0.0
            if n_events > 1:
                offsets[-1] = span
            for off in offsets:
                use_med = med_stems and (not diag_stems or rng.random() < spec.medication_fraction)
                if use_med:
                    stem = med_stems[rng.choice(len(med_stems), p=med_w)]
                    leaves = vocab.medication[stem]
                else:
                    stem = diag_stems[rng.choice(len(diag_stems), p=diag_w)]
                    leaves = vocab.diagnosis[stem]
                code = leaves[rng.integers(len(leaves))]
                ts = obs_start + dt.timedelta(minutes=int(start_min + off))
                events.append(Event(code, ts, admission))
    # long inpatient stays can overlap later visits
    events.sort(key=lambda ev: ev.timestamp)
    return PatientRecord(pid, birth, sex, death, events)


def _inject_missingness(patient: PatientRecord, spec: GeneratorSpec, planted: set[int]) -> None:
    if not (spec.missing_concept or spec.missing_timestamp or spec.missing_admission):
        return
    rng = np.random.default_rng([spec.seed, int(patient.patient_id[1:]), 0xFADE])
    out = []
    for j, ev in enumerate(patient.events):
        if j in planted:
            out.append(ev)
            continue
        u = rng.random(4)
        concept, description = ev.concept, None
        if u[0] < spec.missing_concept:
            if u[1] < spec.text_fraction:
                description = f"Beskrivelse  {ev.concept[:4]}"
            concept = None
        ts = None if u[2] < spec.missing_timestamp else ev.timestamp
        adm = None if u[3] < spec.missing_admission else ev.admission_id
        out.append(Event(concept, ts, adm, description))
    patient.events = out


def _is_carrier_event(ev: Event, plant: SignalPlant) -> bool:
    if ev.timestamp is None:
        return False
    if plant.precursors:
        if ev.concept is None or not ev.concept.startswith(plant.precursors):
            return False
    if plant.windows:
        return any(lo <= ev.timestamp < hi for lo, hi in plant.windows)
    return True


def _plant_one(patient: PatientRecord, plant: SignalPlant, rng: np.random.Generator) -> int | None:
    """Maybe add the outcome event; returns its index in ``patient.events``."""
    anchor = next((ev.timestamp for ev in patient.events if _is_carrier_event(ev, plant)), None)
    carrier = anchor is not None
    p = plant.carrier_probability if carrier else plant.background_probability
    u_outcome, u_lag, u_anchor = rng.random(3)
    if u_outcome >= p:
        return None
    if not carrier:
        stamped = [ev.timestamp for ev in patient.events if ev.timestamp is not None]
        if not stamped:
            return None
        anchor = stamped[int(u_anchor * len(stamped))]
    lo, hi = plant.lag_days
    when = anchor + dt.timedelta(minutes=int((lo + u_lag * (hi - lo)) * _MINUTES_PER_DAY))
    outcome = Event(plant.outcome, when, f"{patient.patient_id}-{plant.outcome}")
    keys = [ev.timestamp for ev in patient.events]
    # insert after the last timestamped event not later than the outcome
    pos = 0
    for j, ts in enumerate(keys):
        if ts is not None and ts <= when:
            pos = j + 1
    patient.events.insert(pos, outcome)
    return pos


def plant_outcome_signal(population: Sequence[PatientRecord], plant: SignalPlant, seed: int = 0,
                         tag: int = 0) -> list[PatientRecord]:
    """Return a copy of ``population`` with ``plant``'s outcome events added."""
    if plant.precursors:
        seen = {ev.concept for pat in population for ev in pat.events if ev.concept}
        for prefix in plant.precursors:
            if population and not any(c.startswith(prefix) for c in seen):
                raise ValueError(f"precursor {prefix!r} does not occur in the population")
    out = []
    for i, patient in enumerate(population):
        copy = replace(patient, events=list(patient.events))
        _plant_one(copy, plant, np.random.default_rng([seed, i, 0x5EED, tag]))
        out.append(copy)
    return out


def generate_population(spec: GeneratorSpec) -> list[PatientRecord]:
    """Generate ``spec.n_patients`` patients; output is a pure function of ``spec``."""
    spec.validate()
    vocab = code_vocabulary(spec)
    for plant in spec.plants:
        for prefix in plant.precursors:
            if not vocab.has_prefix(prefix):
                raise ValueError(f"precursor {prefix!r} is not in the generated vocabulary")
        if vocab.has_prefix(plant.outcome):
            raise ValueError(f"outcome code {plant.outcome!r} collides with background codes")
    diag_stems = list(vocab.diagnosis)
    med_stems = list(vocab.medication)
    population = []
    for i in range(spec.n_patients):
        patient = _background_patient(i, spec, vocab, diag_stems, med_stems)
        planted_ids = []
        for tag, plant in enumerate(spec.plants):
            pos = _plant_one(patient, plant, np.random.default_rng([spec.seed, i, 0x5EED, tag]))
            if pos is not None:
                planted_ids = [j + (j >= pos) for j in planted_ids] + [pos]
        _inject_missingness(patient, spec, set(planted_ids))
        population.append(patient)
    return population


def export_events(population: Sequence[PatientRecord], path) -> None:
    """Write the population as ``patients.tsv`` + ``events.tsv`` in directory ``path``."""
    write_population(population, path)


# --------------------------------------------------------------------------- oracles

def two_group_auroc(p_carrier: float, p_background: float, carrier_fraction: float) -> float:
    """AUROC of the score "is a carrier" when carriers have outcome rate ``p_carrier``.

    P(score+ > score-) + 0.5 P(tie) reduces to 0.5 + 0.5 (TPR - FPR).
    """
    q = carrier_fraction
    pos = q * p_carrier + (1 - q) * p_background
    neg = 1.0 - pos
    if pos <= 0 or neg <= 0:
        raise ValueError("both classes must have positive probability")
    tpr = q * p_carrier / pos
    fpr = q * (1 - p_carrier) / neg
    return 0.5 + 0.5 * (tpr - fpr)


def calibrate_effect(base: float, carrier_fraction: float, target_auroc: float) -> float:
    """Effect strength (log-odds shift) giving ``target_auroc`` for the carrier score."""

    def gap(effect):
        return two_group_auroc(logistic(base + effect), logistic(base), carrier_fraction) - target_auroc

    return brentq(gap, 0.0, 50.0, xtol=1e-12)


def carrier_fraction(population: Sequence[PatientRecord], plant: SignalPlant) -> float:
    if not population:
        return 0.0
    hits = sum(any(_is_carrier_event(ev, plant) for ev in p.events) for p in population)
    return hits / len(population)


def is_carrier(patient: PatientRecord, plant: SignalPlant) -> bool:
    return any(_is_carrier_event(ev, plant) for ev in patient.events
               if ev.concept != plant.outcome)
