"""Patient/event records and the tab-separated interchange files."""

from __future__ import annotations

import datetime as dt
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

TIMESTAMP_FORMAT = "%Y-%m-%dT%H:%M"
EVENT_COLUMNS = ("patient_id", "concept", "timestamp", "admission_id", "description")
PATIENT_COLUMNS = ("patient_id", "birthdate", "sex", "deathdate")
EVENTS_FILE = "events.tsv"
PATIENTS_FILE = "patients.tsv"


@dataclass(frozen=True, slots=True)
class Event:
    """One coded medical occurrence. Any field may be missing before processing."""

    concept: str | None
    timestamp: dt.datetime | None
    admission_id: str | None
    description: str | None = None

    @property
    def complete(self) -> bool:
        return self.concept is not None and self.timestamp is not None and self.admission_id is not None


@dataclass(slots=True)
class PatientRecord:
    patient_id: str
    birthdate: dt.date
    sex: str
    deathdate: dt.date | None = None
    events: list[Event] = field(default_factory=list)

    def __post_init__(self):
        if self.sex not in ("male", "female"):
            raise ValueError(f"sex must be 'male' or 'female', got {self.sex!r}")


def format_timestamp(ts: dt.datetime | None) -> str:
    return "" if ts is None else ts.strftime(TIMESTAMP_FORMAT)


def parse_timestamp(text: str) -> dt.datetime | None:
    return None if text == "" else dt.datetime.strptime(text, TIMESTAMP_FORMAT)


def _field(value: str | None) -> str:
    if value is None:
        return ""
    if "\t" in value or "\n" in value or "\r" in value:
        raise ValueError(f"field contains a tab or newline: {value!r}")
    return value


def write_population(population: Iterable[PatientRecord], directory: str | os.PathLike) -> None:
    """Write ``patients.tsv`` and ``events.tsv`` under ``directory``."""
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
        with open(directory / PATIENTS_FILE, "w", encoding="utf-8", newline="\n") as pf, \
                open(directory / EVENTS_FILE, "w", encoding="utf-8", newline="\n") as ef:
            pf.write("\t".join(PATIENT_COLUMNS) + "\n")
            ef.write("\t".join(EVENT_COLUMNS) + "\n")
            for patient in population:
                death = "" if patient.deathdate is None else patient.deathdate.isoformat()
                pf.write(f"{_field(patient.patient_id)}\t{patient.birthdate.isoformat()}\t{patient.sex}\t{death}\n")
                for ev in patient.events:
                    ef.write("\t".join((
                        patient.patient_id,
                        _field(ev.concept),
                        format_timestamp(ev.timestamp),
                        _field(ev.admission_id),
                        _field(ev.description),
                    )) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write population to {directory}: {exc}") from exc


def read_population(directory: str | os.PathLike) -> list[PatientRecord]:
    """Read the files written by :func:`write_population`, preserving file order."""
    directory = Path(directory)
    try:
        with open(directory / PATIENTS_FILE, encoding="utf-8") as pf:
            header = pf.readline().rstrip("\n").split("\t")
            if tuple(header) != PATIENT_COLUMNS:
                raise ValueError(f"{directory / PATIENTS_FILE}: unexpected header {header}")
            patients: dict[str, PatientRecord] = {}
            for line in pf:
                pid, birth, sex, death = line.rstrip("\n").split("\t")
                patients[pid] = PatientRecord(
                    patient_id=pid,
                    birthdate=dt.date.fromisoformat(birth),
                    sex=sex,
                    deathdate=dt.date.fromisoformat(death) if death else None,
                )
        with open(directory / EVENTS_FILE, encoding="utf-8") as ef:
            header = ef.readline().rstrip("\n").split("\t")
            if tuple(header) != EVENT_COLUMNS:
                raise ValueError(f"{directory / EVENTS_FILE}: unexpected header {header}")
            for lineno, line in enumerate(ef, start=2):
                parts = line.rstrip("\n").split("\t")
                if len(parts) != len(EVENT_COLUMNS):
                    raise ValueError(f"{directory / EVENTS_FILE}:{lineno}: expected {len(EVENT_COLUMNS)} fields")
                pid, concept, ts, adm, desc = parts
                if pid not in patients:
                    raise ValueError(f"{directory / EVENTS_FILE}:{lineno}: unknown patient {pid!r}")
                patients[pid].events.append(Event(concept or None, parse_timestamp(ts), adm or None, desc or None))
    except OSError as exc:
        raise OSError(f"cannot read population from {directory}: {exc}") from exc
    return list(patients.values())
