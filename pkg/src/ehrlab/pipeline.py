"""Event cleaning, vocabulary building and model-ready sequence construction."""

from __future__ import annotations

import collections
import datetime as dt
import os
import re
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .records import Event, PatientRecord

PAD, MASK, UNK, CLS, SEP, BG_MALE, BG_FEMALE = range(7)
RESERVED_TOKENS = ("[PAD]", "[MASK]", "[UNK]", "[CLS]", "[SEP]", "[BG_MALE]", "[BG_FEMALE]")
N_RESERVED = len(RESERVED_TOKENS)

REFERENCE_INSTANT = dt.datetime(2020, 1, 26)
DAYS_PER_YEAR = 365.25
MIN_AGE, MAX_AGE = 0.0, 120.0

_CODE_RE = re.compile(r"^[A-Z][A-Z0-9]*$")


def is_code(concept: str) -> bool:
    """Codes are upper-case alphanumerics (``DC509``); anything else is free text."""
    return bool(_CODE_RE.match(concept))


def normalize_text(text: str) -> str:
    return " ".join(text.lower().split())


def age_in_years(ts: dt.datetime, birthdate: dt.date) -> float:
    born = dt.datetime.combine(birthdate, dt.time())
    return (ts - born).total_seconds() / (DAYS_PER_YEAR * 86400.0)


def hours_since(ts: dt.datetime, reference: dt.datetime = REFERENCE_INSTANT) -> float:
    return (ts - reference).total_seconds() / 3600.0


# --------------------------------------------------------------------------- stage 1-3

def replace_missing_codes(events: Sequence[Event]) -> list[Event]:
    """Fill a missing concept with the event's normalised free-text description."""
    out = []
    for ev in events:
        if ev.concept is None and ev.description and normalize_text(ev.description):
            ev = replace(ev, concept=normalize_text(ev.description))
        out.append(ev)
    return out


def impute_admissions(events: Sequence[Event], patient_id: str = "") -> list[Event]:
    """Infer admissions enclosed by one admission ([A None A]); others get fresh ids."""
    ids = [ev.admission_id for ev in events]
    n = len(ids)
    filled = list(ids)
    i = 0
    while i < n:
        if ids[i] is not None:
            i += 1
            continue
        j = i
        while j < n and ids[j] is None:
            j += 1
        left = ids[i - 1] if i > 0 else None
        right = ids[j] if j < n else None
        if left is not None and left == right:
            for k in range(i, j):
                filled[k] = left
        i = j
    taken = {a for a in ids if a is not None}
    counter = 0
    for k in range(n):
        if filled[k] is None:
            while f"{patient_id}-U{counter}" in taken:
                counter += 1
            filled[k] = f"{patient_id}-U{counter}"
            taken.add(filled[k])
    return [ev if ev.admission_id == a else replace(ev, admission_id=a) for ev, a in zip(events, filled)]


def impute_timestamps(events: Sequence[Event]) -> list[Event]:
    """Missing timestamps take the latest observed timestamp of their admission."""
    latest: dict[str, dt.datetime] = {}
    for ev in events:
        if ev.timestamp is not None and ev.admission_id is not None:
            cur = latest.get(ev.admission_id)
            if cur is None or ev.timestamp > cur:
                latest[ev.admission_id] = ev.timestamp
    out = []
    for ev in events:
        if ev.timestamp is None and ev.admission_id in latest:
            ev = replace(ev, timestamp=latest[ev.admission_id])
        out.append(ev)
    return out


def exclude_invalid_events(events: Sequence[Event], birthdate: dt.date) -> list[Event]:
    """Drop incomplete events and events outside ages [0, 120] (inclusive)."""
    return [ev for ev in events
            if ev.complete and MIN_AGE <= age_in_years(ev.timestamp, birthdate) <= MAX_AGE]


def process_patient(patient: PatientRecord) -> PatientRecord:
    """Run the three cleaning stages and order events by (timestamp, file order)."""
    events = replace_missing_codes(patient.events)
    events = impute_admissions(events, patient.patient_id)
    events = impute_timestamps(events)
    events = exclude_invalid_events(events, patient.birthdate)
    order = sorted(range(len(events)), key=lambda k: (events[k].timestamp, k))
    return replace(patient, events=[events[k] for k in order])


def process_population(population: Iterable[PatientRecord]) -> list[PatientRecord]:
    return [process_patient(p) for p in population]


# --------------------------------------------------------------------------- representation

@dataclass(frozen=True)
class RepresentationConfig:
    include_medication: bool = False
    full_depth_codes: bool = False
    include_sex_token: bool = False
    include_sep: bool = True
    segment_style: str = "binary"  # "binary" or "visit-number"
    include_abstime: bool = False
    context_length: int = 512
    truncation_lengths: tuple[tuple[str, int], ...] = (("D", 4), ("M", 6))

    def __post_init__(self):
        if self.context_length < 8:
            raise ValueError("context_length must be >= 8")
        if self.segment_style not in ("binary", "visit-number"):
            raise ValueError(f"unknown segment_style {self.segment_style!r}")


def truncate_code(concept: str, config: RepresentationConfig,
                  unknown: collections.Counter | None = None) -> str:
    """Shorten a code to its configured level; free text passes through unchanged."""
    if config.full_depth_codes or not is_code(concept):
        return concept
    for prefix, length in config.truncation_lengths:
        if concept.startswith(prefix):
            return concept[:length]
    if unknown is not None:
        unknown[concept[0]] += 1
    return concept


def is_medication(concept: str) -> bool:
    return is_code(concept) and concept.startswith("M")


def model_events(events: Sequence[Event], config: RepresentationConfig,
                 unknown: collections.Counter | None = None) -> list[tuple[Event, str]]:
    """Events kept by ``config`` paired with their model-level concept."""
    out = []
    for ev in events:
        if not config.include_medication and is_medication(ev.concept):
            continue
        out.append((ev, truncate_code(ev.concept, config, unknown)))
    return out


class Vocabulary:
    """Bijection between tokens and ids; ids 0-6 are the reserved tokens."""

    def __init__(self, concepts: Iterable[str] = ()):
        self._ids: dict[str, int] = {tok: i for i, tok in enumerate(RESERVED_TOKENS)}
        for concept in concepts:
            if concept not in self._ids:
                self._ids[concept] = len(self._ids)
        self._tokens = list(self._ids)

    def __len__(self) -> int:
        return len(self._tokens)

    @property
    def size(self) -> int:
        return len(self._tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self._tokens == other._tokens

    def id_of(self, token: str) -> int:
        return self._ids.get(token, UNK)

    def token_of(self, idx: int) -> str:
        return self._tokens[idx]

    def items(self) -> list[tuple[str, int]]:
        return list(self._ids.items())

    def write(self, path: str | os.PathLike) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for token, idx in self._ids.items():
                fh.write(f"{token}\t{idx}\n")

    @classmethod
    def read(cls, path: str | os.PathLike) -> "Vocabulary":
        rows = []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                token, idx = line.rstrip("\n").split("\t")
                rows.append((int(idx), token))
        rows.sort()
        if [i for i, _ in rows] != list(range(len(rows))) or tuple(t for _, t in rows[:N_RESERVED]) != RESERVED_TOKENS:
            raise ValueError(f"{path}: not a valid vocabulary listing")
        return cls(t for _, t in rows[N_RESERVED:])


def build_vocabulary(corpus: Iterable[PatientRecord], config: RepresentationConfig) -> Vocabulary:
    """One id per distinct model-level concept of the (processed) pretraining corpus."""
    concepts = set()
    for patient in corpus:
        concepts.update(c for _, c in model_events(patient.events, config))
    return Vocabulary(sorted(concepts))


# --------------------------------------------------------------------------- sequences

@dataclass
class TokenSequence:
    tokens: np.ndarray
    ages: np.ndarray
    abstimes: np.ndarray
    segments: np.ndarray
    attention_mask: np.ndarray
    patient_id: str = ""
    segment_style: str = "binary"

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        if not isinstance(other, TokenSequence):
            return NotImplemented
        return (self.patient_id == other.patient_id and self.segment_style == other.segment_style
                and all(np.array_equal(getattr(self, f), getattr(other, f))
                        for f in ("tokens", "ages", "abstimes", "segments", "attention_mask")))


def build_sequence(patient: PatientRecord, vocab: Vocabulary, config: RepresentationConfig,
                   reference: dt.datetime = REFERENCE_INSTANT) -> TokenSequence | None:
    """Lay out ``[CLS] [BG]? (visit events [SEP]?)*``; ``None`` if no events survive.

    Structure tokens copy time values from a neighbour: CLS/BG from the first
    event, each SEP from the last event of its visit.
    """
    selected = model_events(patient.events, config)
    if not selected:
        return None
    visits: dict[str, list[int]] = {}
    for k, (ev, _) in enumerate(selected):
        visits.setdefault(ev.admission_id, []).append(k)
    ordered = sorted(visits.values(), key=lambda ks: (selected[ks[0]][0].timestamp, ks[0]))

    tokens, ages, times, segs = [], [], [], []

    def push(token_id, ev, seg):
        tokens.append(token_id)
        ages.append(age_in_years(ev.timestamp, patient.birthdate))
        times.append(hours_since(ev.timestamp, reference) if config.include_abstime else 0.0)
        segs.append(seg)

    first = selected[ordered[0][0]][0]
    push(CLS, first, 0)
    if config.include_sex_token:
        push(BG_MALE if patient.sex == "male" else BG_FEMALE, first, 0)
    for number, ks in enumerate(ordered):
        seg = number if config.segment_style == "visit-number" else number % 2
        for k in ks:
            ev, concept = selected[k]
            push(vocab.id_of(concept), ev, seg)
        if config.include_sep:
            push(SEP, selected[ks[-1]][0], seg)
    n = len(tokens)
    return TokenSequence(
        tokens=np.asarray(tokens, dtype=np.int64),
        ages=np.asarray(ages, dtype=np.float64),
        abstimes=np.asarray(times, dtype=np.float64),
        segments=np.asarray(segs, dtype=np.int64),
        attention_mask=np.ones(n, dtype=bool),
        patient_id=patient.patient_id,
        segment_style=config.segment_style,
    )


def truncate_sequence(seq: TokenSequence, context_length: int) -> TokenSequence:
    """Keep CLS (+BG) and the most recent tokens; a leading orphan SEP is dropped.

    When the orphan SEP is dropped the result is one token shorter than
    ``context_length``. Visit numbers are re-based so the oldest kept visit is 0.
    """
    n = len(seq)
    if n <= context_length:
        return seq
    head = 2 if n > 1 and seq.tokens[1] in (BG_MALE, BG_FEMALE) else 1
    start = n - (context_length - head)
    if seq.tokens[start] == SEP:
        start += 1
    keep = np.concatenate([np.arange(head), np.arange(start, n)])
    out = TokenSequence(
        tokens=seq.tokens[keep].copy(),
        ages=seq.ages[keep].copy(),
        abstimes=seq.abstimes[keep].copy(),
        segments=seq.segments[keep].copy(),
        attention_mask=seq.attention_mask[keep].copy(),
        patient_id=seq.patient_id,
        segment_style=seq.segment_style,
    )
    if len(out) > head:
        out.ages[:head] = out.ages[head]
        out.abstimes[:head] = out.abstimes[head]
        if seq.segment_style == "visit-number":
            out.segments[head:] -= out.segments[head]
    return out


def sequence_for(patient: PatientRecord, vocab: Vocabulary, config: RepresentationConfig,
                 reference: dt.datetime = REFERENCE_INSTANT) -> TokenSequence | None:
    seq = build_sequence(patient, vocab, config, reference)
    return None if seq is None else truncate_sequence(seq, config.context_length)


# --------------------------------------------------------------------------- binary stream

_MAGIC = b"EHRSEQ01"
_STYLES = ("binary", "visit-number")


def write_sequences(path: str | os.PathLike, sequences: Iterable[TokenSequence]) -> int:
    """Write a length-prefixed little-endian record stream; returns the record count."""
    count = 0
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        for seq in sequences:
            pid = seq.patient_id.encode("utf-8")
            n = len(seq)
            body = b"".join((
                struct.pack("<H", len(pid)), pid,
                struct.pack("<BI", _STYLES.index(seq.segment_style), n),
                seq.tokens.astype("<i4").tobytes(),
                seq.ages.astype("<f8").tobytes(),
                seq.abstimes.astype("<f8").tobytes(),
                seq.segments.astype("<i4").tobytes(),
                seq.attention_mask.astype(np.uint8).tobytes(),
            ))
            fh.write(struct.pack("<I", len(body)))
            fh.write(body)
            count += 1
    return count


def read_sequences(path: str | os.PathLike) -> Iterator[TokenSequence]:
    with open(path, "rb") as fh:
        if fh.read(len(_MAGIC)) != _MAGIC:
            raise ValueError(f"{path}: not a sequence stream")
        while True:
            prefix = fh.read(4)
            if not prefix:
                return
            if len(prefix) < 4:
                raise ValueError(f"{path}: truncated record header")
            (size,) = struct.unpack("<I", prefix)
            body = fh.read(size)
            if len(body) < size:
                raise ValueError(f"{path}: truncated record")
            (plen,) = struct.unpack_from("<H", body, 0)
            pid = body[2:2 + plen].decode("utf-8")
            style, n = struct.unpack_from("<BI", body, 2 + plen)
            off = 2 + plen + 5
            arrays = []
            for dtype, width in (("<i4", 4), ("<f8", 8), ("<f8", 8), ("<i4", 4), (np.uint8, 1)):
                arrays.append(np.frombuffer(body, dtype=dtype, count=n, offset=off))
                off += width * n
            yield TokenSequence(
                tokens=arrays[0].astype(np.int64),
                ages=arrays[1].astype(np.float64),
                abstimes=arrays[2].astype(np.float64),
                segments=arrays[3].astype(np.int64),
                attention_mask=arrays[4].astype(bool),
                patient_id=pid,
                segment_style=_STYLES[style],
            )
