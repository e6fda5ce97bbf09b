from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..pipeline import PAD, TokenSequence


@dataclass
class Batch:
    """Padded ``[B, L]`` arrays; ``mask`` is False exactly on PAD positions."""

    tokens: np.ndarray
    ages: np.ndarray
    abstimes: np.ndarray
    segments: np.ndarray
    mask: np.ndarray
    patient_ids: tuple[str, ...] = ()

    @property
    def shape(self) -> tuple[int, int]:
        return self.tokens.shape

    def take(self, rows) -> "Batch":
        rows = np.asarray(rows)
        return Batch(self.tokens[rows], self.ages[rows], self.abstimes[rows], self.segments[rows],
                     self.mask[rows], tuple(self.patient_ids[i] for i in rows) if self.patient_ids else ())


def collate(sequences: Sequence[TokenSequence], length: int | None = None) -> Batch:
    if not sequences:
        raise ValueError("cannot collate an empty list of sequences")
    longest = max(len(s) for s in sequences)
    length = longest if length is None else length
    if length < longest:
        raise ValueError(f"pad length {length} is shorter than the longest sequence ({longest})")
    b = len(sequences)
    tokens = np.full((b, length), PAD, dtype=np.int64)
    ages = np.zeros((b, length))
    abstimes = np.zeros((b, length))
    segments = np.zeros((b, length), dtype=np.int64)
    mask = np.zeros((b, length), dtype=bool)
    for i, s in enumerate(sequences):
        n = len(s)
        tokens[i, :n] = s.tokens
        ages[i, :n] = s.ages
        abstimes[i, :n] = s.abstimes
        segments[i, :n] = s.segments
        mask[i, :n] = s.attention_mask
    return Batch(tokens, ages, abstimes, segments, mask, tuple(s.patient_id for s in sequences))
