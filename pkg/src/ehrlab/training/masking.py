"""MLM corruption and the prolonged-length-of-stay label."""

from __future__ import annotations

import datetime as dt
from collections import defaultdict

import numpy as np

from ..numerics import IGNORE_INDEX
from ..pipeline import MASK, N_RESERVED

MASK_SHARE = 0.8
RANDOM_SHARE = 0.1
PLOS_THRESHOLD = dt.timedelta(days=7)


def maskable(tokens: np.ndarray) -> np.ndarray:
    """Concept tokens only; PAD, MASK, UNK, CLS, SEP and background tokens are never selected."""
    return np.asarray(tokens) >= N_RESERVED


def mask_tokens(tokens, ratio: float, vocab_size: int, rng: np.random.Generator
                ) -> tuple[np.ndarray, np.ndarray]:
    """80-10-10 corruption.

    Returns ``(masked, targets)``; ``targets`` holds the original id at selected
    positions and ``IGNORE_INDEX`` elsewhere.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.size == 0:
        raise ValueError("cannot mask an empty sequence")
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"masking ratio must lie in [0, 1], got {ratio}")
    selected = maskable(tokens) & (rng.random(tokens.shape) < ratio)
    action = rng.random(tokens.shape)
    n_random = vocab_size - N_RESERVED
    random_ids = N_RESERVED + rng.integers(0, max(n_random, 1), size=tokens.shape)
    masked = tokens.copy()
    masked[selected & (action < MASK_SHARE)] = MASK
    swap = selected & (action >= MASK_SHARE) & (action < MASK_SHARE + RANDOM_SHARE)
    if n_random > 0:
        masked[swap] = random_ids[swap]
    targets = np.where(selected, tokens, IGNORE_INDEX)
    return masked, targets


def admission_spans(events) -> dict[str, dt.timedelta]:
    """Last minus first timestamp per admission id."""
    times: dict[str, list[dt.datetime]] = defaultdict(list)
    for e in events:
        if e.admission_id is not None and e.timestamp is not None:
            times[e.admission_id].append(e.timestamp)
    return {a: max(ts) - min(ts) for a, ts in times.items()}


def plos_label(patient) -> int:
    """1 iff some admission spans strictly more than seven days."""
    events = getattr(patient, "events", patient)
    return int(any(span > PLOS_THRESHOLD for span in admission_spans(events).values()))
