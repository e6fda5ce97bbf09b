"""
A synthetic cohort from raw records to labelled examples
========================================================

Generate messy patient records, clean them, and label a prediction task
whose answer we planted ourselves.
"""

import collections

import numpy as np

from ehrlab.cohort import label_patients
from ehrlab.pipeline import RepresentationConfig, build_vocabulary, process_population, sequence_for
from ehrlab.scenarios import OUTCOME, background, diagnosis_plant, oracle_auroc, outcome_task
from ehrlab.synth import is_carrier, plant_outcome_signal

# %%
# Raw records arrive with gaps: some events lack a code, a timestamp or an
# admission id.
raw = background(1000, seed=1, missing_concept=0.05, missing_timestamp=0.05, missing_admission=0.05)
n_events = sum(len(p.events) for p in raw)
incomplete = sum(not e.complete for p in raw for e in p.events)
print(f"{len(raw)} patients, {n_events} events, {incomplete} incomplete")

# %%
# Plant an outcome: carriers of one diagnosis stem get the outcome code more often.
plant = diagnosis_plant(seed=1, effect=3.0)
print("precursor", plant.precursors, "-> outcome", OUTCOME)
planted = plant_outcome_signal(raw, plant, seed=1)
carriers = sum(is_carrier(p, plant) for p in planted)
print(f"{carriers} carriers")

# %%
# Processing fills codes from free text, infers admissions, imputes times and
# drops what cannot be repaired. Running it twice changes nothing.
clean = process_population(planted)
assert process_population(clean) == clean
print(f"after processing: {sum(len(p.events) for p in clean)} events, all complete:",
      all(e.complete for p in clean for e in p.events))

# %%
# Tokens. Diagnoses are cut to 4 characters and medications to 6 unless full depth is asked for.
for config in (RepresentationConfig(), RepresentationConfig(include_medication=True, full_depth_codes=True)):
    vocab = build_vocabulary(clean, config)
    lengths = [len(s.tokens) for s in (sequence_for(p, vocab, config) for p in clean) if s is not None]
    print(f"medication={config.include_medication} full_depth={config.full_depth_codes}: "
          f"vocabulary {vocab.size}, median length {int(np.median(lengths))}")

# %%
# Labels. Positives are censored a prediction window before their first outcome;
# negatives borrow censoring times from the positives.
examples = label_patients(clean, outcome_task(), seed=1)
counts = collections.Counter(e.label for e in examples)
print(f"{counts[1]} positives, {counts[0]} negatives")

# %%
# The best any model can do with "precursor seen before censoring" alone.
print(f"oracle AUROC {oracle_auroc(clean, examples, plant):.3f}")
