"""
Checking the encoder's moving parts
===================================

Rotary positions, Time2Vec, 80/10/10 masking and gradients, each checked
against a number we can compute by hand.
"""

import numpy as np

from ehrlab.model import ModelConfig, collate, rope_rotate, time2vec
from ehrlab.numerics import IGNORE_INDEX, gradient_check
from ehrlab.pipeline import MASK, N_RESERVED, TokenSequence
from ehrlab.training import POOLING, SequenceClassifier, mask_tokens

rng = np.random.default_rng(0)

# %%
# RoPE: attention scores depend only on the offset between positions.
q, k = rng.normal(size=(2, 16))
for shift in (0, 7, 300):
    score = rope_rotate(q[None], [3 + shift]).data[0] @ rope_rotate(k[None], [10 + shift]).data[0]
    print(f"positions ({3 + shift}, {10 + shift}): score {score:.12f}")

# %%
# Time2Vec: one linear component, clipped at +-100, and periodic components in [-1, 1].
hours = np.array([0.0, 8760.0, 1e7, -1e9])
out = time2vec(hours, np.ones(4), np.zeros(4), 1e-4, 100.0).data
print("linear part:", out[:, 0])
print("a year of hours scales to", out[1, 0])

# %%
# Masking at 15%: reserved tokens are never picked.
tokens = rng.integers(0, 500, 200_000)
masked, targets = mask_tokens(tokens, 0.15, 500, rng)
chosen = targets != IGNORE_INDEX
print(f"selected {chosen.sum() / (tokens >= N_RESERVED).sum():.4f} of maskable tokens")
print(f"became MASK {np.mean(masked[chosen] == MASK):.3f}, kept {np.mean(masked[chosen] == tokens[chosen]):.3f}")
print("reserved tokens selected:", bool(chosen[tokens < N_RESERVED].any()))

# %%
# Gradients of a two-layer encoder with every pooling head, against central differences.
config = ModelConfig(vocab_size=30, layers=2, heads=2, hidden=16, intermediate=16, context_length=16, dropout=0.0,
                     position="rope", ffn="swiglu")
seqs = [TokenSequence(rng.integers(N_RESERVED, 30, n), rng.uniform(30, 60, n), np.zeros(n), np.zeros(n, int),
                      np.ones(n, bool), str(n)) for n in (5, 9)]
batch = collate(seqs)
for strategy in POOLING:
    clf = SequenceClassifier(config, strategy, seed=1)
    for p in clf.parameters():
        p.data += rng.normal(0, 0.05, p.shape)
    report = gradient_check(lambda: clf.logits(batch).sum(), clf.parameters(), max_per_param=4)
    print(f"{strategy:>18}: max relative error {report.max_rel_error:.1e}")
