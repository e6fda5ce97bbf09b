"""
Comparing models across folds
=============================

Cross-validated AUROC and AUPRC, one-sided Welch tests against a reference,
and Benjamini-Hochberg adjustment over all comparisons.
"""

import numpy as np

from ehrlab.evaluation import MetricsReport, adjust_comparisons, benjamini_hochberg, format_table, \
    one_sided_t_pvalue

rng = np.random.default_rng(3)

# %%
# The worked example: two models five folds each, 0.80 vs 0.78 with sd 0.01.
print(f"p = {one_sided_t_pvalue(0.80, 0.01, 5, 0.78, 0.01, 5):.5f}")

# %%
# Four models on one task. Each newer model is tested against the baseline, and the
# p-values are adjusted together.
reports = []
for name, centre in (("baseline", 0.78), ("medication", 0.80), ("rope", 0.805), ("bigru", 0.79)):
    folds = centre + rng.normal(0, 0.008, 5)
    reports.append(MetricsReport("death", folds, folds - 0.1, model=name))
for r in reports[1:]:
    r.compare(reports[0])
adjust_comparisons(reports)
for r in reports[1:]:
    c = r.comparisons[0]
    print(f"{r.model} > {c.against}: p {c.p_raw:.4f}, adjusted {c.p_adjusted:.4f} {c.stars}")
print(format_table(reports, "auroc", percent=True))

# %%
# Benjamini-Hochberg on its own.
reject, adjusted = benjamini_hochberg([0.01, 0.04, 0.03, 0.20], 0.05)
print("reject:", reject.tolist())
print("adjusted:", np.round(adjusted, 4).tolist())
