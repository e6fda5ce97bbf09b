"""
Replaying a published ablation table
====================================

Feed published per-task AUROCs through the same accept-if-the-average-rises
rule the training runner uses, and see which path it takes.
"""

from ehrlab.ablation import load_metric_table, reference_plan, replay, shipped_table_path, trace_table

plan = reference_plan()
table = load_metric_table(shipped_table_path(), "auroc")

# %%
# Each step offers one or more candidates; the best one is kept only if it
# strictly beats the incumbent's average.
trace = replay(plan, table)
for record in trace.steps:
    verdict = record.accepted or "kept incumbent"
    print(f"{record.step:>26}: {verdict}")

# %%
# The full table, accepted rows starred.
print(trace_table(trace))

# %%
# The last step is close. Attention-weighted pooling has the best AUROC average,
# but by only a few hundredths.
pooling = trace.steps[-1]
for c in sorted(pooling.candidates, key=lambda c: -c.average):
    print(f"{c.label:>20}  {c.average:.3f}")

# %%
# The same rule on AUPRC.
by_auprc = replay(plan, load_metric_table(shipped_table_path(), "auprc"))
print("AUPRC path:", ", ".join(by_auprc.accepted))
