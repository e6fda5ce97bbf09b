"""Ranking metrics, cross-validation protocols and significance testing."""

from __future__ import annotations

import csv
import io
import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.stats import rankdata, t as student_t

from .cohort import kfold_split


def _check_binary(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if scores.shape != labels.shape:
        raise ValueError(f"{scores.size} scores but {labels.size} labels")
    if not np.all(np.isin(labels, (0, 1))):
        raise ValueError("labels must be 0 or 1")
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    return scores, labels.astype(np.int64)


def auroc(scores, labels) -> float:
    """P(score+ > score-) + 0.5 P(tie), via the rank-sum statistic."""
    scores, labels = _check_binary(scores, labels)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("auroc needs both classes")
    ranks = rankdata(scores)
    return float((ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def auprc(scores, labels) -> float:
    """Average precision with tied scores treated as one threshold step."""
    scores, labels = _check_binary(scores, labels)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise ValueError("auprc needs at least one positive")
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    # last index of every group of equal scores
    ends = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tp = np.cumsum(y)[ends]
    precision = tp / (ends + 1)
    recall_step = np.diff(np.r_[0, tp]) / n_pos
    return float((precision * recall_step).sum())


# --------------------------------------------------------------------------- significance

def one_sided_t_pvalue(mean_a: float, sd_a: float, n_a: int, mean_b: float, sd_b: float, n_b: int) -> float:
    """Welch test of H0: a <= b against a > b; returns the upper-tail p-value."""
    if n_a < 2 or n_b < 2:
        raise ValueError("each group needs at least two observations")
    if sd_a < 0 or sd_b < 0:
        raise ValueError("standard deviations must be non-negative")
    va, vb = sd_a ** 2 / n_a, sd_b ** 2 / n_b
    se2 = va + vb
    if se2 == 0.0:
        if mean_a == mean_b:
            return 0.5
        return 0.0 if mean_a > mean_b else 1.0
    t_stat = (mean_a - mean_b) / math.sqrt(se2)
    df = se2 ** 2 / ((va ** 2 / (n_a - 1) if va else 0.0) + (vb ** 2 / (n_b - 1) if vb else 0.0))
    return float(student_t.sf(t_stat, df))


def welch_df(sd_a: float, n_a: int, sd_b: float, n_b: int) -> float:
    va, vb = sd_a ** 2 / n_a, sd_b ** 2 / n_b
    return (va + vb) ** 2 / (va ** 2 / (n_a - 1) + vb ** 2 / (n_b - 1))


def benjamini_hochberg(pvalues: Sequence[float], alpha: float = 0.05) -> tuple[np.ndarray, np.ndarray]:
    """Step-up FDR control; returns (reject flags, adjusted p-values) in input order."""
    p = np.asarray(pvalues, dtype=np.float64).reshape(-1)
    if p.size == 0:
        return np.zeros(0, dtype=bool), np.zeros(0)
    if np.any((p < 0) | (p > 1)) or not np.all(np.isfinite(p)):
        raise ValueError("p-values must lie in [0, 1]")
    m = p.size
    order = np.argsort(p, kind="stable")
    scaled = p[order] * m / np.arange(1, m + 1)
    adjusted_sorted = np.minimum(np.minimum.accumulate(scaled[::-1])[::-1], 1.0)
    adjusted = np.empty(m)
    adjusted[order] = adjusted_sorted
    return adjusted <= alpha, adjusted


def stars(p_adjusted: float) -> str:
    if p_adjusted < 0.001:
        return "***"
    if p_adjusted < 0.01:
        return "**"
    if p_adjusted < 0.05:
        return "*"
    return ""


# --------------------------------------------------------------------------- reports

@dataclass
class Comparison:
    against: str
    p_raw: float
    p_adjusted: float | None = None

    @property
    def stars(self) -> str:
        return "" if self.p_adjusted is None else stars(self.p_adjusted)


@dataclass
class MetricsReport:
    task: str
    fold_auroc: list[float]
    fold_auprc: list[float]
    model: str = ""
    comparisons: list[Comparison] = field(default_factory=list)

    @property
    def n_folds(self) -> int:
        return len(self.fold_auroc)

    @staticmethod
    def _sd(values) -> float:
        return float(np.std(values, ddof=1)) if len(values) >= 2 else float("nan")

    @property
    def auroc_mean(self) -> float:
        return float(np.mean(self.fold_auroc))

    @property
    def auroc_sd(self) -> float:
        return self._sd(self.fold_auroc)

    @property
    def auprc_mean(self) -> float:
        return float(np.mean(self.fold_auprc))

    @property
    def auprc_sd(self) -> float:
        return self._sd(self.fold_auprc)

    def compare(self, other: "MetricsReport") -> Comparison:
        """One-sided test that this model's mean AUROC exceeds ``other``'s."""
        p = one_sided_t_pvalue(self.auroc_mean, self.auroc_sd, self.n_folds,
                               other.auroc_mean, other.auroc_sd, other.n_folds)
        comparison = Comparison(other.model or other.task, p)
        self.comparisons.append(comparison)
        return comparison


def adjust_comparisons(reports: Sequence[MetricsReport], alpha: float = 0.05) -> None:
    """Benjamini-Hochberg over every comparison attached to ``reports``."""
    pending = [c for r in reports for c in r.comparisons]
    if not pending:
        return
    _, adjusted = benjamini_hochberg([c.p_raw for c in pending], alpha)
    for c, a in zip(pending, adjusted):
        c.p_adjusted = float(a)


REPORT_COLUMNS = ("model", "task", "fold", "auroc", "auprc")


def reports_to_csv(reports: Sequence[MetricsReport]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(REPORT_COLUMNS)
    for r in reports:
        for fold, (a, p) in enumerate(zip(r.fold_auroc, r.fold_auprc)):
            writer.writerow((r.model, r.task, fold, format(a, ".17g"), format(p, ".17g")))
    return buf.getvalue()


def reports_from_csv(text: str) -> list[MetricsReport]:
    rows = list(csv.DictReader(io.StringIO(text)))
    out: dict[tuple[str, str], MetricsReport] = {}
    for row in rows:
        key = (row["model"], row["task"])
        rep = out.setdefault(key, MetricsReport(task=row["task"], fold_auroc=[], fold_auprc=[], model=row["model"]))
        rep.fold_auroc.append(float(row["auroc"]))
        rep.fold_auprc.append(float(row["auprc"]))
    return list(out.values())


def format_table(reports: Sequence[MetricsReport], metric: str = "auroc", percent: bool = True) -> str:
    """Models as rows and tasks as columns, cells ``mean±sd`` with significance stars."""
    models = list(dict.fromkeys(r.model for r in reports))
    tasks = list(dict.fromkeys(r.task for r in reports))
    cell = {(r.model, r.task): r for r in reports}
    scale = 100.0 if percent else 1.0
    header = ["Model"] + tasks
    lines = [header]
    for m in models:
        row = [m]
        for t in tasks:
            r = cell.get((m, t))
            if r is None:
                row.append("")
                continue
            mean = getattr(r, f"{metric}_mean") * scale
            sd = getattr(r, f"{metric}_sd") * scale
            mark = "".join(c.stars for c in r.comparisons)
            row.append(f"{mean:.2f}±{sd:.2f}{mark}" if not math.isnan(sd) else f"{mean:.2f}{mark}")
        lines.append(row)
    widths = [max(len(line[i]) for line in lines) for i in range(len(header))]
    return "\n".join("  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(line, widths)))
                     for line in lines) + "\n"


# --------------------------------------------------------------------------- protocols

ScoreFn = Callable[[Sequence], np.ndarray]
TrainFn = Callable[[Sequence, Sequence, int], ScoreFn]


def _labels(examples) -> np.ndarray:
    return np.array([ex.label for ex in examples], dtype=np.int64)


def cross_validate(examples: Sequence, k: int, train_fn: TrainFn, test_set: Sequence, seed: int = 0,
                   task: str = "", model: str = "") -> MetricsReport:
    """k runs; run ``f`` validates on fold ``f``, trains on the rest, scores the fixed test set.

    ``train_fn(train, validation, run_seed)`` returns a function mapping
    examples to scores.
    """
    folds = kfold_split(examples, k, seed)
    y_test = _labels(test_set)
    aurocs, auprcs = [], []
    for f in range(k):
        train = [ex for g, fold in enumerate(folds) if g != f for ex in fold]
        score = train_fn(train, folds[f], seed * 1000 + f)
        s = np.asarray(score(test_set), dtype=np.float64)
        aurocs.append(auroc(s, y_test))
        auprcs.append(auprc(s, y_test))
    return MetricsReport(task=task, fold_auroc=aurocs, fold_auprc=auprcs, model=model)


@dataclass
class LeaveTwoOutReport:
    runs: dict[tuple[int, int], float]  # (test fold, validation fold) -> AUROC
    within: list[float]  # |difference| of the two models per test fold
    across: list[float]  # |difference| of per-test-fold means, all pairs

    @property
    def within_mean(self) -> float:
        return float(np.mean(self.within))

    @property
    def across_mean(self) -> float:
        return float(np.mean(self.across))


def leave_two_out_pairs(n_folds: int = 5) -> list[tuple[int, int]]:
    """(test, validation) pairs: test fold i with validation folds i+1 and i+2 (mod n)."""
    return [(i, (i + d) % n_folds) for i in range(n_folds) for d in (1, 2)]


def summarize_leave_two_out(runs: Mapping[tuple[int, int], float], n_folds: int = 5) -> LeaveTwoOutReport:
    per_test: dict[int, list[float]] = {}
    for (test, _), value in runs.items():
        per_test.setdefault(test, []).append(value)
    within = [abs(v[0] - v[1]) for _, v in sorted(per_test.items())]
    means = [float(np.mean(v)) for _, v in sorted(per_test.items())]
    across = [abs(a - b) for a, b in itertools.combinations(means, 2)]
    return LeaveTwoOutReport(dict(runs), within, across)


def leave_two_out(examples: Sequence, train_fn: TrainFn, seed: int = 0, n_folds: int = 5) -> LeaveTwoOutReport:
    """Ten runs over five folds; each fold is tested twice with different validation folds."""
    folds = kfold_split(examples, n_folds, seed)
    runs = {}
    for test, val in leave_two_out_pairs(n_folds):
        train = [ex for g, fold in enumerate(folds) if g not in (test, val) for ex in fold]
        score = train_fn(train, folds[val], seed * 1000 + test * n_folds + val)
        runs[(test, val)] = auroc(np.asarray(score(folds[test]), dtype=np.float64), _labels(folds[test]))
    return summarize_leave_two_out(runs, n_folds)
