import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad
from scipy.special import gammaln

from ehrlab.cohort import LabeledExample
from ehrlab.evaluation import (
    MetricsReport,
    adjust_comparisons,
    auprc,
    auroc,
    benjamini_hochberg,
    cross_validate,
    format_table,
    leave_two_out,
    leave_two_out_pairs,
    one_sided_t_pvalue,
    reports_from_csv,
    reports_to_csv,
    stars,
    summarize_leave_two_out,
    welch_df,
)


# ---------------------------------------------------------------- oracles

def pairwise_auroc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    credit = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return credit / (len(pos) * len(neg))


def t_upper_tail(t_stat, df):
    """Upper tail of Student's t by quadrature of the density."""
    log_c = gammaln((df + 1) / 2) - gammaln(df / 2) - 0.5 * math.log(df * math.pi)
    dens = lambda x: math.exp(log_c - (df + 1) / 2 * math.log1p(x * x / df))
    if t_stat >= 0:
        return quad(dens, t_stat, math.inf)[0]
    return 1.0 - quad(dens, -t_stat, math.inf)[0]


def bh_oracle(p):
    m = len(p)
    adjusted = []
    ranked = sorted(range(m), key=lambda i: p[i])
    rank_of = {i: r + 1 for r, i in enumerate(ranked)}
    for i in range(m):
        adjusted.append(min(min(m * p[j] / rank_of[j] for j in range(m) if rank_of[j] >= rank_of[i]), 1.0))
    return adjusted


def examples(n_pos, n_neg):
    out = [LabeledExample(f"p{i}", 1, None, None) for i in range(n_pos)]
    out += [LabeledExample(f"n{i}", 0, None, None) for i in range(n_neg)]
    return out


# ---------------------------------------------------------------- auroc

def test_auroc_examples():
    assert auroc([0.9, 0.8, 0.1, 0.2], [1, 1, 0, 0]) == 1.0
    assert auroc([0.9, 0.2, 0.8, 0.1], [1, 0, 0, 1]) == 0.5
    assert auroc([0.5, 0.5], [1, 0]) == 0.5


def test_auroc_single_class_raises():
    with pytest.raises(ValueError):
        auroc([0.1, 0.2], [1, 1])


def test_auroc_rejects_bad_labels():
    with pytest.raises(ValueError):
        auroc([0.1, 0.2], [1, 2])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 6), st.integers(0, 1)), min_size=2, max_size=200))
def test_auroc_matches_pairwise_oracle(data):
    scores = [s / 4 for s, _ in data]  # coarse grid forces ties
    labels = [y for _, y in data]
    if len(set(labels)) < 2:
        return
    assert auroc(scores, labels) == pytest.approx(pairwise_auroc(scores, labels), abs=1e-12)


def test_auroc_complement_without_ties():
    rng = np.random.default_rng(0)
    s = rng.normal(size=60)
    y = rng.integers(0, 2, 60)
    assert auroc(s, y) + auroc(-s, y) == pytest.approx(1.0, abs=1e-12)


def test_metrics_invariant_under_monotone_transform():
    rng = np.random.default_rng(1)
    s = rng.normal(size=80)
    y = rng.integers(0, 2, 80)
    assert auroc(np.exp(s), y) == pytest.approx(auroc(s, y), abs=1e-12)
    assert auprc(3 * s + 1, y) == pytest.approx(auprc(s, y), abs=1e-12)


# ---------------------------------------------------------------- auprc

def test_auprc_examples():
    assert auprc([0.9, 0.1], [0, 1]) == 0.5
    assert auprc([0.9, 0.8, 0.3, 0.2], [1, 1, 0, 0]) == 1.0
    with pytest.raises(ValueError):
        auprc([0.1, 0.2], [0, 0])


def test_auprc_hand_computed():
    # ranks: 1(+) 2(-) 3(+) -> (1 + 2/3) / 2
    assert auprc([0.9, 0.5, 0.3], [1, 0, 1]) == pytest.approx((1 + 2 / 3) / 2, abs=1e-15)


def test_auprc_tie_group():
    # tied pair holds one positive; the group is one threshold at precision 1/2
    assert auprc([0.5, 0.5], [1, 0]) == 0.5
    assert auprc([0.5, 0.5], [0, 1]) == 0.5


def test_auprc_matches_sklearn():
    from sklearn.metrics import average_precision_score

    rng = np.random.default_rng(2)
    for _ in range(50):
        s = rng.integers(0, 8, 40) / 8.0
        y = rng.integers(0, 2, 40)
        if y.sum() == 0:
            continue
        assert auprc(s, y) == pytest.approx(average_precision_score(y, s), abs=1e-12)


def test_auprc_random_scores_approach_prevalence():
    rng = np.random.default_rng(3)
    n, p = 4000, 0.2
    y = (rng.random(n) < p).astype(int)
    values = [auprc(rng.random(n), y) for _ in range(200)]
    sigma = np.std(values)
    assert abs(np.mean(values) - y.mean()) < 3 * sigma


# ---------------------------------------------------------------- t-test

def test_t_worked_example():
    p = one_sided_t_pvalue(0.80, 0.01, 5, 0.78, 0.01, 5)
    t_stat = 0.02 / math.sqrt(2 * 0.01 ** 2 / 5)
    assert t_stat == pytest.approx(3.162, abs=5e-4)
    assert welch_df(0.01, 5, 0.01, 5) == pytest.approx(8.0)
    assert p == pytest.approx(t_upper_tail(t_stat, 8.0), abs=1e-6)
    # the quoted 0.00669 is approximate; the exact tail is 0.0066745
    assert p == pytest.approx(0.00669, rel=5e-3)


def test_t_symmetry_and_swap():
    assert one_sided_t_pvalue(0.7, 0.02, 5, 0.7, 0.02, 5) == pytest.approx(0.5)
    p = one_sided_t_pvalue(0.81, 0.01, 5, 0.79, 0.03, 5)
    q = one_sided_t_pvalue(0.79, 0.03, 5, 0.81, 0.01, 5)
    assert p + q == pytest.approx(1.0, abs=1e-12)


def test_t_unequal_variances_match_quadrature():
    a, sa, na, b, sb, nb = 0.82, 0.015, 5, 0.80, 0.004, 7
    se = math.sqrt(sa ** 2 / na + sb ** 2 / nb)
    df = welch_df(sa, na, sb, nb)
    assert one_sided_t_pvalue(a, sa, na, b, sb, nb) == pytest.approx(t_upper_tail((a - b) / se, df), abs=1e-8)


def test_t_zero_sd_conventions():
    assert one_sided_t_pvalue(0.8, 0, 5, 0.8, 0, 5) == 0.5
    assert one_sided_t_pvalue(0.9, 0, 5, 0.8, 0, 5) == 0.0
    assert one_sided_t_pvalue(0.7, 0, 5, 0.8, 0, 5) == 1.0
    # one zero sd still gives a finite test
    assert 0 < one_sided_t_pvalue(0.81, 0.0, 5, 0.80, 0.01, 5) < 0.5


def test_t_validation():
    with pytest.raises(ValueError):
        one_sided_t_pvalue(0.8, 0.01, 1, 0.7, 0.01, 5)
    with pytest.raises(ValueError):
        one_sided_t_pvalue(0.8, -0.01, 5, 0.7, 0.01, 5)


# ---------------------------------------------------------------- BH

def test_bh_example():
    reject, adjusted = benjamini_hochberg([0.01, 0.04, 0.03, 0.20], 0.05)
    assert reject.tolist() == [True, False, False, False]
    assert adjusted == pytest.approx([0.04, 0.16 / 3, 0.16 / 3, 0.20])


def test_bh_edge_cases():
    reject, adjusted = benjamini_hochberg([0.0, 0.0, 0.0])
    assert reject.all() and (adjusted == 0).all()
    _, adjusted = benjamini_hochberg([0.3])
    assert adjusted.tolist() == [0.3]
    with pytest.raises(ValueError):
        benjamini_hochberg([1.2])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=30))
def test_bh_matches_oracles(p):
    from statsmodels.stats.multitest import multipletests

    reject, adjusted = benjamini_hochberg(p, 0.05)
    assert adjusted == pytest.approx(bh_oracle(p), abs=1e-12)
    sm_reject, sm_adjusted, _, _ = multipletests(p, alpha=0.05, method="fdr_bh")
    assert adjusted == pytest.approx(sm_adjusted, abs=1e-12)
    assert reject.tolist() == sm_reject.tolist()
    order = np.argsort(p, kind="stable")
    assert np.all(np.diff(adjusted[order]) >= -1e-15)


def test_stars_thresholds():
    assert [stars(p) for p in (0.2, 0.05, 0.049, 0.01, 0.009, 0.001, 0.0009)] == \
        ["", "", "*", "*", "**", "**", "***"]


# ---------------------------------------------------------------- reports

def test_report_statistics():
    r = MetricsReport("death", [0.8, 0.82, 0.81], [0.3, 0.31, 0.32])
    assert r.n_folds == 3
    assert r.auroc_mean == pytest.approx(0.81)
    assert r.auroc_sd == pytest.approx(0.01)
    assert MetricsReport("x", [0.8], [0.1]).auroc_sd != MetricsReport("x", [0.8], [0.1]).auroc_sd  # nan


def test_report_csv_round_trip_and_table():
    a = MetricsReport("death", [0.80, 0.81, 0.79, 0.80, 0.80], [0.3] * 5, model="BEHRT")
    b = MetricsReport("death", [0.84, 0.85, 0.83, 0.84, 0.84], [0.35] * 5, model="Ours")
    b.compare(a)
    adjust_comparisons([a, b])
    text = reports_to_csv([a, b])
    assert text.count("\n") == 1 + 10
    back = reports_from_csv(text)
    assert back[1].fold_auroc == b.fold_auroc
    table = format_table([a, b])
    lines = table.splitlines()
    assert len(lines) == 3
    assert lines[0].split() == ["Model", "death"]
    assert "84.00±0.71***" in lines[2]
    assert format_table([a, b]) == table


# ---------------------------------------------------------------- protocols

def constant_trainer(train, validation, seed):
    return lambda exs: np.zeros(len(exs))


def oracle_trainer(train, validation, seed):
    return lambda exs: np.array([ex.label for ex in exs], dtype=float)


def test_cross_validate_constant_model():
    pool, test = examples(20, 30), examples(10, 10)
    r = cross_validate(pool, 5, constant_trainer, test, seed=0, task="t")
    assert r.fold_auroc == [0.5] * 5
    assert r.auroc_sd == 0.0
    assert r.auroc_mean == pytest.approx(np.mean(r.fold_auroc), abs=1e-12)


def test_cross_validate_fold_roles():
    pool, test = examples(20, 30), examples(10, 10)
    seen = []

    def trainer(train, validation, seed):
        seen.append((len(train), len(validation), {ex.patient_id for ex in train} & {ex.patient_id for ex in validation}))
        return oracle_trainer(train, validation, seed)

    r = cross_validate(pool, 5, trainer, test)
    assert r.fold_auroc == [1.0] * 5
    assert [(t, v) for t, v, _ in seen] == [(40, 10)] * 5
    assert all(not overlap for _, _, overlap in seen)


def test_leave_two_out_pairs():
    pairs = leave_two_out_pairs(5)
    assert len(pairs) == len(set(pairs)) == 10
    for i in range(5):
        assert sorted(v for t, v in pairs if t == i) == sorted({(i + 1) % 5, (i + 2) % 5})


def test_leave_two_out_identical_models():
    report = leave_two_out(examples(25, 25), oracle_trainer)
    assert len(report.runs) == 10
    assert len(report.within) == 5 and len(report.across) == 10
    assert report.within == [0.0] * 5


def test_leave_two_out_statistics_by_hand():
    runs = {pair: 0.0 for pair in leave_two_out_pairs(5)}
    values = {0: (0.80, 0.82), 1: (0.78, 0.78), 2: (0.85, 0.81), 3: (0.79, 0.80), 4: (0.76, 0.80)}
    for (t, v) in runs:
        first = v == (t + 1) % 5
        runs[(t, v)] = values[t][0 if first else 1]
    r = summarize_leave_two_out(runs)
    assert r.within_mean == pytest.approx((0.02 + 0 + 0.04 + 0.01 + 0.04) / 5)
    means = [0.81, 0.78, 0.83, 0.795, 0.78]
    expected = np.mean([abs(a - b) for a, b in itertools.combinations(means, 2)])
    assert r.across_mean == pytest.approx(expected)
