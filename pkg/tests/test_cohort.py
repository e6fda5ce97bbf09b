import datetime as dt

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ehrlab.cohort import (
    LabeledExample,
    OutOfTimeBoundaries,
    TaskDefinition,
    assign_negative_censoring,
    censor_sequences,
    class_sampling_weights,
    condition_table,
    condition_task,
    example_sampling_probabilities,
    expand_rule,
    kfold_split,
    label_patients,
    load_task,
    match_phenotype,
    parse_duration,
    shipped_task,
    split_out_of_time,
)
from ehrlab.records import Event, PatientRecord


def patient(pid, events, birth=dt.date(1960, 1, 1), sex="female", death=None):
    return PatientRecord(pid, birth, sex, death, [Event(c, t, f"{pid}-{k}") for k, (c, t) in enumerate(events)])


def task(include=("DZ99",), exclude=(), window="30d", **kw):
    return TaskDefinition.from_mapping({"name": "t", "include": list(include), "exclude": list(exclude),
                                        "window": window, **kw})


# ---------------------------------------------------------------- rules

def test_durations_are_fixed_lengths():
    assert parse_duration("1mo") == dt.timedelta(days=30)
    assert parse_duration("1yr") == dt.timedelta(days=365)
    assert parse_duration("24h") == dt.timedelta(days=1)
    assert parse_duration("7d") == dt.timedelta(days=7)
    with pytest.raises(ValueError):
        parse_duration("soon")


def test_range_expansion():
    assert expand_rule("DG00-DG07") == [f"DG0{i}" for i in range(8)]
    assert expand_rule("DB4-DB7") == ["DB4", "DB5", "DB6", "DB7"]
    assert expand_rule("DN109A-DN109C") == ["DN109A", "DN109B", "DN109C"]
    assert expand_rule("DI400-DI412") == [f"DI4{i:02d}" for i in range(13)]
    assert expand_rule("DC50") == ["DC50"]


def test_breast_cancer_prefix_match():
    assert match_phenotype(Event("DC509", None, None), condition_task("Breast Cancer"))


def test_breast_cancer_text_match():
    assert match_phenotype("brystkræft", condition_task("Breast Cancer"))


def test_infection_exclude_list():
    infection = condition_task("Infection")
    assert match_phenotype("DB99", infection)
    assert not match_phenotype("DB371", infection)
    # DB4-DB7 range is excluded
    assert not match_phenotype("DB50", infection)
    assert match_phenotype("infektion i huden", infection)


def test_unspecified_cancer_excluded_from_cancers():
    lung = condition_task("Lung Cancer")
    assert match_phenotype("kræft i lunge", lung)
    assert not match_phenotype("kræft i lunge, kræftsygdom uns med metastaser", lung)


def test_every_windowed_condition_loads():
    table = condition_table()
    for name, spec in table.items():
        if spec.get("window"):
            assert condition_task(name).include
        else:
            with pytest.raises(ValueError, match="window"):
                condition_task(name)


def test_optimization_tasks():
    assert condition_task("Death").age_min == 60
    assert condition_task("Death").window == dt.timedelta(days=365)
    assert condition_task("Pain Treatment").window == dt.timedelta(days=30)
    assert condition_task("Infection").window == dt.timedelta(days=7)
    assert shipped_task("synthetic_outcome").include.prefixes == ("DZ99",)


def test_task_file_round_trip(tmp_path):
    path = tmp_path / "task.yaml"
    path.write_text("name: x\ninclude: [DC50, brystkræft]\nexclude: [DC509]\nwindow: 3mo\nage_min: 40\nsex: female\n",
                    encoding="utf-8")
    t = load_task(path)
    assert t.window == dt.timedelta(days=90) and t.sex == "female" and t.age_min == 40
    assert not match_phenotype("DC509", t) and match_phenotype("DC501", t)


@pytest.mark.parametrize("bad", [{"include": []}, {"window": "0d"}, {"sex": "other"}, {"colour": "red"}])
def test_invalid_task_rejected(bad):
    with pytest.raises(ValueError):
        task(**bad)


# ---------------------------------------------------------------- labelling and censoring

T = dt.datetime(2020, 6, 1)


def test_no_match_is_negative():
    pop = [patient("A", [("DA10", T - dt.timedelta(days=90)), ("DZ99", T)]),
           patient("B", [("DA10", T - dt.timedelta(days=400))])]
    ex = {e.patient_id: e for e in label_patients(pop, task())}
    assert ex["B"].label == 0 and ex["A"].label == 1


def test_examples_without_visible_history_dropped():
    pop = [patient("A", [("DA10", T - dt.timedelta(days=90)), ("DZ99", T)]), patient("C", [("DZ99", T)])]
    assert [e.patient_id for e in label_patients(pop, task())] == ["A"]


def test_index_is_earliest_match():
    p = patient("A", [("DA10", T - dt.timedelta(days=90)), ("DZ99", T), ("DZ991", T + dt.timedelta(days=3))])
    (ex,) = label_patients([p], task())
    assert ex.index == T and ex.censor + dt.timedelta(days=30) == ex.index


def test_age_filter_at_censoring():
    young = patient("Y", [("DA10", T - dt.timedelta(days=500)), ("DZ99", T)], birth=dt.date(1965, 1, 1))
    old = patient("O", [("DA10", T - dt.timedelta(days=500)), ("DZ99", T)], birth=dt.date(1950, 1, 1))
    ids = {e.patient_id for e in label_patients([young, old], task(age_min=60))}
    assert ids == {"O"}


def test_sex_filter():
    pop = [patient("M", [("DA1", T), ("DZ99", T + dt.timedelta(days=60))], sex="male"),
           patient("F", [("DA1", T), ("DZ99", T + dt.timedelta(days=60))])]
    assert [e.patient_id for e in label_patients(pop, task(sex="male"))] == ["M"]


def test_death_task_uses_deathdate():
    p = patient("D", [("DA10", T - dt.timedelta(days=800))], birth=dt.date(1940, 1, 1), death=dt.date(2021, 1, 1))
    (ex,) = label_patients([p], condition_task("Death"))
    assert ex.label == 1 and ex.index == dt.datetime(2021, 1, 1)


def test_event_level_vs_patient_level_exclusion():
    p = patient("A", [("DA10", T - dt.timedelta(days=200)), ("DX1", T), ("DZ99", T + dt.timedelta(days=90))])
    other = patient("B", [("DA10", T - dt.timedelta(days=200)), ("DZ99", T)])
    event_level = task(exclude=["DX"])
    patient_level = task(exclude=["DX"], exclude_patients=True)
    assert {e.patient_id for e in label_patients([p, other], event_level)} == {"A", "B"}
    assert {e.patient_id for e in label_patients([p, other], patient_level)} == {"B"}


def test_censoring_removes_window_and_boundary():
    p = patient("A", [("DA10", dt.datetime(2021, 4, 1)), ("DB10", dt.datetime(2021, 5, 15)),
                      ("DZ99", dt.datetime(2021, 6, 1))])
    censor = dt.datetime(2021, 6, 1) - parse_duration("1mo")
    kept = censor_sequences(p, censor)
    assert [e.concept for e in kept.events] == ["DA10"]
    at = censor_sequences(p, dt.datetime(2021, 5, 15))
    assert [e.concept for e in at.events] == ["DA10"]


def test_tiny_window_hides_only_index_event():
    p = patient("A", [("DA10", T - dt.timedelta(hours=1)), ("DZ99", T)])
    kept = censor_sequences(p, T - parse_duration("0.0001d"))
    assert [e.concept for e in kept.events] == ["DA10"]


def test_no_leakage_after_censoring():
    rng = np.random.default_rng(0)
    pop = []
    for i in range(300):
        events = [(f"DA{rng.integers(10, 99)}", T + dt.timedelta(days=int(d))) for d in rng.integers(-900, 900, 8)]
        if rng.random() < 0.4:
            events.append(("DZ99", T + dt.timedelta(days=int(rng.integers(-300, 900)))))
        events.sort(key=lambda e: e[1])
        pop.append(patient(f"P{i}", events))
    t = task()
    by_id = {p.patient_id: p for p in pop}
    examples = label_patients(pop, t)
    assert any(e.label for e in examples) and not all(e.label for e in examples)
    for ex in examples:
        visible = censor_sequences(by_id[ex.patient_id], ex.censor).events
        assert visible and not any(match_phenotype(e, t) for e in visible)
        if ex.label:
            assert ex.censor + t.window == ex.index


# ---------------------------------------------------------------- negative censoring

def _pos(instants):
    return [LabeledExample(f"p{i}", 1, t, t) for i, t in enumerate(instants)]


def _neg(n):
    return [LabeledExample(f"n{i}", 0, None) for i in range(n)]


def test_single_positive_fixes_every_negative():
    out = assign_negative_censoring(_pos([T]), _neg(20), seed=1)
    assert {n.censor for n in out} == {T}


def test_negative_support_subset_and_deterministic():
    instants = [T + dt.timedelta(hours=int(h)) for h in np.random.default_rng(0).integers(0, 10_000, 50)]
    a = assign_negative_censoring(_pos(instants), _neg(500), seed=3)
    b = assign_negative_censoring(_pos(instants), _neg(500), seed=3)
    assert a == b
    assert {n.censor for n in a} <= set(instants)


def test_zero_positives_is_error():
    with pytest.raises(ValueError):
        assign_negative_censoring([], _neg(3))


def _ks_direct(a, b):
    a = np.sort(a)
    b = np.sort(b)
    grid = np.concatenate([a, b])
    fa = np.searchsorted(a, grid, side="right") / len(a)
    fb = np.searchsorted(b, grid, side="right") / len(b)
    return np.abs(fa - fb).max()


def test_ks_between_positive_and_negative_censoring():
    rng = np.random.default_rng(4)
    hours = rng.gamma(2.0, 3000.0, size=10_000)
    instants = [T + dt.timedelta(hours=float(h)) for h in hours]
    negs = assign_negative_censoring(_pos(instants), _neg(10_000), seed=5)
    to_h = lambda ts: np.array([(t - T).total_seconds() / 3600 for t in ts])
    d = _ks_direct(to_h(instants), to_h([n.censor for n in negs]))
    from scipy.stats import ks_2samp

    assert d == pytest.approx(ks_2samp(to_h(instants), to_h([n.censor for n in negs])).statistic, abs=1e-12)
    assert d < 0.05


# ---------------------------------------------------------------- weights and folds

def test_balanced_labels_equal_weights():
    w = class_sampling_weights([0, 1, 0, 1])
    assert w[0] == w[1]


def test_weights_depend_only_on_prevalence():
    assert class_sampling_weights([1] + [0] * 3) == class_sampling_weights([1] * 10 + [0] * 30)


def test_single_class_is_error():
    with pytest.raises(ValueError):
        class_sampling_weights([1, 1, 1])


def test_sampled_positive_fraction_at_25_percent():
    labels = np.array([1] * 250 + [0] * 750)
    expected = 0.25 * 2 / (0.25 * 2 + 0.75 / np.sqrt(0.75))
    assert expected == pytest.approx(0.366, abs=5e-4)
    probs = example_sampling_probabilities(labels)
    draws = np.random.default_rng(0).choice(len(labels), size=1_000_000, p=probs)
    assert abs(labels[draws].mean() - expected) < 0.005


def _examples(n_pos, n_neg):
    return [LabeledExample(f"x{i}", int(i < n_pos), T) for i in range(n_pos + n_neg)]


def test_ten_examples_five_folds_of_two():
    folds = kfold_split(_examples(5, 5), 5)
    assert [len(f) for f in folds] == [2] * 5


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 8), st.integers(0, 60), st.integers(0, 60), st.integers(0, 10_000))
def test_fold_properties(k, extra_pos, n_neg, seed):
    n_pos = k + extra_pos
    examples = _examples(n_pos, n_neg)
    folds = kfold_split(examples, k, seed)
    flat = [e.patient_id for f in folds for e in f]
    assert sorted(flat) == sorted(e.patient_id for e in examples) and len(set(flat)) == len(flat)
    sizes = [len(f) for f in folds]
    assert max(sizes) - min(sizes) <= 1
    for f in folds:
        assert abs(sum(e.label for e in f) - n_pos / k) <= 1
    assert kfold_split(examples, k, seed) == folds


def test_too_few_positives_for_folds():
    with pytest.raises(ValueError):
        kfold_split(_examples(3, 20), 5)


# ---------------------------------------------------------------- out-of-time

B = OutOfTimeBoundaries()


def _outcome_patient(pid, when):
    events = [("DA10", dt.datetime(2017, 1, 1)), ("DA11", dt.datetime(2019, 3, 1))]
    if when is not None:
        events.append(("DZ99", when))
    return patient(pid, events)


def _membership(when):
    pop = [_outcome_patient("X", when),
           _outcome_patient("tr", dt.datetime(2019, 8, 1)),
           _outcome_patient("va", dt.datetime(2020, 9, 1)),
           _outcome_patient("te", dt.datetime(2022, 3, 1)),
           _outcome_patient("neg", None)]
    split = split_out_of_time(pop, task())
    return {name: {e.patient_id: e.label for e in part}.get("X") for name, part in split.items()}


def test_outcome_mid_2020_excluded_from_test_only():
    assert _membership(dt.datetime(2020, 5, 15)) == {"train": 0, "validation": 1, "test": None}


def test_outcome_2019_is_train_positive_only():
    assert _membership(dt.datetime(2019, 6, 15)) == {"train": 1, "validation": None, "test": None}


def test_outcome_late_2021_is_test_positive():
    assert _membership(dt.datetime(2021, 10, 1)) == {"train": 0, "validation": 0, "test": 1}


def test_train_examples_see_only_pre_boundary_data():
    pop = [_outcome_patient("tr", dt.datetime(2019, 8, 1)), _outcome_patient("n", None),
           _outcome_patient("va", dt.datetime(2020, 9, 1)), _outcome_patient("te", dt.datetime(2022, 3, 1))]
    for ex in split_out_of_time(pop, task())["train"]:
        assert ex.censor < B.train_end


def test_empty_partition_is_named():
    pop = [_outcome_patient("tr", dt.datetime(2019, 8, 1)), _outcome_patient("n", None)]
    with pytest.raises(ValueError, match="validation"):
        split_out_of_time(pop, task())
