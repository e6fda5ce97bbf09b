import json

import pytest
from hypothesis import given, settings, strategies as st

from ehrlab.ablation import (AblationPlan, AblationTrace, Candidate, CandidateResult, Step, check_field, decide,
                             load_metric_table, reference_plan, replay, run_plan, shipped_table_path, trace_cells_csv,
                             trace_delta_csv, trace_table, write_report)
from ehrlab.scenarios import background, diagnosis_plant, outcome_task, planted_cohort

TASKS = ("Pain Treatment", "Death", "Infection")


def mean3(a, b, c):
    return (a + b + c) / 3


# ---------------------------------------------------------------- decide

def test_decide_accepts_medication():
    behrt = mean3(77.01, 84.54, 73.87)
    med = mean3(77.74, 84.62, 74.37)
    assert behrt == pytest.approx(78.473, abs=5e-4)
    assert med == pytest.approx(78.910, abs=5e-4)
    assert decide(behrt, {"+Medication": med}) == "+Medication"


def test_decide_rejects_sep_removal():
    assert decide(78.967, {"-SEP": 78.793}) is None


def test_decide_tie_keeps_incumbent():
    assert decide(0.8, {"a": 0.8}) is None
    assert decide(0.5, {"a": 0.7, "b": 0.7}) == "a"


@given(st.floats(-1e3, 1e3), st.dictionaries(st.text(min_size=1, max_size=3), st.floats(-1e3, 1e3), max_size=6))
def test_decide_picks_maximum_or_incumbent(incumbent, candidates):
    got = decide(incumbent, candidates)
    if got is None:
        assert all(v <= incumbent for v in candidates.values())
    else:
        assert candidates[got] > incumbent
        assert candidates[got] == max(candidates.values())


# ---------------------------------------------------------------- plans

def test_plan_rejects_unknown_field_and_empty_tasks():
    with pytest.raises(ValueError):
        Candidate("x", {"model.nope": 1})
    with pytest.raises(ValueError):
        check_field("nowhere.layers")
    with pytest.raises(ValueError):
        AblationPlan(Candidate("b", {}), tasks=())
    with pytest.raises(ValueError):
        Step("s", ())
    with pytest.raises(ValueError):
        Step("s", (Candidate("x", {}),))


def test_reference_plan_shape():
    plan = reference_plan()
    assert plan.tasks == TASKS
    assert len(plan.steps) == 10
    masking = next(s for s in plan.steps if len(s.candidates) == 5)
    assert sorted(c.changes["pretrain.masking_ratio"] for c in masking.candidates) == [0.1, 0.2, 0.25, 0.3, 0.5]
    pooling = plan.steps[-1]
    assert {c.changes["finetune.pooling"] for c in pooling.candidates} == {
        "mean", "max", "sum", "attention-weighted", "bigru", "bilstm"}


# ---------------------------------------------------------------- replay

def table_csv(rows):
    lines = ["config,task,metric,mean,sd"]
    for config, values in rows.items():
        for t, v in zip(TASKS, values):
            lines.append(f"{config},{t},auroc,{v},0.1")
    return "\n".join(lines) + "\n"


def toy_plan():
    return AblationPlan.from_mapping({
        "baseline": {"label": "base"},
        "steps": [
            {"name": "one", "candidates": [{"label": "A", "changes": {"model.layers": 3}}]},
            {"name": "two", "candidates": [{"label": "B", "changes": {"model.heads": 2}},
                                           {"label": "C", "changes": {"model.heads": 8}}]},
        ]})


def test_replay_toy():
    table = load_metric_table(table_csv({"base": (1, 1, 1), "A": (2, 2, 2), "B": (1, 1, 1), "C": (3, 1, 2)}))
    trace = replay(toy_plan(), table)
    assert trace.accepted == ["A"]
    assert trace.rejected == ["B", "C"]
    assert trace.running_config == {"model.layers": 3}


def test_replay_missing_row():
    with pytest.raises(KeyError):
        replay(toy_plan(), load_metric_table(table_csv({"base": (1, 1, 1)})))


def test_empty_plan_has_only_baseline():
    plan = AblationPlan(Candidate("base", {}), tasks=TASKS)
    trace = replay(plan, load_metric_table(table_csv({"base": (1, 2, 3)})))
    assert trace.steps == []
    assert trace.baseline.average == 2
    assert trace_table(trace).count("\n") == 2


def test_running_config_changes_only_step_fields():
    plan = reference_plan()
    trace = replay(plan, load_metric_table(shipped_table_path()))
    previous = trace.baseline_config
    for step, record in zip(plan.steps, trace.steps):
        changed = {k for k in set(previous) | set(record.running_config)
                   if previous.get(k) != record.running_config.get(k)}
        assert changed <= step.fields
        previous = record.running_config


def test_replay_consistent_with_decide():
    trace = replay(reference_plan(), load_metric_table(shipped_table_path()))
    for record in trace.steps:
        assert record.accepted == decide(record.incumbent_average, {c.label: c.average for c in record.candidates})
        if record.accepted:
            assert max(c.average for c in record.candidates) > record.incumbent_average


def test_published_table_first_steps():
    trace = replay(reference_plan(), load_metric_table(shipped_table_path()))
    assert trace.steps[0].accepted == "+Medication"
    assert trace.steps[2].accepted is None  # -SEP
    assert trace.steps[0].incumbent_average == pytest.approx(78.473, abs=5e-4)


# ---------------------------------------------------------------- reports

def small_trace():
    table = load_metric_table(table_csv({"base": (1, 1, 1), "A": (2, 2, 2), "B": (1, 1, 1), "C": (3, 1, 2)}))
    return replay(toy_plan(), table)


def test_report_shapes(tmp_path):
    trace = small_trace()
    files = write_report(trace, tmp_path)
    cells = files["cells"].read_text().splitlines()
    assert len(cells) == 4 * len(TASKS) + 1
    assert len(files["deltas"].read_text().splitlines()) == 3 + 1
    table = files["table"].read_text().splitlines()
    assert len(table) == 5
    assert table[1].startswith("*base") and table[2].startswith("*A") and table[3].startswith(" B")


def test_one_step_trace_two_rows():
    plan = AblationPlan.from_mapping({"baseline": {"label": "base"}, "steps": [
        {"name": "one", "candidates": [{"label": "A", "changes": {"model.layers": 3}}]}]})
    trace = replay(plan, load_metric_table(table_csv({"base": (1, 1, 1), "A": (0, 0, 0)})))
    assert len(trace_table(trace).splitlines()) == 1 + 2


def test_report_rerender_identical(tmp_path):
    trace = small_trace()
    trace.save(tmp_path / "t.json")
    again = AblationTrace.load(tmp_path / "t.json")
    assert trace_table(again) == trace_table(trace)
    assert trace_cells_csv(again) == trace_cells_csv(trace)
    assert trace_delta_csv(again) == trace_delta_csv(trace)
    first = write_report(trace, tmp_path / "a")
    second = write_report(again, tmp_path / "b")
    for key in first:
        assert first[key].read_bytes() == second[key].read_bytes()


# ---------------------------------------------------------------- run_plan

@pytest.fixture(scope="module")
def population():
    return planted_cohort(background(200, seed=4), diagnosis_plant(seed=4)).population


def stub_evaluate(scores, calls):
    def evaluate(population, tasks, running, settings, repeats, label):
        calls.append((label, dict(running)))
        if scores[label] is None:
            raise RuntimeError("training diverged")
        return CandidateResult(label, {}, {t.task.name: scores[label] for t in tasks})
    return evaluate


def test_run_plan_with_stub(population, tmp_path):
    calls = []
    scores = {"base": 0.6, "A": 0.7, "B": 0.65, "C": 0.75}
    path = tmp_path / "trace.json"
    trace = run_plan(toy_plan(), population, tasks=[outcome_task()], trace_path=path,
                     evaluate=stub_evaluate(scores, calls))
    assert trace.accepted == ["A", "C"]
    assert trace.running_config == {"model.layers": 3, "model.heads": 8}
    assert calls[2] == ("B", {"model.layers": 3, "model.heads": 2})
    assert json.loads(path.read_text())["steps"][-1]["accepted"] == "C"


def test_run_plan_persists_partial_trace(population, tmp_path):
    scores = {"base": 0.6, "A": 0.7, "B": None, "C": 0.75}
    path = tmp_path / "trace.json"
    with pytest.raises(RuntimeError):
        run_plan(toy_plan(), population, tasks=[outcome_task()], trace_path=path, evaluate=stub_evaluate(scores, []))
    partial = AblationTrace.load(path)
    assert [s.step for s in partial.steps] == ["one"]
    assert partial.accepted == ["A"]


def test_run_plan_empty(population):
    trace = run_plan(AblationPlan(Candidate("base", {}), tasks=("x",)), population,
                     tasks=[outcome_task()], evaluate=stub_evaluate({"base": 0.5}, []))
    assert trace.steps == [] and trace.baseline.per_task == {outcome_task().name: 0.5}
