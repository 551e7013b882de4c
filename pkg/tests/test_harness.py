from __future__ import annotations

import json

import pytest

from conftest import cached_suite, write_eval_fixture
from lcagent.backend import ScriptedBackend
from lcagent.cases import TaskId
from lcagent.harness import (
    CaseScore,
    InputModeError,
    RunConfig,
    aggregate,
    check_input_mode,
    eval_config_from_dict,
    load_eval_config,
    run_grid,
    run_task,
    score_outputs,
    select_cases,
)
from lcagent.judge import OfflineJudge
from lcagent.pipeline import PipelineOptions
from lcagent.report import MISSING, MetricRow, build_report, rerender, write_outputs
from lcagent.synthetic import oracle_script


def _cases(n=8, language="EN"):
    return list(cached_suite(n, 21, language, 0.5, 0.2))


def test_exhausted_script_marks_only_that_case():
    cases = _cases()
    dropped = cases[3].id
    rules = [r for r in oracle_script(cases) if dropped not in r.match.replace("\\", "")]
    cfg = RunConfig(TaskId.TnmStaging, "DirectPrompt", ScriptedBackend(rules), judge=OfflineJudge())
    outputs = run_task(cases, cfg)
    assert [o.case_id for o in outputs] == [c.id for c in cases]
    assert [o.ok for o in outputs].count(False) == 1
    assert not outputs[3].ok and "ScriptExhausted" in outputs[3].error
    scores = score_outputs(outputs, cases, cfg)
    assert scores[3].exact is False and scores[3].rq is None
    assert all(s.rq is not None for i, s in enumerate(scores) if i != 3)


@pytest.mark.parametrize("task", list(TaskId))
def test_direct_prompt_issues_one_request(task):
    cases = _cases(6, "ZH")
    cfg = RunConfig(task, "DirectPrompt", ScriptedBackend(oracle_script(cases)), language="ZH", workers=3)
    for output in run_task(cases, cfg):
        assert output.ok, output.error
        assert len(output.transcript) == 1


def test_lcagent_transcript_order_is_stable():
    cases = _cases(6)
    opts = PipelineOptions(normalizer="backend", stager="agent", profiler="backend")
    cfg = RunConfig(TaskId.EndToEnd, "LCAgent", ScriptedBackend(oracle_script(cases)), pipeline=opts)
    for output in run_task(cases, cfg):
        assert output.ok, output.error
        tags = [ex.request.tag for ex in output.transcript]
        assert tags == ["extract", "t-stage", "n-stage", "m-stage", "profile", "expert"]


def test_aggregate_is_mean_of_case_scores():
    cases = _cases(10)
    for task in TaskId:
        cfg = RunConfig(task, "DirectPrompt", ScriptedBackend(oracle_script(cases)), judge=OfflineJudge(), workers=2)
        scores = score_outputs(run_task(cases, cfg), cases, cfg)
        agg = aggregate(scores, task)
        if task is TaskId.TnmStaging:
            assert agg["acc"] == pytest.approx(100.0 * sum(s.exact for s in scores) / len(scores), abs=1e-9)
            assert agg["rq"] == pytest.approx(sum(s.rq for s in scores) / len(scores), abs=1e-9)
        else:
            assert agg["precision"] == pytest.approx(sum(s.precision for s in scores) / len(scores), abs=1e-9)
            assert agg["f1"] == pytest.approx(sum(s.f1 for s in scores) / len(scores), abs=1e-9)


def test_aggregate_drops_unscored_values():
    scores = [CaseScore("a", precision=50.0, f1=None), CaseScore("b", precision=100.0, f1=40.0), CaseScore("c", error="x")]
    agg = aggregate(scores, TaskId.EndToEnd)
    assert agg["precision"] == 75.0 and agg["f1"] == 40.0
    assert agg["n_errors"] == 1 and agg["n_cases"] == 3


def test_image_direct_needs_images():
    case = _cases(1)[0]
    with pytest.raises(InputModeError):
        check_input_mode(case, "ImageDirect")
    cfg = RunConfig(TaskId.TnmStaging, "DirectPrompt", ScriptedBackend(oracle_script([case])), input_mode="ImageDirect")
    (output,) = run_task([case], cfg)
    assert output.error.startswith("InputModeError")


def test_run_config_validation():
    backend = OfflineJudge()
    with pytest.raises(ValueError):
        RunConfig(TaskId.TnmStaging, "Ensemble", backend)
    with pytest.raises(ValueError):
        RunConfig(TaskId.TnmStaging, "LCAgent", backend, input_mode="Audio")
    with pytest.raises(ValueError):
        RunConfig(TaskId.TnmStaging, "LCAgent", backend, workers=0)


def test_select_cases_is_seeded():
    cases = _cases(12) + _cases(5, "ZH")
    assert len(select_cases(cases, "ZH", 0, None)) == 5
    a = select_cases(cases, "EN", 3, 4)
    assert a == select_cases(cases, "EN", 3, 4) and len(a) == 4


def test_eval_config_rejects_unknown_keys(tmp_path):
    with pytest.raises(ValueError):
        eval_config_from_dict({"cases": "x", "models": [], "colour": "red"}, tmp_path)
    with pytest.raises(ValueError):
        eval_config_from_dict({"models": []}, tmp_path)


def test_eval_config_generates_cases_inline(tmp_path):
    cfg = eval_config_from_dict({"cases": {"n": 4, "seed": 2}, "models": [{"name": "j", "backend": {"kind": "offline-judge"}}]}, tmp_path)
    assert len(cfg.cases) == 4 and cfg.models[0][0] == "j"


# -- report ---------------------------------------------------------------------------


def test_build_report_fills_missing_cells():
    rows = [
        MetricRow("m1", "DirectPrompt", "TnmStaging", "ZH", "TextOnly", {"acc": 50.0, "rq": None}),
        MetricRow("m1", "LCAgent", "TnmStaging", "ZH", "TextOnly", {"acc": 90.0, "rq": 80.0}),
    ]
    markdown, table = build_report(rows, ["m1"])
    assert "| m1 + LCAgent | 90.00 | -- | 80.00 |" in markdown
    assert "OCR + LLM (Text Input)" in markdown and "MLLM (Image Input)" not in markdown
    lines = table.splitlines()
    assert lines[1].split(",")[1] == "m1"
    assert lines[2].split(",")[1:4] == ["m1 + LCAgent", "90.00", MISSING]


def test_grid_outputs_and_rerender(tmp_path):
    cfg = load_eval_config(write_eval_fixture(tmp_path, n=6, language="EN"))
    assert cfg.out == str(tmp_path / "out")
    grid = run_grid(cfg)
    assert len(grid.cells) == 6
    out = write_outputs(cfg.out, grid)
    names = {p.name for p in out.iterdir()}
    assert {"report.md", "report.csv", "cases.jsonl", "run.json", "transcripts"} <= names
    assert any(n.startswith("winrate_") for n in names)
    transcripts = list((out / "transcripts").rglob("*.jsonl"))
    assert len(transcripts) == 6 * 6
    records = [json.loads(line) for line in (out / "cases.jsonl").read_text(encoding="utf-8").splitlines()]
    assert len(records) == 36 and all(r["error"] is None for r in records)
    run = json.loads((out / "run.json").read_text(encoding="utf-8"))
    # task 2 is handed the gold staging on purpose; task 3 must never see it
    for key, count in run["leaks"].items():
        assert count == (6 if "/TreatmentRecommendation/" in key else 0), key

    before = (out / "report.md").read_text(encoding="utf-8"), (out / "report.csv").read_text(encoding="utf-8")
    (out / "report.md").unlink()
    rerender(out)
    after = (out / "report.md").read_text(encoding="utf-8"), (out / "report.csv").read_text(encoding="utf-8")
    assert after == before
