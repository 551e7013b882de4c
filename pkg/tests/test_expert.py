from __future__ import annotations

import json
from importlib import resources

import pytest

from lcagent.backend import RecordingBackend, ScriptedBackend, ScriptRule
from lcagent.categories import OverallStage
from lcagent.expert import (
    FIRST_LINE_ONLY,
    BadPredicate,
    ConstraintViolation,
    ExpertParseError,
    GuidelineError,
    MissingScenarioFile,
    default_guidelines,
    load_guidelines,
    localized_drug,
    normalize_drug,
    recommend,
)
from lcagent.routing import (
    Burden,
    DriverGene,
    DriverStatus,
    PdL1,
    Resection,
    ScenarioId,
    check_missing_critical,
    iter_profile_grid,
    route_scenario,
)
from test_routing import profile

S = OverallStage


def _reply(drugs, **extra):
    body = {"strategy": "plan", "core_regimen": drugs, "key_considerations": "monitor", "reasoning": "grounded", **extra}
    return "```json\n" + json.dumps(body, ensure_ascii=False) + "\n```"


def _guideline_dir(tmp_path):
    src = resources.files("lcagent.data").joinpath("guidelines")
    dst = tmp_path / "g"
    dst.mkdir()
    for scenario in ScenarioId:
        (dst / f"{scenario.value}.json").write_text(src.joinpath(f"{scenario.value}.json").read_text(encoding="utf-8"), encoding="utf-8")
    return dst


def test_complete_directory_loads(tmp_path):
    store = load_guidelines(_guideline_dir(tmp_path))
    assert len(store) == 8
    assert store[ScenarioId.MdtReferral].allowed_regimens == ()


def test_missing_scenario_file(tmp_path):
    d = _guideline_dir(tmp_path)
    (d / "Oligometastatic.json").unlink()
    with pytest.raises(MissingScenarioFile):
        load_guidelines(d)


def test_bad_predicate_field(tmp_path):
    d = _guideline_dir(tmp_path)
    path = d / "AdvDriverNegLaterLine.json"
    data = json.loads(path.read_text(encoding="utf-8"))
    data["regimens"][0]["eligibility"] = "smoking == 'yes'"
    path.write_text(json.dumps(data), encoding="utf-8")
    with pytest.raises(BadPredicate):
        load_guidelines(d)


def test_subset_must_list_regimens(tmp_path):
    d = _guideline_dir(tmp_path)
    path = d / "PostopEarlyStage.json"
    data = json.loads(path.read_text(encoding="utf-8"))
    data["regimens"] = []
    path.write_text(json.dumps(data), encoding="utf-8")
    with pytest.raises(GuidelineError):
        load_guidelines(d)


def test_drug_names():
    assert normalize_drug("  Tagrisso ") == "osimertinib"
    assert normalize_drug("甲磺酸奥希替尼") == "osimertinib"
    assert normalize_drug("Mystery-mab") == "mystery-mab"
    assert localized_drug("osimertinib", "ZH") == "奥希替尼"
    assert localized_drug("osimertinib", "EN") == "osimertinib"


def _egfr():
    return profile(stage=S.IVB, driver_status=DriverStatus.Positive, driver_gene=DriverGene.EGFR, metastatic_burden=Burden.Wide)


def test_egfr_regimen_accepted_with_alias():
    p = _egfr()
    scenario = route_scenario(p)
    assert scenario is ScenarioId.AdvDriverPosFirstLine
    rec = recommend(p, scenario, None, ScriptedBackend([ScriptRule("expert", "*", _reply(["奥希替尼"], cited_blocks=[0, 42]))]), language="ZH")
    assert rec.core_regimen == ("奥希替尼",)
    assert rec.attempts == 1
    assert rec.cited_blocks == (0,)


def test_out_of_subset_drug_rejected_twice():
    backend = ScriptedBackend([ScriptRule("expert", "*", _reply(["alectinib"]), repeat=True)])
    with pytest.raises(ConstraintViolation) as info:
        recommend(_egfr(), ScenarioId.AdvDriverPosFirstLine, None, backend)
    assert info.value.drug == "alectinib"
    assert len(backend.transcript) == 2


def test_unparseable_expert_reply():
    with pytest.raises(ExpertParseError):
        recommend(_egfr(), ScenarioId.AdvDriverPosFirstLine, None, ScriptedBackend([ScriptRule("expert", "*", "Use osimertinib.")]))


def test_warning_comes_first():
    p = profile(stage=S.IB, resection_done=Resection.yes, pd_l1=PdL1.Unknown)
    scenario = route_scenario(p)
    warnings = check_missing_critical(p, scenario)
    backend = RecordingBackend(ScriptedBackend([ScriptRule("expert", "*", _reply([]))]))
    rec = recommend(p, scenario, None, backend, warnings=warnings)
    assert scenario is ScenarioId.PostopEarlyStage
    assert rec.key_considerations.startswith(warnings[0].message)
    assert warnings[0].message in backend.exchanges[0].request.flat_text()


def test_referral_has_empty_regimen():
    p = profile(stage=S.Indeterminate)
    backend = ScriptedBackend([ScriptRule("expert", "*", _reply(["docetaxel"])), ScriptRule("expert", "*", _reply([]))])
    rec = recommend(p, ScenarioId.MdtReferral, None, backend)
    assert rec.core_regimen == ()
    assert rec.attempts == 2


LATER = (ScenarioId.AdvDriverNegLaterLine, ScenarioId.AdvDriverPosLaterLine)


def test_later_line_never_only_first_line_regimens():
    store = default_guidelines()
    checked = 0
    for p in iter_profile_grid():
        if p.treatment_line < 2 or p.stage not in (S.IVA, S.IVB) or p.ps_score != 1 or p.pd_l1 is not PdL1.Low:
            continue
        scenario = route_scenario(p)
        if scenario not in LATER:
            continue
        eligible = store[scenario].eligible_regimens(p)
        assert eligible, p
        assert not any(FIRST_LINE_ONLY in r.tags for r in eligible)
        checked += 1
    assert checked > 0


def test_every_non_referral_scenario_has_an_eligible_regimen():
    store = default_guidelines()
    for p in list(iter_profile_grid())[::101]:
        scenario = route_scenario(p)
        if scenario is ScenarioId.MdtReferral:
            continue
        assert store[scenario].eligible_regimens(p), (scenario, p)
