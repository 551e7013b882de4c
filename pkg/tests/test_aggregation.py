from __future__ import annotations

import json
from importlib import resources

import pytest
from hypothesis import given
from hypothesis import strategies as st

from lcagent.aggregation import (
    IncompleteTable,
    MetastaticGroupViolation,
    NonMonotoneTable,
    TableVersionMismatch,
    aggregate_stage,
    default_table,
    load_stage_table,
    project_uncertainty,
    table_from_dict,
)
from lcagent.categories import MCategory, NCategory, OverallStage, TCategory
from lcagent.staging import default_rules
from test_staging import distant, lesion, node

T, N, M, S = TCategory, NCategory, MCategory, OverallStage


def _raw_table() -> dict:
    return json.loads(resources.files("lcagent.data").joinpath("rules", "stage_table.json").read_text(encoding="utf-8"))


def test_shipped_table_has_160_entries():
    assert len(default_table()) == 160


@pytest.mark.parametrize(
    "cell, stage",
    [
        ((T.T1a, N.N0, M.M0), S.IA1),
        ((T.T2b, N.N0, M.M1c), S.IVB),
        ((T.Tx, N.N0, M.M0), S.Occult),
        ((T.Tx, N.N2, M.M0), S.Indeterminate),
        ((T.T3, N.N1, M.M0), S.IIIA),
        ((T.T1c, N.N3, M.M0), S.IIIB),
        ((T.T4, N.N3, M.M0), S.IIIC),
        ((T.Tx, N.Nx, M.M1a), S.IVA),
        ((T.T2a, N.Nx, M.M0), S.Indeterminate),
    ],
)
def test_aggregate_examples(cell, stage):
    assert aggregate_stage(*cell) is stage


def test_table_missing_cell():
    raw = _raw_table()
    raw["rows"] = [r for r in raw["rows"] if r[:3] != ["T4", "N3", "M0"]]
    with pytest.raises(IncompleteTable) as info:
        table_from_dict(raw)
    assert info.value.missing == [(T.T4, N.N3, M.M0)]


def test_table_non_monotone():
    raw = _raw_table()
    for row in raw["rows"]:
        if row[:3] == ["T1a", "N0", "M0"]:
            row[3] = "IB"
        if row[:3] == ["T1b", "N0", "M0"]:
            row[3] = "IA1"
    with pytest.raises(NonMonotoneTable):
        table_from_dict(raw)


def test_table_metastatic_group():
    raw = _raw_table()
    for row in raw["rows"]:
        if row[:3] == ["T1a", "N0", "M1b"]:
            row[3] = "IIIC"
    with pytest.raises(MetastaticGroupViolation):
        table_from_dict(raw)


def test_table_version_must_match_rules(tmp_path):
    raw = _raw_table()
    raw["version"] = "ajcc7"
    path = tmp_path / "t.json"
    path.write_text(json.dumps(raw), encoding="utf-8")
    with pytest.raises(TableVersionMismatch):
        load_stage_table(path, default_rules())
    assert len(load_stage_table(path)) == 160


def test_aggregate_is_deterministic():
    cells = list(default_table().cells)
    first = [aggregate_stage(*c) for c in cells]
    for _ in range(200):
        assert [aggregate_stage(*c) for c in cells] == first


def test_indeterminate_is_unordered():
    assert not (S.Indeterminate < S.IA1)
    assert not (S.Indeterminate >= S.IA1)
    assert S.IA1 < S.IVB


_cells = st.tuples(st.sampled_from(list(T)), st.sampled_from(list(N)), st.sampled_from(list(M)))


@given(_cells, st.integers(0, 2))
def test_raising_a_coordinate_never_lowers_stage(cell, axis):
    members = list(type(cell[axis]))
    idx = members.index(cell[axis])
    if idx + 1 == len(members):
        return
    raised = list(cell)
    raised[axis] = members[idx + 1]
    lo, hi = aggregate_stage(*cell), aggregate_stage(*raised)
    if lo.determinate and hi.determinate:
        assert hi >= lo


# -- projection ------------------------------------------------------------------------


def test_empty_uncertain_set():
    assert project_uncertainty([], (T.T1b, N.N0, M.M0)) == []


def test_contralateral_mediastinal_projects_n3():
    hedged = node("contralateral-mediastinal", uncertain=True)
    shifts = project_uncertainty([hedged], (T.T1b, N.N0, M.M0))
    assert len(shifts) == 1
    assert (shifts[0].dimension, shifts[0].assumed_category, shifts[0].projected_stage) == ("N", N.N3, S.IIIB)
    assert shifts[0].triggering_finding is hedged


def test_single_adrenal_projects_m1b():
    shifts = project_uncertainty([distant("extrathoracic-adrenal", uncertain=True)], (T.T2a, N.N1, M.M0))
    assert [(s.assumed_category, s.projected_stage) for s in shifts] == [(M.M1b, S.IVA)]


def test_non_escalating_finding_is_dropped():
    # a hedged hilar node cannot move an N2 case
    assert project_uncertainty([node("ipsilateral-hilar", uncertain=True)], (T.T1a, N.N2, M.M0)) == []


def test_identical_projections_are_merged():
    a = node("contralateral-hilar", uncertain=True)
    b = node("supraclavicular", uncertain=True)
    shifts = project_uncertainty([a, b], (T.T1a, N.N0, M.M0))
    assert len(shifts) == 1
    assert shifts[0].triggering_findings == (a, b)


def test_extra_lesion_lifts_m1b_to_m1c_with_pools():
    from lcagent.normalize import EvidencePools, PrimarySide

    confirmed = distant("extrathoracic-bone")
    hedged = distant("extrathoracic-liver", uncertain=True)
    pools = EvidencePools((lesion(25),), (), (confirmed, hedged), PrimarySide.Right)
    shifts = project_uncertainty([hedged], (T.T1c, N.N0, M.M1b), pools=pools)
    assert [(s.assumed_category, s.projected_stage) for s in shifts] == [(M.M1c, S.IVB)]


def test_projection_from_indeterminate_base_is_reported():
    shifts = project_uncertainty([lesion(25, uncertain=True)], (T.Tx, N.N1, M.M0))
    assert [(s.assumed_category, s.projected_stage) for s in shifts] == [(T.T1c, S.IIB)]


@given(
    _cells,
    st.lists(
        st.sampled_from(
            [
                ("N", "contralateral-mediastinal"),
                ("N", "ipsilateral-hilar"),
                ("N", "subcarinal"),
                ("M", "extrathoracic-adrenal"),
                ("M", "pleural-dissemination"),
                ("T", "chest-wall"),
                ("T", "mediastinum"),
            ]
        ),
        max_size=4,
    ),
)
def test_projection_never_below_base(base, picks):
    uncertain = []
    for dim, tag in picks:
        if dim == "N":
            uncertain.append(node(tag, uncertain=True))
        elif dim == "M":
            uncertain.append(distant(tag, uncertain=True))
        else:
            uncertain.append(lesion(None, tag, uncertain=True))
    base_stage = aggregate_stage(*base)
    for shift in project_uncertainty(uncertain, base):
        assert shift.projected_stage != base_stage
        if base_stage.determinate and shift.projected_stage.determinate:
            assert shift.projected_stage > base_stage
