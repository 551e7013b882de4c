from __future__ import annotations

import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import cached_suite
from lcagent.backend import ScriptedBackend, ScriptRule
from lcagent.cases import case_from_dict
from lcagent.normalize import (
    CONJUNCTION_RE,
    Certainty,
    Laterality,
    Lexicon,
    NormalizationParseError,
    PrimarySide,
    dispatch_pools,
    normalize_case,
    normalize_reports,
    parse_count,
    parse_size_mm,
    split_composite_site,
)

L = Laterality


def _case(text, language="EN", *more):
    docs = [{"modality": "I", "text": text}] + [{"modality": m, "text": t} for m, t in more]
    return case_from_dict({"id": "n-1", "language": language, "documents": docs})


@pytest.mark.parametrize(
    "phrase, side, expected",
    [
        (
            "bilateral hilar and mediastinal nodes",
            "Right",
            [("right hilar", L.Ipsilateral), ("left hilar", L.Contralateral), ("right mediastinal", L.Ipsilateral), ("left mediastinal", L.Contralateral)],
        ),
        ("right hilar node", "Right", [("right hilar", L.Ipsilateral)]),
        ("liver and adrenal metastases", "Right", [("liver", L.Midline), ("adrenal", L.Unknown)]),
        ("双侧肺门及纵隔淋巴结", "Left", [("右肺门", L.Contralateral), ("左肺门", L.Ipsilateral), ("右纵隔", L.Contralateral), ("左纵隔", L.Ipsilateral)]),
        ("right hilar and left hilar nodes", "Unknown", [("right hilar", L.Unknown), ("left hilar", L.Unknown)]),
        ("xyz", "Left", [("xyz", L.Unknown)]),
    ],
)
def test_split_composite_site(phrase, side, expected):
    assert split_composite_site(phrase, side) == expected


_terms = st.sampled_from(["hilar", "mediastinal", "supraclavicular", "subcarinal", "liver", "adrenal", "bone"])
_sides = st.sampled_from(["", "right ", "left ", "bilateral ", "ipsilateral ", "contralateral "])


@given(st.lists(st.tuples(_sides, _terms), min_size=1, max_size=4), st.sampled_from(["Left", "Right", "Unknown"]))
def test_split_is_idempotent_and_atomic(parts, primary):
    phrase = " and ".join(f"{s}{t}" for s, t in parts) + " nodes"
    atoms = split_composite_site(phrase, primary)
    for site, lat in atoms:
        assert not CONJUNCTION_RE.search(site)
        assert split_composite_site(site, primary) == [(site, lat)]


def _extract_backend(findings, side="Unknown"):
    payload = json.dumps({"primary_side": side, "findings": findings}, ensure_ascii=False)
    return ScriptedBackend([ScriptRule("extract", "*", f"```json\n{payload}\n```")])


def test_backend_normalizer_converts_cm():
    case = _case("左肺上叶肿物 3.2cm。", "ZH")
    normalized = normalize_reports(case, _extract_backend([{"text": "左肺上叶肿物 3.2cm"}]))
    (finding,) = normalized.findings
    assert finding.site == "left-upper-lobe-mass"
    assert finding.size_mm == 32
    assert finding.certainty is Certainty.Confirmed
    assert normalized.primary_side is PrimarySide.Left


def test_backend_normalizer_keeps_hedge():
    case = _case("左肺上叶肿物 3.2cm。纵隔淋巴结, 性质待定。", "ZH")
    backend = _extract_backend([{"text": "左肺上叶肿物 3.2cm"}, {"text": "纵隔淋巴结, 性质待定", "certainty": "uncertain", "hedge": "性质待定"}])
    hedged = [f for f in normalize_reports(case, backend).findings if not f.confirmed]
    assert len(hedged) == 1
    assert hedged[0].hedge == "性质待定"
    assert hedged[0].source_span[0] == 0


def test_backend_normalizer_resplits_compounds():
    case = _case("Right upper lobe mass 2.5 cm. Bilateral hilar and mediastinal nodes.")
    backend = _extract_backend([{"text": "right upper lobe mass 2.5 cm"}, {"text": "bilateral hilar and mediastinal nodes"}])
    sites = [f.site for f in normalize_reports(case, backend).findings if f.kind == "node"]
    assert sites == ["right-hilar-node", "left-hilar-node", "right-mediastinal-node", "left-mediastinal-node"]


def test_backend_normalizer_parse_error():
    with pytest.raises(NormalizationParseError):
        normalize_reports(_case("x"), ScriptedBackend([ScriptRule("extract", "*", "I cannot help with that.")]))


def test_dispatch_one_per_pool():
    n = normalize_case(_case("Right upper lobe mass 2.5 cm. Right hilar lymph node enlarged. Liver lesion consistent with metastasis."))
    pools = dispatch_pools(n.findings, n.primary_side)
    assert (len(pools.e_t), len(pools.e_n), len(pools.e_m)) == (1, 1, 1)


def test_supraclavicular_is_regional_and_cervical_is_distant():
    n = normalize_case(_case("Right upper lobe mass 2.5 cm. Right supraclavicular lymph node metastasis. Cervical lymph node metastasis."))
    pools = dispatch_pools(n.findings, n.primary_side)
    assert [f.site for f in pools.e_n] == ["right-supraclavicular-node"]
    assert [f.descriptors for f in pools.e_m] == [frozenset({"non-regional-node"})]


def test_hedged_lexicon_finding():
    n = normalize_case(_case("Right lower lobe mass 4.5 cm. Contralateral mediastinal lymph node, suspicious for metastasis."))
    (hedged,) = [f for f in n.findings if not f.confirmed]
    assert "contralateral-mediastinal" in hedged.descriptors
    assert hedged.hedge


def test_findings_from_several_documents_keep_their_spans():
    case = _case("Right upper lobe mass 1.8 cm.", "EN", ("P", "Biopsy: adenocarcinoma. Right hilar node positive."))
    n = normalize_case(case)
    docs = {f.site: f.source_span[0] for f in n.findings}
    assert docs["right-upper-lobe-mass"] == 0
    assert docs["right-hilar-node"] == 1
    for f in n.findings:
        doc, start, end = f.source_span
        assert 0 <= start <= end <= len(case.documents[doc].text)


@pytest.mark.parametrize("text, mm", [("3-4cm", 40), ("3–4 cm", 40), ("2.5 cm x 1.8 cm", 25), ("18 mm", 18), ("肿物约3.2×2.1cm", 32), ("no size", None)])
def test_parse_size_mm(text, mm):
    assert parse_size_mm(text) == mm


@pytest.mark.parametrize("text, count", [("two liver lesions", 2), ("multiple bone metastases", None), ("a single adrenal nodule", 1), ("肝内多发转移", None), ("3 nodules", 3)])
def test_parse_count(text, count):
    assert parse_count(text) == count


def test_custom_lexicon_file(tmp_path):
    path = tmp_path / "lex.tsv"
    path.write_text("# test\nupper lobe\tlobe:upper\tEN\nhilar\tnode:hilar\tEN\n", encoding="utf-8")
    lex = Lexicon.from_file(path)
    assert lex.canonical_sites == {"lobe:upper", "node:hilar"}
    assert [m[3] for m in lex.find("right upper lobe, hilar", ["lobe", "node"])] == ["lobe:upper", "node:hilar"]


@pytest.mark.parametrize("language, dropout", [("EN", 0.0), ("ZH", 0.3)])
def test_pool_invariants_on_synthetic_cases(language, dropout):
    for case in cached_suite(150, 5, language, 0.5, dropout):
        n = normalize_case(case)
        pools = dispatch_pools(n.findings, n.primary_side)
        pooled = pools.e_t + pools.e_n + pools.e_m + pools.unclassifiable
        # exhaustive and disjoint
        assert len(pooled) == len(n.findings)
        assert len({id(f) for f in pooled}) == len(pooled)
        # certainty preserved
        assert sum(not f.confirmed for f in pooled) == sum(not f.confirmed for f in n.findings)
        for f in n.findings:
            assert not CONJUNCTION_RE.search(f.site)
            if not f.confirmed:
                assert f.hedge
            if f.laterality in (L.Ipsilateral, L.Contralateral):
                assert n.primary_side is not PrimarySide.Unknown
