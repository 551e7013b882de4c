from __future__ import annotations

import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from pydantic import BaseModel

from lcagent.structured import NoStructuredBlock, SchemaViolation, extract_block, parse_structured, repair_json


class Staging(BaseModel):
    t_stage: str
    reasoning: str = ""


class Payload(BaseModel):
    label: str
    count: int
    tags: list[str]
    score: float | None = None


def test_single_block():
    assert parse_structured('{"t_stage": "T2a"}', Staging).t_stage == "T2a"


def test_prose_block_prose():
    text = 'Looking at the lesion size first.\n```json\n{"t_stage": "T1c", "reasoning": "25 mm"}\n```\nThat is all.'
    assert parse_structured(text, Staging) == Staging(t_stage="T1c", reasoning="25 mm")


def test_unfenced_block_inside_prose():
    text = 'I think {"t_stage": "T3", "reasoning": "chest wall {invaded}"} is right.'
    assert parse_structured(text, Staging).reasoning == "chest wall {invaded}"


def test_first_block_wins():
    text = '```\n{"t_stage": "T1a"}\n```\nlater: {"t_stage": "T4"}'
    assert parse_structured(text, Staging).t_stage == "T1a"


def test_missing_required_field():
    with pytest.raises(SchemaViolation) as info:
        parse_structured('{"reasoning": "no category"}', Staging)
    assert info.value.field == "t_stage"


def test_no_block():
    with pytest.raises(NoStructuredBlock):
        parse_structured("The tumour is T2a.", Staging)


def test_unparseable_block():
    with pytest.raises(NoStructuredBlock):
        extract_block("{this is not json at all: [}")


def test_repair_trailing_comma_and_bare_keys():
    assert json.loads(repair_json('{t_stage: "T2b", reasoning: "x",}')) == {"t_stage": "T2b", "reasoning": "x"}
    assert parse_structured('```json\n{t_stage: "N/A",}\n```', Staging).t_stage == "N/A"


_safe_text = st.text(alphabet=st.characters(blacklist_characters="`", blacklist_categories=("Cs",)), max_size=30)
_prose = st.text(alphabet=st.characters(blacklist_characters="{}[]`", blacklist_categories=("Cs",)), max_size=80)


@settings(max_examples=200, deadline=None)
@given(
    label=_safe_text,
    count=st.integers(-10**6, 10**6),
    tags=st.lists(_safe_text, max_size=4),
    score=st.none() | st.floats(allow_nan=False, allow_infinity=False, width=32),
    before=_prose,
    after=_prose,
    fenced=st.booleans(),
)
def test_fuzz_block_recovered_from_prose(label, count, tags, score, before, after, fenced):
    value = Payload(label=label, count=count, tags=tags, score=score)
    block = json.dumps(value.model_dump(), ensure_ascii=False)
    if fenced:
        block = f"```json\n{block}\n```"
    text = f"{before}\n{block}\n{after}"
    assert parse_structured(text, Payload) == value


@given(st.text(max_size=200))
def test_parse_never_raises_unexpected(text):
    try:
        parse_structured(text, Staging)
    except (NoStructuredBlock, SchemaViolation):
        pass
