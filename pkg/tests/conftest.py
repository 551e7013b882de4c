from __future__ import annotations

import functools
import json
from pathlib import Path

import pytest

from lcagent.synthetic import GenParams, generate_suite, oracle_script, script_to_dict


@functools.lru_cache(maxsize=None)
def cached_suite(n: int, seed: int, language: str = "EN", uncertainty: float = 0.0, dropout: float = 0.0):
    params = GenParams(seed=seed, language=language, uncertainty_rate=uncertainty, modality_dropout_rate=dropout)
    return tuple(generate_suite(n, params))


def write_eval_fixture(root: Path, n: int = 10, language: str = "ZH", out: str = "out", seed: int = 7) -> Path:
    """Cases, an oracle replay script and an eval config under ``root``; returns the config path."""
    from lcagent.cases import dump_cases

    cases = list(cached_suite(n, seed, language, 0.5, 0.2))
    dump_cases(cases, root / "cases.json")
    (root / "oracle.json").write_text(json.dumps(script_to_dict(oracle_script(cases)), ensure_ascii=False), encoding="utf-8")
    config = {
        "cases": "cases.json",
        "models": [{"name": "scripted-mllm", "backend": {"kind": "scripted", "script": "oracle.json"}}],
        "judge": {"kind": "offline-judge"},
        "tasks": ["TnmStaging", "TreatmentRecommendation", "EndToEnd"],
        "modes": ["DirectPrompt", "LCAgent"],
        "languages": [language],
        "input_modes": ["TextOnly"],
        "seed": 0,
        "workers": 4,
        "out": out,
    }
    path = root / "eval.json"
    path.write_text(json.dumps(config), encoding="utf-8")
    return path


@pytest.fixture
def eval_fixture(tmp_path):
    return write_eval_fixture(tmp_path)
