"""Staging accuracy, judge-based scores, similarity scorers and the pairwise win rate."""

from __future__ import annotations

import math
import re
import zlib
from dataclasses import dataclass
from typing import Mapping, Protocol, Sequence

import numpy as np
from pydantic import BaseModel, Field, field_validator

from .backend import Backend, text_part, user_request
from .prompts import render_prompt
from .structured import StructuredOutputError, parse_structured


class LengthMismatch(ValueError):
    pass


class JudgeParseError(ValueError):
    pass


class UnalignedCases(ValueError):
    pass


# -- staging accuracy -----------------------------------------------------------------


@dataclass(frozen=True)
class StagingAccuracy:
    exact: float
    t: float
    n: float
    m: float


def staging_hits(pred, gold) -> tuple[bool, bool, bool, bool]:
    """(exact, t, n, m) hits for one case; a missing prediction misses everything."""
    if pred is None:
        return (False, False, False, False)
    t, n, m = (p == g for p, g in zip(pred, gold))
    return (t and n and m, t, n, m)


def score_staging_accuracy(preds: Sequence, golds: Sequence) -> StagingAccuracy:
    if len(preds) != len(golds):
        raise LengthMismatch(f"{len(preds)} predictions for {len(golds)} gold labels")
    if not golds:
        raise ValueError("no cases to score")
    hits = np.array([staging_hits(p, g) for p, g in zip(preds, golds)], dtype=float)
    exact, t, n, m = (100.0 * hits[:, i].mean() for i in range(4))
    return StagingAccuracy(float(exact), float(t), float(n), float(m))


# -- reasoning quality ----------------------------------------------------------------


def rq_from_scores(scores: Sequence[int]) -> float:
    """Four 1..5 judge scores mapped to [20, 100] as 100 * mean / 5."""
    if len(scores) != 4 or any(not 1 <= s <= 5 for s in scores):
        raise ValueError("expected four integer scores in 1..5")
    return 100.0 * (sum(scores) / 4.0) / 5.0


class RqReply(BaseModel):
    t: int = Field(ge=1, le=5)
    n: int = Field(ge=1, le=5)
    m: int = Field(ge=1, le=5)
    overall: int = Field(ge=1, le=5)


@dataclass(frozen=True)
class RqResult:
    rq: float
    scores: tuple[int, int, int, int]

    @property
    def component_rq(self) -> tuple[float, float, float]:
        """Per-dimension score on the same 20..100 scale."""
        return tuple(20.0 * s for s in self.scores[:3])


def _judge(judge: Backend, system: str, body: str, tag: str, schema):
    """One retry on an unparseable judge reply, then JudgeParseError."""
    last = None
    for _ in range(2):
        response = judge.complete(user_request(system, [text_part(body)], tag=tag))
        try:
            return parse_structured(response.text, schema)
        except StructuredOutputError as exc:
            last = exc
    raise JudgeParseError(str(last))


def judge_reasoning_quality(
    output_reasoning: str, gold_tnm: str, gold_evidence: str, judge: Backend, language: str = "EN", case_id: str = ""
) -> RqResult:
    body = (
        f"Case ID: {case_id}\n### MODEL REASONING\n{output_reasoning}\n"
        f"### REFERENCE STAGING\n{gold_tnm}\n### REFERENCE EVIDENCE\n{gold_evidence}"
    )
    reply = _judge(judge, render_prompt("judge-rq", language), body, "judge-rq", RqReply)
    scores = (reply.t, reply.n, reply.m, reply.overall)
    return RqResult(rq_from_scores(scores), scores)


# -- medication precision -------------------------------------------------------------


class PrecisionReply(BaseModel):
    pred_meds: list[str] = Field(default_factory=list)
    gold_meds: list[str] = Field(default_factory=list)
    matched: list[list[str]] = Field(default_factory=list)

    @field_validator("matched")
    @classmethod
    def _pairs(cls, value):
        for pair in value:
            if len(pair) != 2:
                raise ValueError("each matched entry must be a [pred, gold] pair")
        return value


def precision_from_lists(pred_meds: Sequence[str], matched_pairs: Sequence[Sequence[str]]) -> float:
    """100 * |matched| / |pred|, counting each predicted drug at most once."""
    pred = list(dict.fromkeys(pred_meds))
    if not pred:
        return 0.0
    matched = {p for p, _ in matched_pairs if p in pred}
    return 100.0 * len(matched) / len(pred)


def judge_precision(pred_plan: str, gold_plan: str, judge: Backend, language: str = "EN", case_id: str = "") -> float:
    body = f"Case ID: {case_id}\n### PREDICTED PLAN\n{pred_plan}\n### REFERENCE PLAN\n{gold_plan}"
    reply = _judge(judge, render_prompt("judge-precision", language), body, "judge-precision", PrecisionReply)
    return precision_from_lists(reply.pred_meds, reply.matched)


# -- similarity scorers ---------------------------------------------------------------


class SimilarityScorer(Protocol):
    name: str

    def score(self, pred: str, gold: str, case_id: str = "") -> float:
        ...


_TOKEN_RE = re.compile(r"[一-鿿]|[A-Za-z0-9][A-Za-z0-9\-]*")


def tokenize(text: str) -> list[str]:
    """Latin words and single CJK characters, lower-cased."""
    return [t.lower() for t in _TOKEN_RE.findall(text)]


class HashedNgramEmbedder:
    """Deterministic bag-of-character-ngram token vectors (a stand-in embedding provider)."""

    def __init__(self, dim: int = 512, ngram: tuple[int, ...] = (2, 3, 4)):
        self.dim = dim
        self.ngram = ngram

    def embed(self, tokens: Sequence[str]) -> np.ndarray:
        out = np.zeros((len(tokens), self.dim))
        for row, token in enumerate(tokens):
            padded = f"<{token}>"
            out[row, zlib.crc32(padded.encode()) % self.dim] += 1.0
            for n in self.ngram:
                for i in range(len(padded) - n + 1):
                    out[row, zlib.crc32(padded[i : i + n].encode()) % self.dim] += 1.0
        norms = np.linalg.norm(out, axis=1, keepdims=True)
        return out / np.where(norms == 0, 1.0, norms)


class EmbeddingTokenF1:
    """Greedy token matching over embedding cosine similarity, reported as F1 x 100."""

    name = "embedding-token-f1"

    def __init__(self, embedder=None):
        self.embedder = embedder or HashedNgramEmbedder()

    def score(self, pred: str, gold: str, case_id: str = "") -> float:
        p_tokens, g_tokens = tokenize(pred), tokenize(gold)
        if not p_tokens or not g_tokens:
            return 100.0 if p_tokens == g_tokens else 0.0
        sim = self.embedder.embed(p_tokens) @ self.embedder.embed(g_tokens).T
        sim = np.clip(sim, 0.0, 1.0)
        precision = sim.max(axis=1).mean()
        recall = sim.max(axis=0).mean()
        if precision + recall == 0:
            return 0.0
        return float(min(100.0, 100.0 * 2 * precision * recall / (precision + recall)))


class SimilarityReply(BaseModel):
    score: int = Field(ge=0, le=5)


class JudgeSimilarity:
    """0..5 judge score scaled by 20."""

    name = "judge-similarity"

    def __init__(self, judge: Backend, language: str = "EN"):
        self.judge = judge
        self.language = language

    def score(self, pred: str, gold: str, case_id: str = "") -> float:
        body = f"Case ID: {case_id}\n### PREDICTED RATIONALE\n{pred}\n### REFERENCE RATIONALE\n{gold}"
        reply = _judge(self.judge, render_prompt("judge-similarity", self.language), body, "judge-similarity", SimilarityReply)
        return 20.0 * reply.score


def score_similarity_f1(pred_reasoning: str, gold_reasoning: str, scorer: SimilarityScorer, case_id: str = "") -> float:
    return scorer.score(pred_reasoning, gold_reasoning, case_id)


# -- win rate -------------------------------------------------------------------------


def _key(value):
    return -math.inf if value is None else value


def win_rate_matrix(per_case_scores: Mapping[str, Sequence | Mapping]) -> tuple[list[str], list[list[float]]]:
    """W[a][b] = (wins + 0.5 ties) / n over shared cases; unscored cases lose to any score."""
    names = list(per_case_scores)
    vectors = {}
    reference_ids = None
    for name in names:
        scores = per_case_scores[name]
        if isinstance(scores, Mapping):
            ids = tuple(sorted(scores))
            if reference_ids is None:
                reference_ids = ids
            elif ids != reference_ids:
                raise UnalignedCases(f"{name} is scored on a different case set")
            vectors[name] = [scores[i] for i in ids]
        else:
            vectors[name] = list(scores)
    lengths = {len(v) for v in vectors.values()}
    if len(lengths) > 1:
        raise UnalignedCases("score vectors have different lengths")
    n = lengths.pop() if lengths else 0
    matrix = []
    for a in names:
        row = []
        for b in names:
            if a == b or n == 0:
                row.append(0.5)
                continue
            wins = ties = 0
            for x, y in zip(vectors[a], vectors[b]):
                x, y = _key(x), _key(y)
                if x > y:
                    wins += 1
                elif x == y:
                    ties += 1
            row.append((wins + 0.5 * ties) / n)
        matrix.append(row)
    return names, matrix
