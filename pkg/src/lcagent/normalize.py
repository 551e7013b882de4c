"""Evidence normalization: atomic, laterality-anchored findings and T/N/M pools.

Two normalizers share one canonicalizer. ``normalize_case`` reads report text
with the shipped lexicon only; ``normalize_reports`` asks a backend to rewrite
the documents into atomic statements and then canonicalizes each statement the
same way, so both paths emit identical finding shapes.
"""

from __future__ import annotations

import functools
import re
from dataclasses import dataclass, field, replace
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Iterable

from pydantic import BaseModel, Field

from .backend import Backend, image_part, text_part, user_request
from .cases import CaseRecord
from .prompts import render_prompt
from .structured import StructuredOutputError, parse_structured


class NormalizationParseError(ValueError):
    pass


class Laterality(str, Enum):
    Ipsilateral = "Ipsilateral"
    Contralateral = "Contralateral"
    Midline = "Midline"
    Unknown = "Unknown"


class Certainty(str, Enum):
    Confirmed = "Confirmed"
    Uncertain = "Uncertain"


class PrimarySide(str, Enum):
    Left = "Left"
    Right = "Right"
    Unknown = "Unknown"


@dataclass(frozen=True)
class NormalizedFinding:
    site: str
    laterality: Laterality
    size_mm: float | None = None
    descriptors: frozenset[str] = frozenset()
    certainty: Certainty = Certainty.Confirmed
    source_span: tuple[int, int, int] = (0, 0, 0)  # (document index, start, end)
    hedge: str | None = None
    lesion_count: int | None = 1  # None: "multiple", count not stated
    kind: str = "unknown"

    @property
    def confirmed(self) -> bool:
        return self.certainty is Certainty.Confirmed

    def confirm(self) -> "NormalizedFinding":
        return replace(self, certainty=Certainty.Confirmed, hedge=None)

    def describe(self) -> str:
        bits = [self.site, self.laterality.value]
        if self.size_mm is not None:
            bits.append(f"{self.size_mm:g} mm")
        if self.lesion_count != 1:
            bits.append(f"count={self.lesion_count if self.lesion_count else 'multiple'}")
        if self.descriptors:
            bits.append("[" + ", ".join(sorted(self.descriptors)) + "]")
        if not self.confirmed:
            bits.append(f"UNCERTAIN ({self.hedge})")
        return " ".join(bits)


@dataclass(frozen=True)
class EvidencePools:
    e_t: tuple[NormalizedFinding, ...]
    e_n: tuple[NormalizedFinding, ...]
    e_m: tuple[NormalizedFinding, ...]
    primary_side: PrimarySide
    unclassifiable: tuple[NormalizedFinding, ...] = ()

    def pool(self, dimension: str) -> tuple[NormalizedFinding, ...]:
        return {"T": self.e_t, "N": self.e_n, "M": self.e_m}[dimension]


@dataclass(frozen=True)
class Normalized:
    findings: tuple[NormalizedFinding, ...]
    primary_side: PrimarySide


# -- vocabulary ----------------------------------------------------------------

REGIONAL_STATIONS = (
    "ipsilateral-peribronchial",
    "ipsilateral-hilar",
    "ipsilateral-mediastinal",
    "subcarinal",
    "contralateral-mediastinal",
    "contralateral-hilar",
    "supraclavicular",
)

INVASION_DESCRIPTORS = {
    "visceral-pleura": "visceral-pleural-invasion",
    "parietal-pleura": "parietal-pleura",
    "chest-wall": "chest-wall",
    "main-bronchus": "main-bronchus",
    "lobar-bronchus": "lobar-bronchus",
    "atelectasis": "atelectasis",
    "phrenic-nerve": "phrenic-nerve",
    "parietal-pericardium": "parietal-pericardium",
    "diaphragm": "diaphragm",
    "mediastinum": "mediastinum",
    "heart": "heart",
    "great-vessels": "great-vessels",
    "trachea": "trachea",
    "recurrent-laryngeal-nerve": "recurrent-laryngeal-nerve",
    "esophagus": "esophagus",
    "vertebral-body": "vertebral-body",
    "carina": "carina",
}

SEROSA_DESCRIPTORS = {"pleural": "pleural-dissemination", "pericardial": "pericardial-dissemination"}

ORGANS = ("liver", "adrenal", "bone", "brain", "kidney", "spleen", "pancreas", "peritoneum")
NON_REGIONAL_NODES = ("cervical", "axillary", "retroperitoneal", "abdominal", "inguinal")

T_DESCRIPTORS = (
    "primary-tumor",
    "separate-nodule-same-lobe",
    "separate-nodule-other-ipsilateral-lobe",
    *INVASION_DESCRIPTORS.values(),
)
N_DESCRIPTORS = (*REGIONAL_STATIONS, "nodes-unevaluable")
M_DESCRIPTORS = (
    "contralateral-lung-nodule",
    *SEROSA_DESCRIPTORS.values(),
    *(f"extrathoracic-{o}" for o in ORGANS),
    "non-regional-node",
)

# bases that have a left and a right instance
PAIRED = {
    "lobe:upper", "lobe:middle", "lobe:lower",
    "node:hilar", "node:mediastinal", "node:peribronchial", "node:supraclavicular",
    "node:cervical", "node:axillary", "node:inguinal",
    "organ:adrenal", "organ:kidney",
    "invasion:visceral-pleura", "invasion:parietal-pleura", "invasion:chest-wall",
    "invasion:main-bronchus", "invasion:lobar-bronchus", "invasion:atelectasis",
    "invasion:phrenic-nerve", "invasion:recurrent-laryngeal-nerve", "invasion:diaphragm",
    "serosa:pleural",
}

CONJUNCTION_RE = re.compile(r"\s*(?:\band\b|\bor\b|及|和|与|、|,|，|;|；)\s*", re.IGNORECASE)

_EN_TERM = re.compile(r"[a-z]")


@dataclass(frozen=True)
class LexiconEntry:
    raw: str
    canonical: str
    language: str

    @property
    def namespace(self) -> str:
        return self.canonical.split(":", 1)[0]


class Lexicon:
    """Raw-term to canonical-site table with longest-match search."""

    def __init__(self, entries: Iterable[LexiconEntry]):
        self.entries = tuple(entries)
        self._patterns: dict[frozenset[str], re.Pattern] = {}
        self._lookup: dict[tuple[str, str], str] = {}
        for e in self.entries:
            self._lookup.setdefault((e.raw.lower(), e.namespace), e.canonical)

    @classmethod
    def from_file(cls, path: str | Path) -> "Lexicon":
        return cls(_read_lexicon(Path(path).read_text(encoding="utf-8")))

    @classmethod
    @functools.lru_cache(maxsize=None)
    def default(cls) -> "Lexicon":
        text = resources.files("lcagent.data").joinpath("lexicon.tsv").read_text(encoding="utf-8")
        return cls(_read_lexicon(text))

    @property
    def canonical_sites(self) -> set[str]:
        return {e.canonical for e in self.entries}

    def pattern(self, namespaces: Iterable[str]) -> re.Pattern:
        key = frozenset(namespaces)
        if key not in self._patterns:
            raws = sorted({e.raw for e in self.entries if e.namespace in key}, key=len, reverse=True)
            alts = [rf"(?<![a-z]){re.escape(r)}(?![a-z])" if _EN_TERM.search(r) else re.escape(r) for r in raws]
            self._patterns[key] = re.compile("|".join(alts) or r"(?!x)x", re.IGNORECASE)
        return self._patterns[key]

    def find(self, text: str, namespaces: Iterable[str]) -> list[tuple[int, int, str, str]]:
        """Return (start, end, raw text, canonical) for non-overlapping matches."""
        namespaces = tuple(namespaces)
        out = []
        for m in self.pattern(namespaces).finditer(text):
            raw = m.group(0)
            for ns in namespaces:
                canonical = self._lookup.get((raw.lower(), ns))
                if canonical:
                    out.append((m.start(), m.end(), raw, canonical))
                    break
        return out


def _read_lexicon(text: str) -> list[LexiconEntry]:
    entries = []
    for line in text.splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        raw, canonical, language = line.split("\t")
        entries.append(LexiconEntry(raw.strip(), canonical.strip(), language.strip()))
    return entries


# -- composite site splitting --------------------------------------------------

_SIDE_WORDS = {
    "bilateral": "bilateral", "双侧": "bilateral", "两侧": "bilateral",
    "ipsilateral": "ipsilateral", "同侧": "ipsilateral",
    "contralateral": "contralateral", "对侧": "contralateral",
    "left": "left", "左侧": "left", "左": "left",
    "right": "right", "右侧": "right", "右": "right",
}
_SIDE_RE = re.compile(
    "|".join(
        rf"(?<![a-z]){w}(?![a-z])" if _EN_TERM.search(w) else w
        for w in sorted(_SIDE_WORDS, key=len, reverse=True)
    ),
    re.IGNORECASE,
)
_ALL_NAMESPACES = ("lobe", "node", "invasion", "organ", "serosa", "marker")


@dataclass(frozen=True)
class Atom:
    text: str
    canonical: str | None
    side: str | None  # right | left | ipsilateral | contralateral | None
    start: int
    end: int


def _is_cjk(s: str) -> bool:
    return any("一" <= ch <= "鿿" for ch in s)


def _side_label(side: str, zh: bool) -> str:
    return {"right": "右", "left": "左"}[side] if zh else side


def tokenize_atoms(phrase: str, namespaces=_ALL_NAMESPACES, lexicon: Lexicon | None = None) -> list[Atom]:
    """Side-bound site atoms of the requested namespaces, in source order.

    All namespaces are scanned so that a side word always binds to the nearest
    site term, even when that term is filtered out afterwards.
    """
    lexicon = lexicon or Lexicon.default()
    wanted = tuple(namespaces)
    scan = wanted + tuple(ns for ns in _ALL_NAMESPACES if ns not in wanted)
    terms = lexicon.find(phrase, scan)
    if not terms:
        return []
    taken = [(s, e) for s, e, _, _ in terms]
    sides = [
        (m.start(), m.end(), m.group(0))
        for m in _SIDE_RE.finditer(phrase)
        if not any(s < m.end() and m.start() < e for s, e in taken)
    ]
    events = sorted([(s, 0, e, raw, None) for s, e, raw in sides] + [(s, 1, e, raw, c) for s, e, raw, c in terms])
    atoms: list[Atom] = []
    bilateral = False
    pending: tuple[str, str, int] | None = None
    for start, is_term, end, raw, canonical in events:
        if not is_term:
            cls = _SIDE_WORDS[raw.lower()] if raw.lower() in _SIDE_WORDS else _SIDE_WORDS[raw]
            if cls == "bilateral":
                bilateral, pending = True, None
            else:
                bilateral, pending = False, (cls, raw, start)
            continue
        if canonical.split(":", 1)[0] not in wanted:
            pending = None
            continue
        zh = _is_cjk(raw)
        sep = "" if zh else " "
        paired = canonical in PAIRED
        if bilateral and paired:
            for side in ("right", "left"):
                atoms.append(Atom(f"{_side_label(side, zh)}{sep}{raw}", canonical, side, start, end))
        elif pending is not None:
            cls, word, s0 = pending
            atoms.append(Atom(f"{word}{sep}{raw}", canonical, cls, s0, end))
            pending = None
        else:
            atoms.append(Atom(raw, canonical, None, start, end))
    return atoms


def anchor(side: str | None, canonical: str | None, primary_side: PrimarySide) -> Laterality:
    if side in ("right", "left"):
        if primary_side is PrimarySide.Unknown:
            return Laterality.Unknown
        return Laterality.Ipsilateral if side == primary_side.value.lower() else Laterality.Contralateral
    if side in ("ipsilateral", "contralateral"):
        if primary_side is PrimarySide.Unknown:
            return Laterality.Unknown
        return Laterality.Ipsilateral if side == "ipsilateral" else Laterality.Contralateral
    if canonical is not None and canonical not in PAIRED:
        return Laterality.Midline
    return Laterality.Unknown


def absolute_side(side: str | None, primary_side: PrimarySide) -> str | None:
    if side in ("right", "left"):
        return side
    if side in ("ipsilateral", "contralateral") and primary_side is not PrimarySide.Unknown:
        p = primary_side.value.lower()
        return p if side == "ipsilateral" else ("left" if p == "right" else "right")
    return None


def split_composite_site(phrase: str, primary_side: PrimarySide | str = PrimarySide.Unknown) -> list[tuple[str, Laterality]]:
    """Split a compound anatomical phrase into atomic, anchored sites.

    >>> split_composite_site("bilateral hilar and mediastinal nodes", "Right")[:2]
    [('right hilar', <Laterality.Ipsilateral: 'Ipsilateral'>), ('left hilar', <Laterality.Contralateral: 'Contralateral'>)]
    """
    if not phrase or not phrase.strip():
        raise ValueError("phrase must be non-empty")
    primary_side = PrimarySide(primary_side)
    atoms = tokenize_atoms(phrase)
    if atoms:
        return [(a.text, anchor(a.side, a.canonical, primary_side)) for a in atoms]
    parts = [p for p in CONJUNCTION_RE.split(phrase.strip()) if p]
    return [(p, Laterality.Unknown) for p in parts] or [(phrase, Laterality.Unknown)]


# -- clause parsing ------------------------------------------------------------

_HEDGES = sorted(
    [
        "nature to be determined", "cannot be excluded", "cannot be ruled out", "not excluded",
        "suspicious", "suspected", "possible", "possibly", "probable", "probably",
        "indeterminate", "equivocal", "questionable", "likely",
        "性质待定", "不能除外", "不除外", "待排", "待定", "可疑", "疑似", "可能",
    ],
    key=len,
    reverse=True,
)
_HEDGE_RE = re.compile(
    "|".join(rf"(?<![a-z]){re.escape(h)}(?![a-z])" if _EN_TERM.search(h) else re.escape(h) for h in _HEDGES),
    re.IGNORECASE,
)
_NEGATION_RE = re.compile(
    r"(?<![a-z])(?:no|not|without|negative for|free of|absence of)(?![a-z])|未见|未发现|未及|无明显|^\s*无",
    re.IGNORECASE,
)
_INVASION_RE = re.compile(
    r"(?<![a-z])(?:invasion|invading|invades|invaded|involving|involves|involvement|infiltrat\w*|atelectasis|pneumonitis)(?![a-z])"
    r"|侵犯|累及|侵及|受侵|肺不张|阻塞性肺炎",
    re.IGNORECASE,
)
_NODE_HEAD_RE = re.compile(r"(?<![a-z])(?:lymph nodes?|nodes?|lymphadenopathy|adenopathy)(?![a-z])|淋巴结", re.IGNORECASE)
_MASS_HEAD_RE = re.compile(
    r"(?<![a-z])(?:mass|tumou?r|carcinoma|adenocarcinoma|cancer|neoplasm)(?![a-z])|肿物|肿块|占位|癌",
    re.IGNORECASE,
)
_NODULE_HEAD_RE = re.compile(r"(?<![a-z])(?:nodules?|lesions?|opacity|focus)(?![a-z])|结节|病灶|阴影", re.IGNORECASE)
_SIZE_RE = re.compile(
    r"((?:\d+(?:\.\d+)?\s*(?:cm|mm|厘米|毫米)?\s*(?:[x×*]|-|–|~|～|至|到)\s*)*\d+(?:\.\d+)?)\s*(cm|mm|厘米|毫米)",
    re.IGNORECASE,
)
_NUM_UNIT_RE = re.compile(r"(\d+(?:\.\d+)?)\s*(cm|mm|厘米|毫米)?", re.IGNORECASE)
_WORD_COUNTS = {"two": 2, "three": 3, "four": 4, "five": 5, "six": 6, "两": 2, "二": 2, "三": 3, "四": 4, "五": 5, "六": 6}
_COUNT_RE = re.compile(
    r"(\d+|two|three|four|five|six)\s+(?:\w+\s+)?(?:lesions|nodules|metastases|foci|masses)"
    r"|(\d+|两|二|三|四|五|六)\s*(?:处|个|枚|发)",
    re.IGNORECASE,
)
_MULTIPLE_RE = re.compile(r"(?<![a-z])(?:multiple|numerous|several|diffuse)(?![a-z])|多发|多个|多处|弥漫", re.IGNORECASE)
_DIAGNOSIS_SIDE_RE = re.compile(
    r"(?<![a-z])(left|right)\s+lung\s+(?:\w+\s+)?(?:cancer|carcinoma|adenocarcinoma|tumou?r)"
    r"|([左右])肺(?:[^，。；\s]{0,4})?(?:癌|肿瘤)",
    re.IGNORECASE,
)


def _to_mm(value: str, unit: str | None) -> float:
    number = float(value)
    if unit and unit.lower() in ("cm", "厘米"):
        number *= 10
    return round(number, 6)


def parse_size_mm(text: str) -> float | None:
    """Largest diameter mentioned in ``text``, in millimetres (ranges take the upper bound)."""
    best = None
    for m in _SIZE_RE.finditer(text):
        trailing_unit = m.group(2)
        for num, unit in _NUM_UNIT_RE.findall(m.group(1)):
            mm = _to_mm(num, unit or trailing_unit)
            best = mm if best is None else max(best, mm)
    return best


def parse_count(text: str) -> int | None:
    m = _COUNT_RE.search(text)
    if m:
        token = (m.group(1) or m.group(2)).lower()
        return int(token) if token.isdigit() else _WORD_COUNTS[token]
    if _MULTIPLE_RE.search(text):
        return None
    return 1


def split_clauses(text: str) -> list[tuple[int, int]]:
    """Character spans of sentence-like clauses."""
    spans = []
    start = 0
    n = len(text)
    for i, ch in enumerate(text):
        end_here = ch in "。；;\n！!？?" or (ch == "." and (i + 1 == n or text[i + 1].isspace()))
        if end_here:
            if text[start:i].strip():
                spans.append((start, i))
            start = i + 1
    if text[start:].strip():
        spans.append((start, n))
    return spans


@dataclass
class _Mention:
    kind: str
    canonical: str
    side: str | None
    head: str  # mass | nodule | node | "" for others
    size_mm: float | None
    count: int | None
    hedge: str | None
    span: tuple[int, int, int]
    raw: str


def _clause_mentions(clause: str, doc_index: int, offset: int, lexicon: Lexicon, hedge_hint: str | None = None) -> list[_Mention]:
    hedge_m = _HEDGE_RE.search(clause)
    hedge = hedge_m.group(0) if hedge_m else hedge_hint
    scrubbed = _HEDGE_RE.sub(" ", clause)
    if _NEGATION_RE.search(scrubbed):
        return []
    span = (doc_index, offset, offset + len(clause))
    size = parse_size_mm(clause)
    count = parse_count(clause)
    out: list[_Mention] = []

    for _, _, raw, canonical in lexicon.find(clause, ("marker",)):
        out.append(_Mention("marker", canonical, None, "", None, 1, hedge, span, raw))
    if out:
        return out
    for _, _, raw, canonical in lexicon.find(clause, ("serosa",)):
        out.append(_Mention("serosa", canonical, None, "", None, 1, hedge, span, raw))

    node_head = _NODE_HEAD_RE.search(clause)
    if node_head:
        for atom in tokenize_atoms(clause, ("node",), lexicon):
            out.append(_Mention("node", atom.canonical, atom.side, "node", size, 1, hedge, span, atom.text))
        for atom in tokenize_atoms(clause, ("organ",), lexicon):
            out.append(_Mention("organ", atom.canonical, atom.side, "", None, 1, hedge, span, atom.text))
        return out

    if _INVASION_RE.search(clause):
        # the lesion itself may share the sentence ("mass ... invading the chest wall")
        lobe_atoms = tokenize_atoms(clause, ("lobe",), lexicon)
        if lobe_atoms and (_MASS_HEAD_RE.search(clause) or _NODULE_HEAD_RE.search(clause)):
            head = "mass" if _MASS_HEAD_RE.search(clause) else "nodule"
            a = lobe_atoms[0]
            out.append(_Mention("lobe", a.canonical, a.side, head, size, 1, hedge, span, a.text))
        for atom in tokenize_atoms(clause, ("invasion",), lexicon):
            out.append(_Mention("invasion", atom.canonical, atom.side, "", None, 1, hedge, span, atom.text))
        return out

    lobe_atoms = tokenize_atoms(clause, ("lobe",), lexicon)
    if lobe_atoms and (_MASS_HEAD_RE.search(clause) or _NODULE_HEAD_RE.search(clause)):
        head = "mass" if _MASS_HEAD_RE.search(clause) else "nodule"
        for a in lobe_atoms:
            out.append(_Mention("lobe", a.canonical, a.side, head, size if len(lobe_atoms) == 1 else None, 1, hedge, span, a.text))
        return out

    if not any(m.kind == "serosa" for m in out):
        organ_atoms = tokenize_atoms(clause, ("organ",), lexicon)
        for a in organ_atoms:
            out.append(
                _Mention("organ", a.canonical, a.side, "", size if len(organ_atoms) == 1 else None,
                         count if len(organ_atoms) == 1 else 1, hedge, span, a.text)
            )
    return out


def _diagnosis_side(texts: Iterable[str]) -> PrimarySide:
    for text in texts:
        m = _DIAGNOSIS_SIDE_RE.search(text)
        if m:
            word = (m.group(1) or m.group(2)).lower()
            return PrimarySide.Right if word in ("right", "右") else PrimarySide.Left
    return PrimarySide.Unknown


def _site_name(canonical: str, side: str | None, head: str) -> str:
    ns, base = canonical.split(":", 1)
    prefix = f"{side}-" if side and canonical in PAIRED else ""
    if ns == "lobe":
        return f"{prefix}{base}-lobe-{head}"
    if ns == "node":
        return f"{prefix}{base}-node"
    if ns == "serosa":
        return f"{prefix}{'pleura' if base == 'pleural' else 'pericardium'}"
    if ns == "marker":
        return "regional-nodes"
    return f"{prefix}{base}"


def _node_descriptor(base: str, laterality: Laterality) -> str | None:
    if base == "subcarinal":
        return "subcarinal"
    if base == "supraclavicular":
        return "supraclavicular"
    if base in NON_REGIONAL_NODES:
        return "non-regional-node"
    if laterality is Laterality.Ipsilateral:
        return f"ipsilateral-{base}"
    if laterality is Laterality.Contralateral:
        station = f"contralateral-{base}"
        return station if station in REGIONAL_STATIONS else "non-regional-node"
    return None


def build_findings(mentions: list[_Mention], primary_side: PrimarySide) -> tuple[NormalizedFinding, ...]:
    """Anchor mentions to the primary side and attach routing descriptors."""
    lobes = [m for m in mentions if m.kind == "lobe"]
    primary = None
    for pick in (
        lambda m: m.head == "mass" and m.hedge is None,
        lambda m: m.hedge is None,
        lambda m: True,
    ):
        primary = next((m for m in lobes if pick(m)), None)
        if primary is not None:
            break
    primary_lobe = (absolute_side(primary.side, primary_side), primary.canonical) if primary else None

    findings: list[NormalizedFinding] = []
    primary_index = None
    for m in mentions:
        if m.kind == "invasion" and m.side is None and m.canonical in PAIRED:
            # direct extension from the primary stays on the primary's side
            m = replace(m, side="ipsilateral")
        lat = anchor(m.side, m.canonical, primary_side)
        side = absolute_side(m.side, primary_side)
        certainty = Certainty.Uncertain if m.hedge else Certainty.Confirmed
        descriptors: set[str] = set()
        ns, base = m.canonical.split(":", 1)
        if ns == "lobe":
            same_lobe = primary_lobe is not None and (side, m.canonical) == primary_lobe
            if m is primary or (same_lobe and m.head == "mass"):
                if primary_index is not None and not m.hedge:
                    # another report of the primary tumour: keep the larger diameter
                    prev = findings[primary_index]
                    if m.size_mm is not None and (prev.size_mm is None or m.size_mm > prev.size_mm) and not m.hedge:
                        findings[primary_index] = replace(prev, size_mm=m.size_mm)
                    continue
                descriptors.add("primary-tumor")
                if primary_index is None:
                    primary_index = len(findings)
            elif same_lobe:
                descriptors.add("separate-nodule-same-lobe")
            elif lat is Laterality.Ipsilateral:
                descriptors.add("separate-nodule-other-ipsilateral-lobe")
            elif lat is Laterality.Contralateral:
                descriptors.add("contralateral-lung-nodule")
        elif ns == "node":
            tag = _node_descriptor(base, lat)
            if tag:
                descriptors.add(tag)
        elif ns == "invasion":
            descriptors.add(INVASION_DESCRIPTORS[base])
        elif ns == "organ":
            descriptors.add(f"extrathoracic-{base}")
        elif ns == "serosa":
            descriptors.add(SEROSA_DESCRIPTORS[base])
        elif ns == "marker":
            descriptors.add(base)
        findings.append(
            NormalizedFinding(
                site=_site_name(m.canonical, side, m.head),
                laterality=lat,
                size_mm=m.size_mm,
                descriptors=frozenset(descriptors),
                certainty=certainty,
                source_span=m.span,
                hedge=m.hedge,
                lesion_count=m.count if ns == "organ" else 1,
                kind=ns,
            )
        )
    return tuple(_merge_cross_document(findings))


def _merge_cross_document(findings: list[NormalizedFinding]) -> list[NormalizedFinding]:
    # the same distant lesion is often restated by a second report
    out: list[NormalizedFinding] = []
    for f in findings:
        dup = next(
            (
                i for i, g in enumerate(out)
                if f.kind in ("organ", "serosa") and g.kind == f.kind and g.site == f.site
                and g.certainty is f.certainty and g.source_span[0] != f.source_span[0]
            ),
            None,
        )
        if dup is None:
            out.append(f)
            continue
        g = out[dup]
        counts = (g.lesion_count, f.lesion_count)
        out[dup] = replace(g, lesion_count=None if None in counts else max(counts))
    return out


def _mentions_from_text(text: str, doc_index: int, lexicon: Lexicon) -> list[_Mention]:
    mentions = []
    for start, end in split_clauses(text):
        mentions.extend(_clause_mentions(text[start:end], doc_index, start, lexicon))
    return mentions


def _primary_side_from(mentions: list[_Mention], texts: list[str]) -> PrimarySide:
    for pick in (lambda m: m.head == "mass" and m.hedge is None, lambda m: m.hedge is None):
        for m in mentions:
            if m.kind == "lobe" and m.side in ("right", "left") and pick(m):
                return PrimarySide(m.side.capitalize())
    return _diagnosis_side(texts)


def normalize_case(case: CaseRecord, lexicon: Lexicon | None = None) -> Normalized:
    """Deterministic lexicon normalizer over the text of every document."""
    lexicon = lexicon or Lexicon.default()
    mentions: list[_Mention] = []
    texts = []
    for i, doc in enumerate(case.documents):
        if doc.text:
            texts.append(doc.text)
            mentions.extend(_mentions_from_text(doc.text, i, lexicon))
    side = _primary_side_from(mentions, texts)
    return Normalized(build_findings(mentions, side), side)


# -- backend-driven normalizer ---------------------------------------------------


class ExtractedStatement(BaseModel):
    text: str
    document: int = 0
    certainty: str = "confirmed"
    hedge: str | None = None


class ExtractionReply(BaseModel):
    primary_side: str = "Unknown"
    findings: list[ExtractedStatement] = Field(default_factory=list)


def case_parts(case: CaseRecord, input_mode: str = "TextOnly") -> list:
    parts = []
    for i, doc in enumerate(case.documents):
        header = f"[Document {i} | modality {doc.modality.value}]"
        if input_mode == "ImageDirect":
            parts.append(text_part(header))
            parts.extend(image_part(ref) for ref in doc.image_refs)
        else:
            parts.append(text_part(f"{header}\n{doc.text or ''}"))
    return parts


def normalize_reports(
    case: CaseRecord,
    backend: Backend,
    template: str | None = None,
    language: str | None = None,
    input_mode: str = "TextOnly",
    lexicon: Lexicon | None = None,
) -> Normalized:
    """Backend rewrites the reports into atomic statements; each is canonicalized."""
    lexicon = lexicon or Lexicon.default()
    language = language or case.language.value
    system = template if template is not None else render_prompt("extract", language)
    parts = [text_part(f"Case ID: {case.id}")] + case_parts(case, input_mode)
    response = backend.complete(user_request(system, parts, tag="extract"))
    try:
        reply = parse_structured(response.text, ExtractionReply)
    except StructuredOutputError as exc:
        raise NormalizationParseError(str(exc)) from exc

    mentions: list[_Mention] = []
    for item in reply.findings:
        doc_index = item.document if 0 <= item.document < len(case.documents) else 0
        doc_text = case.documents[doc_index].text or "" if case.documents else ""
        pos = doc_text.find(item.text)
        start = pos if pos >= 0 else 0
        hint = None
        if item.certainty.lower() == "uncertain":
            hint = item.hedge or "uncertain"
        found = _clause_mentions(item.text, doc_index, 0, lexicon, hedge_hint=hint)
        for m in found:
            m.span = (doc_index, start, start + len(item.text)) if pos >= 0 else (doc_index, 0, 0)
        mentions.extend(found)
    texts = [d.text for d in case.documents if d.text]
    side = _primary_side_from(mentions, texts)
    if side is PrimarySide.Unknown and reply.primary_side.capitalize() in ("Left", "Right"):
        side = PrimarySide(reply.primary_side.capitalize())
    return Normalized(build_findings(mentions, side), side)


# -- pool dispatch --------------------------------------------------------------

_POOL_OF = {**{d: "T" for d in T_DESCRIPTORS}, **{d: "N" for d in N_DESCRIPTORS}, **{d: "M" for d in M_DESCRIPTORS}}


@dataclass(frozen=True)
class UnclassifiableFinding:
    site: str
    finding: NormalizedFinding


def dispatch_pools(findings: Iterable[NormalizedFinding], primary_side: PrimarySide | str) -> EvidencePools:
    """Route each finding into exactly one of e_t / e_n / e_m, or the side list."""
    pools: dict[str, list[NormalizedFinding]] = {"T": [], "N": [], "M": []}
    leftover: list[NormalizedFinding] = []
    for f in findings:
        targets = {_POOL_OF[d] for d in f.descriptors if d in _POOL_OF}
        if len(targets) == 1:
            pools[targets.pop()].append(f)
        else:
            leftover.append(f)
    return EvidencePools(
        tuple(pools["T"]), tuple(pools["N"]), tuple(pools["M"]), PrimarySide(primary_side), tuple(leftover)
    )
