"""Synthetic cases with known staging and treatment labels.

Each case is sampled as (T, N, M) plus a patient profile, and then written out
as plain templated report text in English or Chinese. The templates only use
phrasings the lexicon normalizer reads, so the rule pipeline should recover
the sampled labels exactly when no uncertainty is injected. Hedged findings
are only injected when confirming them would raise the overall stage.
"""

from __future__ import annotations

import json
import random
import re
from dataclasses import dataclass, field
from pathlib import Path

from .aggregation import aggregate_stage
from .backend import ScriptRule
from .cases import CaseDocument, CaseRecord, GoldStaging, GoldTreatment, Language, Modality
from .categories import MCategory, NCategory, OverallStage, TCategory
from .expert import default_guidelines, localized_drug
from .normalize import split_clauses
from .routing import (
    Burden,
    DriverGene,
    DriverStatus,
    Histology,
    PdL1,
    ProfileVector,
    Resection,
    ScenarioId,
    check_missing_critical,
    default_routing,
    route_scenario,
)
from .staging import default_rules

# a 1x1 transparent PNG, used when image inputs are requested
PLACEHOLDER_PNG = (
    "data:image/png;base64,iVBORw0KGgoAAAANSUhEUgAAAAEAAAABCAQAAAC1HAwCAAAAC0lEQVR42mNkYAAAAAYAAjCB0C8AAAAASUVORK5CYII="
)


def _uniform(enum_cls, skip: tuple[str, ...] = ()) -> dict[str, float]:
    return {c.value: (0.0 if c.value in skip else 1.0) for c in enum_cls}


@dataclass(frozen=True)
class GenParams:
    seed: int = 0
    language: str = "EN"
    uncertainty_rate: float = 0.0
    modality_dropout_rate: float = 0.0
    t_weights: dict = field(default_factory=lambda: _uniform(TCategory, ("Tx",)))
    n_weights: dict = field(default_factory=lambda: _uniform(NCategory, ("Nx",)))
    m_weights: dict = field(default_factory=lambda: _uniform(MCategory))
    distractors: bool = False
    with_images: bool = False
    id_prefix: str = "syn"

    def __post_init__(self):
        if Language(self.language.upper()) is None:  # pragma: no cover - Language raises first
            raise ValueError("language")
        for name in ("uncertainty_rate", "modality_dropout_rate"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {value}")
        for name, cls in (("t_weights", TCategory), ("n_weights", NCategory), ("m_weights", MCategory)):
            weights = getattr(self, name)
            for key, w in weights.items():
                cls(key)
                if w < 0:
                    raise ValueError(f"{name}[{key}] is negative")
            if sum(weights.values()) <= 0:
                raise ValueError(f"{name} must have a positive total")

    @classmethod
    def from_dict(cls, data: dict) -> "GenParams":
        return cls(**data)


# -- vocabulary ----------------------------------------------------------------------

LOBES = {"right": ("upper", "middle", "lower"), "left": ("upper", "lower")}
_ZH_LOBE = {"upper": "上", "middle": "中", "lower": "下"}
_ZH_SIDE = {"right": "右", "left": "左"}

# descriptor -> (EN sentence, ZH sentence, category reached)
INVASIONS = {
    "visceral-pleura": ("The mass invades the visceral pleura.", "肿块侵犯脏层胸膜。", TCategory.T2a),
    "main-bronchus": ("The tumour involves the main bronchus.", "肿块累及主支气管。", TCategory.T2a),
    "atelectasis": ("Obstructive atelectasis is seen distal to the tumour.", "远端见阻塞性肺不张。", TCategory.T2a),
    "chest-wall": ("The mass invades the chest wall.", "肿块侵犯胸壁。", TCategory.T3),
    "parietal-pleura": ("The mass invades the parietal pleura.", "肿块侵犯壁层胸膜。", TCategory.T3),
    "phrenic-nerve": ("The tumour involves the phrenic nerve.", "肿块累及膈神经。", TCategory.T3),
    "parietal-pericardium": ("The mass invades the parietal pericardium.", "肿块侵犯壁层心包。", TCategory.T3),
    "diaphragm": ("The mass invades the diaphragm.", "肿块侵犯膈肌。", TCategory.T4),
    "mediastinum": ("The mass invades the mediastinum.", "肿块侵犯纵隔。", TCategory.T4),
    "heart": ("The mass invades the heart.", "肿块侵犯心脏。", TCategory.T4),
    "great-vessels": ("The mass invades the aorta.", "肿块侵犯主动脉。", TCategory.T4),
    "trachea": ("The tumour invades the trachea.", "肿块侵犯气管。", TCategory.T4),
    "carina": ("The tumour invades the carina.", "肿块侵犯隆突。", TCategory.T4),
    "esophagus": ("The mass invades the esophagus.", "肿块侵犯食管。", TCategory.T4),
}

_HEDGED_INVASIONS = {
    "visceral-pleura": ("Possible visceral pleural invasion.", "脏层胸膜可疑受侵。"),
    "chest-wall": ("Invasion of the chest wall cannot be excluded.", "胸壁受侵不除外。"),
    "mediastinum": ("Suspicious invasion of the mediastinum.", "纵隔可疑受侵。"),
    "great-vessels": ("Possible invasion of the aorta.", "主动脉受侵不除外。"),
}

# node station -> category, with the side it is written on relative to the primary
STATIONS = {
    "ipsilateral-hilar": (NCategory.N1, "ipsi"),
    "ipsilateral-peribronchial": (NCategory.N1, "ipsi"),
    "ipsilateral-mediastinal": (NCategory.N2, "ipsi"),
    "subcarinal": (NCategory.N2, None),
    "contralateral-mediastinal": (NCategory.N3, "contra"),
    "contralateral-hilar": (NCategory.N3, "contra"),
    "supraclavicular": (NCategory.N3, "any"),
}

_NODE_EN = {
    "hilar": "An enlarged {side} hilar lymph node measures {size}.",
    "peribronchial": "Enlarged {side} peribronchial lymph node, {size}.",
    "mediastinal": "Enlarged {side} paratracheal lymph node, {size}.",
    "subcarinal": "Enlarged subcarinal lymph node, {size}.",
    "supraclavicular": "Enlarged {side} supraclavicular lymph node, {size}.",
}
_NODE_ZH = {
    "hilar": "{side}肺门见肿大淋巴结，短径约{size}。",
    "peribronchial": "{side}侧支气管旁淋巴结肿大，约{size}。",
    "mediastinal": "{side}侧气管旁淋巴结肿大，约{size}。",
    "subcarinal": "隆突下淋巴结肿大，约{size}。",
    "supraclavicular": "{side}锁骨上淋巴结肿大，约{size}。",
}
_HEDGED_NODE_EN = {
    "hilar": "A {size} {side} hilar lymph node is suspicious for metastasis.",
    "peribronchial": "A {size} {side} peribronchial lymph node is suspicious for metastasis.",
    "mediastinal": "A {size} {side} paratracheal lymph node is suspicious for metastasis.",
    "subcarinal": "A {size} subcarinal lymph node is suspicious for metastasis.",
    "supraclavicular": "A {size} {side} supraclavicular lymph node is suspicious for metastasis.",
}
_HEDGED_NODE_ZH = {
    "hilar": "{side}肺门淋巴结可疑转移，约{size}。",
    "peribronchial": "{side}侧支气管旁淋巴结可疑转移，约{size}。",
    "mediastinal": "{side}侧气管旁淋巴结可疑转移，约{size}。",
    "subcarinal": "隆突下淋巴结可疑转移，约{size}。",
    "supraclavicular": "{side}锁骨上淋巴结可疑转移，约{size}。",
}

# extrathoracic sites: (EN name, ZH name, paired, supplementary-report site)
ORGAN_SITES = {
    "liver": ("liver", "肝脏", False, False),
    "adrenal": ("adrenal gland", "肾上腺", True, False),
    "bone": ("bone", "骨", False, True),
    "brain": ("brain", "颅内", False, True),
    "kidney": ("kidney", "肾", True, False),
    "spleen": ("spleen", "脾", False, False),
}
NON_REGIONAL = {"axillary": "腋窝", "cervical": "颈部", "retroperitoneal": "腹膜后"}


# -- sampling helpers --------------------------------------------------------------------


def _pick(rng: random.Random, weights: dict, cls):
    keys = sorted(weights, key=lambda k: cls(k).rank)
    return cls(rng.choices(keys, [weights[k] for k in keys])[0])


def _band_sample(rng: random.Random, t: TCategory) -> int:
    for band in default_rules().t_size_mm:
        if band.category is t:
            lo = int(band.lo) + 1
            hi = int(band.hi) if band.hi is not None else 95
            return rng.randint(lo, hi)
    raise ValueError(f"no size band for {t.value}")


def _size(mm: int, zh: bool, rng: random.Random) -> str:
    if mm < 10 or rng.random() < 0.3:
        return f"{mm}mm" if zh else f"{mm} mm"
    text = f"{mm / 10:g}"
    if rng.random() < 0.4:
        other = max(1, mm - rng.randint(1, 8))
        text = f"{text}×{other / 10:g}" if zh else f"{text} x {other / 10:g}"
    return f"{text}cm" if zh else f"{text} cm"


def _lobe(side: str, lobe: str, zh: bool) -> str:
    return f"{_ZH_SIDE[side]}肺{_ZH_LOBE[lobe]}叶" if zh else f"{side} {lobe} lobe"


def _side_word(side: str, zh: bool) -> str:
    return _ZH_SIDE[side] if zh else side


def _other(side: str) -> str:
    return "left" if side == "right" else "right"


@dataclass
class _Sentence:
    text: str
    modality: Modality
    staging: bool = True


@dataclass
class _Distant:
    key: str  # distinct organ key for burden counting
    count: int | None  # None: "multiple"


class _Builder:
    """Accumulates report sentences, evidence notes and the M bookkeeping for one case."""

    def __init__(self, rng: random.Random, zh: bool, side: str | None):
        self.rng = rng
        self.zh = zh
        self.side = side
        self.sentences: list[_Sentence] = []
        self.evidence: list[str] = []
        self.distant: list[_Distant] = []
        self.m1a = False
        self.uncertain: list[str] = []

    def add(self, text: str, modality: Modality = Modality.Imaging, staging: bool = True) -> None:
        self.sentences.append(_Sentence(text, modality, staging))


# -- T ---------------------------------------------------------------------------------

_T_DESCRIPTOR_OPTIONS = {
    TCategory.T2a: ["visceral-pleura", "main-bronchus", "atelectasis"],
    TCategory.T3: ["chest-wall", "parietal-pleura", "phrenic-nerve", "parietal-pericardium", "separate-same-lobe"],
    TCategory.T4: ["diaphragm", "mediastinum", "heart", "great-vessels", "trachea", "carina", "esophagus", "separate-other-lobe"],
}
_SIZED = [TCategory.T1a, TCategory.T1b, TCategory.T1c, TCategory.T2a, TCategory.T2b, TCategory.T3, TCategory.T4]


def _write_t(b: _Builder, t: TCategory) -> str | None:
    """Primary tumour sentences; returns the primary lobe."""
    rng, zh = b.rng, b.zh
    if t is TCategory.Tx:
        b.add(
            f"支气管灌洗细胞学查见癌细胞，临床诊断{_ZH_SIDE[b.side]}肺癌。影像学未见明确原发灶。"
            if zh
            else f"Bronchial washing cytology confirms {b.side} lung carcinoma. No primary lesion is visible on imaging.",
            Modality.Clinical,
        )
        b.evidence.append("Tx: malignant cytology without a visible primary")
        return None
    lobe = rng.choice(LOBES[b.side])
    descriptor = None
    if t in _T_DESCRIPTOR_OPTIONS and rng.random() < 0.5:
        descriptor = rng.choice(_T_DESCRIPTOR_OPTIONS[t])
        smaller = [c for c in _SIZED if c < t and c <= TCategory.T2b]
        mm = _band_sample(rng, rng.choice(smaller))
    else:
        mm = _band_sample(rng, t)
    size = _size(mm, zh, rng)
    where = _lobe(b.side, lobe, zh)
    b.add(f"CT示{where}见一肿块，大小约{size}。" if zh else f"CT shows a {size} mass in the {where}.")
    b.evidence.append(f"primary {where} {mm} mm")
    if descriptor == "separate-same-lobe":
        nod = _size(rng.randint(4, 9), zh, rng)
        b.add(f"{where}另见一{nod}结节。" if zh else f"A separate {nod} nodule is seen in the {where}.")
        b.evidence.append(f"{t.value}: separate nodule in the same lobe")
    elif descriptor == "separate-other-lobe":
        other = rng.choice([lb for lb in LOBES[b.side] if lb != lobe])
        nod = _size(rng.randint(4, 9), zh, rng)
        there = _lobe(b.side, other, zh)
        b.add(f"{there}另见一{nod}结节。" if zh else f"A separate {nod} nodule is seen in the {there}.")
        b.evidence.append(f"{t.value}: separate nodule in another ipsilateral lobe")
    elif descriptor is not None:
        en, zh_text, _ = INVASIONS[descriptor]
        b.add(zh_text if zh else en)
        b.evidence.append(f"{t.value}: {descriptor} invasion")
    else:
        b.evidence.append(f"{t.value}: size {mm} mm")
    return lobe


# -- N ---------------------------------------------------------------------------------


def _node_sentence(b: _Builder, station: str, hedged: bool = False) -> str:
    _, rel = STATIONS[station]
    base = station.split("-", 1)[1] if "-" in station else station
    if rel == "ipsi":
        side = b.side
    elif rel == "contra":
        side = _other(b.side)
    else:
        side = b.rng.choice(("right", "left"))
    size = _size(b.rng.randint(8, 22), b.zh, b.rng)
    table = (_HEDGED_NODE_ZH if b.zh else _HEDGED_NODE_EN) if hedged else (_NODE_ZH if b.zh else _NODE_EN)
    return table[base].format(side=_side_word(side, b.zh), size=size)


def _write_n(b: _Builder, n: NCategory) -> None:
    zh = b.zh
    if n is NCategory.Nx:
        b.add("区域淋巴结无法评估。" if zh else "Regional lymph nodes cannot be assessed.")
        b.evidence.append("Nx: regional nodes not assessable")
        return
    if n is NCategory.N0:
        b.add("双侧肺门及纵隔未见肿大淋巴结。" if zh else "No enlarged hilar or mediastinal lymph nodes.")
        b.evidence.append("N0: no regional nodal disease")
        return
    at_level = [s for s, (c, _) in STATIONS.items() if c is n]
    station = b.rng.choice(at_level)
    b.add(_node_sentence(b, station))
    lower = [s for s, (c, _) in STATIONS.items() if c < n]
    if lower and b.rng.random() < 0.4:
        b.add(_node_sentence(b, b.rng.choice(lower)))
    b.evidence.append(f"{n.value}: {station} node")


# -- M ---------------------------------------------------------------------------------


def _organ_sentence(b: _Builder, organ: str, count: int | None, hedged: bool = False) -> tuple[str, Modality]:
    en, zh_name, paired, supplementary = ORGAN_SITES[organ]
    zh, rng = b.zh, b.rng
    modality = Modality.Supplementary if supplementary else Modality.Imaging
    side = rng.choice(("right", "left")) if paired else None
    if zh:
        where = f"{_ZH_SIDE[side]}{zh_name}" if side else zh_name
        if hedged:
            text = f"{where}多发病灶，转移可能。" if count is None else f"{where}可疑转移灶，约{_size(rng.randint(5, 15), True, rng)}。"
        elif count is None:
            text = f"{where}多发转移灶。"
        elif count == 1:
            text = f"{where}见单发转移灶，大小约{_size(rng.randint(8, 30), True, rng)}。"
        else:
            text = f"{where}见{count}处转移灶，最大约{_size(rng.randint(8, 30), True, rng)}。"
        return text, modality
    where = f"the {side} {en}" if side else f"the {en}"
    if hedged:
        if count is None:
            return f"Multiple lesions in {where}, possibly metastatic.", modality
        return f"Possible metastasis in {where}, {_size(rng.randint(5, 15), False, rng)}.", modality
    if count is None:
        return f"Multiple metastases in {where}.", modality
    if count == 1:
        return f"A solitary {_size(rng.randint(8, 30), False, rng)} metastasis in {where}.", modality
    words = {2: "Two", 3: "Three", 4: "Four", 5: "Five"}
    return f"{words[count]} metastases in {where}, the largest {_size(rng.randint(8, 30), False, rng)}.", modality


def _write_m1a(b: _Builder, primary_lobe: str | None) -> None:
    zh, rng = b.zh, b.rng
    options = ["pleural", "pericardial"] + (["contralateral"] if primary_lobe is not None else [])
    kind = rng.choice(options)
    if kind == "contralateral":
        side = _other(b.side)
        where = _lobe(side, rng.choice(LOBES[side]), zh)
        nod = _size(rng.randint(5, 15), zh, rng)
        b.add(f"{where}见一{nod}结节。" if zh else f"A {nod} nodule is seen in the {where}.")
        b.distant.append(_Distant(f"contralateral-{where}", 1))
    elif kind == "pleural":
        b.add("胸水细胞学证实恶性胸腔积液。" if zh else "Malignant pleural effusion confirmed by cytology.")
        b.distant.append(_Distant("pleura", 1))
    else:
        b.add("超声示恶性心包积液。" if zh else "Malignant pericardial effusion on echocardiography.")
        b.distant.append(_Distant("pericardium", 1))
    b.m1a = True
    b.evidence.append(f"M1a: {kind} disease")


def _write_extrathoracic(b: _Builder, total: str) -> None:
    rng = b.rng
    organs = list(ORGAN_SITES)
    if total == "single":
        if rng.random() < 0.2:
            node = rng.choice(list(NON_REGIONAL))
            side = rng.choice(("right", "left"))
            size = _size(rng.randint(10, 25), b.zh, rng)
            b.add(
                f"{_ZH_SIDE[side]}侧{NON_REGIONAL[node]}淋巴结肿大，约{size}，考虑转移。" if b.zh
                else f"Enlarged {side} {node} lymph node, {size}, consistent with metastasis.",
                Modality.Supplementary,
            )
            b.distant.append(_Distant(f"{node}-node", 1))
            b.evidence.append(f"M1b: single non-regional {node} node")
            return
        organ = rng.choice(organs)
        text, modality = _organ_sentence(b, organ, 1)
        b.add(text, modality)
        b.distant.append(_Distant(organ, 1))
        b.evidence.append(f"M1b: single {organ} metastasis")
        return
    style = rng.choice(("multiple", "counted", "two-organs"))
    if style == "two-organs":
        for organ in rng.sample(organs, 2):
            text, modality = _organ_sentence(b, organ, 1)
            b.add(text, modality)
            b.distant.append(_Distant(organ, 1))
        b.evidence.append("M1c: lesions in two organs")
        return
    organ = rng.choice(organs)
    count = None if style == "multiple" else rng.randint(2, 5)
    text, modality = _organ_sentence(b, organ, count)
    b.add(text, modality)
    b.distant.append(_Distant(organ, count))
    b.evidence.append(f"M1c: {'multiple' if count is None else count} {organ} metastases")


def _write_m(b: _Builder, m: MCategory, primary_lobe: str | None) -> None:
    if m is MCategory.M0:
        b.add("全身检查未见远处转移。" if b.zh else "No distant metastasis on staging work-up.", Modality.Supplementary)
        b.evidence.append("M0: no distant metastasis")
    elif m is MCategory.M1a:
        _write_m1a(b, primary_lobe)
    elif m is MCategory.M1b:
        _write_extrathoracic(b, "single")
    else:
        _write_extrathoracic(b, "multiple")


def _extrathoracic_total(distant: list[_Distant]) -> int:
    total = 0
    for d in distant:
        if d.key in ("pleura", "pericardium") or d.key.startswith("contralateral-"):
            continue
        total += 2 if d.count is None else d.count
    return total


def _m_from(total: int, m1a: bool) -> MCategory:
    if total == 0:
        return MCategory.M1a if m1a else MCategory.M0
    return MCategory.M1b if total == 1 else MCategory.M1c


# -- uncertainty ----------------------------------------------------------------------


def _inject_uncertainty(b: _Builder, tnm: tuple[TCategory, NCategory, MCategory]) -> None:
    """Add one hedged finding whose confirmation would raise the overall stage."""
    t, n, m = tnm
    base = aggregate_stage(t, n, m)
    if not base.determinate:
        return
    candidates = []
    for desc in _HEDGED_INVASIONS:
        cat = INVASIONS[desc][2]
        if cat > t:
            candidates.append(("T", desc, (cat, n, m)))
    for station, (cat, _) in STATIONS.items():
        if cat > n:
            candidates.append(("N", station, (t, cat, m)))
    total = _extrathoracic_total(b.distant)
    for organ in ORGAN_SITES:
        for count in (1, None):
            added = 2 if count is None else 1
            candidates.append(("M", (organ, count), (t, n, _m_from(total + added, b.m1a))))
    b.rng.shuffle(candidates)
    for dim, what, projected in candidates:
        stage = aggregate_stage(*projected)
        if not stage.determinate or not stage > base:
            continue
        if dim == "T":
            en, zh = _HEDGED_INVASIONS[what]
            b.add(zh if b.zh else en)
        elif dim == "N":
            b.add(_node_sentence(b, what, hedged=True))
        else:
            organ, count = what
            if any(d.key == organ for d in b.distant):
                continue  # keep hedged lesions on organs without confirmed disease
            text, modality = _organ_sentence(b, organ, count, hedged=True)
            b.add(text, modality)
        b.uncertain.append(f"{dim}:{what if isinstance(what, str) else what[0]}->{stage.value}")
        return


# -- profile --------------------------------------------------------------------------


_HISTOLOGY_TEXT = {
    Histology.Adenocarcinoma: ("invasive adenocarcinoma", "浸润性腺癌"),
    Histology.Squamous: ("squamous cell carcinoma", "鳞状细胞癌"),
    Histology.OtherNSCLC: ("large cell carcinoma", "大细胞癌"),
    Histology.SCLC: ("small cell carcinoma", "小细胞癌"),
}
_DRIVER_TEXT = {
    DriverGene.EGFR: ("EGFR exon 19 deletion detected.", "EGFR 19外显子缺失突变。"),
    DriverGene.ALK: ("ALK rearrangement positive.", "ALK融合阳性。"),
    DriverGene.ROS1: ("ROS1 fusion detected.", "ROS1融合阳性。"),
    DriverGene.KRAS_G12C: ("KRAS G12C mutation detected.", "KRAS G12C突变。"),
    DriverGene.Other: ("BRAF V600E mutation detected.", "BRAF V600E突变。"),
}
_PRIOR = {
    True: ("carboplatin plus pemetrexed", "卡铂联合培美曲塞"),
    False: ("osimertinib", "奥希替尼"),
}


@dataclass
class _ProfileDraft:
    histology: Histology
    driver_status: DriverStatus
    driver_gene: DriverGene | None
    pd_l1: PdL1
    ps: int | None
    resection: Resection
    prior: tuple[str, ...]
    intent: bool


def _draft_profile(rng: random.Random, stage: OverallStage, zh: bool) -> _ProfileDraft:
    histology = rng.choices(
        [Histology.Adenocarcinoma, Histology.Squamous, Histology.OtherNSCLC, Histology.SCLC], [55, 28, 10, 7]
    )[0]
    roll = rng.random()
    if histology is Histology.Adenocarcinoma and roll < 0.45:
        status = DriverStatus.Positive
        gene = rng.choices(list(_DRIVER_TEXT), [45, 20, 10, 15, 10])[0]
    elif roll < 0.85:
        status, gene = DriverStatus.Negative, None
    else:
        status, gene = DriverStatus.Unknown, None
    pd_l1 = rng.choices([PdL1.Negative, PdL1.Low, PdL1.High, PdL1.Unknown], [30, 35, 25, 10])[0]
    ps = rng.choices([0, 1, 2, 3, None], [30, 40, 15, 5, 10])[0]
    resection = Resection.no
    intent = False
    early = stage.determinate and stage <= OverallStage.IIIA and stage is not OverallStage.Occult
    if early and rng.random() < 0.5:
        resection = Resection.yes
    elif stage.determinate and OverallStage.IIA <= stage <= OverallStage.IIIB and rng.random() < 0.5:
        intent = True
    prior: tuple[str, ...] = ()
    if stage in (OverallStage.IVA, OverallStage.IVB) and rng.random() < 0.3:
        text = _PRIOR[status is not DriverStatus.Positive or gene is not DriverGene.EGFR]
        prior = (text[1] if zh else text[0],)
    return _ProfileDraft(histology, status, gene, pd_l1, ps, resection, prior, intent)


def _write_profile(b: _Builder, p: _ProfileDraft, sex: str, age: int) -> None:
    zh, rng = b.zh, b.rng
    C, P = Modality.Clinical, Modality.Pathology
    if zh:
        b.add(f"{'男' if sex == 'M' else '女'}，{age}岁。咳嗽伴痰中带血{rng.randint(1, 6)}月余。", C, False)
    else:
        b.add(f"{'Male' if sex == 'M' else 'Female'}, {age} years. Cough with blood-streaked sputum for {rng.randint(1, 6)} months.", C, False)
    if p.ps is not None:
        b.add(f"ECOG评分{p.ps}分。" if zh else f"ECOG PS {p.ps}.", C, False)
    if p.prior:
        b.add(f"既往系统治疗：{p.prior[0]}。" if zh else f"Prior systemic therapy: {p.prior[0]}.", C, False)
    else:
        b.add("既往系统治疗：无。" if zh else "Prior systemic therapy: none.", C, False)
    if p.resection is Resection.yes:
        b.add("已行肺叶切除术。" if zh else "Status post lobectomy.", C, False)
    else:
        b.add("未行手术。" if zh else "No prior surgery.", C, False)
    if p.intent:
        b.add("胸外科会诊评估可手术切除。" if zh else "Thoracic surgery consult: potentially resectable.", C, False)
    en, zh_text = _HISTOLOGY_TEXT[p.histology]
    b.add(f"病理：{zh_text}。" if zh else f"Biopsy pathology: {en}.", P, False)
    if p.driver_status is DriverStatus.Positive:
        en, zh_text = _DRIVER_TEXT[p.driver_gene]
        b.add(zh_text if zh else en, P, False)
    elif p.driver_status is DriverStatus.Negative:
        b.add("驱动基因检测：EGFR、ALK、ROS1均阴性。" if zh else "Driver gene testing: EGFR, ALK and ROS1 negative.", P, False)
    if p.pd_l1 is PdL1.Negative:
        b.add("PD-L1 TPS <1%。" if zh else "PD-L1 TPS <1%.", P, False)
    elif p.pd_l1 is PdL1.Low:
        b.add(f"PD-L1 TPS {rng.randint(1, 49)}%" + ("。" if zh else "."), P, False)
    elif p.pd_l1 is PdL1.High:
        b.add(f"PD-L1 TPS {rng.randint(50, 95)}%" + ("。" if zh else "."), P, False)


_DISTRACTORS = (
    ("Mild centrilobular emphysema.", "轻度小叶中心型肺气肿。"),
    ("Degenerative changes of the thoracic spine.", "胸椎退行性变。"),
    ("A benign-appearing calcified granuloma is noted.", "见钙化肉芽肿，考虑良性。"),
)


def _burden(distant: list[_Distant], stage: OverallStage) -> Burden:
    if stage not in (OverallStage.IVA, OverallStage.IVB):
        return Burden.None_
    if not distant:
        return Burden.Unknown
    if any(d.count is None for d in distant):
        return Burden.Unknown
    routing = default_routing()
    lesions = sum(d.count for d in distant)
    if lesions <= routing.oligo_max_lesions and len({d.key for d in distant}) <= routing.oligo_max_organs:
        return Burden.Oligo
    return Burden.Wide


_STRATEGY = {
    ScenarioId.PostopEarlyStage: ("Adjuvant therapy after resection", "术后辅助治疗"),
    ScenarioId.NeoadjuvantResectable: ("Neoadjuvant therapy followed by surgery", "新辅助治疗后手术"),
    ScenarioId.Oligometastatic: ("Systemic therapy with local consolidative treatment", "系统治疗联合局部巩固治疗"),
    ScenarioId.AdvDriverPosFirstLine: ("First-line targeted therapy", "一线靶向治疗"),
    ScenarioId.AdvDriverNegFirstLine: ("First-line systemic therapy", "一线系统治疗"),
    ScenarioId.AdvDriverPosLaterLine: ("Later-line therapy after progression", "进展后后线治疗"),
    ScenarioId.AdvDriverNegLaterLine: ("Later-line systemic therapy", "后线系统治疗"),
    ScenarioId.MdtReferral: ("Multidisciplinary team review", "多学科会诊"),
}


def gold_treatment_for(profile: ProfileVector, language: str) -> GoldTreatment:
    """Routed scenario plus its first eligible regimen, in the case language."""
    zh = language.upper() == "ZH"
    scenario = route_scenario(profile)
    subset = default_guidelines()[scenario]
    eligible = subset.eligible_regimens(profile)
    drugs = tuple(localized_drug(d, language) for d in eligible[0].drugs) if eligible else ()
    warnings = check_missing_critical(profile, scenario, default_routing(), language)
    strategy = _STRATEGY[scenario][1 if zh else 0]
    regimen = eligible[0].name if eligible else ("无" if zh else "none")
    if zh:
        reasoning = f"分期{profile.stage.value}，{profile.histology.value}，驱动基因{profile.driver_label}，路由至{scenario.value}，首选{regimen}。"
    else:
        reasoning = (
            f"Stage {profile.stage.value} {profile.histology.value} with driver status {profile.driver_label} "
            f"routes to {scenario.value}; preferred eligible regimen: {regimen}."
        )
    return GoldTreatment(
        strategy=strategy,
        core_regimen=drugs,
        key_considerations="\n".join(w.message for w in warnings),
        reasoning=reasoning,
        extra={"scenario": scenario.value},
    )


# -- assembly -------------------------------------------------------------------------

_DOC_ORDER = (Modality.Clinical, Modality.Imaging, Modality.Pathology, Modality.Supplementary)
_REHOME_PREFERENCE = (Modality.Imaging, Modality.Supplementary, Modality.Clinical, Modality.Pathology)


def generate_case(params: GenParams, index: int) -> CaseRecord:
    rng = random.Random(f"{params.seed}:{index}")
    language = Language(params.language.upper())
    zh = language is Language.ZH
    t = _pick(rng, params.t_weights, TCategory)
    n = _pick(rng, params.n_weights, NCategory)
    m = _pick(rng, params.m_weights, MCategory)
    stage = aggregate_stage(t, n, m)

    b = _Builder(rng, zh, rng.choice(("right", "left")))
    draft = _draft_profile(rng, stage, zh)
    _write_profile(b, draft, rng.choice("MF"), rng.randint(38, 82))
    primary_lobe = _write_t(b, t)
    _write_n(b, n)
    _write_m(b, m, primary_lobe)
    if params.distractors:
        en, zh_text = rng.choice(_DISTRACTORS)
        b.add(zh_text if zh else en, Modality.Imaging, False)
    if params.uncertainty_rate > 0 and rng.random() < params.uncertainty_rate:
        _inject_uncertainty(b, (t, n, m))

    # modality dropout: never all documents; staging evidence moves to a survivor
    present = [mod for mod in _DOC_ORDER if any(s.modality is mod for s in b.sentences)]
    kept = [mod for mod in present if rng.random() >= params.modality_dropout_rate]
    if not kept:
        kept = [rng.choice(present)]
    home = next(mod for mod in _REHOME_PREFERENCE if mod in kept)
    texts: dict[Modality, list[str]] = {mod: [] for mod in kept}
    for s in b.sentences:
        if s.modality in texts:
            texts[s.modality].append(s.text)
        elif s.staging:
            texts[home].append(s.text)
    sep = "" if zh else " "
    documents = tuple(
        CaseDocument(
            mod,
            sep.join(texts[mod]),
            (PLACEHOLDER_PNG,) if params.with_images else (),
        )
        for mod in kept
    )

    visible = "\n".join(sep.join(texts[mod]) for mod in kept)
    lost_clinical = Modality.Clinical not in kept
    lost_pathology = Modality.Pathology not in kept
    profile = ProfileVector(
        histology=Histology.Unknown if lost_pathology else draft.histology,
        driver_status=DriverStatus.Unknown if lost_pathology else draft.driver_status,
        driver_gene=None if lost_pathology else draft.driver_gene,
        pd_l1=PdL1.Unknown if lost_pathology else draft.pd_l1,
        ps_score=None if lost_clinical else draft.ps,
        resection_done=Resection.Unknown if lost_clinical else draft.resection,
        treatment_line=1 if lost_clinical else len(draft.prior) + 1,
        prior_regimens=() if lost_clinical else draft.prior,
        metastatic_burden=_burden(b.distant, stage),
        stage=stage,
        resectable_intent=False if lost_clinical else draft.intent,
    )
    case_id = f"{params.id_prefix}-{params.seed}-{index:05d}"
    gold_staging = GoldStaging(t, n, m, "; ".join(b.evidence))
    extra = {
        "synthetic": {
            "stage": stage.value,
            "primary_side": b.side.capitalize() if b.side else "Unknown",
            "uncertain": list(b.uncertain),
            "dropped": [mod.value for mod in present if mod not in kept],
            "profile": profile.to_dict(),
            "text_chars": len(visible),
        }
    }
    return CaseRecord(case_id, language, documents, gold_staging, gold_treatment_for(profile, language.value), extra)


def generate_suite(n: int, params: GenParams) -> list[CaseRecord]:
    if n < 1:
        raise ValueError("n must be >= 1")
    return [generate_case(params, i) for i in range(n)]


def synthetic_profile(case: CaseRecord) -> dict:
    return case.extra["synthetic"]["profile"]


# -- scripted oracle ------------------------------------------------------------------


def _case_match(case_id: str) -> str:
    return rf"Case ID: {re.escape(case_id)}(?=\s|$)"


def _fenced(payload: dict) -> str:
    return "```json\n" + json.dumps(payload, ensure_ascii=False) + "\n```"


def _shift_n(n: NCategory) -> NCategory:
    return NCategory.N1 if n in (NCategory.N0, NCategory.Nx) else NCategory.N0


def oracle_script(cases: list[CaseRecord], corrupt_every: int = 3) -> list[ScriptRule]:
    """Replayable answers for every request tag the two modes can issue.

    Pipeline agents answer with the labels; the single-prompt baseline gets a
    wrong N category and a diluted regimen on every ``corrupt_every``-th case so
    the two modes score differently.
    """
    rules: list[ScriptRule] = []
    for i, case in enumerate(cases):
        match = _case_match(case.id)
        gs, gt = case.gold_staging, case.gold_treatment
        corrupt = corrupt_every > 0 and i % corrupt_every == 0
        zh = case.language is Language.ZH

        def add(tag: str, payload: dict) -> None:
            rules.append(ScriptRule(tag, match, _fenced(payload), repeat=True))

        statements = []
        for d, doc in enumerate(case.documents):
            for start, end in split_clauses(doc.text or ""):
                statements.append({"text": doc.text[start:end].strip(), "document": d})
        side = case.extra.get("synthetic", {}).get("primary_side", "Unknown")
        add("extract", {"primary_side": side, "findings": statements})
        if gs is not None:
            for dim, cat in zip("tnm", gs.tnm):
                add(f"{dim}-stage", {"category": cat.value, "trace": [{"step": f"label {cat.value}", "refs": []}]})
            n = _shift_n(gs.n) if corrupt else gs.n
            add(
                "direct-staging",
                {"t": gs.t.value, "n": n.value, "m": gs.m.value, "reasoning": f"T {gs.t.value}, N {n.value}, M {gs.m.value}."},
            )
        profile = case.extra.get("synthetic", {}).get("profile")
        if profile is not None:
            status = profile["driver_status"]
            gene = None
            if status.startswith("Positive("):
                gene = status[len("Positive("):-1]
                status = "Positive"
            add(
                "profile",
                {
                    "histology": profile["histology"],
                    "driver_status": status,
                    "driver_gene": gene,
                    "pd_l1": profile["pd_l1"],
                    "ps_score": profile["ps_score"],
                    "resection_done": profile["resection_done"],
                    "prior_regimens": profile["prior_regimens"],
                    "resectable_intent": profile["resectable_intent"],
                },
            )
        if gt is not None:
            add(
                "expert",
                {
                    "strategy": gt.strategy,
                    "core_regimen": list(gt.core_regimen),
                    "key_considerations": gt.key_considerations,
                    "reasoning": gt.reasoning,
                    "cited_blocks": [0],
                },
            )
            drugs = list(gt.core_regimen)
            reasoning = gt.reasoning
            if corrupt:
                drugs = drugs[:1] + (["多西他赛"] if zh else ["docetaxel"])
                reasoning = "经验性治疗。" if zh else "Empirical choice."
            plan = {"strategy": gt.strategy, "core_regimen": drugs, "key_considerations": "", "reasoning": reasoning}
            add("direct-treatment", plan)
            add("direct-e2e", plan)
    return rules


def script_to_dict(rules: list[ScriptRule], name: str = "oracle") -> dict:
    return {
        "name": name,
        "rules": [{"tag": r.tag, "match": r.match, "response": r.response, "repeat": r.repeat} for r in rules],
    }


def write_script(rules: list[ScriptRule], path: str | Path, name: str = "oracle") -> None:
    Path(path).write_text(json.dumps(script_to_dict(rules, name), ensure_ascii=False, indent=1) + "\n", encoding="utf-8")
