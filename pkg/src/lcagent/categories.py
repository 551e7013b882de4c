"""Ordered TNM and overall-stage categories (AJCC 8th edition, lung)."""

from __future__ import annotations

from enum import Enum


class _OrderedCategory(str, Enum):
    """String enum ordered by declaration, parsed case-insensitively."""

    @classmethod
    def _missing_(cls, value):
        if isinstance(value, str):
            key = value.strip().lower()
            for member in cls:
                if member.value.lower() == key:
                    return member
        return None

    @property
    def rank(self) -> int:
        return _RANKS[type(self)][self]

    def _comparable(self, other) -> bool:
        return type(other) is type(self)

    def __lt__(self, other):
        if not self._comparable(other):
            return NotImplemented
        return self.rank < other.rank

    def __le__(self, other):
        if not self._comparable(other):
            return NotImplemented
        return self.rank <= other.rank

    def __gt__(self, other):
        if not self._comparable(other):
            return NotImplemented
        return self.rank > other.rank

    def __ge__(self, other):
        if not self._comparable(other):
            return NotImplemented
        return self.rank >= other.rank

    __hash__ = str.__hash__

    def __str__(self) -> str:
        return self.value


class TCategory(_OrderedCategory):
    # Tx sorts lowest only so it acts as the bottom of a max-combination.
    Tx = "Tx"
    T1a = "T1a"
    T1b = "T1b"
    T1c = "T1c"
    T2a = "T2a"
    T2b = "T2b"
    T3 = "T3"
    T4 = "T4"


class NCategory(_OrderedCategory):
    Nx = "Nx"
    N0 = "N0"
    N1 = "N1"
    N2 = "N2"
    N3 = "N3"


class MCategory(_OrderedCategory):
    M0 = "M0"
    M1a = "M1a"
    M1b = "M1b"
    M1c = "M1c"


class OverallStage(_OrderedCategory):
    Occult = "Occult"
    IA1 = "IA1"
    IA2 = "IA2"
    IA3 = "IA3"
    IB = "IB"
    IIA = "IIA"
    IIB = "IIB"
    IIIA = "IIIA"
    IIIB = "IIIB"
    IIIC = "IIIC"
    IVA = "IVA"
    IVB = "IVB"
    Indeterminate = "Indeterminate"

    def _comparable(self, other) -> bool:
        # Indeterminate sits outside the order: every comparison with it is False.
        return type(other) is type(self)

    def __lt__(self, other):
        if not self._comparable(other):
            return NotImplemented
        if OverallStage.Indeterminate in (self, other):
            return False
        return self.rank < other.rank

    def __le__(self, other):
        if not self._comparable(other):
            return NotImplemented
        if OverallStage.Indeterminate in (self, other):
            return False
        return self.rank <= other.rank

    def __gt__(self, other):
        if not self._comparable(other):
            return NotImplemented
        if OverallStage.Indeterminate in (self, other):
            return False
        return self.rank > other.rank

    def __ge__(self, other):
        if not self._comparable(other):
            return NotImplemented
        if OverallStage.Indeterminate in (self, other):
            return False
        return self.rank >= other.rank

    __hash__ = str.__hash__

    @property
    def determinate(self) -> bool:
        return self is not OverallStage.Indeterminate


_RANKS = {
    cls: {member: i for i, member in enumerate(cls)}
    for cls in (TCategory, NCategory, MCategory, OverallStage)
}

DIMENSION_TYPES = {"T": TCategory, "N": NCategory, "M": MCategory}


def parse_category(dimension: str, value: str):
    """Parse ``value`` as a category of ``dimension`` ('T', 'N' or 'M')."""
    cls = DIMENSION_TYPES[dimension]
    text = value.strip()
    # tolerate clinical/pathological prefixes such as "cT2a" or "pN1"
    if len(text) > 1 and text[0] in "cpyCPY" and text[1].upper() == dimension:
        text = text[1:]
    return cls(text)


def format_tnm(t: TCategory, n: NCategory, m: MCategory) -> str:
    return f"{t.value} {n.value} {m.value}"
