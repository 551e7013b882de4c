"""Overall-stage lookup over a validated stage-group table, and uncertainty projection."""

from __future__ import annotations

import functools
import itertools
import json
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

from .categories import MCategory, NCategory, OverallStage, TCategory
from .normalize import EvidencePools, NormalizedFinding, _POOL_OF
from .staging import StagingRuleFile, default_rules, stage_dimension

Cell = tuple[TCategory, NCategory, MCategory]


class StageTableError(ValueError):
    pass


class IncompleteTable(StageTableError):
    def __init__(self, missing: list[Cell]):
        shown = ", ".join("/".join(c.value for c in cell) for cell in missing[:5])
        more = f" (+{len(missing) - 5} more)" if len(missing) > 5 else ""
        super().__init__(f"stage table lacks {len(missing)} combinations: {shown}{more}")
        self.missing = missing


class NonMonotoneTable(StageTableError):
    def __init__(self, lower: Cell, higher: Cell, lower_stage: OverallStage, higher_stage: OverallStage):
        super().__init__(
            f"raising {'/'.join(c.value for c in lower)} ({lower_stage.value}) to "
            f"{'/'.join(c.value for c in higher)} lowers the stage to {higher_stage.value}"
        )
        self.witness = (lower, higher)


class MetastaticGroupViolation(StageTableError):
    def __init__(self, cell: Cell, stage: OverallStage):
        super().__init__(f"{'/'.join(c.value for c in cell)} must map into stage IV, found {stage.value}")
        self.cell = cell


class TableVersionMismatch(StageTableError):
    pass


ALL_CELLS: tuple[Cell, ...] = tuple(itertools.product(TCategory, NCategory, MCategory))


@dataclass(frozen=True)
class StageGroupTable:
    version: str
    cells: dict

    def __len__(self) -> int:
        return len(self.cells)

    def lookup(self, t: TCategory, n: NCategory, m: MCategory) -> OverallStage:
        return self.cells[(t, n, m)]


def validate_table(table: StageGroupTable) -> None:
    missing = [c for c in ALL_CELLS if c not in table.cells]
    if missing:
        raise IncompleteTable(missing)
    for cell in ALL_CELLS:
        stage = table.cells[cell]
        m = cell[2]
        if m in (MCategory.M1a, MCategory.M1b) and stage is not OverallStage.IVA:
            raise MetastaticGroupViolation(cell, stage)
        if m is MCategory.M1c and stage is not OverallStage.IVB:
            raise MetastaticGroupViolation(cell, stage)
    # monotone along every axis, comparing all ordered pairs of determinate cells
    for axis in range(3):
        for cell in ALL_CELLS:
            lo = table.cells[cell]
            if not lo.determinate:
                continue
            members = list(type(cell[axis]))
            for higher_value in members[members.index(cell[axis]) + 1 :]:
                other = list(cell)
                other[axis] = higher_value
                other = tuple(other)
                hi = table.cells[other]
                if hi.determinate and hi < lo:
                    raise NonMonotoneTable(cell, other, lo, hi)


def table_from_dict(data: dict, expected_version: str | None = None) -> StageGroupTable:
    cells = {}
    try:
        for row in data["rows"]:
            if isinstance(row, dict):
                t, n, m, stage = row["t"], row["n"], row["m"], row["stage"]
            else:
                t, n, m, stage = row
            key = (TCategory(t), NCategory(n), MCategory(m))
            if key in cells:
                raise StageTableError(f"duplicate row for {t}/{n}/{m}")
            cells[key] = OverallStage(stage)
        version = str(data["version"])
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, StageTableError):
            raise
        raise StageTableError(f"malformed stage table: {exc}") from exc
    if expected_version is not None and version != expected_version:
        raise TableVersionMismatch(f"stage table {version!r} does not match rule file {expected_version!r}")
    table = StageGroupTable(version, cells)
    validate_table(table)
    return table


def load_stage_table(path: str | Path | None = None, rules: StagingRuleFile | None = None) -> StageGroupTable:
    """Load and validate a table; with ``rules`` the versions must agree."""
    expected = rules.version if rules is not None else None
    if path is None:
        table = default_table()
        if expected is not None and table.version != expected:
            raise TableVersionMismatch(f"stage table {table.version!r} does not match rule file {expected!r}")
        return table
    return table_from_dict(json.loads(Path(path).read_text(encoding="utf-8")), expected)


@functools.lru_cache(maxsize=1)
def default_table() -> StageGroupTable:
    text = resources.files("lcagent.data").joinpath("rules", "stage_table.json").read_text(encoding="utf-8")
    return table_from_dict(json.loads(text), default_rules().version)


def aggregate_stage(t: TCategory, n: NCategory, m: MCategory, table: StageGroupTable | None = None) -> OverallStage:
    return (table or default_table()).cells[(t, n, m)]


# -- uncertainty projection --------------------------------------------------------


@dataclass(frozen=True)
class PotentialShift:
    triggering_findings: tuple[NormalizedFinding, ...]
    dimension: str
    assumed_category: TCategory | NCategory | MCategory
    projected_stage: OverallStage

    @property
    def triggering_finding(self) -> NormalizedFinding:
        return self.triggering_findings[0]

    def to_dict(self) -> dict:
        return {
            "dimension": self.dimension,
            "assumed_category": self.assumed_category.value,
            "projected_stage": self.projected_stage.value,
            "triggering_findings": [f.describe() for f in self.triggering_findings],
        }


def finding_dimension(finding: NormalizedFinding) -> str | None:
    dims = {_POOL_OF[d] for d in finding.descriptors if d in _POOL_OF}
    return dims.pop() if len(dims) == 1 else None


def _is_escalation(base: OverallStage, projected: OverallStage) -> bool:
    if projected == base:
        return False
    if not (base.determinate and projected.determinate):
        return True
    return projected > base


def project_uncertainty(
    uncertain: Iterable[NormalizedFinding],
    base: tuple[TCategory, NCategory, MCategory],
    rules: StagingRuleFile | None = None,
    table: StageGroupTable | None = None,
    pools: EvidencePools | None = None,
) -> list[PotentialShift]:
    """Confirm each uncertain finding on its own and report stage escalations.

    ``pools`` supplies the confirmed evidence of each dimension. M needs it
    because extrathoracic lesions combine by count, so one extra confirmed
    lesion can lift M1b to M1c; T and N are plain maxima and fall back to
    max(base, finding) when no pools are given.
    """
    rules = rules or default_rules()
    table = table or default_table()
    base_stage = table.cells[tuple(base)]
    index = {"T": 0, "N": 1, "M": 2}
    grouped: dict[tuple, list[NormalizedFinding]] = {}
    order: list[tuple] = []
    for finding in uncertain:
        dim = finding_dimension(finding)
        if dim is None:
            continue
        flipped = finding.confirm()
        if pools is not None:
            confirmed = [f for f in pools.pool(dim) if f.confirmed]
            assumed = stage_dimension(dim, confirmed + [flipped], rules=rules).category
        else:
            alone = stage_dimension(dim, [flipped], rules=rules).category
            assumed = max(base[index[dim]], alone)
        cell = list(base)
        cell[index[dim]] = assumed
        projected = table.cells[tuple(cell)]
        if not _is_escalation(base_stage, projected):
            continue
        key = (dim, assumed, projected)
        if key not in grouped:
            grouped[key] = []
            order.append(key)
        grouped[key].append(finding)
    return [PotentialShift(tuple(grouped[k]), k[0], k[1], k[2]) for k in order]


def confirm_in_pools(pools: EvidencePools, finding: NormalizedFinding) -> EvidencePools:
    """Pools with ``finding`` flipped to Confirmed (used to replay a projection)."""

    def flip(pool: Sequence[NormalizedFinding]):
        return tuple(f.confirm() if f is finding else f for f in pool)

    return replace(pools, e_t=flip(pools.e_t), e_n=flip(pools.e_n), e_m=flip(pools.e_m))
