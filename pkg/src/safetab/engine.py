"""Adaptive two-stage tabulation of population groups.

Each level's budget is split evenly across the groups a record can reach
(``rho_i / stability``). A non-TotalOnly group spends ``gamma`` of its share
on a noisy total, compares it with the thresholds, and spends the rest on the
chosen table: a second total or a sex by age histogram.
"""

from __future__ import annotations

import hashlib
import logging
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from fractions import Fraction
from typing import Mapping, Optional, Sequence

import numpy as np

from safetab.accountant import (
    PURE_DP,
    ZCDP,
    BudgetError,
    Ledger,
    LevelBudgetPlan,
    PrivacyBudget,
    compose_parallel,
    compose_sequential,
    mechanism_cost,
)
from safetab.datamodel import (
    SEXES,
    KeySet,
    PersonRecord,
    PopulationGroup,
    Universe,
    map_to_groups,
    stability_of,
)
from safetab.noise import DiscreteGaussian, TwoSidedGeometric, to_fraction

logger = logging.getLogger(__name__)

DISCRETE_GAUSSIAN = "discrete_gaussian"
TWO_SIDED_GEOMETRIC = "two_sided_geometric"
MECHANISM_FOR_DEFINITION = {ZCDP: DISCRETE_GAUSSIAN, PURE_DP: TWO_SIDED_GEOMETRIC}

TOTAL_ONLY = "TotalOnly"
TOTAL = "Total"
SEX_BY_AGE4 = "SexByAge4"
SEX_BY_AGE9 = "SexByAge9"
SEX_BY_AGE23 = "SexByAge23"
TIERS = (TOTAL_ONLY, TOTAL, SEX_BY_AGE4, SEX_BY_AGE9, SEX_BY_AGE23)
TOTAL_CELL = "Total"


@dataclass(frozen=True)
class AgeBinning:
    """Partition of ``[0, inf)`` into age bins given by their lower edges."""

    name: str
    boundaries: tuple
    labels: tuple

    def __post_init__(self) -> None:
        if self.boundaries[0] != 0 or list(self.boundaries) != sorted(set(self.boundaries)):
            raise ValueError("boundaries must start at 0 and strictly increase")
        if len(self.labels) != len(self.boundaries):
            raise ValueError("one label per bin")

    def __len__(self) -> int:
        return len(self.boundaries)

    def bin_index(self, age: int) -> int:
        if age < 0:
            raise ValueError(f"negative age {age}")
        return int(np.searchsorted(self.boundaries, age, side="right")) - 1

    def label(self, age: int) -> str:
        return self.labels[self.bin_index(age)]


AGE4 = AgeBinning(
    "Age4",
    (0, 18, 45, 65),
    ("Under 18 years", "18 to 44 years", "45 to 64 years", "65 years and over"),
)
AGE9 = AgeBinning(
    "Age9",
    (0, 5, 18, 25, 35, 45, 55, 65, 75),
    (
        "Under 5 years", "5 to 17 years", "18 to 24 years", "25 to 34 years",
        "35 to 44 years", "45 to 54 years", "55 to 64 years", "65 to 74 years",
        "75 years and over",
    ),
)
AGE23 = AgeBinning(
    "Age23",
    (0, 5, 10, 15, 18, 20, 21, 22, 25, 30, 35, 40, 45, 50, 55, 60, 62, 65, 67, 70, 75, 80, 85),
    (
        "Under 5 years", "5 to 9 years", "10 to 14 years", "15 to 17 years",
        "18 and 19 years", "20 years", "21 years", "22 to 24 years",
        "25 to 29 years", "30 to 34 years", "35 to 39 years", "40 to 44 years",
        "45 to 49 years", "50 to 54 years", "55 to 59 years", "60 and 61 years",
        "62 to 64 years", "65 and 66 years", "67 to 69 years", "70 to 74 years",
        "75 to 79 years", "80 to 84 years", "85 years and over",
    ),
)
BINNING_FOR_TIER = {SEX_BY_AGE4: AGE4, SEX_BY_AGE9: AGE9, SEX_BY_AGE23: AGE23}
TABLE_ID_FOR_TIER = {
    TOTAL_ONLY: "T01001",
    TOTAL: "T01001",
    SEX_BY_AGE4: "T02001",
    SEX_BY_AGE9: "T02002",
    SEX_BY_AGE23: "T02003",
}


def cell_key(sex: str, age_label: str) -> str:
    return f"{sex}/{age_label}"


def cell_domain(tier: str) -> tuple:
    """Cell keys (in table order) of the noisy cells for ``tier``."""
    if tier in (TOTAL_ONLY, TOTAL):
        return (TOTAL_CELL,)
    binning = BINNING_FOR_TIER[tier]
    return tuple(cell_key(s, label) for s in SEXES for label in binning.labels)


@dataclass(frozen=True)
class AdaptiveConfig:
    gamma: Fraction
    thresholds: tuple
    mechanism: str = DISCRETE_GAUSSIAN

    def __post_init__(self) -> None:
        gamma = to_fraction(self.gamma)
        if not 0 < gamma < 1:
            raise ValueError(f"gamma must be strictly between 0 and 1, got {gamma}")
        thresholds = tuple(int(t) for t in self.thresholds)
        if len(thresholds) != 3 or list(thresholds) != sorted(thresholds):
            raise ValueError(f"need three nondecreasing thresholds, got {self.thresholds}")
        if self.mechanism not in (DISCRETE_GAUSSIAN, TWO_SIDED_GEOMETRIC):
            raise ValueError(f"unknown mechanism {self.mechanism!r}")
        object.__setattr__(self, "gamma", gamma)
        object.__setattr__(self, "thresholds", thresholds)

    @property
    def definition(self) -> str:
        return ZCDP if self.mechanism == DISCRETE_GAUSSIAN else PURE_DP


@dataclass(frozen=True)
class NoisyTable:
    """Noisy output for one population group.

    ``stage1_total`` is the Stage-1 estimate used to pick the tier. It stays
    inside the process and is never written to a published file.
    """

    group: PopulationGroup
    tier: str
    cells: Mapping
    stage1_total: Optional[int] = None
    budget_spent: Optional[PrivacyBudget] = None
    derived: frozenset = frozenset()

    def __post_init__(self) -> None:
        expected = len(cell_domain(self.tier))
        noisy = len([k for k in self.cells if k not in self.derived])
        if noisy != expected:
            raise ValueError(f"{self.tier} table needs {expected} cells, got {noisy}")

    @property
    def table_id(self) -> str:
        return TABLE_ID_FOR_TIER[self.tier]

    @property
    def is_sex_by_age(self) -> bool:
        return self.tier in BINNING_FOR_TIER


class ZeroNoise:
    """Noise source that always returns 0. For exercising tier logic in tests."""

    def spawn(self, stream_id: int) -> "ZeroNoise":
        return self

    def draw(self, dist, size: int) -> np.ndarray:
        return np.zeros(size, dtype=np.int64)


def noise_distribution(budget: PrivacyBudget, mechanism: str):
    if budget.value <= 0:
        raise ValueError(f"noisy_count needs a positive budget, got {budget}")
    if mechanism == DISCRETE_GAUSSIAN:
        if budget.definition != ZCDP:
            raise ValueError("discrete Gaussian noise is calibrated from a zCDP budget")
        return DiscreteGaussian.from_rho(budget.value)
    if budget.definition != PURE_DP:
        raise ValueError("geometric noise is calibrated from a pure-DP budget")
    return TwoSidedGeometric(budget.value)


def noisy_count(values, budget: PrivacyBudget, rng, mechanism: str = DISCRETE_GAUSSIAN) -> np.ndarray:
    """Adds iid integer noise calibrated to ``budget`` at sensitivity 1.

    Discrete Gaussian noise uses sigma^2 = 1/(2 rho); geometric noise uses
    pmf proportional to exp(-eps |x|).
    """
    values = np.asarray(values, dtype=np.int64)
    dist = noise_distribution(budget, mechanism)
    return values + rng.draw(dist, values.size).reshape(values.shape)


def choose_tier(noisy_total: int, thresholds: Sequence[int]) -> str:
    """Strict less-than comparisons; a total equal to a threshold moves up a tier."""
    t1, t2, t3 = thresholds
    if noisy_total < t1:
        return TOTAL
    if noisy_total < t2:
        return SEX_BY_AGE4
    if noisy_total < t3:
        return SEX_BY_AGE9
    return SEX_BY_AGE23


def _histogram(people: Sequence, tier: str) -> np.ndarray:
    binning = BINNING_FOR_TIER[tier]
    counts = np.zeros(len(SEXES) * len(binning), dtype=np.int64)
    for sex, age in people:
        counts[SEXES.index(sex) * len(binning) + binning.bin_index(age)] += 1
    return counts


def tabulate_population_group(
    group_records: Sequence,
    group: PopulationGroup,
    budget: PrivacyBudget,
    cfg: AdaptiveConfig,
    rng,
    total_only: bool = False,
) -> NoisyTable:
    """Tabulates one group at ``budget`` (the level budget divided by stability).

    Args:
        group_records: ``(sex, age)`` pairs (or ``PersonRecord``) in the group.
        group: The population group.
        budget: Budget for this group.
        cfg: Stage-1 fraction, thresholds and mechanism.
        rng: Noise source for this group's private stream.
        total_only: Whether the group only receives a total.
    """
    people = [(r.sex, r.age) if isinstance(r, PersonRecord) else tuple(r) for r in group_records]
    n = len(people)
    if total_only:
        noisy = noisy_count([n], budget, rng, cfg.mechanism)
        return NoisyTable(group, TOTAL_ONLY, {TOTAL_CELL: int(noisy[0])},
                          budget_spent=mechanism_cost(1, budget))

    stage1 = budget.scale(cfg.gamma)
    stage2 = budget.scale(1 - cfg.gamma)
    total = int(noisy_count([n], stage1, rng, cfg.mechanism)[0])
    tier = choose_tier(total, cfg.thresholds)
    if tier == TOTAL:
        values = np.array([n], dtype=np.int64)
    else:
        values = _histogram(people, tier)
    noisy = noisy_count(values, stage2, rng, cfg.mechanism)
    spent = compose_sequential(mechanism_cost(1, stage1), mechanism_cost(1, stage2))
    cells = dict(zip(cell_domain(tier), (int(v) for v in noisy)))
    return NoisyTable(group, tier, cells, stage1_total=total, budget_spent=spent)


def stream_id_for(group: PopulationGroup, region: str = "US") -> int:
    """Stable 64-bit stream id for a group's noise."""
    key = "|".join((region, group.level_id, group.geo_level, group.entity_id, group.iteration_id))
    return int.from_bytes(hashlib.blake2b(key.encode(), digest_size=8).digest(), "big")


def true_group_counts(
    records: Sequence[PersonRecord], level, universe: Universe, stability: Optional[int] = None
) -> dict:
    """Group -> list of ``(sex, age)`` for one level (the flat-map step).

    With ``stability`` given, fails if any record joins more groups than that.
    """
    members = defaultdict(list)
    for r in records:
        groups = map_to_groups(r, level, universe)
        if stability is not None and len(groups) > stability:
            raise BudgetError(
                f"record on line {r.line} joins {len(groups)} groups at level "
                f"{level.level_id}, above stability {stability}"
            )
        for g in groups:
            members[g].append((r.sex, r.age))
    return members


def run_safetab(
    records: Sequence[PersonRecord],
    plan: LevelBudgetPlan,
    cfg: AdaptiveConfig,
    keysets: Mapping[str, KeySet],
    rng,
    universe: Universe,
    ledger: Optional[Ledger] = None,
    region: str = "US",
    level_thresholds: Optional[Mapping[str, tuple]] = None,
    workers: int = 1,
) -> list[NoisyTable]:
    """Tabulates every group of every level in ``plan``.

    Each level's budget is reserved on the ledger before its groups run. Every
    KeySet group is tabulated, whether or not any record falls in it. The
    returned tables are ordered by level, then by group.
    """
    if plan.definition != cfg.definition:
        raise ValueError(f"plan is {plan.definition} but mechanism needs {cfg.definition}")
    ledger = ledger if ledger is not None else Ledger(plan)
    level_thresholds = dict(level_thresholds or {})
    out: list[NoisyTable] = []
    for level_id in plan.level_ids:
        level = universe.level(level_id)
        keyset = keysets[level_id]
        stability = stability_of(level, universe)
        level_budget = plan.budget(level_id)
        per_group = level_budget.scale(Fraction(1, stability))

        members = true_group_counts(records, level, universe, stability)
        stray = set(members) - set(keyset.groups)
        if stray:
            raise ValueError(f"level {level_id}: records map to groups outside the KeySet: {sorted(stray)[:3]}")

        # Reserve the whole level up front; the groups run in parallel composition.
        ledger.spend(level_id, compose_parallel([per_group], stability), f"tabulate:{level_id}")
        level_cfg = cfg
        if level_id in level_thresholds:
            level_cfg = AdaptiveConfig(cfg.gamma, level_thresholds[level_id], cfg.mechanism)

        def task(group: PopulationGroup) -> NoisyTable:
            return tabulate_population_group(
                members.get(group, ()), group, per_group, level_cfg,
                rng.spawn(stream_id_for(group, region)),
                total_only=keyset.is_total_only(group),
            )

        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                tables = list(pool.map(task, keyset.groups))
        else:
            tables = [task(g) for g in keyset.groups]
        for t in tables:
            if t.budget_spent != per_group:
                raise BudgetError(f"{t.group}: spent {t.budget_spent}, allotted {per_group}")
        logger.info("level %s: %d groups at %s each", level_id, len(tables), per_group)
        out.extend(sorted(tables, key=lambda t: t.group))
    return out
