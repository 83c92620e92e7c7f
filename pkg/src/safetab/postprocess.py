"""Postprocessing of noisy tables: marginals, suppression, coterminous geographies.

Everything here reads only ``NoisyTable`` objects (never person records), so
it costs no privacy budget.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from statistics import NormalDist
from typing import Iterable, Mapping, Optional, Sequence

from safetab.accountant import PURE_DP, ZCDP, PrivacyBudget
from safetab.datamodel import GEO_LEVELS, SEXES, SUBSTATE_LEVELS, Issue, PopulationGroup, ValidationError
from safetab.engine import TOTAL, TOTAL_CELL, NoisyTable
from safetab.noise import DiscreteGaussian, Rational, TwoSidedGeometric, dgauss_cdf, dgauss_invcdf, to_fraction

_STD_NORMAL = NormalDist()


# ---------------------------------------------------------------------------
# Marginals


def attach_marginals(t: NoisyTable) -> NoisyTable:
    """Adds sex marginals and a total summed from the noisy sex by age cells."""
    if not t.is_sex_by_age:
        raise ValueError(f"marginals only apply to sex by age tables, not {t.tier}")
    cells = {k: v for k, v in t.cells.items() if k not in t.derived}
    marginals = {sex: sum(v for k, v in cells.items() if k.startswith(sex + "/")) for sex in SEXES}
    cells.update(marginals)
    cells[TOTAL_CELL] = sum(marginals.values())
    return replace(t, cells=cells, derived=frozenset(SEXES) | {TOTAL_CELL})


# ---------------------------------------------------------------------------
# Suppression


def threshold_distribution(level_budget, gamma, stability: int, definition: str = ZCDP):
    """Noise distribution of a Stage-2 count for a group in a level."""
    if isinstance(level_budget, PrivacyBudget):
        definition = level_budget.definition
        level_budget = level_budget.value
    stage2 = (1 - to_fraction(gamma)) * to_fraction(level_budget) / stability
    if definition == ZCDP:
        return DiscreteGaussian.from_rho(stage2)
    if definition == PURE_DP:
        return TwoSidedGeometric(stage2)
    raise ValueError(f"unknown privacy definition {definition!r}")


def derive_threshold(level_budget, gamma: Rational, stability: int, p: float, definition: str = ZCDP) -> int:
    """Suppression threshold T so that a true zero is suppressed with probability about ``p``.

    T is the smallest integer whose noise CDF reaches ``p``, with noise
    variance ``stability / (2 (1 - gamma) rho)``. In pure-DP mode the
    two-sided geometric at ``(1 - gamma) eps / stability`` takes its place.
    """
    if not 0 < p < 1:
        raise ValueError(f"p must be in (0, 1), got {p}")
    dist = threshold_distribution(level_budget, gamma, stability, definition)
    if isinstance(dist, DiscreteGaussian):
        return dgauss_invcdf(dist, p)
    return dist.invcdf(p)


@dataclass(frozen=True)
class SuppressionPolicy:
    """Which groups are eligible for suppression and at what thresholds.

    ``thresholds`` maps level id to T. Groups in other levels are never
    suppressed.
    """

    p: float
    thresholds: Mapping = field(default_factory=dict)
    geo_levels: frozenset = SUBSTATE_LEVELS

    def __post_init__(self) -> None:
        if not 0 < self.p < 1:
            raise ValueError(f"p must be in (0, 1), got {self.p}")

    @classmethod
    def from_levels(cls, p: float, levels: Iterable, gamma, stability: Mapping, definition: str = ZCDP):
        """Derives a threshold for each sub-state level from its budget.

        Args:
            p: Target suppression probability for a true zero.
            levels: ``LevelSpec`` objects.
            gamma: Stage-1 fraction.
            stability: Level id -> stability.
            definition: zCDP or pureDP.
        """
        thresholds = {
            lv.level_id: derive_threshold(lv.rho, gamma, stability[lv.level_id], p, definition)
            for lv in levels if lv.geo_level in SUBSTATE_LEVELS
        }
        return cls(p, thresholds)

    def applies_to(self, t: NoisyTable) -> bool:
        return (
            t.tier == TOTAL
            and t.group.geo_level in self.geo_levels
            and t.group.level_id in self.thresholds
        )


@dataclass(frozen=True)
class SuppressionLogEntry:
    group: PopulationGroup
    noisy_total: int
    threshold: int


def suppress(tables: Sequence[NoisyTable], policy: SuppressionPolicy):
    """Drops eligible groups whose noisy total is below their level's threshold.

    Returns:
        ``(kept_tables, log)``. The log is curator-only.
    """
    kept, log = [], []
    for t in tables:
        if policy.applies_to(t):
            threshold = policy.thresholds[t.group.level_id]
            value = t.cells[TOTAL_CELL]
            if value < threshold:
                log.append(SuppressionLogEntry(t.group, value, threshold))
                continue
        kept.append(t)
    return kept, log


def _dist(sigma) -> DiscreteGaussian:
    if isinstance(sigma, DiscreteGaussian):
        return sigma
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    return DiscreteGaussian.from_sigma(sigma)


def suppression_probability(n: float, sigma, threshold: int) -> float:
    """P[n + X < T] for discrete Gaussian noise X of scale ``sigma``."""
    d = _dist(sigma)
    return dgauss_cdf(d, math.ceil(threshold - n) - 1)


def release_bias(n: float, sigma, threshold: int) -> float:
    """E[X | n + X >= T]: mean noise on a count that survives suppression.

    Exact summation over the discrete Gaussian pmf.
    """
    d = _dist(sigma)
    xs, p = d._support
    lowest = math.ceil(threshold - n)
    mask = xs >= lowest
    mass = math.fsum(p[mask])
    if mass == 0.0:
        raise ValueError("release probability underflows; n is too far below T")
    return math.fsum(xs[mask] * p[mask]) / mass


def release_bias_continuous(n: float, sigma: float, threshold: float) -> float:
    """Continuous-Gaussian closed form sigma * phi(z) / (1 - Phi(z)), z = (T - n) / sigma."""
    if isinstance(sigma, DiscreteGaussian):
        sigma = sigma.sigma
    z = (threshold - n) / sigma
    return sigma * _STD_NORMAL.pdf(z) / (0.5 * math.erfc(z / math.sqrt(2)))


# ---------------------------------------------------------------------------
# Coterminous geographies


@dataclass(frozen=True)
class CoterminousSpec:
    """Sets of geographic entities with identical (or declared-equivalent) extent.

    Each set is applied to every characteristic iteration separately.
    ``order`` ranks geography levels; the first unsuppressed level donates.
    """

    sets: Mapping  # set id -> tuple of (geo_level, entity_id)
    order: tuple

    def __post_init__(self) -> None:
        if len(set(self.order)) != len(self.order) or not set(self.order) <= set(GEO_LEVELS):
            raise ValueError(f"order must list distinct geography levels, got {self.order}")
        for set_id, members in self.sets.items():
            levels = [lvl for lvl, _ in members]
            if len(set(levels)) != len(levels):
                raise ValueError(f"coterminous set {set_id} has two entities at one level")
            missing = set(levels) - set(self.order)
            if missing:
                raise ValueError(f"coterminous set {set_id} uses unranked levels {sorted(missing)}")


def load_coterminous(path: Path) -> CoterminousSpec:
    """Reads ``coterminous.txt``.

    Format::

        order|State>County>Place>Tract>AIANNH
        set_id|geo_level|entity_id
        DC|State|11
        DC|County|11001
    """
    path = Path(path)
    lines = [ln for ln in path.read_text(encoding="utf-8").splitlines() if ln.strip()]
    issues = []
    if len(lines) < 2 or not lines[0].startswith("order|"):
        raise ValidationError([Issue(path.name, 1, "schema", "first line must be order|A>B>...")])
    order = tuple(x.strip() for x in lines[0].split("|", 1)[1].split(">"))
    if lines[1].strip() != "set_id|geo_level|entity_id":
        raise ValidationError([Issue(path.name, 2, "schema", "expected header set_id|geo_level|entity_id")])
    sets: dict = {}
    for number, raw in enumerate(lines[2:], start=3):
        fields = [f.strip() for f in raw.split("|")]
        if len(fields) != 3:
            issues.append(Issue(path.name, number, "field_count", f"expected 3 fields, got {len(fields)}"))
            continue
        set_id, geo_level, entity_id = fields
        if geo_level not in GEO_LEVELS:
            issues.append(Issue(path.name, number, "geo_level", f"unknown geography level {geo_level!r}"))
            continue
        sets.setdefault(set_id, []).append((geo_level, entity_id))
    if issues:
        raise ValidationError(issues)
    try:
        return CoterminousSpec({k: tuple(v) for k, v in sets.items()}, order)
    except ValueError as exc:
        raise ValidationError([Issue(path.name, 0, "coterminous", str(exc))]) from exc


def expand_coterminous(spec: CoterminousSpec, universe_groups: Iterable[PopulationGroup]) -> list:
    """Turns entity sets into population-group sets, one per iteration.

    Raises:
        ValidationError: when a listed entity has no groups in the universe.
    """
    by_entity: dict = {}
    for g in universe_groups:
        by_entity.setdefault((g.geo_level, g.entity_id), []).append(g)
    issues, expanded = [], []
    for set_id, members in sorted(spec.sets.items()):
        per_iteration: dict = {}
        for geo_level, entity_id in members:
            groups = by_entity.get((geo_level, entity_id))
            if not groups:
                issues.append(Issue("coterminous", 0, "unknown_group",
                                    f"set {set_id}: ({geo_level}, {entity_id}) has no population groups"))
                continue
            for g in groups:
                per_iteration.setdefault(g.iteration_id, []).append(g)
        for iteration_id in sorted(per_iteration):
            expanded.append(tuple(per_iteration[iteration_id]))
    if issues:
        raise ValidationError(issues)
    return expanded


def coterminous_fixup(
    tables: Sequence[NoisyTable],
    spec: CoterminousSpec,
    universe_groups: Optional[Iterable[PopulationGroup]] = None,
) -> list[NoisyTable]:
    """Copies each coterminous set's donor table onto the other members.

    The donor is the published group at the highest-ranked level in
    ``spec.order``. Members that were suppressed are recreated from the donor.
    A set with no published member stays unpublished.
    """
    by_group = {t.group: t for t in tables}
    groups = list(universe_groups) if universe_groups is not None else list(by_group)
    rank = {lvl: i for i, lvl in enumerate(spec.order)}
    for members in expand_coterminous(spec, groups):
        ranked = sorted(members, key=lambda g: rank[g.geo_level])
        donor = next((by_group[g] for g in ranked if g in by_group), None)
        if donor is None:
            continue
        for g in members:
            if g != donor.group:
                by_group[g] = replace(donor, group=g, stage1_total=None, budget_spent=None)
    return sorted(by_group.values(), key=lambda t: t.group)
