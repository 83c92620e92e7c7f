"""Person records, public specification files, population groups and KeySets.

Input files are UTF-8, pipe-delimited, with a header row:

* ``persons.txt``     block|race_codes|ethnicity|sex|age  (race codes comma-joined)
* ``geo.txt``         block|state|county|tract|place|aiannh (place/aiannh may be blank)
* ``codes.txt``       code|kind  (kind is ``race`` or ``ethnicity``)
* ``iterations.txt``  iteration_id|level|alone_flag|codes
* ``levels.txt``      level_id|geo_level|iteration_level|rho
* ``total_only.txt``  iteration_id|geo_level
* ``exclusions.txt``  iteration_id|geo_level  (optional)

Blocks whose state is ``72`` belong to the Puerto Rico pass; all others to the
US pass. The Nation entity of a pass is named after the region (``US``/``PR``).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

from safetab.noise import to_fraction

logger = logging.getLogger(__name__)

NATION, STATE, COUNTY, TRACT, PLACE, AIANNH = (
    "Nation", "State", "County", "Tract", "Place", "AIANNH",
)
GEO_LEVELS = (NATION, STATE, COUNTY, TRACT, PLACE, AIANNH)
SUBSTATE_LEVELS = frozenset({COUNTY, TRACT, PLACE, AIANNH})
DETAILED, REGIONAL = "Detailed", "Regional"
ITERATION_LEVELS = (DETAILED, REGIONAL)
ALONE, AOIC = "Alone", "AloneOrInAnyCombination"
_ALONE_FLAGS = {"Alone": ALONE, "AloneOrInAnyCombination": AOIC, "AOIC": AOIC}
RACE, ETHNICITY = "race", "ethnicity"
SEXES = ("Male", "Female")
REGIONS = ("US", "PR")
PR_STATE_CODE = "72"
MAX_RACE_CODES = 8
AGE_WARNING = 115

PERSONS_HEADER = ("block", "race_codes", "ethnicity", "sex", "age")
GEO_HEADER = ("block", "state", "county", "tract", "place", "aiannh")
CODES_HEADER = ("code", "kind")
ITERATIONS_HEADER = ("iteration_id", "level", "alone_flag", "codes")
LEVELS_HEADER = ("level_id", "geo_level", "iteration_level", "rho")
TOTAL_ONLY_HEADER = ("iteration_id", "geo_level")
EXCLUSIONS_HEADER = ("iteration_id", "geo_level")


# ---------------------------------------------------------------------------
# Validation plumbing


@dataclass(frozen=True)
class Issue:
    source: str
    line: int
    kind: str
    message: str

    def __str__(self) -> str:
        return f"{self.source}:{self.line}: [{self.kind}] {self.message}"


class ValidationError(Exception):
    """Input validation failed; nothing private has been computed."""

    def __init__(self, issues: Sequence[Issue]):
        self.issues = list(issues)
        head = "; ".join(str(i) for i in self.issues[:5])
        more = f" (+{len(self.issues) - 5} more)" if len(self.issues) > 5 else ""
        super().__init__(f"{len(self.issues)} validation issue(s): {head}{more}")


@dataclass
class ValidationReport:
    """Curator-only outcome of input validation."""

    errors: list[Issue] = field(default_factory=list)
    warnings: list[Issue] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.errors

    def error(self, source: str, line: int, kind: str, message: str) -> None:
        self.errors.append(Issue(source, line, kind, message))

    def warn(self, source: str, line: int, kind: str, message: str) -> None:
        self.warnings.append(Issue(source, line, kind, message))

    def raise_if_failed(self) -> None:
        if self.errors:
            raise ValidationError(self.errors)

    def render(self) -> str:
        lines = [f"errors: {len(self.errors)}", f"warnings: {len(self.warnings)}"]
        lines += [f"ERROR {i}" for i in self.errors]
        lines += [f"WARN  {i}" for i in self.warnings]
        return "\n".join(lines) + "\n"


def _read_table(
    path: Path, header: Sequence[str], report: ValidationReport
) -> list[tuple[int, list[str]]]:
    """Returns ``(line_number, fields)`` rows; malformed rows become errors."""
    source = path.name
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        report.error(source, 0, "io", str(exc))
        return []
    lines = text.splitlines()
    if not lines:
        report.error(source, 1, "schema", f"missing header {'|'.join(header)}")
        return []
    got = tuple(h.strip() for h in lines[0].split("|"))
    if got != tuple(header):
        report.error(source, 1, "schema", f"expected header {'|'.join(header)}, got {lines[0]!r}")
        return []
    rows = []
    for number, raw in enumerate(lines[1:], start=2):
        if not raw.strip():
            continue
        fields = [f.strip() for f in raw.split("|")]
        if len(fields) != len(header):
            report.error(
                source, number, "field_count",
                f"expected {len(header)} fields, got {len(fields)}",
            )
            continue
        rows.append((number, fields))
    return rows


# ---------------------------------------------------------------------------
# Domain types


@dataclass(frozen=True)
class PersonRecord:
    block_id: str
    race_codes: frozenset
    ethnicity_code: str
    sex: str
    age: int
    line: int = field(default=0, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "race_codes", frozenset(self.race_codes))


@dataclass(frozen=True, order=True)
class GeoEntity:
    level: str
    entity_id: str


@dataclass(frozen=True)
class CharacteristicIteration:
    iteration_id: str
    level: str
    alone_flag: str
    member_codes: frozenset
    kind: str = RACE

    def contains(self, record: PersonRecord) -> bool:
        """Membership of ``record`` under Alone / Alone-or-in-any-combination rules."""
        if self.kind == ETHNICITY:
            return record.ethnicity_code in self.member_codes
        if self.alone_flag == ALONE:
            return bool(record.race_codes) and record.race_codes <= self.member_codes
        return not record.race_codes.isdisjoint(self.member_codes)


@dataclass(frozen=True, order=True)
class PopulationGroup:
    level_id: str
    geo_level: str
    entity_id: str
    iteration_id: str

    @property
    def geo(self) -> GeoEntity:
        return GeoEntity(self.geo_level, self.entity_id)


@dataclass(frozen=True)
class LevelSpec:
    level_id: str
    geo_level: str
    iteration_level: str
    rho: Fraction


@dataclass(frozen=True)
class KeySet:
    """Data-independent enumeration of the groups tabulated at one level."""

    level_id: str
    groups: tuple
    total_only: frozenset

    def __len__(self) -> int:
        return len(self.groups)

    def __iter__(self):
        return iter(self.groups)

    def is_total_only(self, group: PopulationGroup) -> bool:
        return group in self.total_only


@dataclass
class Universe:
    """Parsed public specification files."""

    blocks: dict = field(default_factory=dict)  # block -> {geo_level: entity_id}
    codes: dict = field(default_factory=dict)  # code -> kind
    iterations: dict = field(default_factory=dict)  # id -> CharacteristicIteration
    levels: list = field(default_factory=list)  # LevelSpec, file order
    total_only: frozenset = frozenset()  # (iteration_id, geo_level)
    exclusions: frozenset = frozenset()  # (iteration_id, geo_level)
    race_cap: int = MAX_RACE_CODES
    stability_overrides: dict = field(default_factory=dict)

    def level(self, level_id: str) -> LevelSpec:
        for spec in self.levels:
            if spec.level_id == level_id:
                return spec
        raise KeyError(level_id)

    def region_of(self, block_id: str) -> str:
        return self.blocks[block_id]["__region__"]

    def entity(self, block_id: str, geo_level: str) -> Optional[str]:
        return self.blocks[block_id].get(geo_level)

    def entities(self, geo_level: str, region: str) -> list[str]:
        found = set()
        for geo in self.blocks.values():
            if geo["__region__"] == region and geo.get(geo_level):
                found.add(geo[geo_level])
        return sorted(found)

    def iterations_for(self, level: LevelSpec) -> list[CharacteristicIteration]:
        return [
            it for it in self.iterations.values()
            if it.level == level.iteration_level
            and (it.iteration_id, level.geo_level) not in self.exclusions
        ]


@dataclass(frozen=True)
class SpecPaths:
    geo: Path
    codes: Path
    iterations: Path
    levels: Path
    total_only: Path
    exclusions: Optional[Path] = None


# ---------------------------------------------------------------------------
# Loading


def load_universe(
    paths: SpecPaths,
    race_cap: int = MAX_RACE_CODES,
    stability_overrides: Optional[Mapping[str, int]] = None,
) -> Universe:
    """Parses and validates the public specification files.

    Raises:
        ValidationError: listing every problem found across all files.
    """
    report = ValidationReport()
    if not 1 <= race_cap <= MAX_RACE_CODES:
        report.error("config", 0, "race_cap", f"race cap must be in 1..8, got {race_cap}")
    uni = Universe(race_cap=race_cap, stability_overrides=dict(stability_overrides or {}))

    src = Path(paths.geo).name
    for line, (block, state, county, tract, place, aiannh) in _read_table(
        Path(paths.geo), GEO_HEADER, report
    ):
        if not block or not state or not county or not tract:
            report.error(src, line, "missing_geography", "block, state, county and tract are required")
            continue
        if block in uni.blocks:
            report.error(src, line, "duplicate_block", f"block {block} listed twice")
            continue
        region = "PR" if state == PR_STATE_CODE else "US"
        uni.blocks[block] = {
            "__region__": region, NATION: region, STATE: state, COUNTY: county,
            TRACT: tract, PLACE: place or None, AIANNH: aiannh or None,
        }

    src = Path(paths.codes).name
    for line, (code, kind) in _read_table(Path(paths.codes), CODES_HEADER, report):
        if kind not in (RACE, ETHNICITY):
            report.error(src, line, "code_kind", f"kind must be race or ethnicity, got {kind!r}")
        elif code in uni.codes:
            report.error(src, line, "duplicate_code", f"code {code} listed twice")
        else:
            uni.codes[code] = kind

    src = Path(paths.iterations).name
    for line, (iteration_id, level, flag, codes) in _read_table(
        Path(paths.iterations), ITERATIONS_HEADER, report
    ):
        members = frozenset(c.strip() for c in codes.split(",") if c.strip())
        problems = []
        if iteration_id in uni.iterations:
            problems.append(("duplicate_iteration", f"iteration {iteration_id} defined twice"))
        if level not in ITERATION_LEVELS:
            problems.append(("iteration_level", f"unknown iteration level {level!r}"))
        if flag not in _ALONE_FLAGS:
            problems.append(("alone_flag", f"unknown alone flag {flag!r}"))
        if not members:
            problems.append(("empty_iteration", "iteration has no member codes"))
        unknown = sorted(c for c in members if c not in uni.codes)
        if unknown:
            problems.append(("unknown_code", f"codes not in codes file: {','.join(unknown)}"))
        kinds = {uni.codes[c] for c in members if c in uni.codes}
        if len(kinds) > 1:
            problems.append(("mixed_codes", "iteration mixes race and ethnicity codes"))
        kind = kinds.pop() if len(kinds) == 1 else RACE
        if kind == ETHNICITY and _ALONE_FLAGS.get(flag) == AOIC:
            problems.append(("ethnicity_alone", "ethnicity iterations must be Alone"))
        for kind_, msg in problems:
            report.error(src, line, kind_, msg)
        if not problems:
            uni.iterations[iteration_id] = CharacteristicIteration(
                iteration_id, level, _ALONE_FLAGS[flag], members, kind
            )

    src = Path(paths.levels).name
    seen_pairs: dict = {}
    for line, (level_id, geo_level, iteration_level, rho) in _read_table(
        Path(paths.levels), LEVELS_HEADER, report
    ):
        problems = []
        if geo_level not in GEO_LEVELS:
            problems.append(("geo_level", f"unknown geography level {geo_level!r}"))
        if iteration_level not in ITERATION_LEVELS:
            problems.append(("iteration_level", f"unknown iteration level {iteration_level!r}"))
        if (geo_level, iteration_level) == (AIANNH, REGIONAL):
            problems.append(("omitted_level", "(AIANNH, Regional) is not tabulated"))
        if any(spec.level_id == level_id for spec in uni.levels):
            problems.append(("duplicate_level", f"level id {level_id} defined twice"))
        if (geo_level, iteration_level) in seen_pairs:
            problems.append(("duplicate_level", f"({geo_level}, {iteration_level}) defined twice"))
        try:
            budget = to_fraction(rho)
            if budget <= 0:
                problems.append(("budget", f"level budget must be positive, got {rho}"))
        except (ValueError, ZeroDivisionError):
            problems.append(("budget", f"cannot parse budget {rho!r}"))
        for kind_, msg in problems:
            report.error(src, line, kind_, msg)
        if not problems:
            seen_pairs[(geo_level, iteration_level)] = level_id
            uni.levels.append(LevelSpec(level_id, geo_level, iteration_level, budget))

    uni.total_only = _load_pairs(Path(paths.total_only), TOTAL_ONLY_HEADER, uni, report, {NATION, STATE})
    if paths.exclusions is not None:
        uni.exclusions = _load_pairs(Path(paths.exclusions), EXCLUSIONS_HEADER, uni, report, set(GEO_LEVELS))

    for level_id in uni.stability_overrides:
        if not any(s.level_id == level_id for s in uni.levels):
            report.error("config", 0, "stability", f"stability override for unknown level {level_id}")
    if report.ok:
        for spec in uni.levels:
            declared, bound = stability_of(spec, uni), stability_bound(spec, uni)
            if declared < bound:
                report.error(
                    Path(paths.levels).name, 0, "stability",
                    f"level {spec.level_id}: declared stability {declared} is below "
                    f"the specification bound {bound}",
                )
    report.raise_if_failed()
    return uni


def _load_pairs(path, header, uni, report, allowed_geo) -> frozenset:
    pairs = set()
    for line, (iteration_id, geo_level) in _read_table(path, header, report):
        if iteration_id not in uni.iterations:
            report.error(path.name, line, "unknown_iteration", f"unknown iteration {iteration_id}")
        elif geo_level not in allowed_geo:
            report.error(
                path.name, line, "geo_level",
                f"geography level {geo_level!r} not allowed here ({', '.join(sorted(allowed_geo))})",
            )
        else:
            pairs.add((iteration_id, geo_level))
    return frozenset(pairs)


def read_persons(path: Path, report: Optional[ValidationReport] = None) -> list[PersonRecord]:
    """Parses ``persons.txt``; structurally malformed rows are reported, never skipped silently."""
    own = report is None
    report = report or ValidationReport()
    path = Path(path)
    records = []
    for line, (block, races, eth, sex, age) in _read_table(path, PERSONS_HEADER, report):
        codes = [c.strip() for c in races.split(",") if c.strip()]
        if len(set(codes)) != len(codes):
            report.error(path.name, line, "duplicate_race_code", "race code repeated within a record")
        try:
            age_value = int(age)
        except ValueError:
            report.error(path.name, line, "invalid_age", f"age is not an integer: {age!r}")
            continue
        records.append(PersonRecord(block, frozenset(codes), eth, sex, age_value, line=line))
    if own:
        report.raise_if_failed()
    return records


def validate_inputs(
    records: Iterable[PersonRecord],
    universe: Universe,
    source: str = "persons.txt",
    report: Optional[ValidationReport] = None,
) -> ValidationReport:
    """Checks every record against the code and geography domains.

    The returned report is for the curator only. Call
    ``report.raise_if_failed()`` before any private computation.
    """
    report = report or ValidationReport()
    for r in records:
        n = len(r.race_codes)
        if n == 0:
            report.error(source, r.line, "empty_race", "record has no race codes")
        elif n > universe.race_cap:
            report.error(
                source, r.line, "race_multiplicity",
                f"race multiplicity exceeded: {n} codes, cap {universe.race_cap}",
            )
        unknown = sorted(c for c in r.race_codes if universe.codes.get(c) != RACE)
        if unknown:
            report.error(source, r.line, "unknown_race_code", f"unknown race codes {','.join(unknown)}")
        if universe.codes.get(r.ethnicity_code) != ETHNICITY:
            report.error(source, r.line, "unknown_ethnicity_code", f"unknown ethnicity code {r.ethnicity_code!r}")
        if r.sex not in SEXES:
            report.error(source, r.line, "invalid_sex", f"sex must be Male or Female, got {r.sex!r}")
        if r.age < 0:
            report.error(source, r.line, "invalid_age", f"negative age {r.age}")
        elif r.age > AGE_WARNING:
            report.warn(source, r.line, "age_over_115", f"age {r.age} above {AGE_WARNING}")
        if r.block_id not in universe.blocks:
            report.error(source, r.line, "unknown_block", f"block {r.block_id!r} not in geography file")
    return report


# ---------------------------------------------------------------------------
# Group mapping


def map_to_groups(record: PersonRecord, level: LevelSpec, universe: Universe) -> frozenset:
    """All population groups at ``level`` that contain ``record``."""
    entity = universe.entity(record.block_id, level.geo_level)
    if entity is None:
        return frozenset()
    return frozenset(
        PopulationGroup(level.level_id, level.geo_level, entity, it.iteration_id)
        for it in universe.iterations_for(level)
        if it.contains(record)
    )


def stability_of(level: LevelSpec, universe: Universe) -> int:
    """Declared stability: race cap + 1 ethnicity iteration, unless overridden."""
    if level.level_id in universe.stability_overrides:
        return int(universe.stability_overrides[level.level_id])
    return universe.race_cap + 1


def stability_bound(level: LevelSpec, universe: Universe) -> int:
    """Largest number of groups any conceivable record can join at ``level``.

    Exact when every code sits in at most one Alone and at most one
    Alone-or-in-any-combination iteration (the usual partition structure);
    otherwise a safe over-estimate.
    """
    iterations = universe.iterations_for(level)
    race = [it for it in iterations if it.kind == RACE]
    aoic = [it for it in race if it.alone_flag == AOIC]
    alone = [it for it in race if it.alone_flag == ALONE]
    cap = universe.race_cap

    def hits(its):
        counts: dict = {}
        for it in its:
            for c in it.member_codes:
                counts[c] = counts.get(c, 0) + 1
        return counts

    aoic_hits, alone_hits = hits(aoic), hits(alone)
    if all(v <= 1 for v in aoic_hits.values()) and all(v <= 1 for v in alone_hits.values()):
        race_part = min(cap, len(aoic))
        for a in alone:
            reachable = {i for i, it in enumerate(aoic) if not it.member_codes.isdisjoint(a.member_codes)}
            race_part = max(race_part, 1 + min(cap, len(a.member_codes), len(reachable)))
    else:
        top = sorted(aoic_hits.values(), reverse=True)[:cap]
        race_part = sum(top) + max(alone_hits.values(), default=0)

    eth_hits = hits(it for it in iterations if it.kind == ETHNICITY)
    return race_part + max(eth_hits.values(), default=0)


def build_keyset(level: LevelSpec, universe: Universe, region: str = "US") -> KeySet:
    """Cross product of the level's geographic entities and iterations.

    Built from specification files only, so empty groups are included.
    """
    if (level.geo_level, level.iteration_level) == (AIANNH, REGIONAL):
        raise ValidationError([Issue("levels", 0, "omitted_level", "(AIANNH, Regional) is not tabulated")])
    if region not in REGIONS:
        raise ValueError(f"unknown region {region!r}")
    entities = [region] if level.geo_level == NATION else universe.entities(level.geo_level, region)
    iterations = universe.iterations_for(level)
    ids = [it.iteration_id for it in iterations]
    if len(set(ids)) != len(ids):
        raise ValidationError([Issue("iterations", 0, "duplicate_iteration", "duplicate group definitions")])
    groups = tuple(
        PopulationGroup(level.level_id, level.geo_level, e, i)
        for e in entities for i in sorted(ids)
    )
    total_only = frozenset(
        g for g in groups if (g.iteration_id, g.geo_level) in universe.total_only
    )
    return KeySet(level.level_id, groups, total_only)
