"""Tests for parsing, validation, group mapping and KeySets."""

from dataclasses import replace
from fractions import Fraction

import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from conftest import TOY_CODES, TOY_GEO, TOY_ITERATIONS, TOY_LEVELS, write_spec, write_table
from safetab.datamodel import (
    PersonRecord,
    PopulationGroup,
    ValidationError,
    ValidationReport,
    build_keyset,
    load_universe,
    map_to_groups,
    read_persons,
    stability_bound,
    stability_of,
    validate_inputs,
)


def person(block, races, eth="NOTHISP", sex="Male", age=30, line=2):
    return PersonRecord(block, frozenset(races), eth, sex, age, line=line)


def groups_of(record, universe, level_id):
    return {(g.entity_id, g.iteration_id) for g in map_to_groups(record, universe.level(level_id), universe)}


def test_load_toy_universe(toy_spec):
    uni = load_universe(toy_spec)
    assert len(uni.iterations) == 11
    assert uni.level("CD").rho == Fraction(1)
    assert uni.region_of("3609701") == "US"
    assert uni.entities("County", "US") == ["16001", "36097"]


def test_regional_mapping_example(toy_spec):
    uni = load_universe(toy_spec)
    r = person("1600101", {"NIG", "BEN", "TON"})
    assert groups_of(r, uni, "SR") == {("16", "SSA_C"), ("16", "POL_C")}


def test_alone_and_aoic_both_hold_for_single_race(toy_spec):
    uni = load_universe(toy_spec)
    r = person("3609701", {"DUT"})
    assert groups_of(r, uni, "CD") == {("36097", "DUT_A"), ("36097", "DUT_C")}


def test_multi_race_is_not_alone(toy_spec):
    uni = load_universe(toy_spec)
    r = person("3609701", {"DUT", "NIG"})
    assert groups_of(r, uni, "CD") == {("36097", "DUT_C"), ("36097", "NIG_C")}


def test_ethnicity_iteration(toy_spec):
    uni = load_universe(toy_spec)
    r = person("3609701", {"TON"}, eth="HISP")
    assert groups_of(r, uni, "CD") == {("36097", "TON_C"), ("36097", "HISP_D")}


def test_outside_aiannh_maps_to_nothing(toy_spec):
    uni = load_universe(toy_spec)
    assert groups_of(person("1600102", {"NIG"}), uni, "AD") == set()
    assert groups_of(person("1600101", {"NIG"}), uni, "AD") == {("A1", "NIG_A"), ("A1", "NIG_C")}


def test_stability_defaults_and_caps(toy_spec):
    assert stability_of(load_universe(toy_spec).level("SD"), load_universe(toy_spec)) == 9
    uni3 = load_universe(toy_spec, race_cap=3)
    assert stability_of(uni3.level("SD"), uni3) == 4
    # With cap 1 a single-race person still joins X Alone and X AOIC, so the
    # default cap + 1 = 2 understates the bound (3) and is refused.
    with pytest.raises(ValidationError, match="below the specification bound 3"):
        load_universe(toy_spec, race_cap=1)
    uni1 = load_universe(toy_spec, race_cap=1, stability_overrides={lv.split("|")[0]: 3 for lv in TOY_LEVELS})
    assert stability_of(uni1.level("SD"), uni1) == 3


def test_stability_bound_single_race_toy(tmp_path):
    spec = write_spec(
        tmp_path, ["R|race", "E|ethnicity"],
        ["RC|Detailed|AloneOrInAnyCombination|R", "EA|Detailed|Alone|E"],
        ["L|State|Detailed|1"], ["b|01|01001|01001000100||"],
    )
    uni = load_universe(spec, race_cap=1)
    assert stability_bound(uni.level("L"), uni) == 2 == stability_of(uni.level("L"), uni)


def test_declared_stability_below_bound_rejected(toy_spec):
    with pytest.raises(ValidationError, match="stability"):
        load_universe(toy_spec, stability_overrides={"SD": 2})
    with pytest.raises(ValidationError, match="unknown level"):
        load_universe(toy_spec, stability_overrides={"nope": 9})


def test_keyset_cross_product(tmp_path):
    spec = write_spec(
        tmp_path, ["R1|race", "R2|race", "E|ethnicity"],
        ["A|Detailed|Alone|R1", "B|Detailed|AloneOrInAnyCombination|R2", "C|Detailed|Alone|E"],
        ["L|State|Detailed|1"],
        ["b1|01|01001|01001000100||", "b2|02|02001|02001000100||"],
    )
    uni = load_universe(spec)
    ks = build_keyset(uni.level("L"), uni)
    assert len(ks) == 6
    assert ks.groups == tuple(sorted(ks.groups))
    assert build_keyset(uni.level("L"), uni) == ks


def test_keyset_exclusions_apply_to_one_level(tmp_path):
    spec = write_spec(
        tmp_path / "x", TOY_CODES, TOY_ITERATIONS, TOY_LEVELS, TOY_GEO, exclusions=["TON_C|County"],
    )
    uni = load_universe(spec)
    county = {g.iteration_id for g in build_keyset(uni.level("CD"), uni)}
    state = {g.iteration_id for g in build_keyset(uni.level("SD"), uni)}
    assert "TON_C" not in county and "TON_C" in state


def test_keyset_nation_entity_is_region(golden_spec):
    uni = load_universe(golden_spec)
    us = build_keyset(uni.level("L01"), uni, "US")
    pr = build_keyset(uni.level("L01"), uni, "PR")
    assert {g.entity_id for g in us} == {"US"}
    assert {g.entity_id for g in pr} == {"PR"}
    states = {g.entity_id for g in build_keyset(uni.level("L02"), uni, "US")}
    assert states == {"01", "11"}


def test_keyset_total_only_membership(golden_spec):
    uni = load_universe(golden_spec)
    ks = build_keyset(uni.level("L08"), uni, "US")
    assert {g.iteration_id for g in ks.total_only} == {"R02"}
    assert all(g.geo_level == "State" for g in ks.total_only)


def test_keyset_ignores_private_records(golden_spec, golden_dir):
    uni = load_universe(golden_spec)
    before = build_keyset(uni.level("L03"), uni)
    read_persons(golden_dir / "persons.txt")
    assert build_keyset(uni.level("L03"), uni) == before


def test_aiannh_regional_rejected(tmp_path):
    spec = write_spec(
        tmp_path, TOY_CODES, TOY_ITERATIONS, ["X|AIANNH|Regional|1"], TOY_GEO,
    )
    with pytest.raises(ValidationError, match="AIANNH, Regional"):
        load_universe(spec)


@pytest.mark.parametrize(
    "iterations, message",
    [
        (["A|Detailed|Alone|R1", "A|Detailed|Alone|R1"], "defined twice"),
        (["A|Detailed|AloneOrInAnyCombination|E"], "must be Alone"),
        (["A|Detailed|Alone|R1,E"], "mixes race and ethnicity"),
        (["A|Detailed|Alone|ZZ"], "codes not in codes file"),
        (["A|Weird|Alone|R1"], "unknown iteration level"),
    ],
)
def test_bad_iterations(tmp_path, iterations, message):
    spec = write_spec(
        tmp_path, ["R1|race", "E|ethnicity"], iterations, ["L|State|Detailed|1"], ["b|01|01001|01001000100||"],
    )
    with pytest.raises(ValidationError, match=message):
        load_universe(spec)


@pytest.mark.parametrize("rho", ["0", "-0.1", "abc"])
def test_nonpositive_or_bad_budget_rejected(tmp_path, rho):
    spec = write_spec(tmp_path, TOY_CODES, TOY_ITERATIONS, [f"SD|State|Detailed|{rho}"], TOY_GEO)
    with pytest.raises(ValidationError, match="budget"):
        load_universe(spec)


def test_total_only_restricted_to_nation_and_state(tmp_path):
    spec = write_spec(tmp_path, TOY_CODES, TOY_ITERATIONS, TOY_LEVELS, TOY_GEO, total_only=["NIG_C|County"])
    with pytest.raises(ValidationError, match="not allowed"):
        load_universe(spec)


def test_malformed_rows_are_errors(tmp_path):
    spec = write_spec(tmp_path, TOY_CODES, TOY_ITERATIONS, TOY_LEVELS, TOY_GEO + ["broken|16"])
    with pytest.raises(ValidationError, match="field_count"):
        load_universe(spec)
    bad_header = write_table(tmp_path / "p.txt", "block|race|eth", [])
    with pytest.raises(ValidationError, match="schema"):
        read_persons(bad_header)


def test_read_persons_and_validate(tmp_path, toy_spec):
    uni = load_universe(toy_spec)
    path = write_table(
        tmp_path / "persons.txt", "block|race_codes|ethnicity|sex|age",
        ["1600101|NIG,BEN|NOTHISP|Female|4", "3609701|DUT|HISP|Male|117"],
    )
    records = read_persons(path)
    assert records[0].race_codes == {"NIG", "BEN"}
    assert records[1].line == 3
    report = validate_inputs(records, uni)
    assert report.ok
    assert [w.kind for w in report.warnings] == ["age_over_115"]


def test_empty_person_file_is_valid(tmp_path, toy_spec):
    path = write_table(tmp_path / "persons.txt", "block|race_codes|ethnicity|sex|age", [])
    assert read_persons(path) == []
    assert validate_inputs([], load_universe(toy_spec)).ok


def test_race_multiplicity_exceeded(golden_spec):
    uni = load_universe(golden_spec)
    r = person("0100101", {f"X{i}" for i in range(9)}, eth="H1")
    report = validate_inputs([r], uni)
    assert any("race multiplicity exceeded" in i.message for i in report.errors)


@pytest.mark.parametrize(
    "record, kind",
    [
        (person("nowhere", {"NIG"}), "unknown_block"),
        (person("1600101", {"XXX"}), "unknown_race_code"),
        (person("1600101", {"NIG"}, eth="NIG"), "unknown_ethnicity_code"),
        (person("1600101", {"NIG"}, sex="U"), "invalid_sex"),
        (person("1600101", {"NIG"}, age=-1), "invalid_age"),
        (person("1600101", set()), "empty_race"),
    ],
)
def test_validation_failures(toy_spec, record, kind):
    report = validate_inputs([record], load_universe(toy_spec))
    assert kind in {i.kind for i in report.errors}
    with pytest.raises(ValidationError):
        report.raise_if_failed()


def test_read_persons_reports_bad_age_and_duplicates(tmp_path):
    path = write_table(
        tmp_path / "persons.txt", "block|race_codes|ethnicity|sex|age",
        ["b|R,R|E|Male|3", "b|R|E|Male|old"],
    )
    report = ValidationReport()
    read_persons(path, report)
    assert {i.kind for i in report.errors} == {"duplicate_race_code", "invalid_age"}
    assert "errors: 2" in report.render()


def test_geo_disjointness(golden_spec):
    uni = load_universe(golden_spec)
    r = person("0100101", {"1000", "1001"}, eth="H1")
    for lv in uni.levels:
        entities = {g.entity_id for g in map_to_groups(r, lv, uni)}
        assert len(entities) <= 1


# ---------------------------------------------------------------------------
# Stability fuzzing

WIDE_CODES = [f"C{i:02d}|race" for i in range(12)] + ["E1|ethnicity", "E2|ethnicity"]
WIDE_ITERATIONS = (
    [f"A{i:02d}|Detailed|Alone|C{i:02d}" for i in range(12)]
    + [f"O{i:02d}|Detailed|AloneOrInAnyCombination|C{i:02d}" for i in range(12)]
    + ["EA1|Detailed|Alone|E1", "EA2|Detailed|Alone|E2"]
    + ["RA|Regional|AloneOrInAnyCombination|C00,C01,C02,C03", "RB|Regional|AloneOrInAnyCombination|C04,C05",
       "RC|Regional|Alone|C06,C07,C08", "RE|Regional|Alone|E1,E2"]
)


@pytest.fixture(scope="module")
def wide_universe(tmp_path_factory):
    spec = write_spec(
        tmp_path_factory.mktemp("wide"), WIDE_CODES, WIDE_ITERATIONS,
        ["D|County|Detailed|1", "R|County|Regional|1"], ["b|01|01001|01001000100||"],
    )
    return load_universe(spec)


def test_wide_universe_bound_is_nine(wide_universe):
    detailed = wide_universe.level("D")
    assert stability_bound(detailed, wide_universe) == 9
    r = person("b", {f"C{i:02d}" for i in range(8)}, eth="E1")
    assert len(map_to_groups(r, detailed, wide_universe)) == 9


@settings(max_examples=400, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(
    codes=st.sets(st.sampled_from([f"C{i:02d}" for i in range(12)]), min_size=1, max_size=8),
    eth=st.sampled_from(["E1", "E2"]),
)
def test_memberships_never_exceed_stability(wide_universe, codes, eth):
    r = person("b", codes, eth=eth)
    for level in wide_universe.levels:
        n = len(map_to_groups(r, level, wide_universe))
        assert n <= stability_bound(level, wide_universe) <= stability_of(level, wide_universe)


@settings(max_examples=200, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(codes=st.sets(st.sampled_from([f"C{i:02d}" for i in range(12)]), min_size=1, max_size=8))
def test_alone_implies_aoic(wide_universe, codes):
    level = wide_universe.level("D")
    got = {g.iteration_id for g in map_to_groups(person("b", codes, eth="E2"), level, wide_universe)}
    for it in got:
        if it.startswith("A"):
            assert "O" + it[1:] in got


def test_population_group_ordering():
    a = PopulationGroup("L1", "County", "001", "X")
    b = replace(a, entity_id="002")
    assert sorted([b, a]) == [a, b]
