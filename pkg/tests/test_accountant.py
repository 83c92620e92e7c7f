"""Tests for budget arithmetic and the ledger."""

from fractions import Fraction

import pytest

from safetab.accountant import (
    PURE_DP,
    ZCDP,
    BudgetError,
    Ledger,
    LevelBudgetPlan,
    PrivacyBudget,
    bounded_report,
    compose_parallel,
    compose_sequential,
    format_fraction,
    mechanism_cost,
    spend,
    sum_budgets,
)

PRODUCTION_TOTALS = ["2.134", "2.134"] + ["0.159"] * 4 + ["0.008"] * 5


def rho(x):
    return PrivacyBudget(Fraction(x))


def production_plan():
    return LevelBudgetPlan(
        tuple((f"L{i + 1:02d}", Fraction(v)) for i, v in enumerate(PRODUCTION_TOTALS)),
        Fraction(1, 10),
        declared_total=Fraction("4.944"),
    )


def test_budget_is_exact_and_nonnegative():
    assert rho("0.1").value == Fraction(1, 10)
    assert PrivacyBudget(0.159).value == Fraction(159, 1000)
    with pytest.raises(ValueError):
        PrivacyBudget(-1)
    with pytest.raises(ValueError):
        PrivacyBudget(1, "approxDP")


def test_sequential_composition():
    assert compose_sequential(rho("0.1"), rho("0.05")) == rho("0.15")
    assert compose_sequential(rho("0.3"), rho(0)) == rho("0.3")
    total = sum_budgets(rho(v) for v in PRODUCTION_TOTALS)
    assert total.value == Fraction("4.944")


def test_mixed_definitions_rejected():
    with pytest.raises(ValueError):
        compose_sequential(rho("0.1"), PrivacyBudget(Fraction(1, 10), PURE_DP))
    with pytest.raises(TypeError):
        compose_sequential(rho("0.1"), Fraction(1, 10))


def test_no_float_drift():
    # Ten float additions of 0.1 do not make 1.0; Fractions do.
    assert sum_budgets([PrivacyBudget(0.1)] * 10).value == 1


def test_parallel_composition():
    rho_i = Fraction("0.159")
    assert compose_parallel([rho(rho_i / 9)] * 5, 9).value == rho_i
    assert compose_parallel([rho("0.37")], 1) == rho("0.37")
    assert compose_parallel([rho("0.02")] * 4, 3).value == Fraction("0.06")
    with pytest.raises(ValueError):
        compose_parallel([rho("0.02"), rho("0.03")], 3)
    with pytest.raises(ValueError):
        compose_parallel([rho("0.02")], 0)
    with pytest.raises(ValueError):
        compose_parallel([], 2)


def test_bounded_report():
    assert bounded_report(rho("2.134")).value == Fraction("4.268")
    assert bounded_report(rho(0)).value == 0
    assert bounded_report(rho("4.944")).value == Fraction("9.888")


def test_mechanism_cost():
    assert mechanism_cost(1, rho("0.1")) == rho("0.1")
    assert mechanism_cost(3, rho("0.01")).value == Fraction("0.09")
    eps = PrivacyBudget(Fraction(1, 4), PURE_DP)
    assert mechanism_cost(3, eps).value == Fraction(3, 4)
    with pytest.raises(ValueError):
        mechanism_cost(0, rho("0.1"))


def test_plan_invariants():
    plan = production_plan()
    assert plan.total.value == Fraction("4.944")
    assert plan.budget("L03") == rho("0.159")
    with pytest.raises(KeyError):
        plan.budget("nope")
    with pytest.raises(ValueError):
        LevelBudgetPlan((("a", 1),), Fraction(1, 10), declared_total=2)
    with pytest.raises(ValueError):
        LevelBudgetPlan((("a", 1),), 1)
    with pytest.raises(ValueError):
        LevelBudgetPlan((("a", 1), ("a", 2)), Fraction(1, 10))
    with pytest.raises(ValueError):
        LevelBudgetPlan((("a", 0),), Fraction(1, 10))


def test_spend_in_two_stages_exhausts_level():
    plan = production_plan()
    ledger = Ledger(plan)
    level = plan.budget("L03")
    spend(ledger, "L03", level.scale(plan.gamma), "stage1")
    spend(ledger, "L03", level.scale(1 - plan.gamma), "stage2")
    assert ledger.remaining("L03").value == 0


def test_overspend_is_an_error():
    ledger = Ledger(production_plan())
    ledger.spend("L07", rho("0.008"))
    with pytest.raises(BudgetError):
        ledger.spend("L07", rho(Fraction(1, 10**12)))
    with pytest.raises(BudgetError):
        ledger.spend("L99", rho("0.001"))
    with pytest.raises(BudgetError):
        ledger.spend("L01", PrivacyBudget(Fraction(1, 10), PURE_DP))


def test_closed_ledger_refuses_everything():
    ledger = Ledger(production_plan())
    ledger.close()
    with pytest.raises(BudgetError):
        ledger.spend("L01", rho("0.1"))
    with pytest.raises(BudgetError):
        ledger.record_postprocessing("late")


def test_full_production_conservation_and_report():
    plan = production_plan()
    ledger = Ledger(plan)
    for level_id, budget in plan.per_level:
        ledger.spend(level_id, rho(budget), f"tabulate:{level_id}")
    ledger.record_postprocessing("postprocess:marginals")
    assert ledger.total_unbounded.value == Fraction("4.944")
    assert ledger.total_bounded.value == Fraction("9.888")
    assert ledger.entries[-1].budget_spent.value == 0
    text = ledger.report()
    assert "total unbounded: 4.944" in text
    assert "total bounded:   9.888" in text
    assert "postprocess:marginals" in text


def test_format_fraction():
    assert format_fraction(Fraction("4.944")) == "4.944"
    assert format_fraction(Fraction(1, 3)) == "0.333333"
    assert format_fraction(Fraction(2)) == "2"
    assert str(rho("0.5")) == "rho=0.5"
    assert str(PrivacyBudget(1, PURE_DP)) == "eps=1"
    assert ZCDP != PURE_DP
