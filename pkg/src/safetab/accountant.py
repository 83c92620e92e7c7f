"""Exact privacy-loss bookkeeping for zCDP (rho) and pure DP (epsilon).

All amounts are ``Fraction`` values. The ledger is assertion-style: callers
declare what each step costs and the ledger checks the declared costs never
exceed a level's allocation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Optional, Sequence

from safetab.noise import Rational, to_fraction

ZCDP = "zCDP"
PURE_DP = "pureDP"
DEFINITIONS = (ZCDP, PURE_DP)


class BudgetError(Exception):
    """Raised on any attempt to spend budget that was not allocated."""


@dataclass(frozen=True, order=True)
class PrivacyBudget:
    """A rho (zCDP) or epsilon (pure DP) amount."""

    value: Fraction
    definition: str = ZCDP

    def __post_init__(self) -> None:
        value = to_fraction(self.value)
        if value < 0:
            raise ValueError(f"privacy budget must be non-negative, got {value}")
        if self.definition not in DEFINITIONS:
            raise ValueError(f"unknown privacy definition {self.definition!r}")
        object.__setattr__(self, "value", value)

    def _check(self, other: "PrivacyBudget") -> None:
        if not isinstance(other, PrivacyBudget):
            raise TypeError(f"expected PrivacyBudget, got {type(other).__name__}")
        if other.definition != self.definition:
            raise ValueError(
                f"cannot combine {self.definition} and {other.definition} budgets"
            )

    def __add__(self, other: "PrivacyBudget") -> "PrivacyBudget":
        self._check(other)
        return PrivacyBudget(self.value + other.value, self.definition)

    def __sub__(self, other: "PrivacyBudget") -> "PrivacyBudget":
        self._check(other)
        return PrivacyBudget(self.value - other.value, self.definition)

    def scale(self, factor: Rational) -> "PrivacyBudget":
        return PrivacyBudget(self.value * to_fraction(factor), self.definition)

    def __str__(self) -> str:
        symbol = "rho" if self.definition == ZCDP else "eps"
        return f"{symbol}={format_fraction(self.value)}"


def format_fraction(value: Fraction, digits: int = 6) -> str:
    """Decimal rendering for reports; exact when the decimal terminates."""
    value = Fraction(value)
    for places in range(digits + 1):
        if (value * 10**places).denominator == 1:
            return f"{float(value):.{places}f}"
    return f"{float(value):.{digits}f}"


def compose_sequential(b1: PrivacyBudget, b2: PrivacyBudget) -> PrivacyBudget:
    """Adaptive sequential composition: the costs add."""
    return b1 + b2


def compose_parallel(budgets: Sequence[PrivacyBudget], degree: int) -> PrivacyBudget:
    """Generalised parallel composition over a set family of maximum degree ``degree``.

    Every mechanism must run at the same budget; the family costs
    ``degree`` times that budget.
    """
    if degree < 1:
        raise ValueError(f"degree must be a positive integer, got {degree}")
    budgets = list(budgets)
    if not budgets:
        raise ValueError("compose_parallel needs at least one budget")
    first = budgets[0]
    for b in budgets[1:]:
        first._check(b)
        if b.value != first.value:
            raise ValueError(
                f"parallel composition requires equal budgets; got {first} and {b}"
            )
    return first.scale(degree)


def bounded_report(total_unbounded: PrivacyBudget) -> PrivacyBudget:
    """Bounded (replace-one) guarantee for the whole pipeline: twice the unbounded total."""
    return total_unbounded.scale(2)


def mechanism_cost(sensitivity: int, budget: PrivacyBudget) -> PrivacyBudget:
    """Cost of one noisy count run at ``budget`` on a query of the given sensitivity.

    Discrete Gaussian (zCDP) costs ``sensitivity**2 * rho`` for L2 sensitivity;
    the geometric mechanism (pure DP) costs ``sensitivity * eps`` for L1
    sensitivity.
    """
    if sensitivity < 1:
        raise ValueError(f"sensitivity must be a positive integer, got {sensitivity}")
    if budget.definition == ZCDP:
        return budget.scale(sensitivity * sensitivity)
    return budget.scale(sensitivity)


@dataclass(frozen=True)
class LevelBudgetPlan:
    """Per-level budgets and the Stage-1 fraction gamma."""

    per_level: tuple[tuple[str, Fraction], ...]
    gamma: Fraction
    definition: str = ZCDP
    declared_total: Optional[Fraction] = None

    def __post_init__(self) -> None:
        levels = tuple((str(k), to_fraction(v)) for k, v in self.per_level)
        gamma = to_fraction(self.gamma)
        if not 0 < gamma < 1:
            raise ValueError(f"gamma must be strictly between 0 and 1, got {gamma}")
        ids = [k for k, _ in levels]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate level ids in budget plan")
        for k, v in levels:
            if v <= 0:
                raise ValueError(f"level {k} budget must be positive, got {v}")
        object.__setattr__(self, "per_level", levels)
        object.__setattr__(self, "gamma", gamma)
        if self.declared_total is not None:
            declared = to_fraction(self.declared_total)
            if declared != sum(v for _, v in levels):
                raise ValueError(
                    f"level budgets sum to {sum(v for _, v in levels)}, declared {declared}"
                )
            object.__setattr__(self, "declared_total", declared)

    @property
    def level_ids(self) -> list[str]:
        return [k for k, _ in self.per_level]

    def budget(self, level_id: str) -> PrivacyBudget:
        for k, v in self.per_level:
            if k == level_id:
                return PrivacyBudget(v, self.definition)
        raise KeyError(level_id)

    @property
    def total(self) -> PrivacyBudget:
        return PrivacyBudget(sum((v for _, v in self.per_level), Fraction(0)), self.definition)


@dataclass(frozen=True)
class LedgerEntry:
    operation_id: str
    level_id: Optional[str]
    budget_spent: PrivacyBudget


@dataclass
class Ledger:
    """Running account of privacy loss against a ``LevelBudgetPlan``."""

    plan: LevelBudgetPlan
    entries: list[LedgerEntry] = field(default_factory=list)
    closed: bool = False

    @property
    def definition(self) -> str:
        return self.plan.definition

    def spent(self, level_id: Optional[str] = None) -> PrivacyBudget:
        total = Fraction(0)
        for e in self.entries:
            if level_id is None or e.level_id == level_id:
                total += e.budget_spent.value
        return PrivacyBudget(total, self.definition)

    def remaining(self, level_id: str) -> PrivacyBudget:
        return self.plan.budget(level_id) - self.spent(level_id)

    def spend(self, level_id: str, amount: PrivacyBudget, operation_id: str = "") -> "Ledger":
        """Records ``amount`` against ``level_id``; raises ``BudgetError`` on overspend."""
        if self.closed:
            raise BudgetError("ledger is closed")
        if level_id not in self.plan.level_ids:
            raise BudgetError(f"no allocation for level {level_id!r}")
        if amount.definition != self.definition:
            raise BudgetError(
                f"{amount.definition} spend on a {self.definition} ledger"
            )
        remaining = self.remaining(level_id)
        if amount.value > remaining.value:
            raise BudgetError(
                f"level {level_id}: spending {amount} exceeds remaining {remaining}"
            )
        self.entries.append(LedgerEntry(operation_id or "spend", level_id, amount))
        return self

    def record_postprocessing(self, operation_id: str) -> "Ledger":
        """Logs a step that reads only noisy outputs; it costs nothing."""
        if self.closed:
            raise BudgetError("ledger is closed")
        self.entries.append(
            LedgerEntry(operation_id, None, PrivacyBudget(0, self.definition))
        )
        return self

    def close(self) -> None:
        self.closed = True

    @property
    def total_unbounded(self) -> PrivacyBudget:
        return self.spent()

    @property
    def total_bounded(self) -> PrivacyBudget:
        return bounded_report(self.total_unbounded)

    def report(self, title: str = "Privacy-loss accounting") -> str:
        """Human-readable accounting report."""
        lines = [title, f"definition: {self.definition}", ""]
        lines.append(f"{'operation':<40} {'level':<10} {'spent':>14}")
        for e in self.entries:
            lines.append(
                f"{e.operation_id:<40} {e.level_id or '-':<10} "
                f"{format_fraction(e.budget_spent.value):>14}"
            )
        lines.append("")
        lines.append(f"{'level':<10} {'allocated':>14} {'spent':>14} {'bounded':>14}")
        for level_id, alloc in self.plan.per_level:
            used = self.spent(level_id).value
            lines.append(
                f"{level_id:<10} {format_fraction(alloc):>14} "
                f"{format_fraction(used):>14} {format_fraction(2 * used):>14}"
            )
        lines.append("")
        lines.append(f"total unbounded: {format_fraction(self.total_unbounded.value)}")
        lines.append(f"total bounded:   {format_fraction(self.total_bounded.value)}")
        lines.append(f"exact unbounded: {self.total_unbounded.value}")
        return "\n".join(lines) + "\n"


def spend(ledger: Ledger, level_id: str, amount: PrivacyBudget, operation_id: str = "") -> Ledger:
    return ledger.spend(level_id, amount, operation_id)


def sum_budgets(budgets: Iterable[PrivacyBudget], definition: str = ZCDP) -> PrivacyBudget:
    total = PrivacyBudget(0, definition)
    for b in budgets:
        total = compose_sequential(total, b)
    return total
