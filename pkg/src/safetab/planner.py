"""Budget planning: MOE <-> rho conversion, level tables and curve data.

MOE arithmetic is exact. ``1.96 sigma`` is floored via an integer square
root on a ``Fraction``, so a budget built for MOE ``m`` maps back to ``m``
without float round-off.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Optional

from safetab.accountant import ZCDP, format_fraction
from safetab.datamodel import GEO_LEVELS, ITERATION_LEVELS, MAX_RACE_CODES, SUBSTATE_LEVELS
from safetab.noise import DiscreteGaussian, Rational, _floor_sqrt_fraction, to_fraction
from safetab.postprocess import derive_threshold, release_bias, release_bias_continuous, suppression_probability

Z95 = Fraction(49, 25)  # 1.96
MOE_CONSTANT = Z95 * Z95 / 2  # 1.9208
ROUNDED_CONSTANT = Fraction(192, 100)  # the rounded 1.92, slightly more conservative
STEP_TOTAL_ONLY = "total_only"
CURVE_RATIOS = tuple(Fraction(k, 20) for k in range(41))  # n / T in [0, 2], step 0.05


def _stage_rho(rho_level: Fraction, gamma: Fraction, step) -> Fraction:
    if step == 2:
        return (1 - gamma) * rho_level
    if step == 1:
        return gamma * rho_level
    if step == STEP_TOTAL_ONLY:
        return rho_level
    raise ValueError(f"step must be 1, 2 or {STEP_TOTAL_ONLY!r}, got {step!r}")


def sigma_squared_for_level(rho_level: Rational, gamma: Rational, stability: int, step=2) -> Fraction:
    """Per-cell noise variance ``stability / (2 * stage_rho)``."""
    rho_level = to_fraction(rho_level)
    if rho_level <= 0:
        raise ValueError(f"rho must be positive, got {rho_level}")
    return Fraction(stability) / (2 * _stage_rho(rho_level, to_fraction(gamma), step))


def moe_for_level(rho_level: Rational, gamma: Rational, stability: int, step=2) -> int:
    """95% MOE ``floor(1.96 sigma)`` of one published count at a level.

    Args:
        rho_level: Total budget of the level.
        gamma: Stage-1 fraction.
        stability: Max groups one record joins in the level.
        step: 2 for a Stage-2 cell, 1 for the Stage-1 total, ``"total_only"``
            for a TotalOnly group's single count.
    """
    s2 = sigma_squared_for_level(rho_level, gamma, stability, step)
    return _floor_sqrt_fraction(Z95 * Z95 * s2)


def rho_for_moe(moe: int, gamma: Rational, stability: int, constant: Rational = MOE_CONSTANT):
    """Level budgets that give a Stage-2 MOE of ``moe``.

    Returns:
        ``(step2_rho, total_rho)`` for the whole level. The per-group Stage-2
        budget is ``constant / moe**2``.
    """
    if int(moe) != moe or moe < 1:
        raise ValueError(f"moe must be a positive integer, got {moe}")
    gamma = to_fraction(gamma)
    step2 = stability * to_fraction(constant) / (int(moe) ** 2)
    return step2, step2 / (1 - gamma)


# ---------------------------------------------------------------------------
# Config


def parse_key_values(text: str, source: str = "config") -> list[tuple[str, str, int]]:
    """Parses ``key = value`` lines; ``#`` starts a comment.

    Returns:
        ``(key, value, line_number)`` in file order.
    """
    out = []
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{source}:{number}: expected key=value, got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ValueError(f"{source}:{number}: empty key")
        out.append((key, value, number))
    return out


@dataclass(frozen=True)
class PlannedLevel:
    level_id: str
    geo_level: str
    iteration_level: str
    moe_target: int


@dataclass(frozen=True)
class PlannerInput:
    """Planner settings.

    ``threshold_rhos`` adds extra level budgets to the threshold table beyond
    the ones implied by the levels (e.g. to check a published table).
    """

    levels: tuple
    gamma: Fraction = Fraction(1, 10)
    race_cap: int = MAX_RACE_CODES
    p: float = 0.9999
    constant: Fraction = MOE_CONSTANT
    threshold_rhos: tuple = ()

    def __post_init__(self) -> None:
        gamma = to_fraction(self.gamma)
        if not 0 < gamma < 1:
            raise ValueError(f"gamma must be strictly between 0 and 1, got {gamma}")
        if not 1 <= self.race_cap <= MAX_RACE_CODES:
            raise ValueError(f"race cap must be in 1..{MAX_RACE_CODES}, got {self.race_cap}")
        if not 0 < self.p < 1:
            raise ValueError(f"p must be in (0, 1), got {self.p}")
        for lv in self.levels:
            if int(lv.moe_target) != lv.moe_target or lv.moe_target < 1:
                raise ValueError(f"{lv.level_id}: MOE target must be a positive integer")
        object.__setattr__(self, "gamma", gamma)
        object.__setattr__(self, "constant", to_fraction(self.constant))
        object.__setattr__(self, "threshold_rhos", tuple(to_fraction(r) for r in self.threshold_rhos))

    @property
    def stability(self) -> int:
        return self.race_cap + 1

    @classmethod
    def from_file(cls, path: Path) -> "PlannerInput":
        """Reads ``planner.cfg``.

        Example::

            gamma = 0.1
            race_cap = 8
            p = 0.9999
            level.N_D = Nation, Detailed, 3
            threshold_rhos = 0.008, 0.159, 0.543
        """
        path = Path(path)
        kwargs: dict = {}
        levels = []
        for key, value, number in parse_key_values(path.read_text(encoding="utf-8"), path.name):
            where = f"{path.name}:{number}"
            if key.startswith("level."):
                parts = [x.strip() for x in value.split(",")]
                if len(parts) != 3:
                    raise ValueError(f"{where}: expected geo_level, iteration_level, moe")
                geo, it_level, moe = parts
                if geo not in GEO_LEVELS or it_level not in ITERATION_LEVELS:
                    raise ValueError(f"{where}: unknown level ({geo}, {it_level})")
                levels.append(PlannedLevel(key[len("level."):], geo, it_level, int(moe)))
            elif key == "gamma":
                kwargs["gamma"] = Fraction(value)
            elif key == "race_cap":
                kwargs["race_cap"] = int(value)
            elif key == "p":
                kwargs["p"] = float(value)
            elif key == "constant":
                kwargs["constant"] = Fraction(value)
            elif key == "threshold_rhos":
                kwargs["threshold_rhos"] = tuple(Fraction(x.strip()) for x in value.split(",") if x.strip())
            else:
                raise ValueError(f"{where}: unknown key {key!r}")
        if not levels:
            raise ValueError(f"{path.name}: no level.* entries")
        return cls(tuple(levels), **kwargs)


# ---------------------------------------------------------------------------
# Report


@dataclass(frozen=True)
class LevelRow:
    level: PlannedLevel
    step2_rho: Fraction
    total_rho: Fraction
    sigma: float
    moe_achieved: int
    threshold: Optional[int]

    @property
    def bounded_step2_rho(self) -> Fraction:
        return 2 * self.step2_rho

    @property
    def bounded_total_rho(self) -> Fraction:
        return 2 * self.total_rho


@dataclass(frozen=True)
class ThresholdRow:
    rho: Fraction
    sigma: float
    threshold: int
    zero_suppression: float


@dataclass
class PlannerReport:
    input: PlannerInput
    levels: list = field(default_factory=list)
    thresholds: list = field(default_factory=list)
    bias_curve: list = field(default_factory=list)  # (rho, T, ratio, n, discrete, continuous)
    suppression_curve: list = field(default_factory=list)  # (rho, T, ratio, n, probability)

    @property
    def total_rho(self) -> Fraction:
        return sum((r.total_rho for r in self.levels), Fraction(0))


def plan(inp: PlannerInput) -> PlannerReport:
    """Computes the level table, threshold table and curves (no file output)."""
    s = inp.stability
    report = PlannerReport(inp)
    for lv in inp.levels:
        step2, total = rho_for_moe(lv.moe_target, inp.gamma, s, inp.constant)
        s2 = sigma_squared_for_level(total, inp.gamma, s)
        threshold = None
        if lv.geo_level in SUBSTATE_LEVELS:
            threshold = derive_threshold(total, inp.gamma, s, inp.p, ZCDP)
        report.levels.append(LevelRow(
            lv, step2, total, math.sqrt(s2), moe_for_level(total, inp.gamma, s), threshold,
        ))

    rhos = list(inp.threshold_rhos)
    for row in report.levels:
        if row.threshold is not None and row.total_rho not in rhos:
            rhos.append(row.total_rho)
    for rho in rhos:
        d = DiscreteGaussian(sigma_squared_for_level(rho, inp.gamma, s))
        threshold = derive_threshold(rho, inp.gamma, s, inp.p, ZCDP)
        report.thresholds.append(ThresholdRow(rho, d.sigma, threshold, suppression_probability(0, d, threshold)))
        for ratio in CURVE_RATIOS:
            n = ratio * threshold
            report.suppression_curve.append(
                (rho, threshold, ratio, n, suppression_probability(float(n), d, threshold))
            )
            report.bias_curve.append((
                rho, threshold, ratio, n,
                release_bias(float(n), d, threshold),
                release_bias_continuous(float(n), d.sigma, threshold),
            ))
    return report


def _num(x) -> str:
    if isinstance(x, Fraction):
        return format_fraction(x)
    return f"{x:.6f}"


def emit_planner_report(inp: PlannerInput, out_dir: Path) -> PlannerReport:
    """Writes levels.csv, thresholds.csv, bias_curve.csv, suppression_curve.csv and summary.txt."""
    report = plan(inp)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    def write(name, header, rows):
        with open(out_dir / name, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)

    write(
        "levels.csv",
        ("level_id", "geo_level", "iteration_level", "moe_target", "moe_achieved", "sigma",
         "step2_rho", "total_rho", "bounded_step2_rho", "bounded_total_rho", "threshold"),
        [
            (r.level.level_id, r.level.geo_level, r.level.iteration_level, r.level.moe_target,
             r.moe_achieved, _num(r.sigma), _num(r.step2_rho), _num(r.total_rho),
             _num(r.bounded_step2_rho), _num(r.bounded_total_rho),
             "" if r.threshold is None else r.threshold)
            for r in report.levels
        ],
    )
    write(
        "thresholds.csv",
        ("rho", "sigma", "threshold", "zero_suppression_probability"),
        [(_num(t.rho), _num(t.sigma), t.threshold, f"{t.zero_suppression:.8f}") for t in report.thresholds],
    )
    write(
        "bias_curve.csv",
        ("rho", "threshold", "n_over_T", "n", "bias_discrete", "bias_continuous"),
        [(_num(rho), T, _num(ratio), _num(n), _num(b), _num(c)) for rho, T, ratio, n, b, c in report.bias_curve],
    )
    write(
        "suppression_curve.csv",
        ("rho", "threshold", "n_over_T", "n", "suppression_probability"),
        [(_num(rho), T, _num(ratio), _num(n), f"{p:.8f}") for rho, T, ratio, n, p in report.suppression_curve],
    )
    total = report.total_rho
    (out_dir / "summary.txt").write_text(
        f"stability: {inp.stability}\ngamma: {format_fraction(inp.gamma)}\n"
        f"total unbounded rho: {format_fraction(total)}\ntotal bounded rho: {format_fraction(2 * total)}\n",
        encoding="utf-8",
    )
    return report
