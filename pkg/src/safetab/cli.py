"""Command line entry point: validate, run, plan and synth.

Run configuration is a plain ``key = value`` file. Relative paths resolve
against the config file's directory::

    persons = persons.txt
    geo = geo.txt
    codes = codes.txt
    iterations = iterations.txt
    levels = levels.txt
    total_only = total_only.txt
    exclusions = exclusions.txt        # optional
    coterminous = coterminous.txt      # optional
    output_dir = out
    private_dir = private
    privacy_definition = zCDP          # or pureDP
    gamma = 0.1
    thresholds = 10, 100, 1000
    thresholds.L3 = 5, 50, 500         # per-level override
    stability.L3 = 9                   # per-level declared stability
    suppression_p = 0.9999             # omit to disable suppression
    suppression_threshold.L3 = 21      # per-level override
    race_cap = 8
    total_budget = 4.944               # optional cross-check of the levels file
    seed = 20200401
    region = US                        # US, PR or both
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from safetab.accountant import PURE_DP, ZCDP, BudgetError, Ledger, LevelBudgetPlan, format_fraction
from safetab.datamodel import (
    ETHNICITY,
    PERSONS_HEADER,
    RACE,
    REGIONS,
    SEXES,
    SpecPaths,
    ValidationError,
    ValidationReport,
    build_keyset,
    load_universe,
    read_persons,
    stability_of,
    validate_inputs,
)
from safetab.engine import MECHANISM_FOR_DEFINITION, AdaptiveConfig, run_safetab
from safetab.noise import RandomSource
from safetab.planner import PlannerInput, emit_planner_report, parse_key_values
from safetab.postprocess import (
    SuppressionPolicy,
    attach_marginals,
    coterminous_fixup,
    load_coterminous,
    suppress,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VALIDATION = 3
EXIT_BUDGET = 4
EXIT_IO = 5

OUTPUT_HEADER = ("region", "geo_level", "entity_id", "iteration_id", "table_id", "cell_key", "count")
TABLE_IDS = ("T01001", "T02001", "T02002", "T02003")
_SPEC_KEYS = ("geo", "codes", "iterations", "levels", "total_only")
_PATH_KEYS = ("persons",) + _SPEC_KEYS + ("exclusions", "coterminous", "output_dir", "private_dir")


class ConfigError(ValueError):
    """The run configuration is malformed."""


def _int_list(value: str) -> tuple:
    return tuple(int(x.strip()) for x in value.split(",") if x.strip())


@dataclass
class RunConfig:
    """Everything a run needs; budgets come from the levels file."""

    persons: Path
    spec: SpecPaths
    output_dir: Path
    private_dir: Path
    coterminous: Optional[Path] = None
    privacy_definition: str = ZCDP
    gamma: Fraction = Fraction(1, 10)
    thresholds: tuple = (10, 100, 1000)
    level_thresholds: dict = field(default_factory=dict)
    stability: dict = field(default_factory=dict)
    suppression_p: Optional[float] = None
    suppression_thresholds: dict = field(default_factory=dict)
    race_cap: int = 8
    total_budget: Optional[Fraction] = None
    seed: int = 0
    regions: tuple = REGIONS
    workers: int = 1

    @classmethod
    def from_file(cls, path: Path, seed: Optional[int] = None, region: Optional[str] = None) -> "RunConfig":
        path = Path(path)
        try:
            entries = parse_key_values(path.read_text(encoding="utf-8"), path.name)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        base = path.parent
        raw: dict = {}
        level_thresholds, stability, sup_thresholds = {}, {}, {}
        for key, value, number in entries:
            where = f"{path.name}:{number}"
            try:
                if key.startswith("thresholds."):
                    level_thresholds[key.split(".", 1)[1]] = _int_list(value)
                elif key.startswith("stability."):
                    stability[key.split(".", 1)[1]] = int(value)
                elif key.startswith("suppression_threshold."):
                    sup_thresholds[key.split(".", 1)[1]] = int(value)
                elif key in raw:
                    raise ConfigError(f"{where}: duplicate key {key!r}")
                else:
                    raw[key] = value
            except ValueError as exc:
                raise ConfigError(f"{where}: {exc}") from exc

        known = set(_PATH_KEYS) | {
            "privacy_definition", "gamma", "thresholds", "suppression_p", "race_cap",
            "total_budget", "seed", "region", "workers",
        }
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"{path.name}: unknown keys {', '.join(unknown)}")
        missing = [k for k in ("persons",) + _SPEC_KEYS + ("output_dir",) if k not in raw]
        if missing:
            raise ConfigError(f"{path.name}: missing keys {', '.join(missing)}")

        def resolve(key):
            return (base / raw[key]).resolve() if raw.get(key) else None

        try:
            definition = raw.get("privacy_definition", ZCDP)
            if definition not in (ZCDP, PURE_DP):
                raise ConfigError(f"privacy_definition must be {ZCDP} or {PURE_DP}, got {definition!r}")
            region_value = region or raw.get("region", "both")
            if region_value == "both":
                regions = REGIONS
            elif region_value in REGIONS:
                regions = (region_value,)
            else:
                raise ConfigError(f"region must be US, PR or both, got {region_value!r}")
            output_dir = resolve("output_dir")
            cfg = cls(
                persons=resolve("persons"),
                spec=SpecPaths(*(resolve(k) for k in _SPEC_KEYS), exclusions=resolve("exclusions")),
                output_dir=output_dir,
                private_dir=resolve("private_dir") or output_dir.with_name(output_dir.name + "_private"),
                coterminous=resolve("coterminous"),
                privacy_definition=definition,
                gamma=Fraction(raw.get("gamma", "0.1")),
                thresholds=_int_list(raw.get("thresholds", "10,100,1000")),
                level_thresholds=level_thresholds,
                stability=stability,
                suppression_p=float(raw["suppression_p"]) if "suppression_p" in raw else None,
                suppression_thresholds=sup_thresholds,
                race_cap=int(raw.get("race_cap", "8")),
                total_budget=Fraction(raw["total_budget"]) if "total_budget" in raw else None,
                seed=int(seed if seed is not None else raw.get("seed", "0")),
                regions=regions,
                workers=int(raw.get("workers", "1")),
            )
        except (ValueError, ZeroDivisionError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"{path.name}: {exc}") from exc
        cfg.check()
        return cfg

    def check(self) -> None:
        if not 0 < self.gamma < 1:
            raise ConfigError(f"gamma must be strictly between 0 and 1, got {self.gamma}")
        if self.suppression_p is not None and not 0 < self.suppression_p < 1:
            raise ConfigError(f"suppression_p must be in (0, 1), got {self.suppression_p}")
        for name, theta in [("thresholds", self.thresholds)] + [
            (f"thresholds.{k}", v) for k, v in self.level_thresholds.items()
        ]:
            if len(theta) != 3 or list(theta) != sorted(theta):
                raise ConfigError(f"{name} needs three nondecreasing values, got {theta}")
        for path in [self.persons, self.spec.geo, self.spec.codes, self.spec.iterations,
                     self.spec.levels, self.spec.total_only, self.spec.exclusions, self.coterminous]:
            if path is not None and not path.is_file():
                raise FileNotFoundError(f"input file not found: {path}")


# ---------------------------------------------------------------------------
# Pipeline


@dataclass
class RegionResult:
    region: str
    tables: list
    ledger: Ledger
    suppression_log: list
    output_files: list


def load_and_validate(cfg: RunConfig):
    """Loads the universe and persons; writes the curator-only validation report.

    Raises:
        ValidationError: before any noise is drawn.
    """
    universe = load_universe(cfg.spec, race_cap=cfg.race_cap, stability_overrides=cfg.stability)
    report = ValidationReport()
    records = read_persons(cfg.persons, report)
    validate_inputs(records, universe, Path(cfg.persons).name, report)
    cfg.private_dir.mkdir(parents=True, exist_ok=True)
    (cfg.private_dir / "validation_report.txt").write_text(report.render(), encoding="utf-8")
    report.raise_if_failed()
    return universe, records, report


def _output_rows(region: str, tables) -> list:
    rows = []
    for t in tables:
        g = t.group
        for key, value in t.cells.items():
            rows.append((region, g.geo_level, g.entity_id, g.iteration_id, t.table_id, key, int(value)))
    rows.sort(key=lambda r: (r[1], r[2], r[3], r[5], r[4]))
    return rows


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def run_region(cfg: RunConfig, universe, records, region: str) -> RegionResult:
    """One independent pass: its own ledger, noise streams and output directory."""
    levels = universe.levels
    plan = LevelBudgetPlan(
        tuple((lv.level_id, lv.rho) for lv in levels), cfg.gamma, cfg.privacy_definition,
    )
    ledger = Ledger(plan)
    keysets = {lv.level_id: build_keyset(lv, universe, region) for lv in levels}
    region_records = [r for r in records if universe.region_of(r.block_id) == region]
    adaptive = AdaptiveConfig(cfg.gamma, cfg.thresholds, MECHANISM_FOR_DEFINITION[cfg.privacy_definition])
    rng = RandomSource(cfg.seed)
    tables = run_safetab(
        region_records, plan, adaptive, keysets, rng, universe, ledger=ledger, region=region,
        level_thresholds=cfg.level_thresholds, workers=cfg.workers,
    )

    tables = [attach_marginals(t) if t.is_sex_by_age else t for t in tables]
    ledger.record_postprocessing("postprocess:marginals")
    log = []
    if cfg.suppression_p is not None:
        stability = {lv.level_id: stability_of(lv, universe) for lv in levels}
        policy = SuppressionPolicy.from_levels(
            cfg.suppression_p, levels, cfg.gamma, stability, cfg.privacy_definition
        )
        thresholds = dict(policy.thresholds)
        thresholds.update({k: v for k, v in cfg.suppression_thresholds.items() if k in thresholds})
        policy = SuppressionPolicy(cfg.suppression_p, thresholds)
        tables, log = suppress(tables, policy)
        ledger.record_postprocessing("postprocess:suppression")
    if cfg.coterminous is not None:
        spec = load_coterminous(cfg.coterminous)
        universe_groups = [g for ks in keysets.values() for g in ks.groups]
        in_region = {(g.geo_level, g.entity_id) for g in universe_groups}
        spec = type(spec)(
            {k: v for k, v in spec.sets.items() if any(m in in_region for m in v)}, spec.order
        )
        tables = coterminous_fixup(tables, spec, universe_groups)
        ledger.record_postprocessing("postprocess:coterminous")
    ledger.close()

    out = cfg.output_dir / region
    out.mkdir(parents=True, exist_ok=True)
    rows = _output_rows(region, tables)
    files = []
    for table_id in TABLE_IDS:
        path = out / f"{table_id}.csv"
        _write_csv(path, OUTPUT_HEADER, [r for r in rows if r[4] == table_id])
        files.append(path)
    _write_csv(out / "all_tables.csv", OUTPUT_HEADER, rows)
    (out / "accounting.txt").write_text(ledger.report(f"Privacy-loss accounting ({region} pass)"), encoding="utf-8")
    files += [out / "all_tables.csv", out / "accounting.txt"]

    private = cfg.private_dir / region
    private.mkdir(parents=True, exist_ok=True)
    _write_csv(
        private / "suppression_log.csv",
        ("level_id", "geo_level", "entity_id", "iteration_id", "noisy_total", "threshold"),
        [(e.group.level_id, e.group.geo_level, e.group.entity_id, e.group.iteration_id,
          e.noisy_total, e.threshold) for e in log],
    )
    logger.info("%s pass: %d tables published, %d suppressed", region, len(tables), len(log))
    return RegionResult(region, tables, ledger, log, files)


def run_pipeline(cfg: RunConfig) -> dict:
    """Validate, tabulate, postprocess and write each region's outputs.

    Returns:
        Region -> ``RegionResult``.
    """
    universe, records, _ = load_and_validate(cfg)
    if cfg.total_budget is not None:
        declared = sum((lv.rho for lv in universe.levels), Fraction(0))
        if declared != cfg.total_budget:
            raise ConfigError(f"level budgets sum to {declared}, config declares {cfg.total_budget}")
    return {region: run_region(cfg, universe, records, region) for region in cfg.regions}


# ---------------------------------------------------------------------------
# Synthetic data


def generate_synthetic(spec: SpecPaths, n_records: int, seed: int, out_path: Path, race_cap: int = 8) -> Path:
    """Writes ``n_records`` random persons drawn uniformly over the spec's domains.

    Race-set sizes are uniform on ``1..race_cap`` (limited by the number of
    race codes available).
    """
    universe = load_universe(spec, race_cap=race_cap)
    gen = np.random.default_rng(seed)
    blocks = sorted(universe.blocks)
    races = sorted(c for c, k in universe.codes.items() if k == RACE)
    eths = sorted(c for c, k in universe.codes.items() if k == ETHNICITY)
    if n_records and (not blocks or not races or not eths):
        raise ValueError("specification needs blocks, race codes and ethnicity codes")
    lines = ["|".join(PERSONS_HEADER)]
    top = min(race_cap, len(races))
    for _ in range(n_records):
        k = int(gen.integers(1, top + 1))
        codes = sorted(gen.choice(races, size=k, replace=False).tolist())
        lines.append("|".join((
            blocks[int(gen.integers(len(blocks)))],
            ",".join(codes),
            eths[int(gen.integers(len(eths)))],
            SEXES[int(gen.integers(2))],
            str(int(gen.integers(0, 116))),
        )))
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return out_path


# ---------------------------------------------------------------------------
# Entry point


def _spec_from_config(path: Path) -> tuple[SpecPaths, int, Path]:
    path = Path(path)
    raw = {k: v for k, v, _ in parse_key_values(path.read_text(encoding="utf-8"), path.name)}
    missing = [k for k in _SPEC_KEYS if k not in raw]
    if missing:
        raise ConfigError(f"{path.name}: missing keys {', '.join(missing)}")
    base = path.parent
    spec = SpecPaths(*((base / raw[k]).resolve() for k in _SPEC_KEYS),
                     exclusions=(base / raw["exclusions"]).resolve() if raw.get("exclusions") else None)
    persons = (base / raw.get("persons", "persons.txt")).resolve()
    return spec, int(raw.get("race_cap", "8")), persons


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="safetab", description="Differentially private detailed tabulations.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)

    def common(p, region=True):
        p.add_argument("--config", required=True, type=Path)
        if region:
            p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
            p.add_argument("--region", choices=("US", "PR", "both"), default=None)

    common(sub.add_parser("validate", help="check inputs without drawing noise"), region=False)
    common(sub.add_parser("run", help="run the full pipeline"))
    p = sub.add_parser("plan", help="planner tables and curves from planner.cfg")
    p.add_argument("--config", required=True, type=Path)
    p.add_argument("--out", type=Path, default=Path("plan_out"))
    p = sub.add_parser("synth", help="write a synthetic persons file")
    common(p)
    p.add_argument("-n", "--records", type=int, default=1000)
    p.add_argument("--out", type=Path, default=None, help="defaults to the config's persons path")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.verb == "validate":
            cfg = RunConfig.from_file(args.config)
            _, records, report = load_and_validate(cfg)
            print(f"ok: {len(records)} records, {len(report.warnings)} warning(s)")
        elif args.verb == "run":
            cfg = RunConfig.from_file(args.config, seed=args.seed, region=args.region)
            for region, res in run_pipeline(cfg).items():
                print(f"{region}: {len(res.tables)} tables, spent {res.ledger.total_unbounded} "
                      f"(bounded {format_fraction(res.ledger.total_bounded.value)})")
        elif args.verb == "plan":
            report = emit_planner_report(PlannerInput.from_file(args.config), args.out)
            print(f"wrote planner report for {len(report.levels)} levels to {args.out}")
        elif args.verb == "synth":
            spec, race_cap, persons = _spec_from_config(args.config)
            out = generate_synthetic(spec, args.records, args.seed or 0, args.out or persons, race_cap)
            print(f"wrote {args.records} records to {out}")
    except ValidationError as exc:
        for issue in exc.issues[:20]:
            print(f"validation: {issue}", file=sys.stderr)
        return EXIT_VALIDATION
    except ConfigError as exc:
        print(f"config: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except BudgetError as exc:
        print(f"budget: {exc}", file=sys.stderr)
        return EXIT_BUDGET
    except OSError as exc:
        print(f"io: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
