import shutil
from pathlib import Path

import pytest

from safetab.datamodel import SpecPaths

FIXTURES = Path(__file__).parent / "fixtures"


def write_table(path: Path, header: str, rows) -> Path:
    path.write_text("\n".join([header, *rows]) + "\n", encoding="utf-8")
    return path


def write_spec(
    root: Path,
    codes,
    iterations,
    levels,
    geo,
    total_only=(),
    exclusions=None,
) -> SpecPaths:
    """Writes a set of spec files under ``root`` from row strings."""
    root.mkdir(parents=True, exist_ok=True)
    return SpecPaths(
        geo=write_table(root / "geo.txt", "block|state|county|tract|place|aiannh", geo),
        codes=write_table(root / "codes.txt", "code|kind", codes),
        iterations=write_table(root / "iterations.txt", "iteration_id|level|alone_flag|codes", iterations),
        levels=write_table(root / "levels.txt", "level_id|geo_level|iteration_level|rho", levels),
        total_only=write_table(root / "total_only.txt", "iteration_id|geo_level", total_only),
        exclusions=None if exclusions is None else write_table(
            root / "exclusions.txt", "iteration_id|geo_level", exclusions
        ),
    )


# A small named universe used by the mapping examples.
TOY_CODES = ["NIG|race", "BEN|race", "TON|race", "DUT|race", "HISP|ethnicity", "NOTHISP|ethnicity"]
TOY_ITERATIONS = [
    "NIG_A|Detailed|Alone|NIG",
    "NIG_C|Detailed|AloneOrInAnyCombination|NIG",
    "BEN_C|Detailed|AloneOrInAnyCombination|BEN",
    "TON_C|Detailed|AloneOrInAnyCombination|TON",
    "DUT_A|Detailed|Alone|DUT",
    "DUT_C|Detailed|AloneOrInAnyCombination|DUT",
    "HISP_D|Detailed|Alone|HISP",
    "SSA_C|Regional|AloneOrInAnyCombination|NIG,BEN",
    "POL_C|Regional|AloneOrInAnyCombination|TON",
    "EUR_C|Regional|AloneOrInAnyCombination|DUT",
    "HISP_R|Regional|Alone|HISP",
]
TOY_LEVELS = [
    "SD|State|Detailed|1",
    "SR|State|Regional|1",
    "CD|County|Detailed|1",
    "AD|AIANNH|Detailed|1",
]
TOY_GEO = [
    "1600101|16|16001|16001000100||A1",
    "1600102|16|16001|16001000200||",
    "3609701|36|36097|36097000100||",
]


@pytest.fixture
def toy_spec(tmp_path):
    return write_spec(tmp_path / "toy", TOY_CODES, TOY_ITERATIONS, TOY_LEVELS, TOY_GEO)


@pytest.fixture
def golden_dir(tmp_path):
    """A private copy of the golden fixture (3 states, 5 iterations, 11 levels, 200 persons)."""
    dest = tmp_path / "golden"
    shutil.copytree(FIXTURES / "golden", dest)
    return dest


@pytest.fixture
def golden_spec(golden_dir):
    return SpecPaths(
        geo=golden_dir / "geo.txt",
        codes=golden_dir / "codes.txt",
        iterations=golden_dir / "iterations.txt",
        levels=golden_dir / "levels.txt",
        total_only=golden_dir / "total_only.txt",
    )
