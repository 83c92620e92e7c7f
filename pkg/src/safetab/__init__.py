"""Differentially private detailed race and ethnicity tabulations.

Modules:
    noise: exact discrete Gaussian and two-sided geometric samplers.
    accountant: zCDP / pure-DP budget arithmetic and the run ledger.
    datamodel: input parsing, validation, population groups and KeySets.
    engine: adaptive two-stage tabulation.
    postprocess: marginals, suppression, coterminous reconciliation.
    planner: MOE and budget conversions, threshold and curve data.
    cli: command line pipeline.
"""

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
    mechanism_cost,
)
from safetab.datamodel import (
    PersonRecord,
    PopulationGroup,
    ValidationError,
    build_keyset,
    load_universe,
    map_to_groups,
    validate_inputs,
)
from safetab.engine import AdaptiveConfig, NoisyTable, noisy_count, run_safetab, tabulate_population_group
from safetab.noise import DiscreteGaussian, RandomSource, TwoSidedGeometric, dgauss_cdf, dgauss_invcdf
from safetab.planner import moe_for_level, rho_for_moe
from safetab.postprocess import (
    SuppressionPolicy,
    attach_marginals,
    coterminous_fixup,
    derive_threshold,
    release_bias,
    suppress,
    suppression_probability,
)

__all__ = [
    "AdaptiveConfig",
    "BudgetError",
    "DiscreteGaussian",
    "Ledger",
    "LevelBudgetPlan",
    "NoisyTable",
    "PURE_DP",
    "PersonRecord",
    "PopulationGroup",
    "PrivacyBudget",
    "RandomSource",
    "SuppressionPolicy",
    "TwoSidedGeometric",
    "ValidationError",
    "ZCDP",
    "attach_marginals",
    "bounded_report",
    "build_keyset",
    "compose_parallel",
    "compose_sequential",
    "coterminous_fixup",
    "derive_threshold",
    "dgauss_cdf",
    "dgauss_invcdf",
    "load_universe",
    "map_to_groups",
    "mechanism_cost",
    "moe_for_level",
    "noisy_count",
    "release_bias",
    "rho_for_moe",
    "run_safetab",
    "suppress",
    "suppression_probability",
    "tabulate_population_group",
    "validate_inputs",
]

__version__ = "0.1.0"
