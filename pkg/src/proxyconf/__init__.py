"""Causal effect estimation with a misclassified categorical confounder.

The observed confounder ``U*`` is a noisy proxy of the latent ``U``; a
validation table of (true, proxy) label pairs gives the misclassification
matrix.  Two corrections are provided: matrix adjustment (invert the
misclassification on the joint distribution, then apply the backdoor formula)
and categorical MC-SIMEX.
"""

__version__ = "0.1.0"

from .adjust import (
    Adjustment,
    NuisanceModels,
    NuisancePredictions,
    adjust_predictions,
    counterfactual_risk,
    estimate_effects,
    fit_nuisance,
    marginal_u,
    recovered_joint,
    run_adjustment,
    subgroup_risk_ratio,
)
from .bootstrap import BootstrapPlan, BootstrapResult, run_bootstrap
from .core import (
    CausalEstimate,
    Cohort,
    ConfusionCounts,
    IntervalEstimate,
    Method,
    MisclassificationModel,
    accuracy,
    read_cohort,
    read_confusion,
    row_normalize,
    table1_counts,
    write_cohort,
    write_confusion,
)
from .errors import *  # noqa: F401,F403
from .simex import SimexConfig, SimexTrace, mc_simex
from .synth import (
    DgpConfig,
    DiscreteDgp,
    generate_cohort,
    load_dgp,
    population_tables,
    shipped_dgp,
    true_effects,
)
