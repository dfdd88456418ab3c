//! Numerical verification of the upper Q/K step bounds, gated-FFN energy contraction,
//! and the entropy/logit-range relation.

mod bilinear;
mod entropy;
mod gated;
mod suite;

pub use bilinear::{
    alpha_scaling_check, check_theorem1, delta_zp_exact, delta_zp_first_order, localized_bound, pathwise_bound, random_projector,
    suppression_composition, AdjointFamily, AlphaScaling, CaseDims, CaseNorms, SuppressionReport, TheoryCase, TheoryReport,
    BOUND_SLACK,
};
pub use entropy::{entropy_range_bound, sample_logit_rows, verify_entropy_lemma, EntropyLemmaReport, EntropyRangeCase, EPS_GRID};
pub use gated::{
    gaussian_expectation, residual_contraction_rhobar, rho0_analytic, rho0_monte_carlo, rho0_monte_carlo_on, Activation,
    GatedEnergyCase, McEstimate, GEGLU_REFERENCE, REFERENCE_NU, SWIGLU_REFERENCE,
};
pub use suite::{
    case_rng, rho0_record, run_suite, run_suite_on, theory_case, Rho0Record, Suite, SuiteReport, DEFAULT_ALPHA, DEFAULT_LAMBDA_BAR,
    NU_SWEEP,
};
