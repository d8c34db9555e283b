//! Numerical checks of the drift, stability and expressiveness bounds for
//! diagonal gating, and the cross-subject feature correlation diagnostic.

mod correlation;
mod drift;
mod expressiveness;
mod margin;
mod model_checks;
mod spectral;
mod suites;

pub use correlation::{backbone_centroids, cross_subject_correlation, pearson, Centroids, CorrelationMatrix, MIN_SHARED_CLASSES};
pub use drift::{check_feature_drift, check_logit_drift, FeatureDrift, LogitDrift, BOUND_TOL};
pub use expressiveness::{fit_expressiveness, ExpressivenessFit, ALPHA_MARGIN};
pub use margin::{argmax, check_margin_stability, margin, CorollaryCheck, MarginCheck};
pub use model_checks::{model_drift_report, ModelDriftReport, SampleVerdict};
pub use spectral::{spectral_norm, spectral_norm_with, POWER_MAX_ITER, POWER_TOL};
pub use suites::{
    expressiveness_suite, feature_drift_suite, logit_drift_suite, margin_suite, run_all, SuiteReport, VerificationReport,
    VerifyConfig, EXACT_TOL,
};
