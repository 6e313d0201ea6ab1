//! Instrument quantities computed from per-sample observations, curvature probes
//! and step transitions.
//!
//! Every function is pure: it reads its inputs and returns a value or an error.

mod curvature;
mod gradient;
mod histogram;
mod linalg;
mod noise;
mod step;
mod value;

pub use curvature::{
    hess_max_ev, hess_trace, layer_hess_traces, tic, EigenEstimate, PowerIteration, TicVariant,
    CURVATURE_EPS,
};
pub use gradient::{grad_norm, gradient_tests, layer_grad_norms, GradientTestResult, GRADIENT_EPS};
pub use histogram::{
    adaptive_range, grad_hist_1d, grad_hist_2d, histogram_1d, layer_grad_hist_1d,
    layer_grad_hist_2d, Binning, Hist1d, Hist2d, DEFAULT_BINS, DEFAULT_RANGE,
};
pub use noise::{cabs_batch_size, early_stopping_criterion, mean_gsnr, VARIANCE_EPS};
pub use step::{
    displacement_metrics, distance, fit_alpha, AlphaFit, StepTransition, ALPHA_CLAMP,
    MIN_FIT_CURVATURE, VARIANCE_FLOOR,
};
pub use value::{flags, Guarded, QuantityValue, Reading};
