//! Quantities of a single optimizer step: the normalized step length and distances.

use crate::autodiff::{BatchObservables, ParamVector};
use crate::error::{Error, Result};

use super::linalg::{norm, solve3};

/// Paired observations around one update `θ_t → θ_{t+1}`.
#[derive(Clone, Copy, Debug)]
pub struct StepTransition<'a> {
    pub theta_before: &'a ParamVector,
    pub theta_after: &'a ParamVector,
    pub obs_before: &'a BatchObservables,
    pub obs_after: &'a BatchObservables,
    pub learning_rate: f64,
}

impl<'a> StepTransition<'a> {
    pub fn new(
        theta_before: &'a ParamVector,
        theta_after: &'a ParamVector,
        obs_before: &'a BatchObservables,
        obs_after: &'a BatchObservables,
        learning_rate: f64,
    ) -> Result<Self> {
        let d = theta_before.dim();
        if theta_after.dim() != d || obs_before.dim() != d || obs_after.dim() != d {
            return Err(Error::Dimension(
                "step transition mixes parameter dimensions".into(),
            ));
        }
        Ok(Self {
            theta_before,
            theta_after,
            obs_before,
            obs_after,
            learning_rate,
        })
    }

    /// `s_t = θ_{t+1} − θ_t`.
    pub fn update(&self) -> Vec<f64> {
        self.theta_after
            .values()
            .iter()
            .zip(self.theta_before.values())
            .map(|(a, b)| a - b)
            .collect()
    }
}

/// Noise-aware quadratic fit along the update direction and the resulting step position.
#[derive(Clone, Debug, PartialEq)]
pub struct AlphaFit {
    /// `(τ₁, τ₂) = (0, ‖s_t‖)`, arc length along the unit update direction.
    pub positions: [f64; 2],
    /// `(L_{B_t}(θ_t), L_{B_{t+1}}(θ_{t+1}), slope at θ_t, slope at θ_{t+1})`.
    pub observations: [f64; 4],
    /// Variance-of-the-mean estimates of the four observations.
    pub variances: [f64; 4],
    /// Rows `(1, τ, τ²)` for losses and `(0, 1, 2τ)` for slopes, one column per observation.
    pub design: [[f64; 4]; 3],
    /// `(w₀, w₁, w₂)` of `f(τ) = w₀ + w₁τ + w₂τ²`.
    pub coefficients: [f64; 3],
    /// Standardized step position clamped to `[-2, 2]`.
    pub alpha: f64,
    /// Value before clamping.
    pub raw_alpha: f64,
    pub clamped: bool,
    /// The fit had no minimum; `alpha` encodes only the sign of the end slope.
    pub fallback: bool,
    /// The normal matrix was singular and a damped solve was used.
    pub regularized: bool,
}

pub const ALPHA_CLAMP: f64 = 2.0;
/// Curvature at or below this is treated as "no minimum".
pub const MIN_FIT_CURVATURE: f64 = 1e-12;
/// Relative floor applied to observation variances.
pub const VARIANCE_FLOOR: f64 = 1e-12;
/// Standard deviations within this many ulps of an observation are rounding noise.
const ROUNDING_ULPS: f64 = 16.0;

/// Mean and variance of the mean (population variance over samples divided by `|B|`).
fn mean_and_noise(xs: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = xs.clone().count() as f64;
    let mean = xs.clone().sum::<f64>() / n;
    let var = xs.map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var / n)
}

fn projections<'a>(
    obs: &'a BatchObservables,
    direction: &'a [f64],
) -> impl Iterator<Item = f64> + Clone + 'a {
    obs.sample_grad_rows()
        .map(move |g| g.iter().zip(direction).map(|(a, b)| a * b).sum::<f64>())
}

pub fn fit_alpha(t: &StepTransition<'_>) -> Result<AlphaFit> {
    let s = t.update();
    let step = norm(&s);
    if step == 0.0 || !step.is_finite() {
        return Err(Error::DegenerateStep);
    }
    let u: Vec<f64> = s.iter().map(|x| x / step).collect();

    let (loss0, loss0_var) = mean_and_noise(t.obs_before.sample_losses.iter().copied());
    let (loss1, loss1_var) = mean_and_noise(t.obs_after.sample_losses.iter().copied());
    let (slope0, slope0_var) = mean_and_noise(projections(t.obs_before, &u));
    let (slope1, slope1_var) = mean_and_noise(projections(t.obs_after, &u));
    let observations = [loss0, loss1, slope0, slope1];
    let variances = [loss0_var, loss1_var, slope0_var, slope1_var];

    let (tau1, tau2) = (0.0, step);
    let design = [
        [1.0, 1.0, 0.0, 0.0],
        [tau1, tau2, 1.0, 1.0],
        [tau1 * tau1, tau2 * tau2, 2.0 * tau1, 2.0 * tau2],
    ];
    let weights = observation_weights(&variances, &observations);
    let (coefficients, regularized) = weighted_least_squares(&design, &weights, &observations)?;

    let [_, w1, w2] = coefficients;
    let (raw_alpha, fallback) = if w2 > MIN_FIT_CURVATURE {
        let minimizer = -w1 / (2.0 * w2);
        (step / minimizer - 1.0, false)
    } else if slope1 < 0.0 {
        (-1.0, true)
    } else {
        (1.0, true)
    };
    let alpha = if raw_alpha.is_nan() {
        ALPHA_CLAMP
    } else {
        raw_alpha.clamp(-ALPHA_CLAMP, ALPHA_CLAMP)
    };
    Ok(AlphaFit {
        positions: [tau1, tau2],
        observations,
        variances,
        design,
        coefficients,
        alpha,
        raw_alpha,
        clamped: alpha != raw_alpha,
        fallback,
        regularized,
    })
}

/// Inverse observation variances, with a floor relative to the largest variance.
///
/// Variances below the rounding resolution of their observation count as zero.
/// When every variance is zero (noiseless observations) all four get equal weight.
pub(crate) fn observation_weights(variances: &[f64; 4], observations: &[f64; 4]) -> [f64; 4] {
    let variances: [f64; 4] = std::array::from_fn(|i| {
        let resolution = ROUNDING_ULPS * f64::EPSILON * observations[i].abs();
        if variances[i] <= resolution * resolution {
            0.0
        } else {
            variances[i]
        }
    });
    let scale = variances.iter().copied().fold(0.0, f64::max);
    if scale <= 0.0 || !scale.is_finite() {
        return [1.0; 4];
    }
    let floor = VARIANCE_FLOOR * scale;
    variances.map(|v| 1.0 / v.max(floor))
}

/// `w = (Φ Λ⁻¹ Φᵀ)⁻¹ Φ Λ⁻¹ f̃`; falls back to a damped normal matrix when it is singular.
pub(crate) fn weighted_least_squares(
    design: &[[f64; 4]; 3],
    weights: &[f64; 4],
    observations: &[f64; 4],
) -> Result<([f64; 3], bool)> {
    let mut normal = [[0.0; 3]; 3];
    let mut rhs = [0.0; 3];
    for i in 0..3 {
        for k in 0..4 {
            rhs[i] += design[i][k] * weights[k] * observations[k];
            for j in 0..3 {
                normal[i][j] += design[i][k] * weights[k] * design[j][k];
            }
        }
    }
    if let Some(w) = solve3(&normal, &rhs) {
        return Ok((w, false));
    }
    let damping = 1e-10 * (normal[0][0] + normal[1][1] + normal[2][2]) / 3.0;
    let damped = std::array::from_fn(|i| {
        let mut row = normal[i];
        row[i] += damping.max(f64::MIN_POSITIVE);
        row
    });
    solve3(&damped, &rhs)
        .map(|w| (w, true))
        .ok_or_else(|| Error::Numeric("quadratic fit normal matrix is not solvable".into()))
}

/// `‖θ_{t+1} − θ₀‖` and `‖θ_{t+1} − θ_t‖`.
pub fn displacement_metrics(
    theta_init: &ParamVector,
    t: &StepTransition<'_>,
) -> Result<(f64, f64)> {
    if theta_init.dim() != t.theta_after.dim() {
        return Err(Error::Dimension(
            "initial parameters have a different dimension".into(),
        ));
    }
    Ok((
        distance(theta_init.values(), t.theta_after.values()),
        distance(t.theta_before.values(), t.theta_after.values()),
    ))
}

pub fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Layout, ParamVector};
    use std::sync::Arc;

    fn layout(d: usize) -> Arc<Layout> {
        Arc::new(Layout::from_layers(vec![("theta", vec![(1, d)])]))
    }

    /// Observables of the noiseless loss `½ a θ²` at a point, duplicated over `b` samples.
    fn quad_obs(a: f64, theta: f64, b: usize) -> BatchObservables {
        BatchObservables::from_samples(
            vec![0.5 * a * theta * theta; b],
            vec![a * theta; b],
            layout(1),
        )
        .unwrap()
    }

    fn alpha_1d(a: f64, from: f64, to: f64) -> AlphaFit {
        let p0 = ParamVector::new(vec![from], layout(1)).unwrap();
        let p1 = ParamVector::new(vec![to], layout(1)).unwrap();
        let o0 = quad_obs(a, from, 3);
        let o1 = quad_obs(a, to, 3);
        fit_alpha(&StepTransition::new(&p0, &p1, &o0, &o1, 1.0).unwrap()).unwrap()
    }

    #[test]
    fn step_to_minimum_is_zero() {
        assert!(alpha_1d(1.0, 1.0, 0.0).alpha.abs() < 1e-12);
    }

    #[test]
    fn step_to_mirror_point_is_one() {
        assert!((alpha_1d(1.0, 1.0, -1.0).alpha - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tiny_step_approaches_minus_one() {
        let fit = alpha_1d(1.0, 1.0, 1.0 - 1e-6);
        assert!((fit.alpha + 1.0).abs() < 1e-5, "{}", fit.alpha);
    }

    #[test]
    fn far_overshoot_is_clamped() {
        let fit = alpha_1d(1.0, 1.0, -3.0);
        assert_eq!(fit.alpha, 2.0);
        assert!(fit.clamped);
        assert!((fit.raw_alpha - 3.0).abs() < 1e-9);
    }

    #[test]
    fn concave_fit_falls_back_on_end_slope() {
        // loss = -½θ², moving away from 0: still descending
        let p0 = ParamVector::new(vec![1.0], layout(1)).unwrap();
        let p1 = ParamVector::new(vec![2.0], layout(1)).unwrap();
        let o = |th: f64| {
            BatchObservables::from_samples(vec![-0.5 * th * th; 2], vec![-th; 2], layout(1))
                .unwrap()
        };
        let (o0, o1) = (o(1.0), o(2.0));
        let fit = fit_alpha(&StepTransition::new(&p0, &p1, &o0, &o1, 1.0).unwrap()).unwrap();
        assert!(fit.fallback);
        assert_eq!(fit.alpha, -1.0);
    }

    #[test]
    fn zero_step_is_degenerate() {
        let p = ParamVector::new(vec![1.0], layout(1)).unwrap();
        let o = quad_obs(1.0, 1.0, 2);
        assert!(matches!(
            fit_alpha(&StepTransition::new(&p, &p, &o, &o, 1.0).unwrap()),
            Err(Error::DegenerateStep)
        ));
    }

    #[test]
    fn design_matrix_structure() {
        let fit = alpha_1d(2.0, 1.0, 0.25);
        let tau = fit.positions[1];
        assert_eq!(fit.design[0], [1.0, 1.0, 0.0, 0.0]);
        assert_eq!(fit.design[1], [0.0, tau, 1.0, 1.0]);
        assert_eq!(fit.design[2], [0.0, tau * tau, 0.0, 2.0 * tau]);
        assert!(fit.variances.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn displacement_three_four_five() {
        let l = layout(2);
        let p0 = ParamVector::new(vec![0.0, 0.0], l.clone()).unwrap();
        let p1 = ParamVector::new(vec![3.0, 4.0], l.clone()).unwrap();
        let o = BatchObservables::from_samples(vec![0.0], vec![0.0, 0.0], l).unwrap();
        let t = StepTransition::new(&p0, &p1, &o, &o, 0.1).unwrap();
        assert_eq!(displacement_metrics(&p0, &t).unwrap(), (5.0, 5.0));
        assert_eq!(displacement_metrics(&p1, &t).unwrap().0, 0.0);
    }
}
