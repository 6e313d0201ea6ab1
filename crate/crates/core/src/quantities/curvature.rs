//! Curvature instruments: Hessian trace, dominant eigenvalue and TIC.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchObservables, CurvatureProbe, Layout};
use crate::error::{Error, Result};

use super::linalg::{dot, norm};
use super::value::Guarded;

/// Guard added to curvature denominators.
pub const CURVATURE_EPS: f64 = 1e-12;

pub fn hess_trace(probe: &dyn CurvatureProbe) -> Result<f64> {
    probe.trace()
}

/// Sum of the Hessian diagonal over each layer's coordinates.
pub fn layer_hess_traces(probe: &dyn CurvatureProbe, layout: &Layout) -> Result<Vec<f64>> {
    if layout.dim() != probe.dim() {
        return Err(Error::Dimension(format!(
            "layout of dimension {} for a probe of dimension {}",
            layout.dim(),
            probe.dim()
        )));
    }
    let diag = probe.diagonal()?;
    Ok(layout
        .layers()
        .iter()
        .map(|l| diag[l.offset..l.offset + l.len].iter().sum())
        .collect())
}

/// Stopping rule of the power iteration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerIteration {
    pub max_iters: usize,
    pub rtol: f64,
    pub atol: f64,
    pub seed: u64,
}

impl Default for PowerIteration {
    fn default() -> Self {
        Self {
            max_iters: 100,
            rtol: 1e-3,
            atol: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EigenEstimate {
    /// Signed Rayleigh quotient of the final iterate.
    pub value: f64,
    /// Number of Hessian-vector products spent.
    pub iterations: usize,
    pub converged: bool,
}

impl EigenEstimate {
    pub fn negative_dominant(&self) -> bool {
        self.value < 0.0
    }
}

/// Dominant-magnitude eigenvalue of the probe's Hessian by power iteration.
pub fn hess_max_ev(probe: &dyn CurvatureProbe, cfg: &PowerIteration) -> Result<EigenEstimate> {
    let d = probe.dim();
    if d == 0 {
        return Err(Error::Dimension("power iteration on an empty space".into()));
    }
    if cfg.max_iters == 0 {
        return Err(Error::InvalidConfig("power iteration needs max_iters ≥ 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
    let n = norm(&v);
    v.iter_mut().for_each(|x| *x /= n);

    let mut previous: Option<f64> = None;
    let mut value = 0.0;
    for k in 1..=cfg.max_iters {
        let w = probe.hvp(&v)?;
        value = dot(&v, &w);
        if let Some(p) = previous {
            if (value - p).abs() < cfg.rtol * value.abs() + cfg.atol {
                return Ok(EigenEstimate {
                    value,
                    iterations: k,
                    converged: true,
                });
            }
        }
        let wn = norm(&w);
        if wn == 0.0 {
            return Ok(EigenEstimate {
                value,
                iterations: k,
                converged: true,
            });
        }
        if !wn.is_finite() {
            return Err(Error::Numeric("power iteration diverged".into()));
        }
        v = w.into_iter().map(|x| x / wn).collect();
        previous = Some(value);
    }
    Ok(EigenEstimate {
        value,
        iterations: cfg.max_iters,
        converged: false,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TicVariant {
    Diag,
    Trace,
}

fn guarded_denominator(h: f64) -> (f64, bool) {
    let sign = if h < 0.0 { -1.0 } else { 1.0 };
    (h + CURVATURE_EPS * sign, h.abs() <= CURVATURE_EPS)
}

/// Takeuchi information criterion proxy from the gradient second moment and curvature.
pub fn tic(
    probe: &dyn CurvatureProbe,
    obs: &BatchObservables,
    variant: TicVariant,
) -> Result<Guarded> {
    if probe.dim() != obs.dim() {
        return Err(Error::Dimension(format!(
            "probe of dimension {} for gradients of dimension {}",
            probe.dim(),
            obs.dim()
        )));
    }
    let b = obs.batch_size() as f64;
    match variant {
        TicVariant::Trace => {
            let second_moment: f64 = obs.sample_grads.iter().map(|g| g * g).sum::<f64>() / b;
            let trace = probe.trace()?;
            if trace.abs() > CURVATURE_EPS {
                Ok(Guarded {
                    value: second_moment / trace,
                    saturated: false,
                })
            } else {
                let (den, _) = guarded_denominator(trace);
                Ok(Guarded {
                    value: second_moment / den,
                    saturated: true,
                })
            }
        }
        TicVariant::Diag => {
            let d = obs.dim();
            let mut second = vec![0.0; d];
            for row in obs.sample_grad_rows() {
                for (s, g) in second.iter_mut().zip(row) {
                    *s += g * g;
                }
            }
            let diag = probe.diagonal()?;
            let mut saturated = false;
            let mut total = 0.0;
            for (s, &h) in second.iter().zip(diag) {
                let (den, bound) = guarded_denominator(h);
                saturated |= bound;
                total += s / den;
            }
            Ok(Guarded {
                value: total / b,
                saturated,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::DenseCurvature;
    use std::sync::Arc;

    fn obs(grads: Vec<f64>, d: usize) -> BatchObservables {
        let b = grads.len() / d;
        let layout = Arc::new(Layout::from_layers(vec![("theta", vec![(1, d)])]));
        BatchObservables::from_samples(vec![1.0; b], grads, layout).unwrap()
    }

    #[test]
    fn trace_of_diagonal() {
        let p = DenseCurvature::diagonal_matrix(&[1.0, 2.0]);
        assert_eq!(hess_trace(&p).unwrap(), 3.0);
    }

    #[test]
    fn power_iteration_on_diagonals() {
        let cfg = PowerIteration {
            max_iters: 2000,
            rtol: 1e-12,
            atol: 0.0,
            seed: 3,
        };
        let p = DenseCurvature::diagonal_matrix(&[3.0, 1.0, 0.0]);
        assert!((hess_max_ev(&p, &cfg).unwrap().value - 3.0).abs() < 1e-9);
        let n = DenseCurvature::diagonal_matrix(&[-5.0, 2.0]);
        let e = hess_max_ev(&n, &cfg).unwrap();
        assert!((e.value + 5.0).abs() < 1e-9);
        assert!(e.negative_dominant());
    }

    #[test]
    fn zero_matrix_stops_immediately() {
        let p = DenseCurvature::diagonal_matrix(&[0.0, 0.0]);
        let e = hess_max_ev(&p, &PowerIteration::default()).unwrap();
        assert_eq!((e.value, e.iterations, e.converged), (0.0, 1, true));
    }

    #[test]
    fn tic_hand_values() {
        let p = DenseCurvature::diagonal_matrix(&[2.0, 4.0]);
        let o = obs(vec![1.0, 0.0, 0.0, 2.0], 2);
        let d = tic(&p, &o, TicVariant::Diag).unwrap();
        assert!((d.value - 0.75).abs() < 1e-11);
        assert!(!d.saturated);
        let t = tic(&p, &o, TicVariant::Trace).unwrap();
        assert!((t.value - 5.0 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn tic_of_zero_gradients() {
        let p = DenseCurvature::diagonal_matrix(&[2.0, 4.0]);
        let o = obs(vec![0.0; 4], 2);
        assert_eq!(tic(&p, &o, TicVariant::Diag).unwrap().value, 0.0);
        assert_eq!(tic(&p, &o, TicVariant::Trace).unwrap().value, 0.0);
    }

    #[test]
    fn tic_flags_flat_directions() {
        let p = DenseCurvature::diagonal_matrix(&[0.0, 4.0]);
        let o = obs(vec![1.0, 0.0, 0.0, 2.0], 2);
        assert!(tic(&p, &o, TicVariant::Diag).unwrap().saturated);
    }
}
