//! Gradient norm and the norm, inner-product and orthogonality tests.

use serde::{Deserialize, Serialize};

use crate::autodiff::BatchObservables;
use crate::error::{Error, Result};

use super::linalg::{dot, norm};

/// Threshold below which the mini-batch gradient counts as zero.
pub const GRADIENT_EPS: f64 = 1e-12;

pub fn grad_norm(obs: &BatchObservables) -> f64 {
    norm(&obs.batch_grad)
}

/// `‖g_B‖` restricted to each layer's parameters.
pub fn layer_grad_norms(obs: &BatchObservables) -> Vec<f64> {
    obs.layout
        .layers()
        .iter()
        .map(|l| norm(&obs.batch_grad[l.offset..l.offset + l.len]))
        .collect()
}

/// Standardized radius of the norm test and band widths of the inner-product
/// and orthogonality tests.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientTestResult {
    pub theta_norm: f64,
    pub theta_inner: f64,
    pub nu_ortho: f64,
}

pub fn gradient_tests(obs: &BatchObservables) -> Result<GradientTestResult> {
    let b = obs.batch_size();
    if b < 2 {
        return Err(Error::BatchTooSmall(b, 2));
    }
    let g = &obs.batch_grad;
    let g_norm = norm(g);
    if g_norm <= GRADIENT_EPS || !g_norm.is_finite() {
        return Err(Error::ZeroGradient(g_norm));
    }
    // Terms are accumulated on deviations δ_n = g_n − g_B, which equals the
    // literal form because Σ_n δ_n = 0 and stays exact when the scatter vanishes.
    let g2 = dot(g, g);
    let mut sum_norm = 0.0;
    let mut sum_inner = 0.0;
    let mut sum_ortho = 0.0;
    let mut delta = vec![0.0; g.len()];
    for row in obs.sample_grad_rows() {
        for ((d, x), m) in delta.iter_mut().zip(row).zip(g) {
            *d = x - m;
        }
        let along = dot(&delta, g) / g2;
        let ortho: f64 = delta
            .iter()
            .zip(g)
            .map(|(d, m)| {
                let r = d - along * m;
                r * r
            })
            .sum::<f64>()
            / g2;
        sum_norm += dot(&delta, &delta) / g2;
        sum_inner += along * along;
        sum_ortho += ortho;
    }
    let bf = b as f64;
    let denom = bf * (bf - 1.0);
    Ok(GradientTestResult {
        theta_norm: (sum_norm / denom).max(0.0).sqrt(),
        theta_inner: (sum_inner / denom).max(0.0).sqrt(),
        nu_ortho: (sum_ortho / denom).max(0.0).sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Layout;
    use std::sync::Arc;

    fn obs(grads: Vec<f64>, d: usize) -> BatchObservables {
        let b = grads.len() / d;
        let layout = Arc::new(Layout::from_layers(vec![("theta", vec![(1, d)])]));
        BatchObservables::from_samples(vec![0.0; b], grads, layout).unwrap()
    }

    #[test]
    fn norm_of_three_four() {
        assert_eq!(grad_norm(&obs(vec![3.0, 4.0], 2)), 5.0);
        assert_eq!(grad_norm(&obs(vec![0.0, 0.0], 2)), 0.0);
    }

    #[test]
    fn identical_gradients_have_no_scatter() {
        let r = gradient_tests(&obs(vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0], 2)).unwrap();
        assert_eq!((r.theta_norm, r.theta_inner, r.nu_ortho), (0.0, 0.0, 0.0));
    }

    #[test]
    fn orthogonal_pair() {
        let r = gradient_tests(&obs(vec![1.0, 0.0, 0.0, 1.0], 2)).unwrap();
        assert!((r.theta_norm - 1.0).abs() < 1e-15);
        assert!(r.theta_inner.abs() < 1e-7);
        assert!((r.nu_ortho - 1.0).abs() < 1e-15);
    }

    #[test]
    fn guards() {
        assert!(matches!(
            gradient_tests(&obs(vec![1.0, 0.0], 2)),
            Err(Error::BatchTooSmall(1, 2))
        ));
        assert!(matches!(
            gradient_tests(&obs(vec![1.0, -1.0], 1)),
            Err(Error::ZeroGradient(_))
        ));
    }

    #[test]
    fn layer_norms_split_total() {
        let layout = Arc::new(Layout::from_layers(vec![
            ("a", vec![(1, 1)]),
            ("b", vec![(1, 2)]),
        ]));
        let o = BatchObservables::from_samples(vec![0.0], vec![2.0, 3.0, 6.0], layout).unwrap();
        assert_eq!(layer_grad_norms(&o), vec![2.0, 45f64.sqrt()]);
    }
}
