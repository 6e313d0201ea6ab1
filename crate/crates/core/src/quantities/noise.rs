//! Gradient-noise instruments: GSNR, CABS batch size and the early-stopping criterion.

use crate::autodiff::BatchObservables;
use crate::error::{Error, Result};

use super::value::Guarded;

/// Guard added to variance denominators.
pub const VARIANCE_EPS: f64 = 1e-12;

/// Per-coordinate `Σ_n (g_n − g_B)²`.
fn scatter(obs: &BatchObservables) -> Vec<f64> {
    let mut out = vec![0.0; obs.dim()];
    for row in obs.sample_grad_rows() {
        for ((s, g), m) in out.iter_mut().zip(row).zip(&obs.batch_grad) {
            *s += (g - m) * (g - m);
        }
    }
    out
}

fn require_pair(obs: &BatchObservables) -> Result<()> {
    if obs.batch_size() < 2 {
        return Err(Error::BatchTooSmall(obs.batch_size(), 2));
    }
    Ok(())
}

/// Average over parameters of `g_B,j² / (Var_j + ε)`.
pub fn mean_gsnr(obs: &BatchObservables) -> Result<Guarded> {
    require_pair(obs)?;
    let b = obs.batch_size() as f64;
    let mut saturated = false;
    let mut total = 0.0;
    for (s, m) in scatter(obs).into_iter().zip(&obs.batch_grad) {
        let var = (s / b).max(0.0);
        saturated |= var <= VARIANCE_EPS;
        total += m * m / (var + VARIANCE_EPS);
    }
    Ok(Guarded {
        value: total / obs.dim() as f64,
        saturated,
    })
}

/// Batch size suggested by coupling the learning rate to the gradient noise.
pub fn cabs_batch_size(obs: &BatchObservables, learning_rate: f64) -> Result<f64> {
    let loss = obs.batch_loss;
    if !(loss > VARIANCE_EPS) {
        return Err(Error::NonPositiveLoss(loss));
    }
    let b = obs.batch_size() as f64;
    let noise: f64 = scatter(obs).iter().sum::<f64>() / b;
    Ok(learning_rate * noise / loss)
}

/// Evidence-based criterion; positive values signal that training should stop.
pub fn early_stopping_criterion(obs: &BatchObservables) -> Result<Guarded> {
    require_pair(obs)?;
    let b = obs.batch_size() as f64;
    let d = obs.dim() as f64;
    let mut saturated = false;
    let mut total = 0.0;
    for (s, m) in scatter(obs).into_iter().zip(&obs.batch_grad) {
        let s = s.max(0.0);
        saturated |= s <= VARIANCE_EPS;
        total += m * m / (s + VARIANCE_EPS);
    }
    Ok(Guarded {
        value: 1.0 - b * (b - 1.0) / d * total,
        saturated,
    })
}
