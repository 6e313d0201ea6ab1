//! First-order observations of a mini-batch: per-sample losses and gradients.

use std::sync::Arc;

use super::graph::Graph;
use super::model::{Batch, Layout, Model, ParamVector, SamplePass};
use crate::error::{Error, Result};

/// Per-sample losses and gradients of one mini-batch at one parameter point.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchObservables {
    /// `ℓ_n`, one per sample.
    pub sample_losses: Vec<f64>,
    /// Row-major `|B|×D` matrix of per-sample gradients `g_n`.
    pub sample_grads: Vec<f64>,
    /// Mini-batch gradient `g_B`.
    pub batch_grad: Vec<f64>,
    /// Mini-batch loss `L_B`.
    pub batch_loss: f64,
    pub layout: Arc<Layout>,
}

impl BatchObservables {
    /// Assemble observables from per-sample rows; the batch gradient and loss are their means.
    pub fn from_samples(
        sample_losses: Vec<f64>,
        sample_grads: Vec<f64>,
        layout: Arc<Layout>,
    ) -> Result<Self> {
        let d = layout.dim();
        let b = sample_losses.len();
        if b == 0 {
            return Err(Error::EmptyBatch);
        }
        if sample_grads.len() != b * d {
            return Err(Error::Dimension(format!(
                "{} gradient entries for {} samples of dimension {}",
                sample_grads.len(),
                b,
                d
            )));
        }
        let batch_loss = sample_losses.iter().sum::<f64>() / b as f64;
        let batch_grad = column_mean(&sample_grads, b, d);
        Ok(Self {
            sample_losses,
            sample_grads,
            batch_grad,
            batch_loss,
            layout,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.sample_losses.len()
    }

    pub fn dim(&self) -> usize {
        self.batch_grad.len()
    }

    pub fn sample_grad(&self, n: usize) -> &[f64] {
        let d = self.dim();
        &self.sample_grads[n * d..(n + 1) * d]
    }

    pub fn sample_grad_rows(&self) -> std::slice::Chunks<'_, f64> {
        self.sample_grads.chunks(self.dim().max(1))
    }

    /// Same observables with every per-sample gradient multiplied by `c`.
    pub fn scaled_grads(&self, c: f64) -> Self {
        let mut out = self.clone();
        out.sample_grads.iter_mut().for_each(|g| *g *= c);
        out.batch_grad.iter_mut().for_each(|g| *g *= c);
        out
    }
}

pub(crate) fn column_mean(rows: &[f64], b: usize, d: usize) -> Vec<f64> {
    let mut mean = vec![0.0; d];
    for row in rows.chunks(d.max(1)) {
        for (m, &g) in mean.iter_mut().zip(row) {
            *m += g;
        }
    }
    let inv = 1.0 / b as f64;
    mean.iter_mut().for_each(|m| *m *= inv);
    mean
}

pub(crate) fn validate(model: &dyn Model, params: &ParamVector, batch: &Batch) -> Result<()> {
    if params.dim() != model.dim() {
        return Err(Error::Dimension(format!(
            "model has {} parameters, vector has {}",
            model.dim(),
            params.dim()
        )));
    }
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    model.check_batch(batch)?;
    batch.check_finite()?;
    if params.values().iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("parameters contain non-finite entries".into()));
    }
    Ok(())
}

fn flatten_into(out: &mut Vec<f64>, grads: &[super::graph::Var<'_>]) {
    for g in grads {
        out.extend_from_slice(g.value().data());
    }
}

fn check_finite(values: &[f64], what: &str) -> Result<()> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("{what} overflowed")));
    }
    Ok(())
}

/// Per-sample losses and their mean.
pub fn forward_batch(
    model: &dyn Model,
    params: &ParamVector,
    batch: &Batch,
) -> Result<(Vec<f64>, f64)> {
    validate(model, params, batch)?;
    let graph = Graph::new();
    let vars = params.to_vars(&graph);
    let losses = model.sample_losses(&graph, &vars, batch).value().data().to_vec();
    check_finite(&losses, "sample losses")?;
    let mean = losses.iter().sum::<f64>() / losses.len() as f64;
    Ok((losses, mean))
}

/// Mini-batch gradient from a single batched pass (no per-sample rows).
#[derive(Clone, Debug, PartialEq)]
pub struct BatchGradient {
    pub sample_losses: Vec<f64>,
    pub batch_loss: f64,
    pub batch_grad: Vec<f64>,
}

pub fn batch_gradient(
    model: &dyn Model,
    params: &ParamVector,
    batch: &Batch,
) -> Result<BatchGradient> {
    validate(model, params, batch)?;
    let graph = Graph::new();
    let vars = params.to_vars(&graph);
    let losses = model.sample_losses(&graph, &vars, batch);
    let loss = losses.mean();
    let grads = graph.grad(loss, &vars);
    let mut batch_grad = Vec::with_capacity(params.dim());
    flatten_into(&mut batch_grad, &grads);
    let sample_losses = losses.value().data().to_vec();
    check_finite(&sample_losses, "sample losses")?;
    check_finite(&batch_grad, "gradient")?;
    Ok(BatchGradient {
        batch_loss: loss.value().data()[0],
        sample_losses,
        batch_grad,
    })
}

/// One backward pass per sample, materializing the `|B|×D` gradient matrix.
///
/// The batch gradient is the mean of the rows.
pub fn backward_per_sample(
    model: &dyn Model,
    params: &ParamVector,
    batch: &Batch,
) -> Result<BatchObservables> {
    validate(model, params, batch)?;
    let b = batch.len();
    let d = params.dim();
    let mut sample_losses = Vec::with_capacity(b);
    let mut sample_grads = Vec::with_capacity(b * d);
    let graph = Graph::new();
    for n in 0..b {
        graph.truncate(0);
        let vars = params.to_vars(&graph);
        let single = batch.sample(n);
        let loss = model.sample_losses(&graph, &vars, &single).sum();
        sample_losses.push(loss.value().data()[0]);
        let grads = graph.grad(loss, &vars);
        flatten_into(&mut sample_grads, &grads);
    }
    check_finite(&sample_losses, "sample losses")?;
    check_finite(&sample_grads, "per-sample gradients")?;
    BatchObservables::from_samples(sample_losses, sample_grads, Arc::clone(params.layout()))
}

/// Per-sample observables, factored out of one batched pass when the model
/// supports it and from [`backward_per_sample`] otherwise.
pub fn observe_batch(
    model: &dyn Model,
    params: &ParamVector,
    batch: &Batch,
) -> Result<BatchObservables> {
    validate(model, params, batch)?;
    match model.batched_sample_gradients(params, batch) {
        Some(pass) => split_pass(pass, params).map(|(_, obs)| obs),
        None => backward_per_sample(model, params, batch),
    }
}

/// The batch gradient exactly as [`batch_gradient`] computes it, together with the
/// per-sample observables, sharing one pass where the model allows it.
pub fn gradient_and_observations(
    model: &dyn Model,
    params: &ParamVector,
    batch: &Batch,
) -> Result<(BatchGradient, BatchObservables)> {
    validate(model, params, batch)?;
    match model.batched_sample_gradients(params, batch) {
        Some(pass) => split_pass(pass, params),
        None => {
            let gradient = batch_gradient(model, params, batch)?;
            let obs = observe_with_batch_gradient(model, params, batch, &gradient)?;
            Ok((gradient, obs))
        }
    }
}

fn split_pass(pass: SamplePass, params: &ParamVector) -> Result<(BatchGradient, BatchObservables)> {
    check_finite(&pass.sample_losses, "sample losses")?;
    check_finite(&pass.batch_grad, "gradient")?;
    check_finite(&pass.sample_grads, "per-sample gradients")?;
    let d = params.dim();
    let b = pass.sample_losses.len();
    if pass.sample_grads.len() != b * d || pass.batch_grad.len() != d {
        return Err(Error::Dimension(format!(
            "batched pass returned {} gradient entries for {b} samples of dimension {d}",
            pass.sample_grads.len()
        )));
    }
    let gradient = BatchGradient {
        sample_losses: pass.sample_losses.clone(),
        batch_loss: pass.batch_loss,
        batch_grad: pass.batch_grad.clone(),
    };
    let obs = BatchObservables {
        sample_losses: pass.sample_losses,
        sample_grads: pass.sample_grads,
        batch_grad: pass.batch_grad,
        batch_loss: pass.batch_loss,
        layout: Arc::clone(params.layout()),
    };
    Ok((gradient, obs))
}

/// Per-sample observables whose batch gradient comes from the batched pass.
///
/// The optimizer consumes the batched gradient, so training follows the same
/// arithmetic whether or not per-sample rows were materialized.
pub fn observe_with_batch_gradient(
    model: &dyn Model,
    params: &ParamVector,
    batch: &Batch,
    batched: &BatchGradient,
) -> Result<BatchObservables> {
    let mut obs = observe_batch(model, params, batch)?;
    obs.batch_grad.clone_from(&batched.batch_grad);
    obs.batch_loss = batched.batch_loss;
    obs.sample_losses.clone_from(&batched.sample_losses);
    Ok(obs)
}
