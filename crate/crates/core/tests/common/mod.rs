//! Independent reference implementations and random instance generators.
//!
//! Oracles are written with explicit loops from the defining formulas and share no
//! code with the library beyond its data types.
#![allow(dead_code)]

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use trainscope::autodiff::{
    Activation, Batch, BatchObservables, DenseCurvature, Layout, LossKind, Model, ParamVector,
    Sequential, Tensor,
};

pub const EPS: f64 = 1e-12;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| normal(rng)).collect()
}

/// `|a − b| / max(|a|, |b|)`, zero when both are zero.
pub fn rel_err(a: f64, b: f64) -> f64 {
    if a == b {
        return 0.0;
    }
    (a - b).abs() / a.abs().max(b.abs())
}

pub fn vec_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale = b
        .iter()
        .map(|y| y * y)
        .sum::<f64>()
        .sqrt()
        .max(a.iter().map(|x| x * x).sum::<f64>().sqrt());
    if diff == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

pub fn flat_layout(d: usize) -> Arc<Layout> {
    Arc::new(Layout::from_layers(vec![("theta", vec![(1, d)])]))
}

/// Random smooth MLP (tanh/sigmoid/identity, MSE or cross-entropy) with D ≤ `max_dim`.
pub fn random_mlp(rng: &mut ChaCha8Rng, max_dim: usize) -> (Sequential, ParamVector, Batch) {
    random_mlp_sized(rng, 8, max_dim)
}

/// As [`random_mlp`] with layer widths up to `max_width`.
pub fn random_mlp_sized(
    rng: &mut ChaCha8Rng,
    max_width: usize,
    max_dim: usize,
) -> (Sequential, ParamVector, Batch) {
    loop {
        let depth = rng.random_range(1..=3);
        let mut widths = vec![rng.random_range(1..=max_width)];
        for _ in 0..depth {
            widths.push(rng.random_range(1..=max_width));
        }
        let act = [Activation::Tanh, Activation::Sigmoid, Activation::Identity][rng.random_range(0..3)];
        let ce = rng.random_bool(0.5) && *widths.last().unwrap() >= 2;
        let loss = if ce {
            LossKind::CrossEntropyWithLogits
        } else {
            LossKind::Mse
        };
        let model = Sequential::mlp(&widths, act, loss).unwrap();
        if model.dim() > max_dim {
            continue;
        }
        let values: Vec<f64> = normals(rng, model.dim()).iter().map(|v| 0.7 * v).collect();
        let params = ParamVector::new(values, model.layout().clone()).unwrap();
        let b = rng.random_range(1..=6);
        let d_in = widths[0];
        let d_out = *widths.last().unwrap();
        let x = Tensor::from_matrix(b, d_in, normals(rng, b * d_in)).unwrap();
        let y = if ce {
            let classes: Vec<f64> = (0..b).map(|_| rng.random_range(0..d_out) as f64).collect();
            Tensor::from_matrix(b, 1, classes).unwrap()
        } else {
            Tensor::from_matrix(b, d_out, normals(rng, b * d_out)).unwrap()
        };
        return (model, params, Batch::new(x, y).unwrap());
    }
}

/// Central finite differences of the batch loss, using only forward passes.
pub fn fd_gradient(model: &dyn Model, params: &ParamVector, batch: &Batch, h: f64) -> Vec<f64> {
    let loss = |v: Vec<f64>| {
        trainscope::autodiff::forward_batch(model, &params.with_values(v).unwrap(), batch)
            .unwrap()
            .1
    };
    (0..params.dim())
        .map(|j| {
            let mut up = params.values().to_vec();
            let mut down = up.clone();
            up[j] += h;
            down[j] -= h;
            (loss(up) - loss(down)) / (2.0 * h)
        })
        .collect()
}

/// A tiny random instance: two observation sets, parameters and a curvature matrix.
pub struct Instance {
    pub theta_init: ParamVector,
    pub theta_before: ParamVector,
    pub theta_after: ParamVector,
    pub obs_before: BatchObservables,
    pub obs_after: BatchObservables,
    /// Symmetric positive definite, row-major `D×D`.
    pub hessian: Vec<f64>,
    pub lr: f64,
}

impl Instance {
    pub fn d(&self) -> usize {
        self.theta_before.dim()
    }

    pub fn probe(&self) -> DenseCurvature {
        DenseCurvature::new(self.d(), self.hessian.clone()).unwrap()
    }
}

fn random_obs(rng: &mut ChaCha8Rng, b: usize, d: usize, layout: &Arc<Layout>) -> BatchObservables {
    let offset = normals(rng, d);
    let spread = rng.random_range(0.1..2.0);
    let mut grads = Vec::with_capacity(b * d);
    for _ in 0..b {
        for o in &offset {
            grads.push(o + spread * normal(rng));
        }
    }
    let losses: Vec<f64> = (0..b).map(|_| rng.random_range(0.1..3.0)).collect();
    BatchObservables::from_samples(losses, grads, layout.clone()).unwrap()
}

pub fn random_instance(rng: &mut ChaCha8Rng) -> Instance {
    let d = rng.random_range(1..=20);
    let b = rng.random_range(2..=8);
    let layers = if d >= 2 {
        let split = rng.random_range(1..d);
        vec![("a", vec![(1, split)]), ("b", vec![(1, d - split)])]
    } else {
        vec![("a", vec![(1, 1)])]
    };
    let layout = Arc::new(Layout::from_layers(layers));
    let p = |rng: &mut ChaCha8Rng| ParamVector::new(normals(rng, d), layout.clone()).unwrap();
    let theta_init = p(rng);
    let theta_before = p(rng);
    let theta_after = p(rng);
    let obs_before = random_obs(rng, b, d, &layout);
    let obs_after = random_obs(rng, b, d, &layout);
    let m = normals(rng, d * d);
    let mut hessian = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            let mut s = 0.0;
            for k in 0..d {
                s += m[i * d + k] * m[j * d + k];
            }
            hessian[i * d + j] = s / d as f64 + if i == j { 0.5 } else { 0.0 };
        }
    }
    Instance {
        theta_init,
        theta_before,
        theta_after,
        obs_before,
        obs_after,
        hessian,
        lr: rng.random_range(0.01..1.0),
    }
}

pub fn rows(obs: &BatchObservables) -> Vec<Vec<f64>> {
    let d = obs.batch_grad.len();
    (0..obs.sample_losses.len())
        .map(|n| obs.sample_grads[n * d..(n + 1) * d].to_vec())
        .collect()
}

pub fn naive_norm(v: &[f64]) -> f64 {
    let mut s = 0.0;
    for x in v {
        s += x * x;
    }
    s.sqrt()
}

pub fn naive_displacement(init: &[f64], before: &[f64], after: &[f64]) -> (f64, f64) {
    let mut dist = 0.0;
    let mut upd = 0.0;
    for j in 0..init.len() {
        dist += (after[j] - init[j]).powi(2);
        upd += (after[j] - before[j]).powi(2);
    }
    (dist.sqrt(), upd.sqrt())
}

/// The three test statistics from per-sample deviations and explicit residual vectors.
pub fn naive_gradient_tests(obs: &BatchObservables) -> (f64, f64, f64) {
    let g = &obs.batch_grad;
    let b = obs.sample_losses.len() as f64;
    let mut g2 = 0.0;
    for x in g {
        g2 += x * x;
    }
    let mut s_norm = 0.0;
    let mut s_inner = 0.0;
    let mut s_ortho = 0.0;
    for row in rows(obs) {
        let mut ip = 0.0;
        let mut dev = 0.0;
        for j in 0..g.len() {
            ip += row[j] * g[j];
            dev += (row[j] - g[j]) * (row[j] - g[j]);
        }
        s_norm += dev / g2;
        s_inner += (ip / g2 - 1.0) * (ip / g2 - 1.0);
        let mut res = 0.0;
        for j in 0..g.len() {
            let r = row[j] - ip / g2 * g[j];
            res += r * r;
        }
        s_ortho += res / g2;
    }
    let den = b * (b - 1.0);
    ((s_norm / den).sqrt(), (s_inner / den).sqrt(), (s_ortho / den).sqrt())
}

/// Sort-and-bucket histogram over right-closed bins with boundary clipping.
pub fn naive_hist1d(values: &[f64], lo: f64, hi: f64, bins: usize) -> (Vec<f64>, Vec<u64>) {
    let step = (hi - lo) / bins as f64;
    let edges: Vec<f64> = (0..=bins)
        .map(|i| if i == bins { hi } else { lo + step * i as f64 })
        .collect();
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut counts = vec![0u64; bins];
    let mut bin = 0;
    for v in sorted {
        while bin + 1 < bins && v > edges[bin + 1] {
            bin += 1;
        }
        counts[bin] += 1;
    }
    (edges, counts)
}

fn scan_bin(edges: &[f64], v: f64) -> usize {
    let bins = edges.len() - 1;
    for i in 0..bins {
        if v <= edges[i + 1] {
            return i;
        }
    }
    bins - 1
}

/// Double loop over samples and coordinates.
pub fn naive_hist2d(
    theta: &[f64],
    obs: &BatchObservables,
    x: (f64, f64),
    y: (f64, f64),
    bins: (usize, usize),
) -> Vec<u64> {
    let xe: Vec<f64> = (0..=bins.0)
        .map(|i| if i == bins.0 { x.1 } else { x.0 + (x.1 - x.0) / bins.0 as f64 * i as f64 })
        .collect();
    let ye: Vec<f64> = (0..=bins.1)
        .map(|i| if i == bins.1 { y.1 } else { y.0 + (y.1 - y.0) / bins.1 as f64 * i as f64 })
        .collect();
    let mut counts = vec![0u64; bins.0 * bins.1];
    for row in rows(obs) {
        for j in 0..theta.len() {
            let i = scan_bin(&xe, theta[j]);
            let k = scan_bin(&ye, row[j]);
            counts[i * bins.1 + k] += 1;
        }
    }
    counts
}

pub fn naive_trace(h: &[f64], d: usize) -> f64 {
    let mut t = 0.0;
    for i in 0..d {
        t += h[i * d + i];
    }
    t
}

pub fn naive_tic_diag(h: &[f64], obs: &BatchObservables) -> f64 {
    let d = obs.batch_grad.len();
    let b = obs.sample_losses.len() as f64;
    let mut total = 0.0;
    for j in 0..d {
        let mut sq = 0.0;
        for row in rows(obs) {
            sq += row[j] * row[j];
        }
        let hjj = h[j * d + j];
        let den = hjj + if hjj < 0.0 { -EPS } else { EPS };
        total += sq / den;
    }
    total / b
}

pub fn naive_tic_trace(h: &[f64], obs: &BatchObservables) -> f64 {
    let d = obs.batch_grad.len();
    let b = obs.sample_losses.len() as f64;
    let mut sq = 0.0;
    for row in rows(obs) {
        for x in &row {
            sq += x * x;
        }
    }
    sq / b / naive_trace(h, d)
}

pub fn naive_gsnr(obs: &BatchObservables) -> f64 {
    let d = obs.batch_grad.len();
    let b = obs.sample_losses.len() as f64;
    let mut total = 0.0;
    for j in 0..d {
        let gb = obs.batch_grad[j];
        let mut scatter = 0.0;
        for row in rows(obs) {
            scatter += (row[j] - gb) * (row[j] - gb);
        }
        total += gb * gb / (scatter / b + EPS);
    }
    total / d as f64
}

pub fn naive_cabs(obs: &BatchObservables, lr: f64) -> f64 {
    let b = obs.sample_losses.len() as f64;
    let mut s = 0.0;
    for row in rows(obs) {
        for j in 0..row.len() {
            s += (row[j] - obs.batch_grad[j]).powi(2);
        }
    }
    lr * s / b / obs.batch_loss
}

pub fn naive_early_stopping(obs: &BatchObservables) -> f64 {
    let d = obs.batch_grad.len();
    let b = obs.sample_losses.len() as f64;
    let mut total = 0.0;
    for j in 0..d {
        let gb = obs.batch_grad[j];
        let mut scatter = 0.0;
        for row in rows(obs) {
            scatter += (row[j] - gb) * (row[j] - gb);
        }
        total += gb * gb / (scatter + EPS);
    }
    1.0 - b * (b - 1.0) / d as f64 * total
}

/// Weighted least-squares quadratic fit solved with a generic LU solver.
///
/// Returns the clamped and the raw standardized step position.
pub fn naive_alpha(
    before: &[f64],
    after: &[f64],
    obs_before: &BatchObservables,
    obs_after: &BatchObservables,
) -> (f64, f64) {
    let d = before.len();
    let s: Vec<f64> = (0..d).map(|j| after[j] - before[j]).collect();
    let step = naive_norm(&s);
    let mean_var = |xs: &[f64]| {
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
        (m, v / n)
    };
    let slopes = |obs: &BatchObservables| -> Vec<f64> {
        rows(obs)
            .iter()
            .map(|r| {
                let mut p = 0.0;
                for j in 0..d {
                    p += r[j] * s[j];
                }
                p / step
            })
            .collect()
    };
    let (f0, v0) = mean_var(&obs_before.sample_losses);
    let (f1, v1) = mean_var(&obs_after.sample_losses);
    let (d0, w0) = mean_var(&slopes(obs_before));
    let (d1, w1) = mean_var(&slopes(obs_after));
    let f = DVector::from_vec(vec![f0, f1, d0, d1]);
    let vars = [v0, v1, w0, w1];
    let phi = DMatrix::from_row_slice(
        3,
        4,
        &[
            1.0, 1.0, 0.0, 0.0, //
            0.0, step, 1.0, 1.0, //
            0.0, step * step, 0.0, 2.0 * step,
        ],
    );
    let lambda_inv = DMatrix::from_diagonal(&DVector::from_iterator(4, vars.iter().map(|v| 1.0 / v)));
    let normal = &phi * &lambda_inv * phi.transpose();
    let rhs = &phi * &lambda_inv * f;
    let w = normal.lu().solve(&rhs).expect("non-singular normal matrix");
    let raw = if w[2] > 1e-12 {
        step / (-w[1] / (2.0 * w[2])) - 1.0
    } else if d1 < 0.0 {
        -1.0
    } else {
        1.0
    };
    (raw.clamp(-2.0, 2.0), raw)
}

/// Eigenvalue of largest magnitude from a dense symmetric eigensolver.
pub fn dense_dominant_eigenvalue(h: &[f64], d: usize) -> f64 {
    let m = DMatrix::from_row_slice(d, d, h);
    let eig = SymmetricEigen::new(m).eigenvalues;
    eig.iter().copied().fold(0.0, |best: f64, v| if v.abs() > best.abs() { v } else { best })
}

/// Random `d×d` Wishart-type matrix `M Mᵀ / d`.
pub fn random_wishart(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let m = normals(rng, d * d);
    let mut h = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            let mut s = 0.0;
            for k in 0..d {
                s += m[i * d + k] * m[j * d + k];
            }
            h[i * d + j] = s / d as f64;
        }
    }
    h
}
