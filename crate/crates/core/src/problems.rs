//! Seeded synthetic problems.
//!
//! A problem owns a fixed training set, a model and its initial parameters. Data,
//! initialization and batch order draw from separate random streams, so models that
//! differ only in their activation see identical data for the same seed.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{
    Activation, Batch, Layer, LossKind, Model, ParamVector, Quadratic, Sequential, Tensor,
};
use crate::error::{Error, Result};

const DATA_STREAM: u64 = 0;
const INIT_STREAM: u64 = 1;
const BATCH_STREAM: u64 = 2;

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProblemMeta {
    pub name: String,
    /// Training-set size `N`.
    pub n: usize,
    pub default_batch_size: usize,
    pub default_lr: f64,
}

#[derive(Clone)]
pub struct Problem {
    pub meta: ProblemMeta,
    pub model: Arc<dyn Model>,
    /// The whole training set.
    pub data: Batch,
    pub init: ParamVector,
    /// Constant Hessian of the loss, for problems that have one.
    pub curvature: Option<Tensor>,
}

impl std::fmt::Debug for Problem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Problem")
            .field("meta", &self.meta)
            .field("dim", &self.init.dim())
            .finish_non_exhaustive()
    }
}

impl Problem {
    pub fn dim(&self) -> usize {
        self.init.dim()
    }

    /// Mini-batch stream over the training set; `seed` fixes the batch order.
    pub fn sampler(&self, batch_size: usize, seed: u64) -> Result<BatchSampler> {
        BatchSampler::new(self.meta.n, batch_size, seed)
    }

    pub fn batch(&self, indices: &[usize]) -> Batch {
        self.data.select(indices)
    }

    /// Same problem with a different starting point.
    pub fn with_init(mut self, values: Vec<f64>) -> Result<Self> {
        self.init = self.init.with_values(values)?;
        Ok(self)
    }
}

/// Uniform mini-batches without replacement, reshuffled every epoch; an incomplete
/// tail of an epoch is dropped.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    order: Vec<usize>,
    batch_size: usize,
    position: usize,
    epoch: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(n: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 || batch_size > n {
            return Err(Error::InvalidConfig(format!(
                "batch size {batch_size} must be between 1 and the training-set size {n}"
            )));
        }
        let mut rng = rng(seed, BATCH_STREAM);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Ok(Self {
            order,
            batch_size,
            position: 0,
            epoch: 0,
            rng,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    /// Steps per epoch.
    pub fn steps_per_epoch(&self) -> usize {
        self.order.len() / self.batch_size
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn next_indices(&mut self) -> Vec<usize> {
        if self.position + self.batch_size > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.position = 0;
            self.epoch += 1;
        }
        let out = self.order[self.position..self.position + self.batch_size].to_vec();
        self.position += self.batch_size;
        out
    }
}

fn normal_vec(rng: &mut ChaCha8Rng, len: usize, std: f64) -> Vec<f64> {
    (0..len)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            std * z
        })
        .collect()
}

/// Orthonormal columns from Gram–Schmidt on a Gaussian matrix.
fn random_orthogonal(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(d);
    while cols.len() < d {
        let mut v = normal_vec(rng, d, 1.0);
        for _ in 0..2 {
            for c in &cols {
                let p: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(c).for_each(|(a, b)| *a -= p * b);
            }
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 1e-8 {
            cols.push(v.into_iter().map(|a| a / n).collect());
        }
    }
    let mut q = vec![0.0; d * d];
    for (j, c) in cols.iter().enumerate() {
        for i in 0..d {
            q[i * d + j] = c[i];
        }
    }
    q
}

fn quadratic_problem(
    meta: ProblemMeta,
    curvature: Tensor,
    centres: Tensor,
    init: Vec<f64>,
) -> Result<Problem> {
    let model = Quadratic::new(curvature.clone())?;
    let init = ParamVector::new(init, model.layout().clone())?;
    let n = centres.rows();
    Ok(Problem {
        meta,
        model: Arc::new(model),
        data: Batch::new(centres, Tensor::zeros(n, 1))?,
        init,
        curvature: Some(curvature),
    })
}

/// Stochastic quadratic `½(θ−c_n)ᵀA(θ−c_n)` with a bimodal spectrum: 90% of the
/// eigenvalues log-uniform in [0.1, 1], the rest uniform in [30, 60].
pub fn noisy_quadratic(d: usize, seed: u64) -> Result<Problem> {
    if d < 2 {
        return Err(Error::InvalidConfig("noisy quadratic needs D ≥ 2".into()));
    }
    const N: usize = 1000;
    let mut data = rng(seed, DATA_STREAM);
    let large = (d / 10).max(1);
    let eig: Vec<f64> = (0..d)
        .map(|i| {
            if i < d - large {
                10f64.powf(data.random_range(-1.0..=0.0))
            } else {
                data.random_range(30.0..=60.0)
            }
        })
        .collect();
    let q = random_orthogonal(&mut data, d);
    let mut a = vec![0.0; d * d];
    for i in 0..d {
        for j in i..d {
            let v: f64 = (0..d).map(|k| q[i * d + k] * eig[k] * q[j * d + k]).sum();
            a[i * d + j] = v;
            a[j * d + i] = v;
        }
    }
    let centres = Tensor::from_matrix(N, d, normal_vec(&mut data, N * d, 1.0))?;
    let init = normal_vec(&mut rng(seed, INIT_STREAM), d, 1.0);
    quadratic_problem(
        ProblemMeta {
            name: "noisy_quadratic".into(),
            n: N,
            default_batch_size: 128,
            default_lr: 0.01,
        },
        Tensor::from_matrix(d, d, a)?,
        centres,
        init,
    )
}

/// Learning rate that understeps on [`anisotropic_quadratic`].
pub const UNDERSTEP_LR: f64 = 0.05;
/// Learning rate close to the stability edge `2/λ_max` of [`anisotropic_quadratic`].
pub const EDGE_LR: f64 = 1.95;

/// Two-dimensional noisy quadratic with curvature `diag(1, 0.01)` starting at `(1, 5)`.
pub fn anisotropic_quadratic(seed: u64) -> Result<Problem> {
    const N: usize = 1000;
    let mut data = rng(seed, DATA_STREAM);
    let centres = Tensor::from_matrix(N, 2, normal_vec(&mut data, N * 2, 0.5))?;
    quadratic_problem(
        ProblemMeta {
            name: "anisotropic_quadratic".into(),
            n: N,
            default_batch_size: 100,
            default_lr: UNDERSTEP_LR,
        },
        Tensor::from_matrix(2, 2, vec![1.0, 0.0, 0.0, 0.01])?,
        centres,
        vec![1.0, 5.0],
    )
}

/// `f(θ, x) = w₂w₁x` fitted to `y = 1.4x + ε` on 100 points, starting at `(0.1, 1.7)`.
pub fn two_param_regression(seed: u64) -> Result<Problem> {
    const N: usize = 100;
    let mut data = rng(seed, DATA_STREAM);
    let x = normal_vec(&mut data, N, 1.0);
    let noise = normal_vec(&mut data, N, 1.0);
    let y: Vec<f64> = x.iter().zip(&noise).map(|(x, e)| 1.4 * x + e).collect();
    let scalar = Layer::Dense {
        inputs: 1,
        outputs: 1,
        bias: false,
    };
    let model = Sequential::new(vec![scalar.clone(), scalar], LossKind::Mse)?;
    let init = ParamVector::new(vec![0.1, 1.7], model.layout().clone())?;
    Ok(Problem {
        meta: ProblemMeta {
            name: "two_param_regression".into(),
            n: N,
            default_batch_size: 95,
            default_lr: 0.1,
        },
        model: Arc::new(model),
        data: Batch::new(
            Tensor::from_matrix(N, 1, x)?,
            Tensor::from_matrix(N, 1, y)?,
        )?,
        init,
        curvature: None,
    })
}

fn class_targets(labels: &[usize]) -> Result<Tensor> {
    Tensor::from_matrix(labels.len(), 1, labels.iter().map(|&c| c as f64).collect())
}

/// Separation of the class means of [`logistic_regression_synthetic`] in units of the noise std.
pub const BLOB_SEPARATION: f64 = 6.0;

/// Softmax regression on Gaussian class blobs whose means lie
/// [`BLOB_SEPARATION`] apart along random directions.
pub fn logistic_regression_synthetic(
    d_in: usize,
    classes: usize,
    n: usize,
    seed: u64,
) -> Result<Problem> {
    if d_in == 0 || classes < 2 || n < classes {
        return Err(Error::InvalidConfig(
            "logistic regression needs d_in ≥ 1, at least two classes and N ≥ classes".into(),
        ));
    }
    let mut data = rng(seed, DATA_STREAM);
    let means: Vec<Vec<f64>> = (0..classes)
        .map(|_| {
            let v = normal_vec(&mut data, d_in, 1.0);
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            v.into_iter()
                .map(|a| a / norm * BLOB_SEPARATION / std::f64::consts::SQRT_2)
                .collect()
        })
        .collect();
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    let mut inputs = Vec::with_capacity(n * d_in);
    for &c in &labels {
        let noise = normal_vec(&mut data, d_in, 1.0);
        inputs.extend(means[c].iter().zip(noise).map(|(m, e)| m + e));
    }
    let model = Sequential::new(
        vec![Layer::Dense {
            inputs: d_in,
            outputs: classes,
            bias: true,
        }],
        LossKind::CrossEntropyWithLogits,
    )?;
    let init = ParamVector::new(vec![0.0; model.dim()], model.layout().clone())?;
    Ok(Problem {
        meta: ProblemMeta {
            name: "logistic_regression".into(),
            n,
            default_batch_size: 128,
            default_lr: 0.5,
        },
        model: Arc::new(model),
        data: Batch::new(
            Tensor::from_matrix(n, d_in, inputs)?,
            class_targets(&labels)?,
        )?,
        init,
        curvature: None,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputScale {
    /// Pixel intensities in `[0, 1]`.
    Normalized,
    /// The same intensities multiplied by 255.
    Raw255,
}

/// Initialization of [`mlp_classification`] networks.
///
/// Weights of a layer with fan-in `m` are drawn from `N(0, gain²/m)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpInit {
    pub hidden_gain: f64,
    pub hidden_bias: f64,
    pub output_gain: f64,
}

impl MlpInit {
    /// He initialization with zero biases.
    pub const HE: MlpInit = MlpInit {
        hidden_gain: std::f64::consts::SQRT_2,
        hidden_bias: 0.0,
        output_gain: 1.0,
    };

    /// He hidden layers and a near-zero output layer; the softmax stays in its
    /// linear regime even for inputs scaled by 255.
    pub const QUIET_OUTPUT: MlpInit = MlpInit {
        hidden_gain: std::f64::consts::SQRT_2,
        hidden_bias: 0.0,
        output_gain: 1e-5,
    };

    /// Large weights and biases that drive sigmoid units into saturation.
    pub const SATURATING: MlpInit = MlpInit {
        hidden_gain: 10.0,
        hidden_bias: 15.0,
        output_gain: 0.01,
    };
}

/// Learning rate at which both input scalings of [`MlpInit::QUIET_OUTPUT`] keep training.
pub const SCALE_STUDY_LR: f64 = 1e-3;
/// Learning rate at which the ReLU network under [`MlpInit::SATURATING`] stays stable.
pub const SATURATION_STUDY_LR: f64 = 1e-5;

impl Default for MlpInit {
    fn default() -> Self {
        Self::HE
    }
}

pub const MLP_WIDTHS: [usize; 4] = [64, 32, 32, 2];
/// Fraction of training labels flipped in [`mlp_classification`] data.
pub const LABEL_NOISE: f64 = 0.1;

/// Two classes of 8×8 "images": a smooth per-class pattern plus pixel noise,
/// clipped to `[0.01, 1]`, with [`LABEL_NOISE`] of the labels flipped.
fn image_like_data(seed: u64, n: usize) -> (Vec<f64>, Vec<usize>) {
    let mut data = rng(seed, DATA_STREAM);
    let side = 8;
    let patterns: Vec<Vec<f64>> = (0..2)
        .map(|_| {
            let (fx, fy): (f64, f64) = (data.random_range(0.5..2.0), data.random_range(0.5..2.0));
            let (px, py): (f64, f64) = (data.random_range(0.0..6.3), data.random_range(0.0..6.3));
            (0..side * side)
                .map(|k| {
                    let (r, c) = ((k / side) as f64, (k % side) as f64);
                    0.5 + 0.3 * (fx * r / side as f64 * 6.3 + px).sin()
                        * (fy * c / side as f64 * 6.3 + py).cos()
                })
                .collect()
        })
        .collect();
    let pixel = Normal::new(0.0, 0.25).expect("valid std");
    let mut inputs = Vec::with_capacity(n * side * side);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % 2;
        inputs.extend(
            patterns[class]
                .iter()
                .map(|p| (p + pixel.sample(&mut data)).clamp(0.01, 1.0)),
        );
        let flip = data.random_bool(LABEL_NOISE);
        labels.push(if flip { 1 - class } else { class });
    }
    (inputs, labels)
}

/// 64-32-32-2 classifier with the default He initialization.
pub fn mlp_classification(
    activation: Activation,
    input_scale: InputScale,
    seed: u64,
) -> Result<Problem> {
    mlp_classification_with(activation, input_scale, MlpInit::default(), seed)
}

pub fn mlp_classification_with(
    activation: Activation,
    input_scale: InputScale,
    init: MlpInit,
    seed: u64,
) -> Result<Problem> {
    const N: usize = 2000;
    let (mut inputs, labels) = image_like_data(seed, N);
    if input_scale == InputScale::Raw255 {
        inputs.iter_mut().for_each(|x| *x *= 255.0);
    }
    let model = Sequential::mlp(&MLP_WIDTHS, activation, LossKind::CrossEntropyWithLogits)?;
    let mut draw = rng(seed, INIT_STREAM);
    let last = MLP_WIDTHS.len() - 2;
    let mut values = Vec::with_capacity(model.dim());
    for (i, pair) in MLP_WIDTHS.windows(2).enumerate() {
        let (gain, bias) = if i == last {
            (init.output_gain, 0.0)
        } else {
            (init.hidden_gain, init.hidden_bias)
        };
        let std = gain / (pair[0] as f64).sqrt();
        values.extend(normal_vec(&mut draw, pair[0] * pair[1], std));
        values.extend(std::iter::repeat_n(bias, pair[1]));
    }
    let params = ParamVector::new(values, model.layout().clone())?;
    let act = match activation {
        Activation::Relu => "relu",
        Activation::Sigmoid => "sigmoid",
        Activation::Tanh => "tanh",
        Activation::Identity => "identity",
    };
    let scale = match input_scale {
        InputScale::Normalized => "",
        InputScale::Raw255 => "_raw255",
    };
    Ok(Problem {
        meta: ProblemMeta {
            name: format!("mlp_{act}{scale}"),
            n: N,
            default_batch_size: 128,
            default_lr: 0.1,
        },
        model: Arc::new(model),
        data: Batch::new(
            Tensor::from_matrix(N, MLP_WIDTHS[0], inputs)?,
            class_targets(&labels)?,
        )?,
        init: params,
        curvature: None,
    })
}

/// Names accepted by [`by_name`].
pub const PROBLEM_NAMES: [&str; 8] = [
    "noisy_quadratic",
    "anisotropic_quadratic",
    "two_param_regression",
    "logistic_regression",
    "mlp_relu",
    "mlp_sigmoid",
    "mlp_relu_raw255",
    "mlp_sigmoid_raw255",
];

pub fn by_name(name: &str, seed: u64) -> Result<Problem> {
    use Activation::{Relu, Sigmoid};
    use InputScale::{Normalized, Raw255};
    match name {
        "noisy_quadratic" => noisy_quadratic(100, seed),
        "anisotropic_quadratic" => anisotropic_quadratic(seed),
        "two_param_regression" => two_param_regression(seed),
        "logistic_regression" => logistic_regression_synthetic(20, 2, 2000, seed),
        "mlp_relu" => mlp_classification(Relu, Normalized, seed),
        "mlp_sigmoid" => mlp_classification(Sigmoid, Normalized, seed),
        "mlp_relu_raw255" => mlp_classification(Relu, Raw255, seed),
        "mlp_sigmoid_raw255" => mlp_classification(Sigmoid, Raw255, seed),
        other => Err(Error::InvalidConfig(format!(
            "unknown problem {other:?}; expected one of {}",
            PROBLEM_NAMES.join(", ")
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{backward_per_sample, forward_batch};

    #[test]
    fn sampler_covers_each_epoch_once() {
        let mut s = BatchSampler::new(10, 3, 7).unwrap();
        let mut seen: Vec<usize> = (0..3).flat_map(|_| s.next_indices()).collect();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 9);
        assert_eq!(s.steps_per_epoch(), 3);
        s.next_indices();
        assert_eq!(s.epoch(), 1);
    }

    #[test]
    fn sampler_rejects_oversized_batches() {
        assert!(BatchSampler::new(5, 6, 0).is_err());
        assert!(BatchSampler::new(5, 0, 0).is_err());
    }

    #[test]
    fn same_seed_same_problem() {
        let a = noisy_quadratic(10, 3).unwrap();
        let b = noisy_quadratic(10, 3).unwrap();
        assert_eq!(a.data, b.data);
        assert_eq!(a.init, b.init);
        assert_eq!(a.curvature, b.curvature);
    }

    #[test]
    fn two_param_setup() {
        let p = two_param_regression(0).unwrap();
        assert_eq!(p.dim(), 2);
        assert_eq!(p.init.values(), &[0.1, 1.7]);
        assert_eq!(p.meta.n, 100);
        let zero = p.init.with_values(vec![0.0, 1.7]).unwrap();
        let batch = p.batch(&[0, 1, 2]);
        let (losses, _) = forward_batch(p.model.as_ref(), &zero, &batch).unwrap();
        for (n, l) in losses.iter().enumerate() {
            assert_eq!(*l, batch.targets.get(n, 0).powi(2));
        }
    }

    #[test]
    fn two_param_gradient_matches_hand_form() {
        let p = two_param_regression(1).unwrap();
        let batch = p.batch(&[4]);
        let (w1, w2) = (0.3, -1.2);
        let theta = p.init.with_values(vec![w1, w2]).unwrap();
        let g = backward_per_sample(p.model.as_ref(), &theta, &batch).unwrap();
        let (x, y) = (batch.inputs.get(0, 0), batch.targets.get(0, 0));
        let r = w2 * w1 * x - y;
        assert!((g.batch_grad[0] - 2.0 * r * w2 * x).abs() < 1e-12);
        assert!((g.batch_grad[1] - 2.0 * r * w1 * x).abs() < 1e-12);
    }

    #[test]
    fn activations_share_data_and_init() {
        let r = mlp_classification(Activation::Relu, InputScale::Normalized, 5).unwrap();
        let s = mlp_classification(Activation::Sigmoid, InputScale::Normalized, 5).unwrap();
        assert_eq!(r.data, s.data);
        assert_eq!(r.init.values(), s.init.values());
        let raw = mlp_classification(Activation::Relu, InputScale::Raw255, 5).unwrap();
        assert_eq!(raw.data.inputs.get(3, 7), 255.0 * r.data.inputs.get(3, 7));
        assert!(r.data.inputs.data().iter().all(|&x| (0.01..=1.0).contains(&x)));
    }

    #[test]
    fn orthogonal_basis_is_orthonormal() {
        let d = 6;
        let q = random_orthogonal(&mut rng(0, 9), d);
        for i in 0..d {
            for j in 0..d {
                let dot: f64 = (0..d).map(|k| q[k * d + i] * q[k * d + j]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn unknown_name_lists_choices() {
        let err = by_name("cifar", 0).unwrap_err().to_string();
        assert!(err.contains("two_param_regression"));
    }
}
