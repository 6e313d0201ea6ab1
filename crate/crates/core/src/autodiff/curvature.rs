//! Second-order access to the mini-batch loss through Hessian-vector products.

use std::cell::OnceCell;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::model::{Batch, Model, ParamVector};
use super::observe::{batch_gradient, validate};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Largest dimension for which the exact diagonal (one HVP per coordinate) is attempted.
pub const DEFAULT_DIAG_CAP: usize = 5000;
/// Largest dimension accepted by the dense finite-difference Hessian.
pub const DENSE_REFERENCE_CAP: usize = 500;

/// Matrix-free view of a symmetric curvature matrix.
pub trait CurvatureProbe {
    fn dim(&self) -> usize;

    /// `H·v`.
    fn hvp(&self, v: &[f64]) -> Result<Vec<f64>>;

    /// Diagonal of `H`, computed on first use.
    fn diagonal(&self) -> Result<&[f64]>;

    fn trace(&self) -> Result<f64> {
        Ok(self.diagonal()?.iter().sum())
    }
}

/// How the Hessian diagonal is obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum DiagMode {
    /// `e_jᵀ H e_j` for every coordinate; refuses dimensions above `cap`.
    Exact { cap: usize },
    /// Hutchinson estimate `mean_k z_k ⊙ H z_k` with Rademacher probes.
    MonteCarlo { samples: usize, seed: u64 },
}

impl Default for DiagMode {
    fn default() -> Self {
        DiagMode::Exact {
            cap: DEFAULT_DIAG_CAP,
        }
    }
}

/// Recorded forward pass and first backward pass, reused across many products.
struct HvpTape {
    graph: Graph,
    params: Vec<usize>,
    grads: Vec<usize>,
    shapes: Vec<(usize, usize)>,
    mark: usize,
}

impl HvpTape {
    fn record(model: &dyn Model, params: &ParamVector, batch: &Batch) -> Self {
        let graph = Graph::new();
        let (param_ids, grad_ids) = {
            let vars = params.to_vars(&graph);
            let loss = model.sample_losses(&graph, &vars, batch).mean();
            let grads = graph.grad(loss, &vars);
            (
                vars.iter().map(Var::id).collect::<Vec<_>>(),
                grads.iter().map(Var::id).collect::<Vec<_>>(),
            )
        };
        let shapes = params
            .layout()
            .blocks()
            .iter()
            .map(|b| (b.rows, b.cols))
            .collect();
        let mark = graph.len();
        Self {
            graph,
            params: param_ids,
            grads: grad_ids,
            shapes,
            mark,
        }
    }

    fn product(&self, v: &[f64]) -> Vec<f64> {
        let g = &self.graph;
        let params: Vec<Var<'_>> = self.params.iter().map(|&id| g.var_at(id)).collect();
        let mut offset = 0;
        let mut inner: Option<Var<'_>> = None;
        for (&gid, &(rows, cols)) in self.grads.iter().zip(&self.shapes) {
            let n = rows * cols;
            let direction = g.constant(
                Tensor::from_matrix(rows, cols, v[offset..offset + n].to_vec())
                    .expect("block shape"),
            );
            offset += n;
            let term = g.var_at(gid).dot(direction);
            inner = Some(match inner {
                Some(acc) => acc + term,
                None => term,
            });
        }
        let inner = inner.expect("model has parameters");
        let hv = g.grad(inner, &params);
        let mut out = Vec::with_capacity(v.len());
        for h in &hv {
            out.extend_from_slice(h.value().data());
        }
        g.truncate(self.mark);
        out
    }
}

fn check_direction(d: usize, v: &[f64]) -> Result<()> {
    if v.len() != d {
        return Err(Error::Dimension(format!(
            "direction has {} entries, model has {} parameters",
            v.len(),
            d
        )));
    }
    Ok(())
}

/// `H_B(θ)·v` by differentiating `vᵀ g_B` a second time.
pub fn hessian_vector_product(
    model: &dyn Model,
    params: &ParamVector,
    batch: &Batch,
    v: &[f64],
) -> Result<Vec<f64>> {
    validate(model, params, batch)?;
    check_direction(params.dim(), v)?;
    Ok(HvpTape::record(model, params, batch).product(v))
}

/// Exact Hessian diagonal from `D` basis-vector products.
pub fn hessian_diagonal(
    model: &dyn Model,
    params: &ParamVector,
    batch: &Batch,
    cap: usize,
) -> Result<Vec<f64>> {
    validate(model, params, batch)?;
    let d = params.dim();
    if d > cap {
        return Err(Error::CapExceeded {
            what: "exact Hessian diagonal",
            dim: d,
            cap,
        });
    }
    let tape = HvpTape::record(model, params, batch);
    exact_diagonal(d, |v| Ok(tape.product(v)))
}

fn exact_diagonal(d: usize, mut hvp: impl FnMut(&[f64]) -> Result<Vec<f64>>) -> Result<Vec<f64>> {
    let mut e = vec![0.0; d];
    let mut diag = Vec::with_capacity(d);
    for j in 0..d {
        e[j] = 1.0;
        diag.push(hvp(&e)?[j]);
        e[j] = 0.0;
    }
    Ok(diag)
}

/// Hutchinson diagonal estimate with `samples` Rademacher probes.
pub fn hutchinson_diagonal(
    d: usize,
    samples: usize,
    seed: u64,
    mut hvp: impl FnMut(&[f64]) -> Result<Vec<f64>>,
) -> Result<Vec<f64>> {
    if samples == 0 {
        return Err(Error::InvalidConfig(
            "Monte-Carlo diagonal needs at least one probe".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = vec![0.0; d];
    for _ in 0..samples {
        let z: Vec<f64> = (0..d)
            .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
            .collect();
        let hz = hvp(&z)?;
        for ((a, zi), hi) in acc.iter_mut().zip(&z).zip(&hz) {
            *a += zi * hi;
        }
    }
    let inv = 1.0 / samples as f64;
    acc.iter_mut().for_each(|a| *a *= inv);
    Ok(acc)
}

/// Dense Hessian by central differences of the batch gradient (test oracle).
///
/// Row `j` is `(∇L(θ + h e_j) − ∇L(θ − h e_j)) / 2h`; the result is symmetrized.
pub fn dense_hessian_reference(
    model: &dyn Model,
    params: &ParamVector,
    batch: &Batch,
) -> Result<Vec<f64>> {
    let d = params.dim();
    if d > DENSE_REFERENCE_CAP {
        return Err(Error::CapExceeded {
            what: "dense Hessian reference",
            dim: d,
            cap: DENSE_REFERENCE_CAP,
        });
    }
    let h = 1e-5;
    let mut rows = vec![0.0; d * d];
    let mut shifted = params.clone();
    for j in 0..d {
        let base = params.values()[j];
        shifted.values_mut()[j] = base + h;
        let plus = batch_gradient(model, &shifted, batch)?.batch_grad;
        shifted.values_mut()[j] = base - h;
        let minus = batch_gradient(model, &shifted, batch)?.batch_grad;
        shifted.values_mut()[j] = base;
        for i in 0..d {
            rows[j * d + i] = (plus[i] - minus[i]) / (2.0 * h);
        }
    }
    for i in 0..d {
        for j in 0..i {
            let avg = 0.5 * (rows[i * d + j] + rows[j * d + i]);
            rows[i * d + j] = avg;
            rows[j * d + i] = avg;
        }
    }
    Ok(rows)
}

/// Curvature of the mini-batch loss at a fixed parameter point.
pub struct BatchCurvature {
    tape: HvpTape,
    dim: usize,
    mode: DiagMode,
    diag: OnceCell<Vec<f64>>,
}

impl BatchCurvature {
    pub fn new(
        model: &dyn Model,
        params: &ParamVector,
        batch: &Batch,
        mode: DiagMode,
    ) -> Result<Self> {
        validate(model, params, batch)?;
        Ok(Self {
            tape: HvpTape::record(model, params, batch),
            dim: params.dim(),
            mode,
            diag: OnceCell::new(),
        })
    }

    pub fn mode(&self) -> DiagMode {
        self.mode
    }
}

impl CurvatureProbe for BatchCurvature {
    fn dim(&self) -> usize {
        self.dim
    }

    fn hvp(&self, v: &[f64]) -> Result<Vec<f64>> {
        check_direction(self.dim, v)?;
        Ok(self.tape.product(v))
    }

    fn diagonal(&self) -> Result<&[f64]> {
        if let Some(d) = self.diag.get() {
            return Ok(d);
        }
        let diag = match self.mode {
            DiagMode::Exact { cap } => {
                if self.dim > cap {
                    return Err(Error::CapExceeded {
                        what: "exact Hessian diagonal",
                        dim: self.dim,
                        cap,
                    });
                }
                exact_diagonal(self.dim, |v| Ok(self.tape.product(v)))?
            }
            DiagMode::MonteCarlo { samples, seed } => {
                hutchinson_diagonal(self.dim, samples, seed, |v| Ok(self.tape.product(v)))?
            }
        };
        Ok(self.diag.get_or_init(|| diag))
    }
}

/// Explicit symmetric matrix behind the [`CurvatureProbe`] interface.
#[derive(Clone, Debug)]
pub struct DenseCurvature {
    dim: usize,
    matrix: Vec<f64>,
    diag: OnceCell<Vec<f64>>,
}

impl DenseCurvature {
    /// Row-major `dim×dim` matrix; must be symmetric.
    pub fn new(dim: usize, matrix: Vec<f64>) -> Result<Self> {
        if matrix.len() != dim * dim {
            return Err(Error::Dimension(format!(
                "{} entries for a {dim}×{dim} matrix",
                matrix.len()
            )));
        }
        for i in 0..dim {
            for j in 0..i {
                let (a, b) = (matrix[i * dim + j], matrix[j * dim + i]);
                if (a - b).abs() > 1e-9 * (1.0 + a.abs().max(b.abs())) {
                    return Err(Error::Dimension("curvature matrix is not symmetric".into()));
                }
            }
        }
        Ok(Self {
            dim,
            matrix,
            diag: OnceCell::new(),
        })
    }

    pub fn diagonal_matrix(values: &[f64]) -> Self {
        let d = values.len();
        let mut m = vec![0.0; d * d];
        for (i, &v) in values.iter().enumerate() {
            m[i * d + i] = v;
        }
        Self::new(d, m).expect("diagonal is symmetric")
    }

    pub fn matrix(&self) -> &[f64] {
        &self.matrix
    }
}

impl CurvatureProbe for DenseCurvature {
    fn dim(&self) -> usize {
        self.dim
    }

    fn hvp(&self, v: &[f64]) -> Result<Vec<f64>> {
        check_direction(self.dim, v)?;
        Ok(self
            .matrix
            .chunks(self.dim)
            .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
            .collect())
    }

    fn diagonal(&self) -> Result<&[f64]> {
        Ok(self
            .diag
            .get_or_init(|| (0..self.dim).map(|i| self.matrix[i * self.dim + i]).collect()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::model::{Activation, LossKind, Quadratic, Sequential};

    fn quadratic_diag_1_2() -> (Quadratic, ParamVector, Batch) {
        let a = Tensor::from_matrix(2, 2, vec![1.0, 0.0, 0.0, 2.0]).unwrap();
        let model = Quadratic::new(a).unwrap();
        let params = ParamVector::new(vec![0.3, -0.4], model.layout().clone()).unwrap();
        let batch = Batch::new(Tensor::zeros(1, 2), Tensor::zeros(1, 0)).unwrap();
        (model, params, batch)
    }

    #[test]
    fn hvp_of_zero_is_zero() {
        let (m, p, b) = quadratic_diag_1_2();
        assert_eq!(hessian_vector_product(&m, &p, &b, &[0.0, 0.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn hvp_of_quadratic_is_curvature() {
        let (m, p, b) = quadratic_diag_1_2();
        assert_eq!(hessian_vector_product(&m, &p, &b, &[1.0, 1.0]).unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn hvp_rejects_wrong_length() {
        let (m, p, b) = quadratic_diag_1_2();
        assert!(matches!(
            hessian_vector_product(&m, &p, &b, &[1.0]),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn diagonal_and_dense_of_quadratic() {
        let (m, p, b) = quadratic_diag_1_2();
        assert_eq!(hessian_diagonal(&m, &p, &b, 10).unwrap(), vec![1.0, 2.0]);
        let dense = dense_hessian_reference(&m, &p, &b).unwrap();
        let expected = [1.0, 0.0, 0.0, 2.0];
        for (a, e) in dense.iter().zip(expected) {
            assert!((a - e).abs() < 1e-8);
        }
    }

    #[test]
    fn diagonal_cap_is_enforced() {
        let (m, p, b) = quadratic_diag_1_2();
        let err = hessian_diagonal(&m, &p, &b, 1).unwrap_err();
        assert!(matches!(err, Error::CapExceeded { dim: 2, cap: 1, .. }));
        assert!(err.to_string().contains("Monte-Carlo"));
    }

    #[test]
    fn dead_relu_units_have_zero_downstream_curvature() {
        // All hidden pre-activations negative: every parameter after the ReLU sees a zero
        // diagonal, and so do the first layer's parameters.
        let m = Sequential::mlp(&[2, 3, 1], Activation::Relu, LossKind::Mse).unwrap();
        let mut values = vec![0.0; m.dim()];
        // first layer weights 0.5, biases -5 -> pre-activation negative for inputs in [0,1]
        for v in values.iter_mut().take(6) {
            *v = 0.5;
        }
        for v in values.iter_mut().skip(6).take(3) {
            *v = -5.0;
        }
        for v in values.iter_mut().skip(9) {
            *v = 0.7;
        }
        let p = ParamVector::new(values, m.layout().clone()).unwrap();
        let x = Tensor::from_matrix(2, 2, vec![0.2, 0.9, 1.0, 0.1]).unwrap();
        let y = Tensor::from_matrix(2, 1, vec![1.0, -1.0]).unwrap();
        let b = Batch::new(x, y).unwrap();
        let diag = hessian_diagonal(&m, &p, &b, 100).unwrap();
        let layers = m.layout().layers();
        let second = &layers[1];
        let out_weights = second.offset..second.offset + 3;
        for j in out_weights {
            assert_eq!(diag[j], 0.0);
        }
        for j in 0..9 {
            assert_eq!(diag[j], 0.0);
        }
    }

    #[test]
    fn hutchinson_is_exact_for_diagonal_matrices() {
        let probe = DenseCurvature::diagonal_matrix(&[1.0, -2.0, 3.0]);
        let est = hutchinson_diagonal(3, 1, 7, |v| probe.hvp(v)).unwrap();
        assert_eq!(est, vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn dense_probe_trace() {
        let probe = DenseCurvature::diagonal_matrix(&[1.0, 2.0]);
        assert_eq!(probe.trace().unwrap(), 3.0);
        assert!(DenseCurvature::new(2, vec![1.0, 2.0, 0.0, 1.0]).is_err());
    }
}
