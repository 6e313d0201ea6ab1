//! Model definitions: parameter layout, mini-batches, and the per-sample loss graphs.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Contiguous span of the flat parameter vector that belongs to one layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpan {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

/// One trainable tensor inside the flat parameter vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamBlock {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl ParamBlock {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Per-layer `(offset, length)` table plus the tensor blocks inside each layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    layers: Vec<LayerSpan>,
    blocks: Vec<ParamBlock>,
}

impl Layout {
    /// Build a layout from `(layer name, [(rows, cols), ...])` entries, packed in order.
    pub fn from_layers<S: Into<String>>(layers: Vec<(S, Vec<(usize, usize)>)>) -> Self {
        let mut spans = Vec::with_capacity(layers.len());
        let mut blocks = Vec::new();
        let mut offset = 0;
        for (name, shapes) in layers {
            let start = offset;
            for (rows, cols) in shapes {
                blocks.push(ParamBlock { offset, rows, cols });
                offset += rows * cols;
            }
            spans.push(LayerSpan {
                name: name.into(),
                offset: start,
                len: offset - start,
            });
        }
        Self {
            layers: spans,
            blocks,
        }
    }

    pub fn dim(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.offset + b.len())
    }

    pub fn layers(&self) -> &[LayerSpan] {
        &self.layers
    }

    pub fn blocks(&self) -> &[ParamBlock] {
        &self.blocks
    }
}

/// Flattened model parameters together with their layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: Arc<Layout>,
}

impl ParamVector {
    pub fn new(values: Vec<f64>, layout: Arc<Layout>) -> Result<Self> {
        if values.len() != layout.dim() {
            return Err(Error::Dimension(format!(
                "parameter vector has {} entries, layout needs {}",
                values.len(),
                layout.dim()
            )));
        }
        Ok(Self { values, layout })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// Same layout, new values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Self::new(values, Arc::clone(&self.layout))
    }

    /// Record every block as a differentiable leaf.
    pub fn to_vars<'g>(&self, graph: &'g Graph) -> Vec<Var<'g>> {
        self.layout
            .blocks()
            .iter()
            .map(|b| {
                let t = Tensor::from_matrix(b.rows, b.cols, self.values[b.range()].to_vec())
                    .expect("block shape matches its range");
                graph.param(t)
            })
            .collect()
    }
}

/// A mini-batch: inputs are `|B|×d_in`, targets are `|B|×d_out` (or `|B|×1` class indices).
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub inputs: Tensor,
    pub targets: Tensor,
}

impl Batch {
    pub fn new(inputs: Tensor, targets: Tensor) -> Result<Self> {
        if inputs.rows() != targets.rows() {
            return Err(Error::Dimension(format!(
                "{} input rows but {} target rows",
                inputs.rows(),
                targets.rows()
            )));
        }
        if inputs.rows() == 0 {
            return Err(Error::EmptyBatch);
        }
        Ok(Self { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sample(&self, n: usize) -> Batch {
        self.select(&[n])
    }

    pub fn select(&self, rows: &[usize]) -> Batch {
        Batch {
            inputs: self.inputs.select_rows(rows),
            targets: self.targets.select_rows(rows),
        }
    }

    /// Every sample repeated `times` times in a row.
    pub fn repeat_each(&self, times: usize) -> Batch {
        let rows: Vec<usize> = (0..self.len())
            .flat_map(|n| std::iter::repeat_n(n, times))
            .collect();
        self.select(&rows)
    }

    pub(crate) fn check_finite(&self) -> Result<()> {
        if !self.inputs.is_finite() || !self.targets.is_finite() {
            return Err(Error::Numeric("batch contains non-finite entries".into()));
        }
        Ok(())
    }
}

/// Something with a per-sample loss that can be recorded on a [`Graph`].
pub trait Model: Send + Sync {
    fn layout(&self) -> &Arc<Layout>;

    fn dim(&self) -> usize {
        self.layout().dim()
    }

    /// Reject batches whose shapes do not fit the model.
    fn check_batch(&self, batch: &Batch) -> Result<()>;

    /// Per-sample losses as a `|B|×1` node; `params` holds one node per layout block.
    fn sample_losses<'g>(&self, graph: &'g Graph, params: &[Var<'g>], batch: &Batch) -> Var<'g>;

    /// Batch gradient and per-sample gradients from a single batched pass, for models
    /// that can factor the per-sample rows out of it.
    ///
    /// The batch gradient must follow the same arithmetic as differentiating the mean
    /// of [`Model::sample_losses`].
    fn batched_sample_gradients(&self, _params: &ParamVector, _batch: &Batch) -> Option<SamplePass> {
        None
    }
}

/// Output of [`Model::batched_sample_gradients`].
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePass {
    pub sample_losses: Vec<f64>,
    pub batch_loss: f64,
    pub batch_grad: Vec<f64>,
    /// Row-major `|B|×D` per-sample gradients.
    pub sample_grads: Vec<f64>,
}

impl SamplePass {
    /// Differentiates the mean of `losses` with respect to `params` and `extra` in one sweep.
    ///
    /// Returns the pass without per-sample rows and the adjoints of `extra` scaled by `|B|`.
    fn sweep<'g>(
        graph: &'g Graph,
        params: &[Var<'g>],
        losses: Var<'g>,
        extra: &[Var<'g>],
    ) -> (Self, Vec<Tensor>) {
        let b = losses.value().rows() as f64;
        let loss = losses.mean();
        let wrt: Vec<Var<'g>> = params.iter().chain(extra).copied().collect();
        let grads = graph.grad(loss, &wrt);
        let mut batch_grad = Vec::new();
        for g in &grads[..params.len()] {
            batch_grad.extend_from_slice(g.value().data());
        }
        let adjoints = grads[params.len()..]
            .iter()
            .map(|g| g.value().map(|x| x * b))
            .collect();
        let pass = Self {
            sample_losses: losses.value().data().to_vec(),
            batch_loss: loss.value().data()[0],
            batch_grad,
            sample_grads: Vec::new(),
        };
        (pass, adjoints)
    }
}

/// Input and pre-activation output of one dense layer during a forward pass.
struct DenseTap<'g> {
    input: Var<'g>,
    output: Var<'g>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
    Identity,
}

impl Activation {
    fn apply<'g>(self, x: Var<'g>) -> Var<'g> {
        match self {
            Activation::Relu => x.relu(),
            Activation::Sigmoid => x.sigmoid(),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Squared error averaged over output dimensions.
    Mse,
    /// Softmax cross-entropy on logits; targets hold class indices.
    CrossEntropyWithLogits,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layer {
    Dense {
        inputs: usize,
        outputs: usize,
        bias: bool,
    },
    Activation(Activation),
}

/// Feed-forward network of dense layers and element-wise activations.
#[derive(Clone, Debug)]
pub struct Sequential {
    layers: Vec<Layer>,
    loss: LossKind,
    layout: Arc<Layout>,
    input_dim: usize,
    output_dim: usize,
}

impl Sequential {
    pub fn new(layers: Vec<Layer>, loss: LossKind) -> Result<Self> {
        let mut width: Option<usize> = None;
        let mut input_dim = None;
        let mut entries = Vec::new();
        for layer in &layers {
            if let Layer::Dense {
                inputs,
                outputs,
                bias,
            } = *layer
            {
                if let Some(w) = width {
                    if w != inputs {
                        return Err(Error::Dimension(format!(
                            "dense layer expects {inputs} inputs but previous layer produces {w}"
                        )));
                    }
                }
                input_dim.get_or_insert(inputs);
                width = Some(outputs);
                let mut shapes = vec![(outputs, inputs)];
                if bias {
                    shapes.push((1, outputs));
                }
                entries.push((format!("dense{}", entries.len()), shapes));
            }
        }
        let (Some(input_dim), Some(output_dim)) = (input_dim, width) else {
            return Err(Error::Dimension("a model needs at least one dense layer".into()));
        };
        Ok(Self {
            layers,
            loss,
            layout: Arc::new(Layout::from_layers(entries)),
            input_dim,
            output_dim,
        })
    }

    /// Dense layers of the given widths with `activation` between them (none after the last).
    pub fn mlp(widths: &[usize], activation: Activation, loss: LossKind) -> Result<Self> {
        let mut layers = Vec::new();
        for (i, pair) in widths.windows(2).enumerate() {
            if i > 0 {
                layers.push(Layer::Activation(activation));
            }
            layers.push(Layer::Dense {
                inputs: pair[0],
                outputs: pair[1],
                bias: true,
            });
        }
        Self::new(layers, loss)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn loss_kind(&self) -> LossKind {
        self.loss
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    /// Network outputs (pre-loss) for a batch.
    pub fn outputs<'g>(&self, params: &[Var<'g>], x: Var<'g>) -> Var<'g> {
        self.forward(params, x).0
    }

    fn forward<'g>(&self, params: &[Var<'g>], x: Var<'g>) -> (Var<'g>, Vec<DenseTap<'g>>) {
        let mut h = x;
        let mut block = 0;
        let mut taps = Vec::new();
        for layer in &self.layers {
            match *layer {
                Layer::Dense { bias, .. } => {
                    let input = h;
                    let w = params[block];
                    block += 1;
                    h = h.matmul(w.t());
                    if bias {
                        let b = params[block];
                        block += 1;
                        let rows = h.value().rows();
                        h = h + b.broadcast_rows(rows);
                    }
                    taps.push(DenseTap { input, output: h });
                }
                Layer::Activation(a) => h = a.apply(h),
            }
        }
        (h, taps)
    }

    fn losses_of<'g>(&self, graph: &'g Graph, out: Var<'g>, batch: &Batch) -> Var<'g> {
        match self.loss {
            LossKind::Mse => {
                let y = graph.constant(batch.targets.clone());
                let r = out - y;
                (r * r).sum_cols().scale(1.0 / self.output_dim as f64)
            }
            LossKind::CrossEntropyWithLogits => {
                let logits = out.value();
                let k = logits.cols();
                let shift: Vec<f64> = (0..logits.rows())
                    .map(|r| {
                        logits
                            .row_slice(r)
                            .iter()
                            .copied()
                            .fold(f64::NEG_INFINITY, f64::max)
                    })
                    .collect();
                let shift_col = Tensor::from_matrix(shift.len(), 1, shift).expect("column");
                let shift_wide = graph.constant(shift_col.broadcast_cols(k));
                let lse = (out - shift_wide).exp().sum_cols().ln() + graph.constant(shift_col);
                let mut onehot = Tensor::zeros(logits.rows(), k);
                for r in 0..logits.rows() {
                    let class = batch.targets.get(r, 0) as usize;
                    onehot.data_mut()[r * k + class] = 1.0;
                }
                let picked = (out * graph.constant(onehot)).sum_cols();
                lse - picked
            }
        }
    }
}

impl Model for Sequential {
    fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        if batch.inputs.cols() != self.input_dim {
            return Err(Error::Dimension(format!(
                "model takes {} input features, batch has {}",
                self.input_dim,
                batch.inputs.cols()
            )));
        }
        match self.loss {
            LossKind::Mse if batch.targets.cols() != self.output_dim => {
                Err(Error::Dimension(format!(
                    "model produces {} outputs, targets have {}",
                    self.output_dim,
                    batch.targets.cols()
                )))
            }
            LossKind::CrossEntropyWithLogits => {
                if batch.targets.cols() != 1 {
                    return Err(Error::Dimension(
                        "cross-entropy targets must be a single column of class indices".into(),
                    ));
                }
                let k = self.output_dim as f64;
                if batch
                    .targets
                    .data()
                    .iter()
                    .any(|&t| t < 0.0 || t >= k || t.fract() != 0.0)
                {
                    return Err(Error::Dimension(format!(
                        "class index outside 0..{}",
                        self.output_dim
                    )));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    fn sample_losses<'g>(&self, graph: &'g Graph, params: &[Var<'g>], batch: &Batch) -> Var<'g> {
        let x = graph.constant(batch.inputs.clone());
        let out = self.outputs(params, x);
        self.losses_of(graph, out, batch)
    }

    /// The loss sum's gradient with respect to a dense layer's output has row `n`
    /// equal to `∂ℓ_n/∂z_n`, so sample `n`'s weight gradient is its outer product
    /// with the layer input `a_n`.
    fn batched_sample_gradients(&self, params: &ParamVector, batch: &Batch) -> Option<SamplePass> {
        let graph = Graph::new();
        let vars = params.to_vars(&graph);
        let (out, taps) = self.forward(&vars, graph.constant(batch.inputs.clone()));
        let losses = self.losses_of(&graph, out, batch);
        let outputs: Vec<Var<'_>> = taps.iter().map(|t| t.output).collect();
        let (mut pass, deltas) = SamplePass::sweep(&graph, &vars, losses, &outputs);

        let b = batch.len();
        let d = params.dim();
        let mut grads = vec![0.0; b * d];
        let biases = self.layers.iter().filter_map(|l| match *l {
            Layer::Dense { bias, .. } => Some(bias),
            Layer::Activation(_) => None,
        });
        let mut blocks = self.layout.blocks().iter();
        for ((tap, delta), has_bias) in taps.iter().zip(&deltas).zip(biases) {
            let weight = blocks.next().expect("one weight block per dense layer");
            let bias = if has_bias { blocks.next() } else { None };
            let input = tap.input.value();
            let (outs, ins) = (weight.rows, weight.cols);
            for n in 0..b {
                let row = &mut grads[n * d..(n + 1) * d];
                let a = input.row_slice(n);
                let dz = delta.row_slice(n);
                for o in 0..outs {
                    let target = &mut row[weight.offset + o * ins..weight.offset + (o + 1) * ins];
                    for (t, &ai) in target.iter_mut().zip(a) {
                        *t = dz[o] * ai;
                    }
                }
                if let Some(bb) = bias {
                    row[bb.offset..bb.offset + outs].copy_from_slice(dz);
                }
            }
        }
        pass.sample_grads = grads;
        Some(pass)
    }
}

/// Per-sample loss `½ (θ − c_n)ᵀ A (θ − c_n)` with a fixed symmetric `A`; inputs hold `c_n`.
#[derive(Clone, Debug)]
pub struct Quadratic {
    curvature: Tensor,
    layout: Arc<Layout>,
}

impl Quadratic {
    pub fn new(curvature: Tensor) -> Result<Self> {
        let d = curvature.rows();
        if curvature.cols() != d || d == 0 {
            return Err(Error::Dimension("curvature must be square".into()));
        }
        for i in 0..d {
            for j in 0..i {
                let (a, b) = (curvature.get(i, j), curvature.get(j, i));
                if (a - b).abs() > 1e-12 * (1.0 + a.abs().max(b.abs())) {
                    return Err(Error::Dimension("curvature must be symmetric".into()));
                }
            }
        }
        Ok(Self {
            curvature,
            layout: Arc::new(Layout::from_layers(vec![("theta", vec![(1, d)])])),
        })
    }

    pub fn curvature(&self) -> &Tensor {
        &self.curvature
    }
}

impl Model for Quadratic {
    fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        if batch.inputs.cols() != self.curvature.rows() {
            return Err(Error::Dimension(format!(
                "quadratic of dimension {} got centres of dimension {}",
                self.curvature.rows(),
                batch.inputs.cols()
            )));
        }
        Ok(())
    }

    fn sample_losses<'g>(&self, graph: &'g Graph, params: &[Var<'g>], batch: &Batch) -> Var<'g> {
        self.losses_at(graph, params[0].broadcast_rows(batch.len()), batch)
    }

    /// Row `n` of the loss sum's gradient with respect to the broadcast parameters is `g_n`.
    fn batched_sample_gradients(&self, params: &ParamVector, batch: &Batch) -> Option<SamplePass> {
        let graph = Graph::new();
        let vars = params.to_vars(&graph);
        let rows = vars[0].broadcast_rows(batch.len());
        let losses = self.losses_at(&graph, rows, batch);
        let (mut pass, mut adjoints) = SamplePass::sweep(&graph, &vars, losses, &[rows]);
        pass.sample_grads = adjoints.pop().expect("one adjoint").into_data();
        Some(pass)
    }
}

impl Quadratic {
    /// Losses for a `|B|×D` matrix of per-sample parameter rows.
    fn losses_at<'g>(&self, graph: &'g Graph, theta_rows: Var<'g>, batch: &Batch) -> Var<'g> {
        let d = theta_rows - graph.constant(batch.inputs.clone());
        let ad = d.matmul(graph.constant(self.curvature.clone()));
        (d * ad).sum_cols().scale(0.5)
    }
}
