//! Histograms of individual gradient elements and of (parameter, gradient) pairs.

use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchObservables, LayerSpan, ParamVector};
use crate::error::{Error, Result};

pub const DEFAULT_BINS: usize = 50;
pub const DEFAULT_RANGE: (f64, f64) = (-1.0, 1.0);

/// Counts over right-closed bins `(e_i, e_{i+1}]`; values outside the range fall
/// into the nearest boundary bin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hist1d {
    #[serde(with = "crate::log::float_vec")]
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

/// Joint counts; `counts[i * y_bins + j]` is x-bin `i`, y-bin `j`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hist2d {
    #[serde(with = "crate::log::float_vec")]
    pub x_edges: Vec<f64>,
    #[serde(with = "crate::log::float_vec")]
    pub y_edges: Vec<f64>,
    pub counts: Vec<u64>,
}

/// Bin layout shared by both histogram kinds.
#[derive(Clone, Debug, PartialEq)]
pub struct Binning {
    edges: Vec<f64>,
    scale: f64,
}

impl Binning {
    pub fn new(range: (f64, f64), bins: usize) -> Result<Self> {
        let (lo, hi) = range;
        if bins == 0 {
            return Err(Error::InvalidConfig("histogram needs at least one bin".into()));
        }
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::InvalidConfig(format!(
                "histogram range ({lo}, {hi}) is empty or not finite"
            )));
        }
        let width = hi - lo;
        let mut edges: Vec<f64> = (0..=bins)
            .map(|i| lo + width * i as f64 / bins as f64)
            .collect();
        edges[bins] = hi;
        Ok(Self {
            edges,
            scale: bins as f64 / width,
        })
    }

    pub fn bins(&self) -> usize {
        self.edges.len() - 1
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    /// Index of the bin holding `v`, clipping out-of-range values.
    pub fn index(&self, v: f64) -> usize {
        let last = self.bins() - 1;
        let mut i = (((v - self.edges[0]) * self.scale) as usize).min(last);
        while i > 0 && !(self.edges[i] < v) {
            i -= 1;
        }
        while i < last && self.edges[i + 1] < v {
            i += 1;
        }
        i
    }
}

impl Hist1d {
    pub fn empty(binning: &Binning) -> Self {
        Self {
            edges: binning.edges().to_vec(),
            counts: vec![0; binning.bins()],
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

impl Hist2d {
    pub fn x_bins(&self) -> usize {
        self.x_edges.len().saturating_sub(1)
    }

    pub fn y_bins(&self) -> usize {
        self.y_edges.len().saturating_sub(1)
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn count(&self, i: usize, j: usize) -> u64 {
        self.counts[i * self.y_bins() + j]
    }

    /// Sum over the x axis, a histogram over the y (gradient) axis.
    pub fn marginal_y(&self) -> Hist1d {
        let ny = self.y_bins();
        let mut counts = vec![0; ny];
        for row in self.counts.chunks(ny.max(1)) {
            for (c, &r) in counts.iter_mut().zip(row) {
                *c += r;
            }
        }
        Hist1d {
            edges: self.y_edges.clone(),
            counts,
        }
    }
}

pub fn histogram_1d<I: IntoIterator<Item = f64>>(values: I, binning: &Binning) -> Hist1d {
    let mut hist = Hist1d::empty(binning);
    for v in values {
        hist.counts[binning.index(v)] += 1;
    }
    hist
}

fn check_nonempty(obs: &BatchObservables) -> Result<()> {
    if obs.batch_size() == 0 || obs.dim() == 0 {
        return Err(Error::EmptyBatch);
    }
    Ok(())
}

fn layer(obs: &BatchObservables, index: usize) -> Result<&LayerSpan> {
    obs.layout.layers().get(index).ok_or_else(|| {
        Error::Dimension(format!(
            "layer {index} does not exist, the model has {}",
            obs.layout.layers().len()
        ))
    })
}

/// Histogram of all `|B|·D` individual gradient elements.
pub fn grad_hist_1d(obs: &BatchObservables, range: (f64, f64), bins: usize) -> Result<Hist1d> {
    check_nonempty(obs)?;
    let binning = Binning::new(range, bins)?;
    Ok(histogram_1d(obs.sample_grads.iter().copied(), &binning))
}

/// Histogram of the individual gradient elements of one layer.
pub fn layer_grad_hist_1d(
    obs: &BatchObservables,
    layer_index: usize,
    range: (f64, f64),
    bins: usize,
) -> Result<Hist1d> {
    check_nonempty(obs)?;
    let span = layer(obs, layer_index)?;
    let binning = Binning::new(range, bins)?;
    let rows = obs
        .sample_grad_rows()
        .flat_map(|g| g[span.offset..span.offset + span.len].iter().copied());
    Ok(histogram_1d(rows, &binning))
}

/// Parameter range of a slice, widened to unit width around a single value.
pub fn adaptive_range(values: &[f64]) -> (f64, f64) {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(lo.is_finite() && hi.is_finite()) {
        return (-0.5, 0.5);
    }
    if lo < hi {
        (lo, hi)
    } else {
        (lo - 0.5, hi + 0.5)
    }
}

fn joint_histogram(
    params: &ParamVector,
    obs: &BatchObservables,
    coords: std::ops::Range<usize>,
    x_range: Option<(f64, f64)>,
    y_range: (f64, f64),
    bins: (usize, usize),
) -> Result<Hist2d> {
    check_nonempty(obs)?;
    if params.dim() != obs.dim() {
        return Err(Error::Dimension(format!(
            "{} parameters but gradients of dimension {}",
            params.dim(),
            obs.dim()
        )));
    }
    let theta = &params.values()[coords.clone()];
    let x_range = x_range.unwrap_or_else(|| adaptive_range(theta));
    let xb = Binning::new(x_range, bins.0)?;
    let yb = Binning::new(y_range, bins.1)?;
    let x_index: Vec<usize> = theta.iter().map(|&t| xb.index(t)).collect();
    let ny = yb.bins();
    let mut counts = vec![0u64; xb.bins() * ny];
    for g in obs.sample_grad_rows() {
        for (&i, &gj) in x_index.iter().zip(&g[coords.clone()]) {
            counts[i * ny + yb.index(gj)] += 1;
        }
    }
    Ok(Hist2d {
        x_edges: xb.edges().to_vec(),
        y_edges: yb.edges().to_vec(),
        counts,
    })
}

/// Joint histogram of `(θ_j, g_n,j)` over all samples and coordinates.
///
/// `x_range = None` adapts the parameter axis to the current parameter extent.
pub fn grad_hist_2d(
    params: &ParamVector,
    obs: &BatchObservables,
    x_range: Option<(f64, f64)>,
    y_range: (f64, f64),
    bins: (usize, usize),
) -> Result<Hist2d> {
    joint_histogram(params, obs, 0..obs.dim(), x_range, y_range, bins)
}

/// [`grad_hist_2d`] restricted to the coordinates of one layer.
pub fn layer_grad_hist_2d(
    params: &ParamVector,
    obs: &BatchObservables,
    layer_index: usize,
    x_range: Option<(f64, f64)>,
    y_range: (f64, f64),
    bins: (usize, usize),
) -> Result<Hist2d> {
    let span = layer(obs, layer_index)?;
    let coords = span.offset..span.offset + span.len;
    joint_histogram(params, obs, coords, x_range, y_range, bins)
}
