//! Entropy and mutual information in bits.
//!
//! [`exact_mi`] works on finite joint tables; [`binned_mi`] estimates the
//! information a batch of activations carries about the labels by equal-width
//! binning each column and treating the binned row as one discrete symbol.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const DEFAULT_BINS: usize = 30;

const NORM_TOL: f64 = 1e-12;
const CLAMP_TOL: f64 = 1e-9;

#[inline]
fn plogp(p: f64) -> f64 {
    if p > 0.0 {
        p * p.log2()
    } else {
        0.0
    }
}

fn check_distribution(p: &[f64]) -> Result<()> {
    if p.is_empty() {
        return Err(Error::data("empty distribution"));
    }
    if p.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(Error::data("probabilities must be finite and nonnegative"));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > NORM_TOL * (p.len() as f64).max(1.0) {
        return Err(Error::data(format!("probabilities sum to {sum}, not 1")));
    }
    Ok(())
}

/// Shannon entropy `-Σ p log2 p` with `0 log 0 = 0`.
pub fn exact_entropy(dist: &[f64]) -> Result<f64> {
    check_distribution(dist)?;
    Ok(-dist.iter().map(|&p| plogp(p)).sum::<f64>())
}

/// Finite joint distribution `p(x, y)`, `n_x` rows by `n_y` columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointTable {
    n_x: usize,
    n_y: usize,
    probs: Vec<f64>,
}

impl JointTable {
    pub fn new(n_x: usize, n_y: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != n_x * n_y {
            return Err(Error::shape(format!(
                "{} probabilities for a {n_x}x{n_y} table",
                probs.len()
            )));
        }
        check_distribution(&probs)?;
        Ok(Self { n_x, n_y, probs })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let m = Matrix::from_rows(rows)?;
        Self::new(m.rows(), m.cols(), m.into_vec())
    }

    /// Normalizes a table of nonnegative counts.
    pub fn from_counts(n_x: usize, n_y: usize, counts: &[f64]) -> Result<Self> {
        let total: f64 = counts.iter().sum();
        if !(total > 0.0) {
            return Err(Error::data("count table is empty"));
        }
        Self::new(n_x, n_y, counts.iter().map(|c| c / total).collect())
    }

    /// Outer product `p(x) p(y)`.
    pub fn product(px: &[f64], py: &[f64]) -> Result<Self> {
        check_distribution(px)?;
        check_distribution(py)?;
        let probs = px.iter().flat_map(|a| py.iter().map(move |b| a * b)).collect();
        let sum: f64 = px.iter().sum::<f64>() * py.iter().sum::<f64>();
        let mut t = Self {
            n_x: px.len(),
            n_y: py.len(),
            probs,
        };
        // Renormalize away product rounding.
        t.probs.iter_mut().for_each(|p| *p /= sum);
        Ok(t)
    }

    pub fn n_x(&self) -> usize {
        self.n_x
    }

    pub fn n_y(&self) -> usize {
        self.n_y
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.probs[x * self.n_y + y]
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn marginal_x(&self) -> Vec<f64> {
        self.probs
            .chunks_exact(self.n_y)
            .map(|row| row.iter().sum())
            .collect()
    }

    pub fn marginal_y(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.n_y];
        for row in self.probs.chunks_exact(self.n_y) {
            for (o, p) in out.iter_mut().zip(row) {
                *o += p;
            }
        }
        out
    }

    pub fn transpose(&self) -> JointTable {
        let mut probs = vec![0.0; self.probs.len()];
        for x in 0..self.n_x {
            for y in 0..self.n_y {
                probs[y * self.n_x + x] = self.get(x, y);
            }
        }
        JointTable {
            n_x: self.n_y,
            n_y: self.n_x,
            probs,
        }
    }

    /// `H(Y | X) = -Σ p(x,y) log2 p(y|x)`.
    pub fn conditional_entropy_y_given_x(&self) -> f64 {
        let px = self.marginal_x();
        let mut h = 0.0;
        for (x, &pxv) in px.iter().enumerate() {
            if pxv <= 0.0 {
                continue;
            }
            for y in 0..self.n_y {
                let p = self.get(x, y);
                if p > 0.0 {
                    h -= p * (p / pxv).log2();
                }
            }
        }
        h
    }
}

/// `I(X;Y) = Σ p(x,y) log2 (p(x,y) / (p(x) p(y)))`.
pub fn exact_mi(joint: &JointTable) -> f64 {
    let px = joint.marginal_x();
    let py = joint.marginal_y();
    let mut mi = 0.0;
    for (x, &pxv) in px.iter().enumerate() {
        for (y, &pyv) in py.iter().enumerate() {
            let p = joint.get(x, y);
            if p > 0.0 {
                mi += p * (p / (pxv * pyv)).log2();
            }
        }
    }
    mi.max(0.0)
}

/// Same quantity as [`exact_mi`], computed as `H(Y) - H(Y|X)`.
pub fn mi_via_entropies(joint: &JointTable) -> f64 {
    let hy = -joint.marginal_y().iter().map(|&p| plogp(p)).sum::<f64>();
    hy - joint.conditional_entropy_y_given_x()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MiEstimate {
    /// Bits.
    pub value: f64,
    pub n_samples: usize,
    pub n_bins: usize,
}

/// Maps each row of `activations` to a dense symbol id after equal-width
/// binning of every column over its observed range. Constant columns fall
/// into bin 0. Ids are assigned in order of first appearance.
pub fn bin_symbols(activations: &Matrix, n_bins: usize) -> Result<Vec<usize>> {
    if n_bins < 2 {
        return Err(Error::config(format!("need at least 2 bins, got {n_bins}")));
    }
    if n_bins > u16::MAX as usize {
        return Err(Error::config(format!("too many bins: {n_bins}")));
    }
    let (n, d) = activations.shape();
    let mut lo = vec![f64::INFINITY; d];
    let mut hi = vec![f64::NEG_INFINITY; d];
    for row in activations.iter_rows() {
        for (c, &v) in row.iter().enumerate() {
            lo[c] = lo[c].min(v);
            hi[c] = hi[c].max(v);
        }
    }
    let mut ids: HashMap<Vec<u16>, usize> = HashMap::new();
    let mut symbols = Vec::with_capacity(n);
    let mut key = vec![0u16; d];
    for row in activations.iter_rows() {
        for (c, &v) in row.iter().enumerate() {
            let range = hi[c] - lo[c];
            key[c] = if range > 0.0 {
                let u = (v - lo[c]) / range;
                ((u * n_bins as f64).floor() as usize).min(n_bins - 1) as u16
            } else {
                0
            };
        }
        let next = ids.len();
        let id = *ids.entry(key.clone()).or_insert(next);
        symbols.push(id);
    }
    Ok(symbols)
}

/// Plug-in MI between two discrete sequences of equal length.
pub fn discrete_mi(xs: &[usize], ys: &[usize]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::shape(format!(
            "{} symbols but {} labels",
            xs.len(),
            ys.len()
        )));
    }
    if xs.is_empty() {
        return Err(Error::data("cannot estimate MI from zero samples"));
    }
    let n = xs.len() as f64;
    let nx = xs.iter().max().map_or(0, |m| m + 1);
    let ny = ys.iter().max().map_or(0, |m| m + 1);
    let mut cx = vec![0usize; nx];
    let mut cy = vec![0usize; ny];
    let mut cxy: HashMap<(usize, usize), usize> = HashMap::new();
    for (&x, &y) in xs.iter().zip(ys) {
        cx[x] += 1;
        cy[y] += 1;
        *cxy.entry((x, y)).or_default() += 1;
    }
    // Σ p(x,y) log p(x,y) - Σ p(x) log p(x) - Σ p(y) log p(y), summed in a
    // fixed order so the result does not depend on hash iteration.
    let mut cells: Vec<usize> = cxy.into_values().collect();
    cells.sort_unstable();
    let h = |c: usize| plogp(c as f64 / n);
    let hxy: f64 = cells.into_iter().map(h).sum();
    let hx: f64 = cx.into_iter().map(h).sum();
    let hy: f64 = cy.into_iter().map(h).sum();
    Ok(hxy - hx - hy)
}

fn clamp_estimate(v: f64) -> f64 {
    if v < 0.0 && v >= -CLAMP_TOL {
        0.0
    } else {
        v.max(0.0)
    }
}

/// Binned plug-in estimate of `I(activations; labels)`.
pub fn binned_mi(activations: &Matrix, labels: &[usize], n_bins: usize) -> Result<MiEstimate> {
    if activations.rows() == 0 {
        return Err(Error::data("cannot estimate MI from zero samples"));
    }
    if activations.rows() != labels.len() {
        return Err(Error::shape(format!(
            "{} activation rows but {} labels",
            activations.rows(),
            labels.len()
        )));
    }
    let symbols = bin_symbols(activations, n_bins)?;
    Ok(MiEstimate {
        value: clamp_estimate(discrete_mi(&symbols, labels)?),
        n_samples: labels.len(),
        n_bins,
    })
}

/// Per-layer MI with the labels across a trained split network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiProfile {
    /// Per party: MI of its raw feature columns.
    pub features: Vec<MiEstimate>,
    /// Per party: each bottom layer output.
    pub parties: Vec<Vec<MiEstimate>>,
    /// Each top layer output, starting at the lumping layer.
    pub top: Vec<MiEstimate>,
}

impl MiProfile {
    /// Party `p`'s sequence followed by the top sequence.
    pub fn chain(&self, party: usize) -> Vec<f64> {
        self.parties[party]
            .iter()
            .chain(&self.top)
            .map(|e| e.value)
            .collect()
    }

    /// Mean over parties of the MI at the cut layer (the embeddings).
    pub fn mean_cut_mi(&self) -> f64 {
        let sum: f64 = self
            .parties
            .iter()
            .map(|p| p.last().map_or(0.0, |e| e.value))
            .sum();
        sum / self.parties.len() as f64
    }

    pub fn top_max(&self) -> f64 {
        self.top.iter().map(|e| e.value).fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn bottom_max(&self, party: usize) -> f64 {
        self.parties[party]
            .iter()
            .map(|e| e.value)
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Binned MI between every layer output and the labels of `data`.
pub fn mi_profile(
    state: &crate::vfl::TrainedState,
    data: &crate::data::PartitionedDataset,
    n_bins: usize,
) -> Result<MiProfile> {
    if data.is_empty() {
        return Err(Error::data("cannot profile an empty dataset"));
    }
    if state.n_parties() != data.n_parties() {
        return Err(Error::shape(format!(
            "model has {} parties, data has {}",
            state.n_parties(),
            data.n_parties()
        )));
    }
    let labels = data.labels();
    let mut features = Vec::with_capacity(state.n_parties());
    let mut parties = Vec::with_capacity(state.n_parties());
    let mut embeddings = Vec::with_capacity(state.n_parties());
    for (p, model) in state.bottom_models.iter().enumerate() {
        let trace = model.forward(&data.party_features(p))?;
        features.push(binned_mi(trace.input(), labels, n_bins)?);
        parties.push(
            trace.layers[1..]
                .iter()
                .map(|a| binned_mi(a, labels, n_bins))
                .collect::<Result<Vec<_>>>()?,
        );
        embeddings.push(trace.into_output());
    }
    let agg = crate::vfl::aggregate_embeddings(&embeddings)?;
    let mut top_trace = state.top_model.forward(&agg)?;
    // The classification layer's post-activation output is the softmax.
    let head = state.top_model.spec().layers.last().map(|l| l.activation);
    if head == Some(crate::nn::Activation::Softmax) {
        let logits = top_trace.layers.pop().expect("trace holds the output");
        top_trace.layers.push(crate::nn::softmax_rows(&logits));
    }
    let top = top_trace.layers[1..]
        .iter()
        .map(|a| binned_mi(a, labels, n_bins))
        .collect::<Result<Vec<_>>>()?;
    Ok(MiProfile {
        features,
        parties,
        top,
    })
}
