//! Defenses against label inference.
//!
//! Gradient defenses rewrite the per-sample embedding gradients the active
//! party returns to each passive party. Label defenses replace the training
//! targets at the active party. Moving the cut layer is the remaining defense
//! and lives in [`crate::vfl::SplitSpec`].

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interception {
    /// Embedding gradients on their way from the active to the passive parties.
    GradientsToParties,
    /// Training targets at the active party.
    LabelsAtActiveParty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DefenseConfig {
    GradClip {
        max_norm: f64,
    },
    DpGaussian {
        clip: f64,
        sigma: f64,
    },
    GradCompress {
        keep_ratio: f64,
    },
    CaeLabels {
        alpha: f64,
        /// Seed of the class derangement; defaults to the run seed.
        #[serde(default)]
        permutation_seed: Option<u64>,
    },
    RleLabels {
        /// Defaults to the class count.
        #[serde(default)]
        extra_dims: Option<usize>,
        noise_scale: f64,
    },
}

impl DefenseConfig {
    pub fn name(&self) -> &'static str {
        match self {
            DefenseConfig::GradClip { .. } => "grad_clip",
            DefenseConfig::DpGaussian { .. } => "dp_gaussian",
            DefenseConfig::GradCompress { .. } => "grad_compress",
            DefenseConfig::CaeLabels { .. } => "cae_labels",
            DefenseConfig::RleLabels { .. } => "rle_labels",
        }
    }

    pub fn interception(&self) -> Interception {
        match self {
            DefenseConfig::GradClip { .. }
            | DefenseConfig::DpGaussian { .. }
            | DefenseConfig::GradCompress { .. } => Interception::GradientsToParties,
            DefenseConfig::CaeLabels { .. } | DefenseConfig::RleLabels { .. } => {
                Interception::LabelsAtActiveParty
            }
        }
    }

    /// Default hyperparameters for each kind.
    pub fn defaults() -> Vec<DefenseConfig> {
        vec![
            DefenseConfig::GradClip { max_norm: 1.0 },
            DefenseConfig::DpGaussian {
                clip: 1.0,
                sigma: 0.5,
            },
            DefenseConfig::GradCompress { keep_ratio: 0.25 },
            DefenseConfig::CaeLabels {
                alpha: 0.2,
                permutation_seed: None,
            },
            DefenseConfig::RleLabels {
                extra_dims: None,
                noise_scale: 0.1,
            },
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            DefenseConfig::GradClip { max_norm } => max_norm > 0.0 && max_norm.is_finite(),
            DefenseConfig::DpGaussian { clip, sigma } => {
                clip > 0.0 && clip.is_finite() && sigma >= 0.0 && sigma.is_finite()
            }
            DefenseConfig::GradCompress { keep_ratio } => keep_ratio > 0.0 && keep_ratio <= 1.0,
            DefenseConfig::CaeLabels { alpha, .. } => (0.0..=1.0).contains(&alpha),
            DefenseConfig::RleLabels { noise_scale, .. } => {
                noise_scale >= 0.0 && noise_scale.is_finite()
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!(
                "invalid parameters for defense {self:?}"
            )))
        }
    }
}

/// Rescales rows whose L2 norm exceeds `max_norm` down to exactly `max_norm`.
pub fn clip_gradient(grad_rows: &Matrix, max_norm: f64) -> Matrix {
    let mut out = grad_rows.clone();
    for r in 0..out.rows() {
        let norm = out.row_norm(r);
        if norm > max_norm {
            let s = max_norm / norm;
            out.row_mut(r).iter_mut().for_each(|v| *v *= s);
        }
    }
    out
}

/// Per-row clipping to `clip` followed by i.i.d. Gaussian noise with standard
/// deviation `sigma * clip`.
pub fn dp_gaussian(grad_rows: &Matrix, clip: f64, sigma: f64, seed: u64) -> Matrix {
    let mut out = clip_gradient(grad_rows, clip);
    let std = sigma * clip;
    if std > 0.0 {
        let noise = Normal::new(0.0, std).expect("std is positive and finite");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in out.as_mut_slice() {
            *v += noise.sample(&mut rng);
        }
    }
    out
}

/// Number of entries [`compress_topk`] keeps per row.
pub fn topk_count(cols: usize, keep_ratio: f64) -> usize {
    ((keep_ratio * cols as f64).ceil() as usize).clamp(usize::from(cols > 0), cols)
}

/// Keeps the `ceil(keep_ratio * cols)` largest-magnitude entries of every row.
/// Equal magnitudes favor the lower column index.
pub fn compress_topk(grad_rows: &Matrix, keep_ratio: f64) -> Matrix {
    let cols = grad_rows.cols();
    let k = topk_count(cols, keep_ratio);
    let mut out = Matrix::zeros(grad_rows.rows(), cols);
    let mut order: Vec<usize> = (0..cols).collect();
    for r in 0..grad_rows.rows() {
        let row = grad_rows.row(r);
        order.sort_by(|&a, &b| row[b].abs().total_cmp(&row[a].abs()).then(a.cmp(&b)));
        let dst = out.row_mut(r);
        for &c in &order[..k] {
            dst[c] = row[c];
        }
    }
    out
}

/// Seeded uniform derangement of `0..n` (no fixed points). Requires `n ≥ 2`.
pub fn derangement(n: usize, seed: u64) -> Result<Vec<usize>> {
    if n < 2 {
        return Err(Error::config("a derangement needs at least 2 classes"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm: Vec<usize> = (0..n).collect();
    loop {
        perm.shuffle(&mut rng);
        if perm.iter().enumerate().all(|(i, &p)| i != p) {
            return Ok(perm);
        }
    }
}

/// Class mapping used by the confusional-label defense.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FakeLabelMap {
    forward: Vec<usize>,
    inverse: Vec<usize>,
}

impl FakeLabelMap {
    pub fn new(n_classes: usize, seed: u64) -> Result<Self> {
        let forward = derangement(n_classes, seed)?;
        let mut inverse = vec![0; n_classes];
        for (c, &f) in forward.iter().enumerate() {
            inverse[f] = c;
        }
        Ok(Self { forward, inverse })
    }

    pub fn fake(&self, class: usize) -> usize {
        self.forward[class]
    }

    pub fn real(&self, fake: usize) -> usize {
        self.inverse[fake]
    }

    /// `(1 − alpha)` on the fake class, `alpha / (C − 1)` on every other class.
    pub fn soft_targets(&self, labels: &[usize], alpha: f64) -> Matrix {
        let c = self.forward.len();
        let off = alpha / (c - 1) as f64;
        let mut out = Matrix::zeros(labels.len(), c);
        for (r, &y) in labels.iter().enumerate() {
            let row = out.row_mut(r);
            row.iter_mut().for_each(|v| *v = off);
            row[self.forward[y]] = 1.0 - alpha;
        }
        out
    }
}

pub fn cae_soft_labels(labels: &[usize], n_classes: usize, alpha: f64, seed: u64) -> Result<Matrix> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::config(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(Error::data(format!("label {bad} outside {n_classes} classes")));
    }
    Ok(FakeLabelMap::new(n_classes, seed)?.soft_targets(labels, alpha))
}

/// One-hot targets widened by `extra_dims` noise coordinates drawn uniformly
/// from `[0, noise_scale]`, each row renormalized to sum to 1.
pub fn rle_extend(
    labels: &[usize],
    n_classes: usize,
    extra_dims: usize,
    noise_scale: f64,
    seed: u64,
) -> Result<Matrix> {
    if !(noise_scale >= 0.0) || !noise_scale.is_finite() {
        return Err(Error::config("noise_scale must be finite and nonnegative"));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(Error::data(format!("label {bad} outside {n_classes} classes")));
    }
    let width = n_classes + extra_dims;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Matrix::zeros(labels.len(), width);
    for (r, &y) in labels.iter().enumerate() {
        let row = out.row_mut(r);
        row[y] = 1.0;
        for v in &mut row[n_classes..] {
            *v = if noise_scale > 0.0 {
                rng.random_range(0.0..=noise_scale)
            } else {
                0.0
            };
        }
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    Ok(out)
}
