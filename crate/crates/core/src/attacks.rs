//! Label inference by a passive party.
//!
//! The attacks only see what [`crate::vfl::AttackerTrace`] records plus a few
//! labeled auxiliary samples. None of them accepts top-model parameters.
//! Attacks produce a [`LabelGuess`]; scoring it against the real labels is a
//! separate evaluation step.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::PartitionedDataset;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::{self, Activation, LayerSpec, Model, ModelSpec};

pub const KMEANS_MAX_ITERS: usize = 300;
pub const KMEANS_TOL: f64 = 1e-6;

/// Labeled samples known to the attacker.
#[derive(Debug, Clone, PartialEq)]
pub struct AuxiliaryData {
    pub indices: Vec<usize>,
    /// The attacker's own feature columns for `indices`.
    pub features: Matrix,
    pub labels: Vec<usize>,
}

impl AuxiliaryData {
    /// Draws `per_class` samples of each class (fewer if a class is smaller)
    /// and restricts their features to `party`'s columns.
    pub fn sample(data: &PartitionedDataset, party: usize, per_class: usize, seed: u64) -> Result<Self> {
        if per_class == 0 {
            return Err(Error::config("auxiliary set needs at least one sample per class"));
        }
        if party >= data.n_parties() {
            return Err(Error::config(format!("no party {party}")));
        }
        let labels = data.labels();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut indices = Vec::new();
        for c in 0..data.n_classes() {
            let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
            members.shuffle(&mut rng);
            indices.extend(members.into_iter().take(per_class));
        }
        indices.sort_unstable();
        let features = data.party_features(party).select_rows(&indices);
        let aux_labels = indices.iter().map(|&i| labels[i]).collect();
        Self::new(indices, features, aux_labels)
    }

    pub fn new(indices: Vec<usize>, features: Matrix, labels: Vec<usize>) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::data("auxiliary set is empty"));
        }
        if indices.len() != labels.len() || features.rows() != labels.len() {
            return Err(Error::shape("auxiliary indices, features and labels differ in length"));
        }
        Ok(Self {
            indices,
            features,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Same samples with labels passed through `f`.
    pub fn relabeled(&self, f: impl Fn(usize) -> usize) -> Self {
        Self {
            indices: self.indices.clone(),
            features: self.features.clone(),
            labels: self.labels.iter().map(|&l| f(l)).collect(),
        }
    }

    fn check(&self, n_rows: usize, n_classes: usize) -> Result<()> {
        if let Some(&bad) = self.indices.iter().find(|&&i| i >= n_rows) {
            return Err(Error::data(format!("auxiliary index {bad} outside {n_rows} samples")));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::data(format!("auxiliary label {bad} outside {n_classes} classes")));
        }
        Ok(())
    }
}

/// Predicted label of every sample, by global index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelGuess {
    pub attack: String,
    pub predictions: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    pub attack_name: String,
    pub predictions: Vec<usize>,
    pub raw_accuracy: f64,
    pub lift_normalized_accuracy: f64,
    pub c_orig: usize,
    pub c_new: usize,
}

impl LabelGuess {
    /// Scores the guess against the labels of a task with `c_new` classes
    /// derived from a `c_orig`-class original task.
    pub fn score(self, truth: &[usize], c_new: usize, c_orig: usize) -> Result<AttackResult> {
        let raw = attack_accuracy(&self.predictions, truth)?;
        Ok(AttackResult {
            attack_name: self.attack,
            predictions: self.predictions,
            raw_accuracy: raw,
            lift_normalized_accuracy: lift_normalize(raw, c_new, c_orig)?,
            c_orig,
            c_new,
        })
    }
}

/// Fraction of positions where `predicted` equals `truth`.
pub fn attack_accuracy(predicted: &[usize], truth: &[usize]) -> Result<f64> {
    if predicted.len() != truth.len() {
        return Err(Error::shape(format!(
            "{} predictions for {} labels",
            predicted.len(),
            truth.len()
        )));
    }
    if truth.is_empty() {
        return Err(Error::data("no labels to score against"));
    }
    let hits = predicted.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / truth.len() as f64)
}

/// Maps accuracy on a `c_new`-class task onto the random-guess scale of the
/// `c_orig`-class original task: `raw ÷ (1/c_new) × (1/c_orig)`.
pub fn lift_normalize(raw: f64, c_new: usize, c_orig: usize) -> Result<f64> {
    if c_new < 2 || c_orig < 2 {
        return Err(Error::config(format!(
            "lift normalization needs at least 2 classes (got {c_new} and {c_orig})"
        )));
    }
    if c_new == c_orig {
        return Ok(raw);
    }
    Ok(raw * c_new as f64 / c_orig as f64)
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn distinct_rows_at_least(points: &Matrix, k: usize) -> bool {
    let mut seen: HashSet<Vec<u64>> = HashSet::new();
    for row in points.iter_rows() {
        seen.insert(row.iter().map(|v| (v + 0.0).to_bits()).collect());
        if seen.len() >= k {
            return true;
        }
    }
    false
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub centers: Matrix,
    pub assignment: Vec<usize>,
    pub iterations: usize,
}

fn nearest(centers: &Matrix, row: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, center) in centers.iter_rows().enumerate() {
        let d = sq_dist(row, center);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Lloyd's algorithm with seeded k-means++ initialization.
pub fn kmeans(points: &Matrix, k: usize, seed: u64) -> Result<KMeans> {
    let (n, d) = points.shape();
    if k == 0 {
        return Err(Error::config("k-means needs k >= 1"));
    }
    if !distinct_rows_at_least(points, k) {
        return Err(Error::AttackInfeasible(format!(
            "fewer than {k} distinct points to cluster"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut centers = Matrix::zeros(k, d);
    centers.row_mut(0).copy_from_slice(points.row(rng.random_range(0..n)));
    let mut d2: Vec<f64> = points.iter_rows().map(|r| sq_dist(r, centers.row(0))).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 && target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            // Guard against landing on a zero-weight tail through rounding.
            if d2[chosen] == 0.0 {
                chosen = crate::matrix::argmax(&d2);
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centers.row_mut(c).copy_from_slice(points.row(pick));
        for (i, row) in points.iter_rows().enumerate() {
            d2[i] = d2[i].min(sq_dist(row, centers.row(c)));
        }
    }

    let mut assignment = vec![0usize; n];
    let mut iterations = 0;
    for it in 0..KMEANS_MAX_ITERS {
        iterations = it + 1;
        for (i, row) in points.iter_rows().enumerate() {
            assignment[i] = nearest(&centers, row).0;
        }
        let mut sums = Matrix::zeros(k, d);
        let mut counts = vec![0usize; k];
        for (i, row) in points.iter_rows().enumerate() {
            let c = assignment[i];
            counts[c] += 1;
            for (s, v) in sums.row_mut(c).iter_mut().zip(row) {
                *s += v;
            }
        }
        let mut shift: f64 = 0.0;
        for c in 0..k {
            if counts[c] == 0 {
                // Empty clusters keep their previous center.
                continue;
            }
            let inv = 1.0 / counts[c] as f64;
            let mut moved = 0.0;
            for (j, s) in sums.row(c).iter().enumerate() {
                let new = s * inv;
                let old = centers.get(c, j);
                moved += (new - old) * (new - old);
                centers.set(c, j, new);
            }
            shift = shift.max(moved.sqrt());
        }
        if shift <= KMEANS_TOL {
            break;
        }
    }
    for (i, row) in points.iter_rows().enumerate() {
        assignment[i] = nearest(&centers, row).0;
    }
    Ok(KMeans {
        centers,
        assignment,
        iterations,
    })
}

fn majority(counts: &[usize]) -> Option<usize> {
    let best = *counts.iter().max()?;
    if best == 0 {
        return None;
    }
    counts.iter().position(|&c| c == best)
}

/// Names every cluster by majority vote of the auxiliary samples it holds.
/// Clusters without auxiliary samples borrow the label of the nearest
/// labeled center. Ties go to the smaller class index.
pub fn label_clusters(
    centers: &Matrix,
    assignment: &[usize],
    aux: &AuxiliaryData,
    n_classes: usize,
) -> Vec<usize> {
    let k = centers.rows();
    let mut votes = vec![vec![0usize; n_classes]; k];
    for (&i, &l) in aux.indices.iter().zip(&aux.labels) {
        votes[assignment[i]][l] += 1;
    }
    let voted: Vec<Option<usize>> = votes.iter().map(|v| majority(v)).collect();
    (0..k)
        .map(|c| {
            voted[c].unwrap_or_else(|| {
                let mut best: Option<(f64, usize)> = None;
                for (o, label) in voted.iter().enumerate() {
                    let Some(label) = *label else { continue };
                    let d = sq_dist(centers.row(c), centers.row(o));
                    let better = match best {
                        None => true,
                        Some((bd, bl)) => d < bd || (d == bd && label < bl),
                    };
                    if better {
                        best = Some((d, label));
                    }
                }
                best.map_or(0, |(_, l)| l)
            })
        })
        .collect()
}

fn cluster_pipeline(
    name: &str,
    points: &Matrix,
    n_classes: usize,
    aux: &AuxiliaryData,
    seed: u64,
) -> Result<LabelGuess> {
    if n_classes < 2 {
        return Err(Error::config("label inference needs at least 2 classes"));
    }
    if aux.is_empty() {
        return Err(Error::data("auxiliary set is empty"));
    }
    aux.check(points.rows(), n_classes)?;
    let km = kmeans(points, n_classes, seed)?;
    let names = label_clusters(&km.centers, &km.assignment, aux, n_classes);
    Ok(LabelGuess {
        attack: name.into(),
        predictions: km.assignment.iter().map(|&c| names[c]).collect(),
    })
}

/// K-means over embeddings with `k = n_classes`, clusters named from `aux`.
pub fn cluster_lia(
    embeddings: &Matrix,
    n_classes: usize,
    aux: &AuxiliaryData,
    seed: u64,
) -> Result<LabelGuess> {
    cluster_pipeline("cluster", embeddings, n_classes, aux, seed)
}

/// The clustering pipeline of [`cluster_lia`] applied to per-sample
/// embedding gradients from one epoch.
pub fn gradient_cluster_lia(
    grad_rows: &Matrix,
    n_classes: usize,
    aux: &AuxiliaryData,
    seed: u64,
) -> Result<LabelGuess> {
    cluster_pipeline("gradient_cluster", grad_rows, n_classes, aux, seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FineTune {
    pub epochs: usize,
    pub lr: f64,
    #[serde(default = "FineTune::default_batch")]
    pub batch_size: usize,
}

impl FineTune {
    fn default_batch() -> usize {
        16
    }
}

impl Default for FineTune {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr: 0.05,
            batch_size: Self::default_batch(),
        }
    }
}

/// Appends a fresh classification head to a copy of the attacker's bottom
/// model, fine-tunes the whole stack on `aux` and predicts `target_features`.
pub fn completion_lia(
    bottom: &Model,
    aux: &AuxiliaryData,
    target_features: &Matrix,
    n_classes: usize,
    ft: FineTune,
    seed: u64,
) -> Result<LabelGuess> {
    if n_classes < 2 {
        return Err(Error::config("label inference needs at least 2 classes"));
    }
    if aux.is_empty() {
        return Err(Error::data("auxiliary set is empty"));
    }
    if ft.batch_size == 0 || !(ft.lr >= 0.0) {
        return Err(Error::config("fine-tuning needs a positive batch size and lr >= 0"));
    }
    let in_dim = bottom.spec().in_dim();
    if aux.features.cols() != in_dim || target_features.cols() != in_dim {
        return Err(Error::shape(format!(
            "bottom model expects {in_dim} features, aux has {} and target {}",
            aux.features.cols(),
            target_features.cols()
        )));
    }
    if let Some(&bad) = aux.labels.iter().find(|&&l| l >= n_classes) {
        return Err(Error::data(format!("auxiliary label {bad} outside {n_classes} classes")));
    }
    let head_spec = ModelSpec::new(vec![LayerSpec::new(
        bottom.spec().out_dim(),
        n_classes,
        Activation::Softmax,
    )])?;
    let head = nn::init_model(&head_spec, seed)?;
    let mut model = bottom.stack(&head)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..aux.len()).collect();
    let mut labels = Vec::with_capacity(ft.batch_size);
    for epoch in 0..ft.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(ft.batch_size) {
            let trace = model.forward(&aux.features.select_rows(batch))?;
            labels.clear();
            labels.extend(batch.iter().map(|&i| aux.labels[i]));
            let (loss, g) = nn::cross_entropy_loss(trace.output(), &labels)?;
            let grads = nn::backward(&model, &trace, &g)?;
            if !loss.is_finite() || !grads.is_finite() {
                return Err(Error::AttackFailed(format!(
                    "fine-tuning diverged in epoch {epoch}"
                )));
            }
            model.apply_gradients(&grads, ft.lr)?;
        }
    }
    let logits = model.predict(target_features)?;
    if !logits.is_finite() {
        return Err(Error::AttackFailed("non-finite predictions".into()));
    }
    Ok(LabelGuess {
        attack: "completion".into(),
        predictions: logits.argmax_rows(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn two_blobs() -> (Matrix, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..200 {
            let c = i % 2;
            let cx = if c == 0 { -50.0 } else { 50.0 };
            let x: f64 = StandardNormal.sample(&mut rng);
            let y: f64 = StandardNormal.sample(&mut rng);
            rows.push([cx + x, y]);
            labels.push(c);
        }
        (Matrix::from_rows(&rows).unwrap(), labels)
    }

    fn aux_of(points: &Matrix, labels: &[usize], idx: &[usize]) -> AuxiliaryData {
        AuxiliaryData::new(
            idx.to_vec(),
            points.select_rows(idx),
            idx.iter().map(|&i| labels[i]).collect(),
        )
        .unwrap()
    }

    #[test]
    fn separable_blobs_fully_recovered() {
        let (pts, labels) = two_blobs();
        let aux = aux_of(&pts, &labels, &[0, 1]);
        let res = cluster_lia(&pts, 2, &aux, 5).unwrap().score(&labels, 2, 2).unwrap();
        assert_eq!(res.raw_accuracy, 1.0);
    }

    #[test]
    fn identical_embeddings_are_infeasible() {
        let pts = Matrix::from_vec(10, 3, vec![1.5; 30]).unwrap();
        let aux = aux_of(&pts, &[0; 10], &[0]);
        assert!(matches!(cluster_lia(&pts, 2, &aux, 0), Err(Error::AttackInfeasible(_))));
        let zeros = Matrix::zeros(10, 3);
        assert!(matches!(
            gradient_cluster_lia(&zeros, 2, &aux, 0),
            Err(Error::AttackInfeasible(_))
        ));
    }

    #[test]
    fn unlabeled_cluster_borrows_nearest_label() {
        let centers = Matrix::from_rows(&[[0.0], [1.0], [10.0]]).unwrap();
        let assignment = vec![0, 1, 2];
        let aux = AuxiliaryData::new(vec![0, 2], Matrix::zeros(2, 1), vec![3, 1]).unwrap();
        assert_eq!(label_clusters(&centers, &assignment, &aux, 4), vec![3, 3, 1]);
        // Equidistant from two labeled centers: smaller class wins.
        let centers = Matrix::from_rows(&[[0.0], [5.0], [10.0]]).unwrap();
        assert_eq!(label_clusters(&centers, &assignment, &aux, 4), vec![3, 1, 1]);
    }

    #[test]
    fn majority_ties_go_low() {
        let centers = Matrix::from_rows(&[[0.0], [1.0]]).unwrap();
        let assignment = vec![0, 0, 0, 0, 1];
        let aux = AuxiliaryData::new(vec![0, 1, 2, 3, 4], Matrix::zeros(5, 1), vec![2, 1, 2, 1, 0])
            .unwrap();
        assert_eq!(label_clusters(&centers, &assignment, &aux, 3), vec![1, 0]);
    }

    #[test]
    fn cluster_id_permutation_does_not_matter() {
        let (pts, labels) = two_blobs();
        let aux = aux_of(&pts, &labels, &[0, 1, 2, 3]);
        let km = kmeans(&pts, 2, 1).unwrap();
        let names = label_clusters(&km.centers, &km.assignment, &aux, 2);
        let perm = [1, 0];
        let permuted_centers = km.centers.select_rows(&[perm[0], perm[1]]);
        // Old id c becomes new id inv[c].
        let permuted_assign: Vec<usize> = km.assignment.iter().map(|&c| perm[c]).collect();
        let names_p = label_clusters(&permuted_centers, &permuted_assign, &aux, 2);
        let a: Vec<usize> = km.assignment.iter().map(|&c| names[c]).collect();
        let b: Vec<usize> = permuted_assign.iter().map(|&c| names_p[c]).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn accuracy_and_lift() {
        assert_eq!(attack_accuracy(&[1, 2], &[1, 2]).unwrap(), 1.0);
        assert_eq!(attack_accuracy(&[0, 0], &[1, 2]).unwrap(), 0.0);
        assert_eq!(attack_accuracy(&[0, 1, 2, 3], &[0, 1, 0, 0]).unwrap(), 0.5);
        assert!(matches!(attack_accuracy(&[], &[]), Err(Error::Data(_))));

        assert_eq!(lift_normalize(0.40, 2, 10).unwrap(), 0.08);
        assert_eq!(format!("{:.6}%", 100.0 * lift_normalize(0.40, 2, 10).unwrap()), "8.000000%");
        assert_eq!(lift_normalize(0.37, 7, 7).unwrap(), 0.37);
        assert_eq!(lift_normalize(0.5, 2, 10).unwrap(), 0.1);
        assert!(lift_normalize(0.5, 1, 10).is_err());
    }

    #[test]
    fn kmeans_is_deterministic() {
        let (pts, _) = two_blobs();
        assert_eq!(kmeans(&pts, 3, 4).unwrap(), kmeans(&pts, 3, 4).unwrap());
    }
}
