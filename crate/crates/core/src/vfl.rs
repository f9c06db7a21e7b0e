//! Aggregation-based vertical federated training.
//!
//! `K` passive parties each run a bottom model on their own feature columns.
//! The active party concatenates the embeddings, runs the top model, computes
//! the loss and sends every party the gradient of the loss with respect to its
//! embedding. Gradient defenses sit on that return channel.
//!
//! For `K = 1` without defenses the arithmetic is identical, operation for
//! operation, to centralized training of the uncut network.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::PartitionedDataset;
use crate::defenses::{self, DefenseConfig, FakeLabelMap};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::{self, init_layers, Activation, Model, ModelSpec, Targets};

/// Network architecture plus the position of the cut layer.
///
/// `cut_pos` counts from the last layer: `-2` leaves the final two layers to
/// the top model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub full_layers: ModelSpec,
    pub cut_pos: i32,
}

impl SplitSpec {
    /// Number of layers on the passive side.
    pub fn bottom_len(&self) -> Result<usize> {
        let total = self.full_layers.len() as i64;
        let cut = i64::from(self.cut_pos);
        if cut > -1 || cut <= -total {
            return Err(Error::config(format!(
                "cut position {cut} is outside -{}..=-1 for a {total}-layer network",
                total - 1
            )));
        }
        Ok((total + cut) as usize)
    }
}

/// Splits the full architecture into bottom and top layer lists.
pub fn split_model(split: &SplitSpec) -> Result<(ModelSpec, ModelSpec)> {
    split.full_layers.validate()?;
    let at = split.bottom_len()?;
    let layers = &split.full_layers.layers;
    Ok((
        ModelSpec {
            layers: layers[..at].to_vec(),
        },
        ModelSpec {
            layers: layers[at..].to_vec(),
        },
    ))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    Concat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VflConfig {
    pub split: SplitSpec,
    pub n_parties: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default)]
    pub defense_stack: Vec<DefenseConfig>,
    pub seed: u64,
    #[serde(default)]
    pub aggregation: Aggregation,
    /// Epochs whose embeddings and gradients are kept in the attacker traces.
    /// `None` keeps every epoch.
    #[serde(default)]
    pub trace_epochs: Option<Vec<usize>>,
}

impl VflConfig {
    fn validate(&self) -> Result<()> {
        if self.n_parties == 0 {
            return Err(Error::config("need at least one passive party"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.split.full_layers.layers.last().map(|l| l.activation) != Some(Activation::Softmax) {
            return Err(Error::config("the network must end in a softmax classification layer"));
        }
        split_model(&self.split)?;
        for d in &self.defense_stack {
            d.validate()?;
        }
        Ok(())
    }

    fn records_epoch(&self, epoch: usize) -> bool {
        self.trace_epochs
            .as_ref()
            .is_none_or(|e| e.contains(&epoch))
    }
}

/// Column-wise concatenation in party order.
pub fn aggregate_embeddings(parts: &[Matrix]) -> Result<Matrix> {
    let Some(first) = parts.first() else {
        return Err(Error::shape("no embeddings to aggregate"));
    };
    if parts.len() == 1 {
        return Ok(first.clone());
    }
    let rows = first.rows();
    if let Some(bad) = parts.iter().position(|p| p.rows() != rows) {
        return Err(Error::shape(format!(
            "party {bad} sent {} rows, expected {rows}",
            parts[bad].rows()
        )));
    }
    let cols: usize = parts.iter().map(Matrix::cols).sum();
    let mut data = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for p in parts {
            data.extend_from_slice(p.row(r));
        }
    }
    Matrix::from_vec(rows, cols, data)
}

/// Inverse of [`aggregate_embeddings`] along the column axis.
pub fn scatter_gradient(agg_grad: &Matrix, widths: &[usize]) -> Result<Vec<Matrix>> {
    let total: usize = widths.iter().sum();
    if total != agg_grad.cols() || widths.is_empty() {
        return Err(Error::shape(format!(
            "widths sum to {total}, gradient has {} columns",
            agg_grad.cols()
        )));
    }
    if widths.len() == 1 {
        return Ok(vec![agg_grad.clone()]);
    }
    let mut start = 0;
    Ok(widths
        .iter()
        .map(|&w| {
            let part = agg_grad.col_slice(start, w);
            start += w;
            part
        })
        .collect())
}

/// What one passive party observes during a training epoch. Row `i` of each
/// matrix belongs to global sample `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochTrace {
    pub epoch: usize,
    pub embeddings: Matrix,
    /// Per-sample embedding gradients as returned by the active party, scaled
    /// back to the per-sample loss (multiplied by the batch size).
    pub gradients: Matrix,
}

/// Everything a passive party can record while following the protocol. It
/// holds nothing derived from the top model other than the returned gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackerTrace {
    pub party_id: usize,
    pub columns: Vec<usize>,
    pub epochs: Vec<EpochTrace>,
    /// Embeddings of every training sample under the final bottom model.
    pub inference_embeddings: Matrix,
}

impl AttackerTrace {
    pub fn epoch(&self, epoch: usize) -> Option<&EpochTrace> {
        self.epochs.iter().find(|e| e.epoch == epoch)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedState {
    pub bottom_models: Vec<Model>,
    pub top_model: Model,
    /// Training-set MTA after each epoch.
    pub mta_history: Vec<f64>,
    pub n_classes: usize,
    /// Present when trained against confusional fake labels; maps predictions
    /// back to real classes.
    pub label_map: Option<FakeLabelMap>,
}

impl TrainedState {
    pub fn n_parties(&self) -> usize {
        self.bottom_models.len()
    }

    /// Concatenated embeddings of every party for the full dataset.
    pub fn embeddings(&self, data: &PartitionedDataset) -> Result<Vec<Matrix>> {
        check_parties(self, data)?;
        self.bottom_models
            .iter()
            .enumerate()
            .map(|(p, m)| m.predict(&data.party_features(p)))
            .collect()
    }

    /// Predicted real class of every sample.
    pub fn predict(&self, data: &PartitionedDataset) -> Result<Vec<usize>> {
        let agg = aggregate_embeddings(&self.embeddings(data)?)?;
        let logits = self.top_model.predict(&agg)?;
        Ok(self.decode_logits(&logits))
    }

    fn decode_logits(&self, logits: &Matrix) -> Vec<usize> {
        logits
            .iter_rows()
            .map(|row| {
                let p = crate::matrix::argmax(&row[..self.n_classes]);
                self.label_map.as_ref().map_or(p, |m| m.real(p))
            })
            .collect()
    }
}

fn check_parties(state: &TrainedState, data: &PartitionedDataset) -> Result<()> {
    if state.n_parties() != data.n_parties() {
        return Err(Error::shape(format!(
            "model has {} parties, data has {}",
            state.n_parties(),
            data.n_parties()
        )));
    }
    Ok(())
}

/// Fraction of samples whose predicted class equals the label.
pub fn evaluate_mta(state: &TrainedState, data: &PartitionedDataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::data("cannot evaluate on an empty dataset"));
    }
    let pred = state.predict(data)?;
    Ok(crate::attacks::attack_accuracy(&pred, data.labels())?)
}

/// Seed of party `p`'s bottom model. Party 0 shares the run seed so a
/// single-party split reproduces the uncut initialization.
pub fn party_seed(seed: u64, party: usize) -> u64 {
    if party == 0 {
        seed
    } else {
        mix(seed, party as u64)
    }
}

/// SplitMix64 finalizer over two words.
pub fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const SHUFFLE_STREAM: u64 = u64::MAX;

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, epoch as u64));
    rng.set_stream(SHUFFLE_STREAM);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}

enum TrainTargets {
    Classes(Vec<usize>),
    Soft(Matrix),
}

impl TrainTargets {
    fn loss(&self, logits: &Matrix, batch: &[usize], scratch: &mut Vec<usize>) -> Result<(f64, Matrix)> {
        match self {
            TrainTargets::Classes(labels) => {
                scratch.clear();
                scratch.extend(batch.iter().map(|&i| labels[i]));
                nn::cross_entropy(logits, Targets::Classes(scratch))
            }
            TrainTargets::Soft(t) => nn::cross_entropy(logits, Targets::Soft(&t.select_rows(batch))),
        }
    }
}

struct LabelSetup {
    targets: TrainTargets,
    out_dim: usize,
    label_map: Option<FakeLabelMap>,
}

fn label_setup(config: &VflConfig, labels: &[usize], n_classes: usize) -> Result<LabelSetup> {
    let mut setup = LabelSetup {
        targets: TrainTargets::Classes(labels.to_vec()),
        out_dim: n_classes,
        label_map: None,
    };
    for d in &config.defense_stack {
        match *d {
            DefenseConfig::CaeLabels {
                alpha,
                permutation_seed,
            } => {
                if setup.label_map.is_some() || setup.out_dim != n_classes {
                    return Err(Error::config("at most one label defense per run"));
                }
                let map = FakeLabelMap::new(n_classes, permutation_seed.unwrap_or(config.seed))?;
                setup.targets = TrainTargets::Soft(map.soft_targets(labels, alpha));
                setup.label_map = Some(map);
            }
            DefenseConfig::RleLabels {
                extra_dims,
                noise_scale,
            } => {
                if setup.label_map.is_some() || setup.out_dim != n_classes {
                    return Err(Error::config("at most one label defense per run"));
                }
                let extra = extra_dims.unwrap_or(n_classes);
                let t = defenses::rle_extend(labels, n_classes, extra, noise_scale, mix(config.seed, 0x52_4c_45))?;
                setup.out_dim = n_classes + extra;
                setup.targets = TrainTargets::Soft(t);
            }
            _ => {}
        }
    }
    Ok(setup)
}

fn defend_gradients(
    config: &VflConfig,
    grad: Matrix,
    batch_len: usize,
    noise_seed: u64,
) -> (Matrix, Matrix) {
    let gradient_defenses: Vec<&DefenseConfig> = config
        .defense_stack
        .iter()
        .filter(|d| d.interception() == defenses::Interception::GradientsToParties)
        .collect();
    // Defenses act on per-sample loss gradients; the protocol carries the
    // batch mean.
    let scale = batch_len as f64;
    let mut per_sample = grad.scale(scale);
    if gradient_defenses.is_empty() {
        return (grad, per_sample);
    }
    for (i, d) in gradient_defenses.into_iter().enumerate() {
        per_sample = match *d {
            DefenseConfig::GradClip { max_norm } => defenses::clip_gradient(&per_sample, max_norm),
            DefenseConfig::DpGaussian { clip, sigma } => {
                defenses::dp_gaussian(&per_sample, clip, sigma, mix(noise_seed, i as u64))
            }
            DefenseConfig::GradCompress { keep_ratio } => defenses::compress_topk(&per_sample, keep_ratio),
            _ => unreachable!("filtered to gradient defenses"),
        };
    }
    (per_sample.scale(1.0 / scale), per_sample)
}

/// Builds the per-party bottom models and the top model for `data`.
pub fn init_split_models(
    config: &VflConfig,
    party_widths: &[usize],
    out_dim: usize,
) -> Result<(Vec<Model>, Model)> {
    let (bottom_spec, mut top_spec) = split_model(&config.split)?;
    let cut_width = bottom_spec.out_dim();
    let mut bottoms = Vec::with_capacity(party_widths.len());
    for (p, &w) in party_widths.iter().enumerate() {
        let mut spec = bottom_spec.clone();
        spec.layers[0].in_dim = w;
        bottoms.push(init_layers(&spec, party_seed(config.seed, p), 0)?);
    }
    top_spec.layers[0].in_dim = cut_width * party_widths.len();
    let last = top_spec.layers.len() - 1;
    top_spec.layers[last].out_dim = out_dim;
    let top = init_layers(&top_spec, config.seed, bottom_spec.len() as u64)?;
    Ok((bottoms, top))
}

/// Trains the split network for a fixed number of epochs.
///
/// Returns the trained models and one [`AttackerTrace`] per passive party.
pub fn train_vfl(
    config: &VflConfig,
    data: &PartitionedDataset,
) -> Result<(TrainedState, Vec<AttackerTrace>)> {
    config.validate()?;
    if data.n_parties() != config.n_parties {
        return Err(Error::config(format!(
            "config has {} parties, data is split {} ways",
            config.n_parties,
            data.n_parties()
        )));
    }
    if data.is_empty() {
        return Err(Error::data("training set is empty"));
    }
    let n_classes = data.n_classes();
    if config.split.full_layers.out_dim() != n_classes {
        return Err(Error::config(format!(
            "network predicts {} classes, data has {n_classes}",
            config.split.full_layers.out_dim()
        )));
    }

    let n = data.len();
    let widths = data.party_widths();
    let party_x: Vec<Matrix> = (0..config.n_parties).map(|p| data.party_features(p)).collect();
    let setup = label_setup(config, data.labels(), n_classes)?;
    let (mut bottoms, mut top) = init_split_models(config, &widths, setup.out_dim)?;
    let emb_widths: Vec<usize> = bottoms.iter().map(|m| m.spec().out_dim()).collect();

    let mut traces: Vec<AttackerTrace> = (0..config.n_parties)
        .map(|p| AttackerTrace {
            party_id: p,
            columns: data.party_columns[p].clone(),
            epochs: Vec::new(),
            inference_embeddings: Matrix::zeros(0, 0),
        })
        .collect();

    let mut state = TrainedState {
        bottom_models: Vec::new(),
        top_model: top.clone(),
        mta_history: Vec::with_capacity(config.epochs),
        n_classes,
        label_map: setup.label_map.clone(),
    };
    let mut scratch = Vec::with_capacity(config.batch_size);

    for epoch in 0..config.epochs {
        let record = config.records_epoch(epoch);
        let mut epoch_traces: Vec<EpochTrace> = if record {
            emb_widths
                .iter()
                .map(|&w| EpochTrace {
                    epoch,
                    embeddings: Matrix::zeros(n, w),
                    gradients: Matrix::zeros(n, w),
                })
                .collect()
        } else {
            Vec::new()
        };

        let order = epoch_order(n, config.seed, epoch);
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let bottom_traces = bottoms
                .iter()
                .zip(&party_x)
                .map(|(m, x)| m.forward(&x.select_rows(batch)))
                .collect::<Result<Vec<_>>>()?;
            let embeddings: Vec<Matrix> = bottom_traces.iter().map(|t| t.output().clone()).collect();
            let agg = aggregate_embeddings(&embeddings)?;
            let top_trace = top.forward(&agg)?;
            let (loss, logit_grad) = setup.targets.loss(top_trace.output(), batch, &mut scratch)?;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    message: format!("non-finite loss in batch {b}"),
                });
            }
            let top_grads = nn::backward(&top, &top_trace, &logit_grad)?;
            let parts = scatter_gradient(&top_grads.input, &emb_widths)?;

            for (p, part) in parts.into_iter().enumerate() {
                let noise_seed = mix(mix(config.seed, epoch as u64), ((b as u64) << 16) | p as u64);
                let (sent, per_sample) = defend_gradients(config, part, batch.len(), noise_seed);
                if record {
                    let et = &mut epoch_traces[p];
                    for (r, &i) in batch.iter().enumerate() {
                        et.embeddings.row_mut(i).copy_from_slice(embeddings[p].row(r));
                        et.gradients.row_mut(i).copy_from_slice(per_sample.row(r));
                    }
                }
                let grads = nn::backward(&bottoms[p], &bottom_traces[p], &sent)?;
                if !grads.is_finite() {
                    return Err(Error::Diverged {
                        epoch,
                        message: format!("non-finite gradient for party {p} in batch {b}"),
                    });
                }
                bottoms[p].apply_gradients(&grads, config.lr)?;
            }
            if !top_grads.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    message: format!("non-finite top-model gradient in batch {b}"),
                });
            }
            top.apply_gradients(&top_grads, config.lr)?;
        }

        if record {
            for (t, et) in traces.iter_mut().zip(epoch_traces) {
                t.epochs.push(et);
            }
        }
        state.bottom_models.clone_from(&bottoms);
        state.top_model.clone_from(&top);
        let mta = evaluate_mta(&state, data)?;
        state.mta_history.push(mta);
    }

    state.bottom_models = bottoms;
    state.top_model = top;
    for (t, x) in traces.iter_mut().zip(&party_x) {
        let emb = state.bottom_models[t.party_id].predict(x)?;
        if !emb.is_finite() {
            return Err(Error::Diverged {
                epoch: config.epochs.saturating_sub(1),
                message: "non-finite embeddings after training".into(),
            });
        }
        t.inference_embeddings = emb;
    }
    Ok((state, traces))
}

/// Plain minibatch SGD on the uncut network with the same shuffling and
/// initialization scheme as [`train_vfl`].
pub fn train_centralized(
    spec: &ModelSpec,
    features: &Matrix,
    labels: &[usize],
    epochs: usize,
    batch_size: usize,
    lr: f64,
    seed: u64,
) -> Result<Model> {
    if batch_size == 0 {
        return Err(Error::config("batch size must be positive"));
    }
    let mut model = nn::init_model(spec, seed)?;
    let mut scratch = Vec::with_capacity(batch_size);
    for epoch in 0..epochs {
        for batch in epoch_order(features.rows(), seed, epoch).chunks(batch_size) {
            let trace = model.forward(&features.select_rows(batch))?;
            scratch.clear();
            scratch.extend(batch.iter().map(|&i| labels[i]));
            let (loss, g) = nn::cross_entropy_loss(trace.output(), &scratch)?;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    message: "non-finite loss".into(),
                });
            }
            let grads = nn::backward(&model, &trace, &g)?;
            model.apply_gradients(&grads, lr)?;
        }
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn six_layer() -> ModelSpec {
        ModelSpec::from_widths(&[8, 16, 16, 12, 8, 8, 3], Activation::Relu, Activation::Softmax).unwrap()
    }

    #[test]
    fn split_counts() {
        let s = SplitSpec {
            full_layers: six_layer(),
            cut_pos: -2,
        };
        let (b, t) = split_model(&s).unwrap();
        assert_eq!((b.len(), t.len()), (4, 2));
        let s = SplitSpec { cut_pos: -5, ..s };
        let (b, t) = split_model(&s).unwrap();
        assert_eq!((b.len(), t.len()), (1, 5));
        let mut joined = b.layers.clone();
        joined.extend(t.layers);
        assert_eq!(joined, s.full_layers.layers);
        for bad in [-7, -6, 0, 1] {
            let s = SplitSpec { cut_pos: bad, ..s.clone() };
            assert!(matches!(split_model(&s), Err(Error::Config(_))), "{bad}");
        }
    }

    #[test]
    fn aggregate_and_scatter() {
        let a = Matrix::from_rows(&[[1.0, 2.0]]).unwrap();
        let b = Matrix::from_rows(&[[3.0]]).unwrap();
        assert_eq!(aggregate_embeddings(&[a.clone()]).unwrap(), a);
        assert_eq!(aggregate_embeddings(&[a, b]).unwrap().as_slice(), &[1.0, 2.0, 3.0]);
        assert!(aggregate_embeddings(&[Matrix::zeros(1, 1), Matrix::zeros(2, 1)]).is_err());

        let g = Matrix::from_rows(&[[1.0, 2.0, 3.0, 4.0]]).unwrap();
        let parts = scatter_gradient(&g, &[1, 3]).unwrap();
        assert_eq!(parts[0].as_slice(), &[1.0]);
        assert_eq!(parts[1].as_slice(), &[2.0, 3.0, 4.0]);
        assert_eq!(scatter_gradient(&g, &[4]).unwrap(), vec![g.clone()]);
        assert!(scatter_gradient(&g, &[1, 2]).is_err());
    }

    #[test]
    fn aggregate_preserves_party_order() {
        // Sentinels: party p fills its block with 10p + column.
        let widths = [2, 2, 4];
        let parts: Vec<Matrix> = widths
            .iter()
            .enumerate()
            .map(|(p, &w)| {
                Matrix::from_vec(2, w, (0..2 * w).map(|i| (10 * p + i % w) as f64).collect()).unwrap()
            })
            .collect();
        let agg = aggregate_embeddings(&parts).unwrap();
        assert_eq!(agg.cols(), 8);
        let expect = [0.0, 1.0, 10.0, 11.0, 20.0, 21.0, 22.0, 23.0];
        assert_eq!(agg.row(0), &expect);
        assert_eq!(agg.row(1), &expect);
        assert_eq!(scatter_gradient(&agg, &widths).unwrap(), parts);
    }

    #[test]
    fn multi_party_param_shapes() {
        let config = VflConfig {
            split: SplitSpec {
                full_layers: six_layer(),
                cut_pos: -3,
            },
            n_parties: 3,
            epochs: 0,
            batch_size: 4,
            lr: 0.1,
            defense_stack: vec![],
            seed: 1,
            aggregation: Aggregation::Concat,
            trace_epochs: None,
        };
        let (bottoms, top) = init_split_models(&config, &[3, 3, 2], 3).unwrap();
        assert_eq!(bottoms.len(), 3);
        assert_eq!(bottoms[2].spec().in_dim(), 2);
        assert_eq!(top.spec().in_dim(), 3 * 12);
        assert_ne!(bottoms[0].weights()[1], bottoms[1].weights()[1]);
    }

    #[test]
    fn cut_shift_conserves_parameters_single_party() {
        let full = six_layer();
        for cut in -5..=-1 {
            let config = VflConfig {
                split: SplitSpec {
                    full_layers: full.clone(),
                    cut_pos: cut,
                },
                n_parties: 1,
                epochs: 0,
                batch_size: 4,
                lr: 0.1,
                defense_stack: vec![],
                seed: 1,
                aggregation: Aggregation::Concat,
                trace_epochs: None,
            };
            let (b, t) = init_split_models(&config, &[8], 3).unwrap();
            assert_eq!(b[0].param_count() + t.param_count(), full.param_count());
            let whole = nn::init_model(&full, 1).unwrap();
            assert_eq!(b[0].stack(&t).unwrap(), whole);
        }
    }
}
