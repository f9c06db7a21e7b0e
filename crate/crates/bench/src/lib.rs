//! Fixtures shared by the benchmarks.

use vflsim_core::data::{gen_synthetic, PartitionedDataset};
use vflsim_core::nn::{Activation, ModelSpec};
use vflsim_core::vfl::{SplitSpec, VflConfig};

/// Ten-class blobs split across `k` parties.
pub fn blobs(n: usize, k: usize) -> PartitionedDataset {
    let ds = gen_synthetic(n, 20, 10, 6.0, 1).expect("valid synthetic config");
    PartitionedDataset::split(ds, k, 1).expect("dim covers parties")
}

/// The six-layer network used by the demo scenario.
pub fn six_layer() -> ModelSpec {
    ModelSpec::from_widths(&[20, 32, 32, 16, 16, 16, 10], Activation::Relu, Activation::Softmax)
        .expect("valid widths")
}

pub fn vfl_config(k: usize, epochs: usize) -> VflConfig {
    VflConfig {
        split: SplitSpec {
            full_layers: six_layer(),
            cut_pos: -2,
        },
        n_parties: k,
        epochs,
        batch_size: 64,
        lr: 0.05,
        defense_stack: vec![],
        seed: 1,
        aggregation: Default::default(),
        trace_epochs: Some(vec![epochs.saturating_sub(1)]),
    }
}
