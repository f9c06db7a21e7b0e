use vflsim_core::data::{gen_synthetic, PartitionedDataset};
use vflsim_core::harness::{read_json_reports, run_scenario, write_reports, Format, Report, ScenarioConfig};
use vflsim_core::info::{binned_mi, mi_profile};
use vflsim_core::matrix::argmax;
use vflsim_core::nn::{Activation, ModelSpec};
use vflsim_core::vfl::{train_centralized, train_vfl, SplitSpec, VflConfig};
use vflsim_core::{Error, Matrix};

/// Ten well-separated classes, one bottom party unless `extra` overrides it.
fn scenario(name: &str, extra: &str) -> ScenarioConfig {
    let text = format!(
        r#"
        name = "{name}"
        seed = 5
        [dataset]
        kind = "synthetic"
        n = 1000
        dim = 20
        n_classes = 10
        separation = 6.0
        [model]
        hidden = [32, 32, 16, 16, 16]
        cut_pos = -2
        [training]
        n_parties = 1
        epochs = 20
        batch_size = 64
        lr = 0.05
        {extra}
        "#
    );
    ScenarioConfig::from_toml(&text).unwrap()
}

fn demo() -> ScenarioConfig {
    let path = [env!("CARGO_MANIFEST_DIR"), "..", "..", "configs", "demo.toml"]
        .iter()
        .collect::<std::path::PathBuf>();
    let mut cfg = ScenarioConfig::load(path).unwrap();
    cfg.repetitions = 1;
    cfg.attacks.run.clear();
    cfg
}

fn run(cfg: &ScenarioConfig) -> Report {
    run_scenario(cfg).unwrap()
}

fn cluster_raw(r: &Report) -> f64 {
    r.attack("cluster").unwrap().raw_acc.mean
}

#[test]
fn huge_learning_rate_diverges() {
    let mut cfg = demo();
    cfg.training.lr = 1e6;
    let err = run_scenario(&cfg).unwrap_err();
    assert!(err.to_string().contains("demo"));
    assert!(!err.is_validation());
    match err {
        Error::Scenario { source, .. } => assert!(matches!(*source, Error::Diverged { .. })),
        other => panic!("unexpected error {other}"),
    }
}

#[test]
fn single_party_embeddings_leak_labels() {
    let attacks = "[attacks]\nrun = [\"cluster\", \"completion\"]";
    let original = run(&scenario("original", attacks));
    let clustered = cluster_raw(&original);
    assert!(clustered >= 0.8, "cluster raw accuracy {clustered}");
    let completion = original.attack("completion").unwrap().raw_acc.mean;
    assert!(completion >= clustered, "completion {completion} < cluster {clustered}");
    assert!(original.aggregate.mta.mean >= 0.9);

    let mut parity = scenario("parity", attacks);
    parity.task = "task3".into();
    let parity = run(&parity);
    let before = original.attack("cluster").unwrap().lift_acc.mean;
    let after = parity.attack("cluster").unwrap().lift_acc.mean;
    assert!(after <= 0.6 * before, "lift {before} -> {after}");
}

#[test]
fn label_derangement_lowers_cluster_accuracy() {
    let mut plain = scenario("plain", "[attacks]\nrun = [\"cluster\"]");
    plain.repetitions = 3;
    let mut cae = scenario(
        "cae",
        "[attacks]\nrun = [\"cluster\"]\n[[defenses]]\nkind = \"cae_labels\"\nalpha = 0.5",
    );
    cae.repetitions = 3;
    let (a, b) = (cluster_raw(&run(&plain)), cluster_raw(&run(&cae)));
    assert!(b < a, "with defense {b}, without {a}");
}

#[test]
fn two_party_six_layer_network_learns() {
    let report = run(&demo());
    assert!(report.aggregate.mta.mean >= 0.90, "mta {}", report.aggregate.mta.mean);
}

#[test]
fn label_free_features_carry_no_information() {
    let ds = gen_synthetic(10_000, 10, 10, 0.0, 11).unwrap();
    let col = Matrix::from_vec(ds.len(), 1, ds.features.iter_rows().map(|r| r[0]).collect()).unwrap();
    let est = binned_mi(&col, &ds.labels, 10).unwrap();
    assert!(est.value <= 0.15, "estimated {} bits", est.value);
}

#[test]
fn separable_data_is_learned_centrally() {
    let ds = gen_synthetic(1000, 10, 5, 10.0, 4).unwrap();
    let spec = ModelSpec::from_widths(&[10, 16, 5], Activation::Relu, Activation::Softmax).unwrap();
    let model = train_centralized(&spec, &ds.features, &ds.labels, 10, 32, 0.05, 4).unwrap();
    let probs = model.predict(&ds.features).unwrap();
    let hits = probs
        .iter_rows()
        .zip(&ds.labels)
        .filter(|(p, y)| argmax(p) == **y)
        .count();
    assert!(hits as f64 / ds.len() as f64 >= 0.95);
}

#[test]
fn untrained_profile_is_finite() {
    let ds = gen_synthetic(300, 8, 3, 3.0, 2).unwrap();
    let data = PartitionedDataset::split(ds, 2, 2).unwrap();
    let spec = ModelSpec::from_widths(&[8, 6, 6, 3], Activation::Relu, Activation::Softmax).unwrap();
    let cfg = VflConfig {
        split: SplitSpec {
            full_layers: spec,
            cut_pos: -2,
        },
        n_parties: 2,
        epochs: 0,
        batch_size: 32,
        lr: 0.1,
        defense_stack: vec![],
        seed: 2,
        aggregation: Default::default(),
        trace_epochs: None,
    };
    let (state, _) = train_vfl(&cfg, &data).unwrap();
    let profile = mi_profile(&state, &data, 5).unwrap();
    let all = profile.parties.iter().flatten().chain(&profile.top).chain(&profile.features);
    for v in all {
        assert!(v.value.is_finite() && v.value >= 0.0);
    }
    assert_eq!(profile.top.len(), 2);
}

#[test]
fn gradient_attack_is_reproducible() {
    let extra = "[attacks]\nrun = [\"gradient_cluster\"]\ngradient_epoch = 0";
    let mut cfg = scenario("grad", extra);
    cfg.training.n_parties = 2;
    cfg.training.epochs = 4;
    let first = run(&cfg);
    assert_eq!(first, run(&cfg));
    let g = first.attack("gradient_cluster").unwrap();
    assert!((0.0..=1.0).contains(&g.raw_acc.mean));

    cfg.attacks.gradient_epoch = Some(3);
    let last = run(&cfg).attack("gradient_cluster").unwrap().raw_acc.mean;
    assert!((0.0..=1.0).contains(&last));
}

#[test]
fn json_reports_round_trip() {
    let mut cfg = scenario("json", "[attacks]\nrun = [\"cluster\"]\n[mi]\nenabled = true\nn_bins = 4");
    cfg.repetitions = 2;
    cfg.training.epochs = 3;
    let reports = vec![run(&cfg)];
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.json");
    write_reports(&reports, &path, Format::Json).unwrap();
    assert_eq!(read_json_reports(&path).unwrap(), reports);
}

#[test]
fn missing_dataset_names_the_scenario() {
    let mut cfg = scenario("lost", "");
    cfg.dataset = toml::from_str(
        "kind = \"idx\"\nimages = \"/nonexistent/imgs\"\nlabels = \"/nonexistent/labels\"",
    )
    .unwrap();
    let err = run_scenario(&cfg).unwrap_err();
    assert!(err.is_validation());
    let msg = err.to_string();
    assert!(msg.contains("lost") && msg.contains("/nonexistent/imgs"), "{msg}");
}
