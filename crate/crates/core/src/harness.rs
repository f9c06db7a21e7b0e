//! Config-driven scenarios: data, training, attacks and MI profiling composed
//! into per-repetition records with mean ± sample-std aggregates.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attacks::{cluster_lia, completion_lia, gradient_cluster_lia, AuxiliaryData, FineTune};
use crate::data::{find_task, gen_synthetic_modes, load_idx, Dataset, PartitionedDataset};
use crate::defenses::DefenseConfig;
use crate::error::{Error, Result};
use crate::info::mi_profile;
use crate::nn::{Activation, ModelSpec};
use crate::vfl::{evaluate_mta, train_vfl, Aggregation, SplitSpec, VflConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    /// Base seed; repetition `r` runs with `seed + r`.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "one")]
    pub repetitions: usize,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub training: TrainingConfig,
    #[serde(default = "original_task")]
    pub task: String,
    #[serde(default)]
    pub defenses: Vec<DefenseConfig>,
    #[serde(default)]
    pub attacks: AttackConfig,
    #[serde(default)]
    pub mi: MiConfig,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default)]
    pub sweep: Option<Sweep>,
}

fn one() -> usize {
    1
}

fn original_task() -> String {
    "original".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Synthetic {
        n: usize,
        dim: usize,
        n_classes: usize,
        separation: f64,
        /// Blobs per class.
        #[serde(default = "one")]
        modes: usize,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
        /// Keep only the first `limit` samples.
        #[serde(default)]
        limit: Option<usize>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Hidden layer widths. Input and output widths come from the data.
    pub hidden: Vec<usize>,
    #[serde(default = "relu")]
    pub activation: Activation,
    pub cut_pos: i32,
}

fn relu() -> Activation {
    Activation::Relu
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub n_parties: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Cluster,
    Completion,
    GradientCluster,
}

impl AttackKind {
    pub fn name(self) -> &'static str {
        match self {
            AttackKind::Cluster => "cluster",
            AttackKind::Completion => "completion",
            AttackKind::GradientCluster => "gradient_cluster",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    #[serde(default)]
    pub run: Vec<AttackKind>,
    /// The passive party acting as attacker.
    #[serde(default)]
    pub party: usize,
    #[serde(default = "ten")]
    pub aux_per_class: usize,
    #[serde(default)]
    pub completion: FineTune,
    /// Epoch whose gradients feed the gradient-cluster attack; defaults to
    /// the last one.
    #[serde(default)]
    pub gradient_epoch: Option<usize>,
}

fn ten() -> usize {
    10
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            run: Vec::new(),
            party: 0,
            aux_per_class: ten(),
            completion: FineTune::default(),
            gradient_epoch: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MiConfig {
    #[serde(default)]
    pub enabled: bool,
    #[serde(default = "two")]
    pub n_bins: usize,
}

fn two() -> usize {
    2
}

impl Default for MiConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            n_bins: two(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    #[default]
    Csv,
    Json,
}

impl std::str::FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            other => Err(Error::config(format!("unknown report format {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub format: Format,
    /// Record wall time per repetition. Reports are then no longer
    /// byte-reproducible.
    #[serde(default)]
    pub wall_time: bool,
}

/// Grid of overrides; the scenario runs once per combination.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    #[serde(default)]
    pub cut_pos: Vec<i32>,
    #[serde(default)]
    pub n_parties: Vec<usize>,
    #[serde(default)]
    pub task: Vec<String>,
    /// Defense kinds at their default parameters, each replacing the
    /// configured stack; `none` runs undefended.
    #[serde(default)]
    pub defense: Vec<String>,
}

/// The single-defense stack named `name` with default parameters.
pub fn default_defense_stack(name: &str) -> Result<Vec<DefenseConfig>> {
    if name == "none" {
        return Ok(Vec::new());
    }
    DefenseConfig::defaults()
        .into_iter()
        .find(|d| d.name() == name)
        .map(|d| vec![d])
        .ok_or_else(|| Error::config(format!("unknown defense `{name}`")))
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(Error::config("scenario needs a name"));
        }
        if self.repetitions == 0 {
            return Err(Error::config("repetitions must be at least 1"));
        }
        if self.model.hidden.is_empty() {
            return Err(Error::config("model needs at least one hidden layer"));
        }
        if self.mi.enabled && self.mi.n_bins < 2 {
            return Err(Error::config("MI profiling needs at least 2 bins"));
        }
        if !self.attacks.run.is_empty() && self.attacks.party >= self.training.n_parties {
            return Err(Error::config(format!(
                "attacker party {} does not exist among {} parties",
                self.attacks.party, self.training.n_parties
            )));
        }
        if let Some(e) = self.attacks.gradient_epoch {
            if e >= self.training.epochs {
                return Err(Error::config(format!(
                    "gradient epoch {e} is past the last epoch {}",
                    self.training.epochs.saturating_sub(1)
                )));
            }
        }
        for d in &self.defenses {
            d.validate()?;
        }
        if let Some(sweep) = &self.sweep {
            for name in &sweep.defense {
                default_defense_stack(name)?;
            }
        }
        Ok(())
    }

    /// One config per sweep point, named `name[key=value,...]`. Without a
    /// sweep this is just the config itself.
    pub fn expand(&self) -> Vec<ScenarioConfig> {
        let Some(sweep) = &self.sweep else {
            return vec![self.clone()];
        };
        let mut out = vec![(self.clone(), Vec::<String>::new())];
        if !sweep.cut_pos.is_empty() {
            out = out
                .into_iter()
                .flat_map(|(c, tags)| {
                    sweep.cut_pos.iter().map(move |&v| {
                        let mut c = c.clone();
                        c.model.cut_pos = v;
                        (c, [tags.clone(), vec![format!("cut_pos={v}")]].concat())
                    })
                })
                .collect();
        }
        if !sweep.n_parties.is_empty() {
            out = out
                .into_iter()
                .flat_map(|(c, tags)| {
                    sweep.n_parties.iter().map(move |&v| {
                        let mut c = c.clone();
                        c.training.n_parties = v;
                        (c, [tags.clone(), vec![format!("n_parties={v}")]].concat())
                    })
                })
                .collect();
        }
        if !sweep.task.is_empty() {
            out = out
                .into_iter()
                .flat_map(|(c, tags)| {
                    sweep.task.iter().map(move |v| {
                        let mut c = c.clone();
                        c.task = v.clone();
                        (c, [tags.clone(), vec![format!("task={v}")]].concat())
                    })
                })
                .collect();
        }
        if !sweep.defense.is_empty() {
            out = out
                .into_iter()
                .flat_map(|(c, tags)| {
                    sweep.defense.iter().map(move |v| {
                        let mut c = c.clone();
                        c.defenses = default_defense_stack(v).unwrap_or_default();
                        (c, [tags.clone(), vec![format!("defense={v}")]].concat())
                    })
                })
                .collect();
        }
        out.into_iter()
            .map(|(mut c, tags)| {
                c.sweep = None;
                if !tags.is_empty() {
                    c.name = format!("{}[{}]", c.name, tags.join(","));
                }
                c
            })
            .collect()
    }
}

/// Rounds to 6 significant digits.
pub fn round6(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{x:.5e}").parse().expect("formatted float parses")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackScore {
    pub attack: String,
    pub raw_acc: f64,
    pub lift_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiSeries {
    pub n_bins: usize,
    /// Per party: raw feature MI.
    pub features: Vec<f64>,
    /// Per party: bottom layer outputs.
    pub parties: Vec<Vec<f64>>,
    /// Top layer outputs, ending at the softmax.
    pub top: Vec<f64>,
    pub mean_cut: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub scenario: String,
    pub seed: u64,
    pub mta: f64,
    pub attacks: Vec<AttackScore>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mi: Option<MiSeries>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_time_s: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Self {
            mean: round6(mean),
            std: round6(std),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackStat {
    pub attack: String,
    pub raw_acc: Stat,
    pub lift_acc: Stat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mta: Stat,
    pub attacks: Vec<AttackStat>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mi_mean_cut: Option<Stat>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub scenario: String,
    pub records: Vec<Record>,
    pub aggregate: Aggregate,
}

impl Report {
    /// Builds the aggregate over `records`, which must be non-empty and
    /// share one attack list.
    pub fn new(scenario: String, records: Vec<Record>) -> Result<Self> {
        let Some(first) = records.first() else {
            return Err(Error::config(format!("scenario {scenario} produced no records")));
        };
        let names: Vec<String> = first.attacks.iter().map(|a| a.attack.clone()).collect();
        if records
            .iter()
            .any(|r| r.attacks.iter().map(|a| &a.attack).ne(names.iter()))
        {
            return Err(Error::shape("records disagree on the attack list"));
        }
        let column = |f: &dyn Fn(&Record) -> f64| records.iter().map(f).collect::<Vec<_>>();
        let attacks = names
            .iter()
            .enumerate()
            .map(|(i, name)| AttackStat {
                attack: name.clone(),
                raw_acc: Stat::of(&column(&|r| r.attacks[i].raw_acc)),
                lift_acc: Stat::of(&column(&|r| r.attacks[i].lift_acc)),
            })
            .collect();
        let mi_mean_cut = records
            .iter()
            .map(|r| r.mi.as_ref().map(|m| m.mean_cut))
            .collect::<Option<Vec<_>>>()
            .map(|v| Stat::of(&v));
        Ok(Self {
            aggregate: Aggregate {
                mta: Stat::of(&column(&|r| r.mta)),
                attacks,
                mi_mean_cut,
            },
            scenario,
            records,
        })
    }

    pub fn attack(&self, name: &str) -> Option<&AttackStat> {
        self.aggregate.attacks.iter().find(|a| a.attack == name)
    }
}

fn load_dataset(cfg: &DatasetConfig, seed: u64) -> Result<Dataset> {
    match cfg {
        DatasetConfig::Synthetic {
            n,
            dim,
            n_classes,
            separation,
            modes,
        } => gen_synthetic_modes(*n, *dim, *n_classes, *separation, *modes, seed),
        DatasetConfig::Idx {
            images,
            labels,
            limit,
        } => {
            let ds = load_idx(images, labels)?;
            match limit {
                Some(l) if *l < ds.len() => {
                    let idx: Vec<usize> = (0..*l).collect();
                    ds.subset(&idx)
                }
                _ => Ok(ds),
            }
        }
    }
}

fn run_repetition(cfg: &ScenarioConfig, seed: u64) -> Result<Record> {
    let start = Instant::now();
    let base = load_dataset(&cfg.dataset, seed)?;
    let c_orig = base.n_classes;
    let task = find_task(&cfg.task, c_orig)?;
    let data = PartitionedDataset::split(base, cfg.training.n_parties, seed)?.reassigned(&task)?;
    let c_new = data.n_classes();

    let mut widths = vec![data.base.dim()];
    widths.extend(&cfg.model.hidden);
    widths.push(c_new);
    let full_layers = ModelSpec::from_widths(&widths, cfg.model.activation, Activation::Softmax)?;
    let last = cfg.training.epochs.saturating_sub(1);
    let grad_epoch = cfg.attacks.gradient_epoch.unwrap_or(last);
    let mut trace_epochs = vec![last];
    if cfg.attacks.run.contains(&AttackKind::GradientCluster) && grad_epoch != last {
        trace_epochs.push(grad_epoch);
    }
    let vfl = VflConfig {
        split: SplitSpec {
            full_layers,
            cut_pos: cfg.model.cut_pos,
        },
        n_parties: cfg.training.n_parties,
        epochs: cfg.training.epochs,
        batch_size: cfg.training.batch_size,
        lr: cfg.training.lr,
        defense_stack: cfg.defenses.clone(),
        seed,
        aggregation: Aggregation::Concat,
        trace_epochs: Some(trace_epochs),
    };
    let (state, traces) = train_vfl(&vfl, &data)?;
    let mta = evaluate_mta(&state, &data)?;

    let mut attacks = Vec::with_capacity(cfg.attacks.run.len());
    if !cfg.attacks.run.is_empty() {
        let party = cfg.attacks.party;
        let trace = &traces[party];
        let aux = AuxiliaryData::sample(&data, party, cfg.attacks.aux_per_class, seed)?;
        for &kind in &cfg.attacks.run {
            let guess = match kind {
                AttackKind::Cluster => {
                    let emb = &trace.epoch(last).expect("last epoch is traced").embeddings;
                    cluster_lia(emb, c_new, &aux, seed)?
                }
                AttackKind::Completion => completion_lia(
                    &state.bottom_models[party],
                    &aux,
                    &data.party_features(party),
                    c_new,
                    cfg.attacks.completion,
                    seed,
                )?,
                AttackKind::GradientCluster => {
                    let grads = &trace.epoch(grad_epoch).expect("gradient epoch is traced").gradients;
                    gradient_cluster_lia(grads, c_new, &aux, seed)?
                }
            };
            let scored = guess.score(data.labels(), c_new, c_orig)?;
            attacks.push(AttackScore {
                attack: kind.name().into(),
                raw_acc: round6(scored.raw_accuracy),
                lift_acc: round6(scored.lift_normalized_accuracy),
            });
        }
    }

    let mi = if cfg.mi.enabled {
        let p = mi_profile(&state, &data, cfg.mi.n_bins)?;
        let vals = |v: &[crate::info::MiEstimate]| v.iter().map(|e| round6(e.value)).collect::<Vec<_>>();
        Some(MiSeries {
            n_bins: cfg.mi.n_bins,
            features: vals(&p.features),
            parties: p.parties.iter().map(|q| vals(q)).collect(),
            top: vals(&p.top),
            mean_cut: round6(p.mean_cut_mi()),
        })
    } else {
        None
    };

    Ok(Record {
        scenario: cfg.name.clone(),
        seed,
        mta: round6(mta),
        attacks,
        mi,
        wall_time_s: cfg
            .output
            .wall_time
            .then(|| round6(start.elapsed().as_secs_f64())),
    })
}

/// Runs every repetition of a single (already expanded) scenario.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<Report> {
    let inner = || -> Result<Report> {
        cfg.validate()?;
        let records = (0..cfg.repetitions)
            .map(|r| run_repetition(cfg, cfg.seed.wrapping_add(r as u64)))
            .collect::<Result<Vec<_>>>()?;
        Report::new(cfg.name.clone(), records)
    };
    inner().map_err(|e| e.in_scenario(&cfg.name))
}

/// Expands the sweep and runs every point on up to `threads` worker
/// threads. Reports come back in sweep order whatever the scheduling.
pub fn run_scenarios(cfg: &ScenarioConfig, threads: usize) -> Result<Vec<Report>> {
    cfg.validate().map_err(|e| e.in_scenario(&cfg.name))?;
    let points = cfg.expand();
    for p in &points {
        p.validate().map_err(|e| e.in_scenario(&p.name))?;
    }
    let threads = threads.clamp(1, points.len());
    if threads == 1 {
        return points.iter().map(run_scenario).collect();
    }
    let next = std::sync::atomic::AtomicUsize::new(0);
    let mut slots: Vec<Option<Result<Report>>> = Vec::new();
    slots.resize_with(points.len(), || None);
    let slots = std::sync::Mutex::new(slots);
    std::thread::scope(|s| {
        for _ in 0..threads {
            s.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                let Some(point) = points.get(i) else { break };
                let result = run_scenario(point);
                slots.lock().expect("no worker panicked")[i] = Some(result);
            });
        }
    });
    slots
        .into_inner()
        .expect("no worker panicked")
        .into_iter()
        .map(|r| r.expect("every point ran"))
        .collect()
}

/// CSV columns, in order.
pub const CSV_HEADER: [&str; 8] = [
    "scenario", "row", "seed", "mta", "attack", "raw_acc", "lift_acc", "mi_mean_cut",
];

/// Renders reports as CSV: one row per repetition and attack (`row = rep`),
/// then `mean` and `std` rows per attack, whose `mta` and `mi_mean_cut`
/// cells hold the matching statistic. Runs without attacks use the attack
/// name `none` and empty accuracy cells.
pub fn render_csv(reports: &[Report]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::data(format!("CSV encoding failed: {e}"));
    w.write_record(CSV_HEADER).map_err(csv_err)?;
    let num = |x: f64| format!("{x}");
    for rep in reports {
        for r in &rep.records {
            let mi = r.mi.as_ref().map_or(String::new(), |m| num(m.mean_cut));
            if r.attacks.is_empty() {
                w.write_record([&rep.scenario, "rep", &r.seed.to_string(), &num(r.mta), "none", "", "", &mi])
                    .map_err(csv_err)?;
            }
            for a in &r.attacks {
                w.write_record([
                    &rep.scenario,
                    "rep",
                    &r.seed.to_string(),
                    &num(r.mta),
                    &a.attack,
                    &num(a.raw_acc),
                    &num(a.lift_acc),
                    &mi,
                ])
                .map_err(csv_err)?;
            }
        }
        let agg = &rep.aggregate;
        let mi = |pick: fn(&Stat) -> f64| agg.mi_mean_cut.as_ref().map_or(String::new(), |s| num(pick(s)));
        let mean_std: [(&str, fn(&Stat) -> f64); 2] = [("mean", |s| s.mean), ("std", |s| s.std)];
        for (row, pick) in mean_std {
            if agg.attacks.is_empty() {
                w.write_record([&rep.scenario, row, "", &num(pick(&agg.mta)), "none", "", "", &mi(pick)])
                    .map_err(csv_err)?;
            }
            for a in &agg.attacks {
                w.write_record([
                    &rep.scenario,
                    row,
                    "",
                    &num(pick(&agg.mta)),
                    &a.attack,
                    &num(pick(&a.raw_acc)),
                    &num(pick(&a.lift_acc)),
                    &mi(pick),
                ])
                .map_err(csv_err)?;
            }
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::data(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("CSV output is UTF-8"))
}

pub fn render(reports: &[Report], format: Format) -> Result<String> {
    match format {
        Format::Csv => render_csv(reports),
        Format::Json => {
            let mut s = serde_json::to_string_pretty(reports).map_err(|e| Error::data(e.to_string()))?;
            s.push('\n');
            Ok(s)
        }
    }
}

pub fn write_reports(reports: &[Report], path: impl AsRef<Path>, format: Format) -> Result<()> {
    let path = path.as_ref();
    let text = render(reports, format)?;
    let io = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut f = fs::File::create(path).map_err(io)?;
    f.write_all(text.as_bytes()).map_err(io)
}

pub fn write_report(report: &Report, path: impl AsRef<Path>, format: Format) -> Result<()> {
    write_reports(std::slice::from_ref(report), path, format)
}

pub fn read_json_reports(path: impl AsRef<Path>) -> Result<Vec<Report>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        offset: 0,
        message: e.to_string(),
    })
}
