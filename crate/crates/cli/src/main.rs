use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use vflsim_core::chain::{chain_mi_sequence, MarkovChainSpec};
use vflsim_core::data::{builtin_task_specs, TaskFamily};
use vflsim_core::harness::{render, run_scenarios, Format, ScenarioConfig};
use vflsim_core::Error;

/// Tolerance for the exact chain inequalities.
const CHAIN_TOL: f64 = 1e-10;

#[derive(Parser)]
#[command(name = "vflsim", version, about = "Desk-scale vertical federated learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario file and write its report.
    Run {
        config: PathBuf,
        /// Base seed, replacing the one in the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Report path; stdout when neither this nor the config sets one.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_parser = ["csv", "json"])]
        format: Option<String>,
        /// Sweep points run concurrently.
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
    /// Check the layer-depth MI inequalities on an exact chain (JSON).
    MiChain { chain: PathBuf },
    /// Print the built-in task reassignments.
    ListTasks {
        #[arg(long, default_value_t = 10)]
        classes: usize,
    },
}

enum Failure {
    Validation(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_validation() {
            Failure::Validation(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

fn run(
    config: PathBuf,
    seed: Option<u64>,
    out: Option<PathBuf>,
    format: Option<String>,
    threads: usize,
) -> Result<(), Failure> {
    let mut cfg = ScenarioConfig::load(&config)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    let format = match format {
        Some(f) => f.parse::<Format>()?,
        None => cfg.output.format,
    };
    // Relative dataset paths resolve against the config file's directory.
    if let vflsim_core::harness::DatasetConfig::Idx { images, labels, .. } = &mut cfg.dataset {
        let base = config.parent().unwrap_or(std::path::Path::new(""));
        *images = base.join(&*images);
        *labels = base.join(&*labels);
    }
    let reports = run_scenarios(&cfg, threads)?;
    let text = render(&reports, format)?;
    match out.or(cfg.output.path.clone()) {
        Some(path) => std::fs::write(&path, text).map_err(|source| Error::Io { path, source })?,
        None => std::io::stdout()
            .write_all(text.as_bytes())
            .map_err(|e| Failure::Runtime(e.to_string()))?,
    }
    Ok(())
}

fn mi_chain(path: PathBuf) -> Result<(), Failure> {
    let chain = MarkovChainSpec::load_json(&path).map_err(|e| Failure::Validation(e.to_string()))?;
    let mi = chain_mi_sequence(&chain)?;
    for (i, b) in mi.branches.iter().enumerate() {
        println!("branch {i}: {}", fmt_bits(b));
    }
    println!("top: {}", fmt_bits(&mi.top));
    let violations = mi.violations(CHAIN_TOL);
    if violations.is_empty() {
        println!("ok: all inequalities hold within {CHAIN_TOL:e}");
        return Ok(());
    }
    for v in &violations {
        println!("violated: {} (excess {:e})", v.what, v.excess);
    }
    Err(Failure::Runtime(format!("{} inequalities violated", violations.len())))
}

fn fmt_bits(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.6}")).collect::<Vec<_>>().join(" ")
}

fn list_tasks(classes: usize) -> Result<(), Failure> {
    if classes < 2 {
        return Err(Failure::Validation("need at least 2 classes".into()));
    }
    for t in builtin_task_specs(TaskFamily::for_classes(classes)) {
        let mapping = t.mapping.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        println!("{}\t{} -> {}\t[{mapping}]", t.name, t.c_orig, t.c_new);
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Run {
            config,
            seed,
            out,
            format,
            threads,
        } => run(config, seed, out, format, threads),
        Command::MiChain { chain } => mi_chain(chain),
        Command::ListTasks { classes } => list_tasks(classes),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
