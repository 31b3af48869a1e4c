use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gbair_core::config::ConfigFile;
use gbair_core::data::{self, generate_synthetic};
use gbair_core::gbair::InfluenceEntry;
use gbair_core::harness;
use gbair_core::output;
use gbair_core::{DatasetSplit, Error, Intervention, Measure, Method};

#[derive(Parser)]
#[command(
    name = "gbair",
    version,
    about = "Find and repair corrupted training labels with gradient influence"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its reports.
    Run(RunArgs),
    /// Run an ablation grid over seeds.
    Sweep(RunArgs),
    /// Show misclassified validation examples next to their most influential training examples.
    Inspect(InspectArgs),
    /// Generate a synthetic dataset directory.
    Synth(SynthArgs),
}

/// Every flag overrides the matching config-file key.
#[derive(Args, Debug, Default)]
struct RunArgs {
    /// TOML config file; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory holding train.jsonl, val.jsonl and test.jsonl (`dataset_dir`).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory (`out_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// `experiment.seed`
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    method: Option<Method>,
    #[arg(long)]
    measure: Option<Measure>,
    #[arg(long)]
    intervention: Option<Intervention>,
    #[arg(long)]
    corruption_rate: Option<f64>,
    /// Generate data from `[synthetic_data]` instead of reading `dataset_dir`.
    #[arg(long)]
    synthetic: bool,
    /// Worker threads for sweeps.
    #[arg(long)]
    parallel: Option<usize>,
    /// Persist influence.jsonl and influence.csv for `inspect`.
    #[arg(long)]
    store_influence: bool,
}

#[derive(Args)]
struct InspectArgs {
    /// A run directory written with --store-influence.
    run_dir: PathBuf,
    /// Only this validation example.
    #[arg(long)]
    val_id: Option<String>,
    /// Only this iteration.
    #[arg(long)]
    iteration: Option<usize>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// Reads `[synthetic_data]` from this file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_val: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
}

enum Failure {
    Invalid(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_invalid_input() {
            Failure::Invalid(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Invalid(m) | Failure::Runtime(m) => f.write_str(m),
        }
    }
}

type CliResult<T> = Result<T, Failure>;

fn load_config(path: Option<&Path>) -> CliResult<ConfigFile> {
    match path {
        None => Ok(ConfigFile::default()),
        Some(p) if !p.is_file() => Err(Failure::Invalid(format!("config file {} not found", p.display()))),
        Some(p) => Ok(ConfigFile::load(p)?),
    }
}

fn resolve(args: &RunArgs) -> CliResult<ConfigFile> {
    let mut c = load_config(args.config.as_deref())?;
    if let Some(d) = &args.data {
        c.dataset_dir = Some(d.clone());
    }
    if let Some(o) = &args.out {
        c.out_dir = Some(o.clone());
    }
    if let Some(s) = args.seed {
        c.experiment.seed = s;
    }
    if let Some(m) = args.method {
        c.experiment.method = m;
    }
    if let Some(m) = args.measure {
        c.experiment.measure = m;
    }
    if let Some(i) = args.intervention {
        c.experiment.intervention = i;
    }
    if let Some(r) = args.corruption_rate {
        c.experiment.corruption_rate = r;
    }
    if let Some(p) = args.parallel {
        c.parallel = p;
    }
    c.synthetic |= args.synthetic;
    c.experiment.store_influence |= args.store_influence;
    c.validate()?;
    Ok(c)
}

fn load_split(c: &ConfigFile) -> CliResult<DatasetSplit> {
    if c.synthetic {
        return Ok(generate_synthetic(&c.synthetic_data)?);
    }
    match &c.dataset_dir {
        Some(dir) if dir.is_dir() => Ok(data::load_dataset(dir)?),
        Some(dir) => Err(Failure::Invalid(format!(
            "dataset directory {} not found",
            dir.display()
        ))),
        None => Err(Failure::Invalid(
            "no data: pass --data DIR, set dataset_dir, or use --synthetic".into(),
        )),
    }
}

fn out_dir(c: &ConfigFile) -> CliResult<PathBuf> {
    c.out_dir
        .clone()
        .ok_or_else(|| Failure::Invalid("no output directory: pass --out DIR or set out_dir".into()))
}

fn cmd_run(args: &RunArgs) -> CliResult<()> {
    let c = resolve(args)?;
    let out = out_dir(&c)?;
    let split = load_split(&c)?;
    c.validate_run(&split)?;
    log::info!(
        "running {} on {} training examples",
        c.experiment.method,
        split.train.len()
    );
    let run = gbair_core::run_experiment(&c.experiment, &split)?;
    output::write_run(&out, &run)?;
    let s = run.summary();
    println!(
        "clean_ap={:.4} corrupted_ap={:.4} final_ap={:.4} best_ap={:.4} ci2r={:.4}",
        s.clean_ap, s.corrupted_ap, s.final_ap, s.best_ap, s.ci2r
    );
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_sweep(args: &RunArgs) -> CliResult<()> {
    let c = resolve(args)?;
    let out = out_dir(&c)?;
    let split = load_split(&c)?;
    c.validate_sweep(&split)?;
    let spec = c.sweep_spec();
    log::info!("sweeping {} cells x {} seeds", spec.cells().len(), spec.seeds.len());
    let result = gbair_core::run_sweep(&spec, &split, c.parallel)?;
    harness::write_sweep(&out, &result)?;
    println!(
        "{:<48} {:>5} {:>9} {:>9} {:>9} {:>7}",
        "cell", "runs", "clean", "corrupt", "final", "ci2r"
    );
    for cell in &result.summary.cells {
        println!(
            "{:<48} {:>5} {:>9.4} {:>9.4} {:>9.4} {:>7.4}",
            cell.key, cell.completed, cell.clean_ap.mean, cell.corrupted_ap.mean, cell.final_ap.mean, cell.ci2r.mean
        );
    }
    println!("wrote {}", out.display());
    if result.summary.has_failures() {
        return Err(Failure::Runtime(
            "some runs failed; see error.txt in their directories".into(),
        ));
    }
    Ok(())
}

fn one_line(text: &str, width: usize) -> String {
    let flat: String = text.split_whitespace().collect::<Vec<_>>().join(" ");
    if flat.chars().count() <= width {
        flat
    } else {
        let cut: String = flat.chars().take(width.saturating_sub(3)).collect();
        format!("{cut}...")
    }
}

fn print_entry(e: &InfluenceEntry) {
    println!(
        "iteration {}  validation {}  label {}  p(notok) {:.4}",
        e.iteration, e.val_id, e.val_label, e.prediction
    );
    println!("  {}", one_line(&e.val_text, 100));
    println!(
        "  {:>4}  {:>10}  {:<6} {:<14} text",
        "rank", "score", "label", "train_id"
    );
    for (i, r) in e.retrieved.iter().enumerate() {
        println!(
            "  {:>4}  {:>10.6}  {:<6} {:<14} {}",
            i + 1,
            r.score,
            r.label.as_str(),
            r.train_id,
            one_line(&r.text, 70)
        );
    }
    println!();
}

fn cmd_inspect(args: &InspectArgs) -> CliResult<()> {
    let path = args.run_dir.join(output::INFLUENCE_JSONL);
    if !path.is_file() {
        return Err(Failure::Invalid(format!(
            "{} has no influence records; rerun with --store-influence",
            args.run_dir.display()
        )));
    }
    let entries = output::read_influence(&path)?;
    let shown: Vec<&InfluenceEntry> = entries
        .iter()
        .filter(|e| args.val_id.as_ref().is_none_or(|v| &e.val_id == v))
        .filter(|e| args.iteration.is_none_or(|i| e.iteration == i))
        .collect();
    if shown.is_empty() {
        return Err(Failure::Invalid(match &args.val_id {
            Some(v) => format!("no influence records for validation id {v}"),
            None => "no influence records match".into(),
        }));
    }
    for e in shown {
        print_entry(e);
    }
    Ok(())
}

fn cmd_synth(args: &SynthArgs) -> CliResult<()> {
    let mut cfg = load_config(args.config.as_deref())?.synthetic_data;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(n) = args.n_train {
        cfg.n_train = n;
    }
    if let Some(n) = args.n_val {
        cfg.n_val = n;
    }
    if let Some(n) = args.n_test {
        cfg.n_test = n;
    }
    if let Some(x) = args.noise {
        cfg.noise = x;
    }
    let split = generate_synthetic(&cfg)?;
    data::save_dataset(&args.out, &split)?;
    println!(
        "wrote {} ({} train, {} val, {} test)",
        args.out.display(),
        split.train.len(),
        split.val.len(),
        split.test.len()
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Inspect(a) => cmd_inspect(a),
        Command::Synth(a) => cmd_synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            match f {
                Failure::Invalid(_) => ExitCode::from(2),
                Failure::Runtime(_) => ExitCode::from(1),
            }
        }
    }
}
