//! `attnguide`: generate shifted-mean data, train and evaluate guided MIL
//! models, compute ceilings and export attention curves.
//!
//! Exit status is 0 on success, 1 when arguments, configs or inputs fail
//! validation, and 2 when a run fails.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use attnguide::bagio::{load_bags, save_bags, split_by_patient, Dataset, DEFAULT_RATIOS};
use attnguide::ceilings::{self, NegativePooling};
use attnguide::experiment::{self, Baseline, ExperimentConfig, Sweep};
use attnguide::metrics::{aggregate_seeds, MetricsReport, SeedMetrics};
use attnguide::models::load_checkpoint;
use attnguide::{Error, Split, SynthConfig, TrainConfig};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "attnguide", version, about = "Guided attention for ordered multiple instance learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write shifted-mean train/val/test bag files and a config.json per seed.
    Generate(GenerateArgs),
    /// Split a bag file by patient into train/val/test files.
    Split(SplitArgs),
    /// Train (or grid-search) from an experiment config, optionally sweeping
    /// the guidance strength or divergence.
    Run(RunArgs),
    /// Score a checkpoint or a baseline on test bag files.
    Evaluate(EvaluateArgs),
    /// Instance- or bag-level ceiling from instance labels.
    Ceiling(CeilingArgs),
    /// Bayes instance and bag posteriors of generated data, plus block statistics.
    Oracle(OracleArgs),
    /// Per-bag attention CSV and SVG from a checkpoint or a baseline.
    ExportAttention(ExportArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Number of data seeds (one directory each).
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_val: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    /// Feature dimension M.
    #[arg(long)]
    m: Option<usize>,
    /// Positive block length R.
    #[arg(long)]
    r: Option<usize>,
    /// Mean shift of the first feature inside the block.
    #[arg(long, allow_hyphen_values = true)]
    delta: Option<f64>,
    #[arg(long)]
    s_min: Option<usize>,
    #[arg(long)]
    s_max: Option<usize>,
    /// Probability that a bag is positive.
    #[arg(long)]
    prior: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// 2000 training bags unless --n-train is given.
    #[arg(long)]
    desk_scale: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    bags: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// train,val,test proportions
    #[arg(long, default_value = "4,1,1")]
    ratios: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (JSON); relative paths resolve against its directory.
    #[arg(long)]
    config: PathBuf,
    /// `lambda=1e-2..1e2`, `lambda=0.1,1,10` or `divergence=se,fkl,rkl`.
    #[arg(long)]
    sweep: Option<String>,
    /// Cap training at 2000 bags and 200 epochs.
    #[arg(long)]
    desk_scale: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Test bag files, one per seed.
    #[arg(long, required = true, num_args = 1..)]
    bags: Vec<PathBuf>,
    #[arg(long, conflicts_with = "baseline", required_unless_present = "baseline")]
    checkpoint: Option<PathBuf>,
    /// uniform or centered-gaussian
    #[arg(long)]
    baseline: Option<String>,
    /// Also write the report as JSON here.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum CeilingKind {
    Instance,
    Bag,
}

#[derive(Clone, Copy, ValueEnum)]
enum CeilingSource {
    Oracle,
    Trained,
}

#[derive(Clone, Copy, ValueEnum)]
enum Negatives {
    Roi,
    Uniform,
    Both,
}

#[derive(Args)]
struct CeilingArgs {
    #[arg(long, value_enum)]
    kind: CeilingKind,
    #[arg(long, value_enum, default_value = "trained")]
    source: CeilingSource,
    /// Seed directories holding train.gmil, val.gmil, test.gmil (and
    /// config.json for the oracle source).
    #[arg(long, required = true, num_args = 1..)]
    data: Vec<PathBuf>,
    /// Window length for the instance ceiling; defaults to the rounded mean
    /// block length of the training bags.
    #[arg(long)]
    window: Option<usize>,
    #[arg(long, default_value_t = ceilings::DEFAULT_CHANNELS)]
    channels: usize,
    /// Negative-bag pooling for the bag ceiling.
    #[arg(long, value_enum, default_value = "both")]
    negatives: Negatives,
    /// Training config JSON (same schema as an experiment's "train").
    #[arg(long)]
    train_config: Option<PathBuf>,
    #[arg(long)]
    desk_scale: bool,
}

#[derive(Args)]
struct OracleArgs {
    /// Seed directories written by `generate`.
    #[arg(long, required = true, num_args = 1..)]
    data: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitName,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitName {
    Train,
    Val,
    Test,
}

impl SplitName {
    fn split(self) -> Split {
        match self {
            SplitName::Train => Split::Train,
            SplitName::Val => Split::Val,
            SplitName::Test => Split::Test,
        }
    }
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    bags: PathBuf,
    #[arg(long, conflicts_with = "baseline", required_unless_present = "baseline")]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    baseline: Option<String>,
    #[arg(long)]
    out: PathBuf,
    /// Export at most this many bags.
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long)]
    positive_only: bool,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_)
        | Error::Validation(_)
        | Error::Dimension(_)
        | Error::BadMagic
        | Error::UnsupportedVersion(_)
        | Error::Truncated(_) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Generate(a) => generate(a),
        Command::Split(a) => split(a),
        Command::Run(a) => run(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Ceiling(a) => ceiling(a),
        Command::Oracle(a) => oracle(a),
        Command::ExportAttention(a) => export(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

type Result<T> = attnguide::Result<T>;

fn generate(a: GenerateArgs) -> Result<()> {
    let mut cfg = SynthConfig::default();
    if a.desk_scale {
        cfg.n_train = 2000;
    }
    macro_rules! set {
        ($($flag:ident => $field:ident),*) => {$( if let Some(v) = a.$flag { cfg.$field = v; } )*};
    }
    set!(n_train => n_train, n_val => n_val, n_test => n_test, m => dim, r => block_len,
         delta => delta, s_min => s_min, s_max => s_max, prior => bag_prior, seed => seed);
    cfg.validate()?;
    if a.seeds == 0 {
        return Err(Error::Config("--seeds must be at least 1".into()));
    }
    let written = experiment::generate_seeds(&cfg, a.seeds, &a.out)?;
    println!(
        "wrote {} seed directories under {} ({} bag files)",
        written.len(),
        a.out.display(),
        3 * written.len()
    );
    Ok(())
}

fn parse_ratios(s: &str) -> Result<(u32, u32, u32)> {
    let parts: Vec<u32> = s
        .split(',')
        .map(|p| p.trim().parse::<u32>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Config(format!("bad ratios {s:?}")))?;
    match parts[..] {
        [t, v, te] => Ok((t, v, te)),
        _ => Err(Error::Config(format!("ratios need three parts, got {s:?}"))),
    }
}

fn split(a: SplitArgs) -> Result<()> {
    let ratios = if a.ratios == "4,1,1" { DEFAULT_RATIOS } else { parse_ratios(&a.ratios)? };
    let ds = split_by_patient(&load_bags(&a.bags)?, ratios, a.seed)?;
    fs::create_dir_all(&a.out)?;
    for s in Split::ALL {
        let part = ds.subset(s);
        save_bags(&part, a.out.join(format!("{}.gmil", s.name())))?;
        println!("{:<5} {} bags", s.name(), part.len());
    }
    Ok(())
}

fn run(a: RunArgs) -> Result<()> {
    let mut cfg = ExperimentConfig::load(&a.config)?;
    if a.desk_scale {
        cfg.train = cfg.train.desk_scale();
    }
    match a.sweep {
        Some(s) => {
            let sweep = Sweep::parse(&s)?;
            let (_, table) = experiment::run_sweep(&cfg, &sweep)?;
            print!("{table}");
        }
        None => {
            let report = experiment::run_experiment(&cfg)?;
            print!("{}", MetricsReport::table(&[(&report.label, &report.metrics)]));
        }
    }
    Ok(())
}

fn print_report(label: &str, per_seed: Vec<SeedMetrics>, json: Option<&Path>) -> Result<()> {
    let report = aggregate_seeds(per_seed)?;
    print!("{}", MetricsReport::table(&[(label, &report)]));
    if let Some(path) = json {
        fs::write(path, serde_json::to_string_pretty(&report)? + "\n")?;
    }
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let model = a.checkpoint.as_ref().map(load_checkpoint).transpose()?;
    let baseline = a.baseline.as_deref().map(Baseline::parse).transpose()?;
    let mut per_seed = Vec::new();
    for path in &a.bags {
        let test = load_bags(path)?;
        per_seed.push(match (&model, baseline) {
            (Some(m), _) => experiment::evaluate_model(m, &test)?,
            (None, Some(b)) => experiment::evaluate_baseline(b, &test)?,
            (None, None) => unreachable!("clap requires one source"),
        });
    }
    let label = match (&model, baseline) {
        (Some(m), _) => m.spec.label(),
        (None, Some(b)) => format!("{b:?}"),
        (None, None) => unreachable!(),
    };
    print_report(&label, per_seed, a.json.as_deref())
}

struct SeedDir {
    train: Option<Dataset>,
    val: Option<Dataset>,
    test: Dataset,
    synth: Option<SynthConfig>,
}

fn load_seed_dir(dir: &Path, need_train: bool) -> Result<SeedDir> {
    let sidecar = dir.join("config.json");
    let synth = if sidecar.exists() { Some(experiment::load_sidecar(&sidecar)?.synth) } else { None };
    let load = |name: &str| load_bags(dir.join(name));
    Ok(SeedDir {
        train: if need_train { Some(load("train.gmil")?) } else { None },
        val: if need_train { Some(load("val.gmil")?) } else { None },
        test: load("test.gmil")?,
        synth,
    })
}

fn train_config(a: &CeilingArgs) -> Result<TrainConfig> {
    let mut cfg = match &a.train_config {
        Some(p) => serde_json::from_str(&fs::read_to_string(p)?)
            .map_err(|e| Error::Config(format!("train config: {e}")))?,
        None => TrainConfig::default(),
    };
    if a.desk_scale {
        cfg = cfg.desk_scale();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn ceiling(a: CeilingArgs) -> Result<()> {
    let trained = matches!(a.source, CeilingSource::Trained);
    let cfg = if trained { Some(train_config(&a)?) } else { None };
    let variants: Vec<NegativePooling> = match a.negatives {
        Negatives::Roi => vec![NegativePooling::RoiMatched],
        Negatives::Uniform => vec![NegativePooling::Uniform],
        Negatives::Both => vec![NegativePooling::RoiMatched, NegativePooling::Uniform],
    };
    let mut rows: Vec<(String, Vec<SeedMetrics>)> = Vec::new();
    let mut push = |label: String, m: SeedMetrics| match rows.iter_mut().find(|(l, _)| *l == label) {
        Some((_, v)) => v.push(m),
        None => rows.push((label, vec![m])),
    };
    for (k, dir) in a.data.iter().enumerate() {
        let seed = load_seed_dir(dir, trained)?;
        let blank = SeedMetrics {
            bag_auroc: None,
            bag_auprc: None,
            loc_auroc: None,
            loc_auprc: None,
            n_bags_evaluated: 0,
            n_bags_skipped: 0,
        };
        let (train_set, val_set) = (seed.train.as_ref(), seed.val.as_ref());
        match (a.kind, cfg.as_ref()) {
            (_, None) => {
                let synth = seed.synth.as_ref().ok_or_else(|| {
                    Error::Validation(format!("{}: oracle ceilings need a generator config.json", dir.display()))
                })?;
                let m = experiment::evaluate_oracle(&seed.test, synth)?;
                match a.kind {
                    CeilingKind::Instance => push(
                        "Instance oracle".into(),
                        SeedMetrics {
                            loc_auroc: m.loc_auroc,
                            loc_auprc: m.loc_auprc,
                            n_bags_evaluated: m.n_bags_evaluated,
                            n_bags_skipped: m.n_bags_skipped,
                            ..blank
                        },
                    ),
                    CeilingKind::Bag => push(
                        "Bag oracle".into(),
                        SeedMetrics {
                            bag_auroc: m.bag_auroc,
                            bag_auprc: m.bag_auprc,
                            ..blank
                        },
                    ),
                }
            }
            (CeilingKind::Instance, Some(cfg)) => {
                let window = match a.window {
                    Some(w) => w,
                    None => ceilings::block_stats(train_set.expect("loaded"))?.r_estimate.max(1),
                };
                let cfg = TrainConfig {
                    seed: cfg.seed + k as u64,
                    ..cfg.clone()
                };
                let out = ceilings::instance_ceiling(train_set.expect("loaded"), val_set.expect("loaded"), &seed.test, window, a.channels, &cfg)?;
                push(
                    format!("Instance ceiling (R={window})"),
                    SeedMetrics {
                        loc_auroc: Some(out.test.auroc),
                        loc_auprc: Some(out.test.auprc),
                        n_bags_evaluated: out.test.n_bags_evaluated,
                        n_bags_skipped: out.test.n_bags_skipped,
                        ..blank
                    },
                );
            }
            (CeilingKind::Bag, Some(cfg)) => {
                let cfg = TrainConfig {
                    seed: cfg.seed + k as u64,
                    ..cfg.clone()
                };
                for &neg in &variants {
                    let out = ceilings::bag_ceiling(train_set.expect("loaded"), val_set.expect("loaded"), &seed.test, neg, &cfg)?;
                    push(
                        format!("Bag ceiling ({neg:?} negatives)"),
                        SeedMetrics {
                            bag_auroc: Some(out.test_auroc),
                            bag_auprc: Some(out.test_auprc),
                            ..blank.clone()
                        },
                    );
                }
            }
        }
    }
    let reports: Vec<(String, MetricsReport)> = rows
        .into_iter()
        .map(|(l, m)| Ok((l, aggregate_seeds(m)?)))
        .collect::<Result<_>>()?;
    let table: Vec<(&str, &MetricsReport)> = reports.iter().map(|(l, r)| (l.as_str(), r)).collect();
    print!("{}", MetricsReport::table(&table));
    Ok(())
}

fn oracle(a: OracleArgs) -> Result<()> {
    let mut per_seed = Vec::new();
    for dir in &a.data {
        let sidecar = experiment::load_sidecar(dir.join("config.json"))?;
        let data = load_bags(dir.join(format!("{}.gmil", a.split.split().name())))?;
        let stats = ceilings::block_stats(&data)?;
        println!(
            "{}: {} bags, blocks per bag {:?}, mean block length {:.3}, R estimate {}",
            dir.display(),
            data.len(),
            stats.blocks_per_bag,
            stats.block_length.mean,
            stats.r_estimate
        );
        per_seed.push(experiment::evaluate_oracle(&data, &sidecar.synth)?);
    }
    print_report("Bayes oracle", per_seed, None)
}

fn export(a: ExportArgs) -> Result<()> {
    let model = a.checkpoint.as_ref().map(load_checkpoint).transpose()?;
    let baseline = a.baseline.as_deref().map(Baseline::parse).transpose()?;
    let mut data = load_bags(&a.bags)?;
    if a.positive_only {
        data.bags.retain(|b| b.bag_label);
    }
    if let Some(n) = a.limit {
        data.bags.truncate(n);
    }
    let n = experiment::export_attention(model.as_ref(), baseline, &data, &a.out)?;
    println!("exported {n} bags to {}", a.out.display());
    Ok(())
}
