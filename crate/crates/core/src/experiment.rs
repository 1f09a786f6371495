//! Config-driven runs: training or grid search over one or more data seeds,
//! parameter sweeps, score-free baselines and attention export. Everything
//! written here is deterministic given the config.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bagio::{load_bags, Dataset};
use crate::error::{Error, Result};
use crate::guidance::{centered_gaussian_reference, Divergence, GuidanceSpec};
use crate::metrics::{aggregate_seeds, seed_metrics, MetricsReport, SeedMetrics};
use crate::models::{save_checkpoint, Model, ModelSpec};
use crate::synth::{self, SynthConfig};
use crate::train::{grid_search, train, TrainConfig, TrainOutcome};

/// Train/val/test bag files of one data seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedData {
    pub train: PathBuf,
    pub val: PathBuf,
    pub test: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Row label in reports; defaults to the model label.
    #[serde(default)]
    pub name: Option<String>,
    pub model: ModelSpec,
    /// Omit for an unguided run.
    #[serde(default)]
    pub guidance: Option<GuidanceSpec>,
    #[serde(default)]
    pub train: TrainConfig,
    /// Search the learning-rate × L1 grid instead of a single run.
    #[serde(default)]
    pub grid: bool,
    pub data: Vec<SeedData>,
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    /// Parses and validates a config; relative paths resolve against `base`.
    pub fn from_json(text: &str, base: &Path) -> Result<Self> {
        let mut cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("experiment config: {e}")))?;
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for d in &mut cfg.data {
            fix(&mut d.train);
            fix(&mut d.val);
            fix(&mut d.test);
        }
        fix(&mut cfg.output_dir);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_json(&fs::read_to_string(path)?, base)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if let Some(g) = &self.guidance {
            g.validate()?;
        }
        self.train.validate()?;
        if self.data.is_empty() {
            return Err(Error::Config("experiment lists no data seeds".into()));
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        self.name.clone().unwrap_or_else(|| {
            let mut l = self.model.label();
            if let Some(g) = &self.guidance {
                let _ = write!(l, "+NG({}, λ={})", g.divergence.short_name(), g.lambda);
            }
            l
        })
    }
}

#[derive(Debug, Clone)]
pub struct SeedRun {
    pub outcome: TrainOutcome,
    pub metrics: SeedMetrics,
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub label: String,
    pub seeds: Vec<SeedRun>,
    pub metrics: MetricsReport,
}

/// Test-set probabilities and attention of a model.
pub fn evaluate_model(model: &Model, test: &Dataset) -> Result<SeedMetrics> {
    let outs: Vec<_> = test
        .bags
        .par_iter()
        .map(|b| model.forward(&b.features_f64()))
        .collect::<Result<_>>()?;
    let probs: Vec<f64> = outs.iter().map(|o| o.probability).collect();
    let att: Vec<&[f64]> = outs.iter().map(|o| o.attention.as_slice()).collect();
    seed_metrics(&test.bags, Some(&probs), Some(&att))
}

fn json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

/// Runs every data seed and writes, under `output_dir`:
/// `seed{k}/model.ckpt` (+ sidecar), `seed{k}/history.csv`,
/// `seed{k}/grid.csv` for grid runs, `seed{k}/metrics.json`, and the
/// aggregate `metrics.json` and `metrics.txt`.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    config.validate()?;
    fs::create_dir_all(&config.output_dir)?;
    let mut seeds = Vec::with_capacity(config.data.len());
    for (k, data) in config.data.iter().enumerate() {
        let train_set = load_bags(&data.train)?;
        let val_set = load_bags(&data.val)?;
        let test_set = load_bags(&data.test)?;
        let train_cfg = TrainConfig {
            seed: config.train.seed + k as u64,
            ..config.train.clone()
        };
        let dir = config.output_dir.join(format!("seed{k}"));
        fs::create_dir_all(&dir)?;
        let outcome = if config.grid {
            let g = grid_search(&config.model, config.guidance.as_ref(), &train_cfg, &train_set, &val_set)?;
            fs::write(dir.join("grid.csv"), g.to_csv())?;
            g.best
        } else {
            train(&config.model, config.guidance.as_ref(), &train_cfg, &train_set, &val_set)?
        };
        let metrics = evaluate_model(&outcome.model, &test_set)?;
        save_checkpoint(&outcome.model, dir.join("model.ckpt"))?;
        fs::write(dir.join("history.csv"), outcome.history.to_csv())?;
        fs::write(dir.join("metrics.json"), json(&metrics)?)?;
        seeds.push(SeedRun { outcome, metrics });
    }
    let label = config.label();
    let metrics = aggregate_seeds(seeds.iter().map(|s| s.metrics.clone()).collect())?;
    fs::write(config.output_dir.join("metrics.json"), json(&metrics)?)?;
    fs::write(config.output_dir.join("metrics.txt"), MetricsReport::table(&[(&label, &metrics)]))?;
    Ok(ExperimentReport { label, seeds, metrics })
}

/// One axis of a sensitivity sweep.
#[derive(Debug, Clone, PartialEq)]
pub enum Sweep {
    Lambda(Vec<f64>),
    Divergence(Vec<Divergence>),
}

impl Sweep {
    /// `lambda=1e-2..1e2` (decades, inclusive), `lambda=0.1,1,10` or
    /// `divergence=se,fkl,rkl`.
    pub fn parse(s: &str) -> Result<Sweep> {
        let (key, values) = s
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("sweep {s:?} is not key=values")))?;
        let num = |v: &str| -> Result<f64> {
            v.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("bad number {v:?} in sweep")))
        };
        match key.trim() {
            "lambda" => {
                if let Some((lo, hi)) = values.split_once("..") {
                    let (lo, hi) = (num(lo)?, num(hi)?);
                    if !(lo > 0.0 && hi >= lo) {
                        return Err(Error::Config("lambda range must satisfy 0 < lo <= hi".into()));
                    }
                    let (a, b) = (lo.log10().round() as i32, hi.log10().round() as i32);
                    Ok(Sweep::Lambda((a..=b).map(|e| 10f64.powi(e)).collect()))
                } else {
                    Ok(Sweep::Lambda(values.split(',').map(num).collect::<Result<_>>()?))
                }
            }
            "divergence" => Ok(Sweep::Divergence(
                values.split(',').map(|v| Divergence::parse(v.trim())).collect::<Result<_>>()?,
            )),
            other => Err(Error::Config(format!("unknown sweep parameter {other:?}"))),
        }
    }

    /// Derived configs in sweep order, each writing to its own subdirectory.
    pub fn configs(&self, base: &ExperimentConfig) -> Vec<(String, ExperimentConfig)> {
        let guidance = base.guidance.clone().unwrap_or_default();
        let make = |name: String, g: GuidanceSpec| {
            let mut c = base.clone();
            c.output_dir = base.output_dir.join(&name);
            c.guidance = Some(g);
            c.name = Some(name.clone());
            (name, c)
        };
        match self {
            Sweep::Lambda(values) => values
                .iter()
                .map(|&l| {
                    make(
                        format!("lambda={l}"),
                        GuidanceSpec {
                            lambda: l,
                            ..guidance.clone()
                        },
                    )
                })
                .collect(),
            Sweep::Divergence(values) => values
                .iter()
                .map(|&d| {
                    make(
                        format!("divergence={}", d.short_name()),
                        GuidanceSpec {
                            divergence: d,
                            ..guidance.clone()
                        },
                    )
                })
                .collect(),
        }
    }
}

/// Runs each sweep cell in order and writes `sweep.txt` with one row per cell.
pub fn run_sweep(base: &ExperimentConfig, sweep: &Sweep) -> Result<(Vec<ExperimentReport>, String)> {
    let mut reports = Vec::new();
    for (_, cfg) in sweep.configs(base) {
        reports.push(run_experiment(&cfg)?);
    }
    let rows: Vec<(&str, &MetricsReport)> = reports.iter().map(|r| (r.label.as_str(), &r.metrics)).collect();
    let table = MetricsReport::table(&rows);
    fs::create_dir_all(&base.output_dir)?;
    fs::write(base.output_dir.join("sweep.txt"), &table)?;
    Ok((reports, table))
}

/// Image-agnostic attention baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    Uniform,
    CenteredGaussian,
}

impl Baseline {
    pub fn attention(self, s: usize) -> Vec<f64> {
        match self {
            Baseline::Uniform => vec![1.0 / s as f64; s],
            Baseline::CenteredGaussian => centered_gaussian_reference(s).r,
        }
    }

    pub fn parse(s: &str) -> Result<Baseline> {
        match s {
            "uniform" => Ok(Baseline::Uniform),
            "centered_gaussian" | "centered-gaussian" | "cg" => Ok(Baseline::CenteredGaussian),
            other => Err(Error::Config(format!("unknown baseline {other:?}"))),
        }
    }
}

/// Localization of a baseline on one test set; there are no bag scores.
pub fn evaluate_baseline(baseline: Baseline, test: &Dataset) -> Result<SeedMetrics> {
    let att: Vec<Vec<f64>> = test.bags.iter().map(|b| baseline.attention(b.len())).collect();
    seed_metrics(&test.bags, None, Some(&att))
}

/// Bayes instance and bag posteriors as attention and probabilities.
pub fn evaluate_oracle(test: &Dataset, config: &SynthConfig) -> Result<SeedMetrics> {
    let (inst, bag) = crate::ceilings::oracle_posteriors(test, config)?;
    seed_metrics(&test.bags, Some(&bag), Some(&inst))
}

/// JSON written next to generated bag files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratedSidecar {
    pub synth: SynthConfig,
    pub split_seed: u64,
    pub files: SeedData,
}

/// Writes `seed{k}/{train,val,test}.gmil` and `seed{k}/config.json` for
/// k in 0..n_seeds.
pub fn generate_seeds(config: &SynthConfig, n_seeds: u64, out: &Path) -> Result<Vec<GeneratedSidecar>> {
    config.validate()?;
    let mut written = Vec::new();
    for k in 0..n_seeds {
        let dir = out.join(format!("seed{k}"));
        fs::create_dir_all(&dir)?;
        let files = SeedData {
            train: PathBuf::from("train.gmil"),
            val: PathBuf::from("val.gmil"),
            test: PathBuf::from("test.gmil"),
        };
        for (split, name) in crate::bagio::Split::ALL.into_iter().zip([&files.train, &files.val, &files.test]) {
            let ds = synth::generate_split(config, k, split)?;
            crate::bagio::save_bags(&ds, dir.join(name))?;
        }
        let sidecar = GeneratedSidecar {
            synth: config.clone(),
            split_seed: k,
            files,
        };
        fs::write(dir.join("config.json"), json(&sidecar)?)?;
        written.push(sidecar);
    }
    Ok(written)
}

pub fn load_sidecar(path: impl AsRef<Path>) -> Result<GeneratedSidecar> {
    serde_json::from_str(&fs::read_to_string(path)?).map_err(|e| Error::Config(format!("sidecar: {e}")))
}

/// Per-bag attention curve: `j,attention[,head_h...],instance_label`.
pub fn attention_csv(attention: &[f64], heads: Option<&ndarray::Array2<f64>>, labels: Option<&[bool]>) -> String {
    let mut out = String::from("j,attention");
    if let Some(h) = heads {
        for k in 0..h.nrows() {
            let _ = write!(out, ",head_{k}");
        }
    }
    out.push_str(",instance_label\n");
    for (j, a) in attention.iter().enumerate() {
        let _ = write!(out, "{j},{a}");
        if let Some(h) = heads {
            for k in 0..h.nrows() {
                let _ = write!(out, ",{}", h[[k, j]]);
            }
        }
        let label = labels.map_or(String::new(), |l| (l[j] as u8).to_string());
        let _ = writeln!(out, ",{label}");
    }
    out
}

/// Static line plot of one or more curves over instance index, with
/// positive instances shaded.
pub fn attention_svg(curves: &[(&str, &[f64])], labels: Option<&[bool]>) -> String {
    const W: f64 = 640.0;
    const H: f64 = 240.0;
    const PAD: f64 = 30.0;
    const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];
    let n = curves.iter().map(|(_, c)| c.len()).max().unwrap_or(0);
    let top = curves
        .iter()
        .flat_map(|(_, c)| c.iter().copied())
        .fold(0.0f64, f64::max)
        .max(1e-12);
    let x = |j: usize| PAD + (W - 2.0 * PAD) * if n > 1 { j as f64 / (n - 1) as f64 } else { 0.5 };
    let y = |v: f64| H - PAD - (H - 2.0 * PAD) * v / top;
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n"
    );
    if let Some(l) = labels {
        let step = if n > 1 { (W - 2.0 * PAD) / (n - 1) as f64 } else { W - 2.0 * PAD };
        for (j, _) in l.iter().enumerate().filter(|(_, &p)| p) {
            let _ = writeln!(
                svg,
                "  <rect x=\"{:.2}\" y=\"{PAD}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"#f2d0d0\"/>",
                x(j) - step / 2.0,
                step,
                H - 2.0 * PAD
            );
        }
    }
    let _ = writeln!(
        svg,
        "  <line x1=\"{PAD}\" y1=\"{0}\" x2=\"{1}\" y2=\"{0}\" stroke=\"black\"/>",
        H - PAD,
        W - PAD
    );
    for (i, (name, c)) in curves.iter().enumerate() {
        let pts: Vec<String> = c.iter().enumerate().map(|(j, &v)| format!("{:.2},{:.2}", x(j), y(v))).collect();
        let color = COLORS[i % COLORS.len()];
        let _ = writeln!(
            svg,
            "  <polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>",
            pts.join(" ")
        );
        let _ = writeln!(
            svg,
            "  <text x=\"{}\" y=\"{}\" font-size=\"11\" fill=\"{color}\">{name}</text>",
            PAD + 4.0,
            PAD - 8.0 + 12.0 * i as f64
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// Writes `<bag_id>.csv` and `<bag_id>.svg` for every bag of `data`.
/// `source` is a checkpointed model or a baseline.
pub fn export_attention(model: Option<&Model>, baseline: Option<Baseline>, data: &Dataset, out: &Path) -> Result<usize> {
    fs::create_dir_all(out)?;
    for bag in &data.bags {
        let labels = bag.instance_labels.as_deref();
        let (att, heads, name) = match (model, baseline) {
            (Some(m), None) => {
                if bag.dim() != m.spec.model_dim {
                    return Err(Error::Dimension(format!(
                        "bag {} has M = {}, checkpoint expects {}",
                        bag.bag_id,
                        bag.dim(),
                        m.spec.model_dim
                    )));
                }
                let f = m.forward(&bag.features_f64())?;
                (f.attention, f.head_attention, m.spec.label())
            }
            (None, Some(b)) => (b.attention(bag.len()), None, format!("{b:?}")),
            _ => return Err(Error::Config("export needs exactly one of a model or a baseline".into())),
        };
        let safe: String = bag
            .bag_id
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
            .collect();
        fs::write(out.join(format!("{safe}.csv")), attention_csv(&att, heads.as_ref(), labels))?;
        fs::write(out.join(format!("{safe}.svg")), attention_svg(&[(&name, &att)], labels))?;
    }
    Ok(data.len())
}
