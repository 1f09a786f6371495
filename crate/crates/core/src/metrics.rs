//! AUROC / AUPRC with explicit tie handling, macro-averaged localization
//! over positive bags, and aggregation across seeds.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::bagio::Bag;
use crate::error::{Error, Result};

/// Mann-Whitney AUROC; a tied positive/negative pair counts one half.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric("AUROC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // midranks over tie groups
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut k = i;
        while k + 1 < order.len() && scores[order[k + 1]] == scores[order[i]] {
            k += 1;
        }
        let midrank = (i + k) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=k] {
            if labels[idx] {
                rank_sum_pos += midrank;
            }
        }
        i = k + 1;
    }
    let n_pos = n_pos as f64;
    let u = rank_sum_pos - n_pos * (n_pos + 1.0) / 2.0;
    Ok(u / (n_pos * n_neg as f64))
}

/// Non-interpolated average precision. Equal scores enter the ranking as one
/// group, so constant scores give the prevalence.
pub fn auprc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    if n_pos == 0 {
        return Err(Error::UndefinedMetric("AUPRC needs at least one positive".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut area = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut k = i;
        while k + 1 < order.len() && scores[order[k + 1]] == scores[order[i]] {
            k += 1;
        }
        let group_tp = order[i..=k].iter().filter(|&&idx| labels[idx]).count();
        tp += group_tp;
        fp += k + 1 - i - group_tp;
        if group_tp > 0 {
            area += (group_tp as f64 / n_pos as f64) * (tp as f64 / (tp + fp) as f64);
        }
        i = k + 1;
    }
    Ok(area)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Mean and sample standard deviation (zero for a single value).
    pub fn of(values: &[f64]) -> Option<MeanStd> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(MeanStd { mean, std })
    }

    pub fn display(&self) -> String {
        format!("{:.3}±{:.3}", self.mean, self.std)
    }
}

/// Localization and bag metrics for one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub bag_auroc: Option<f64>,
    pub bag_auprc: Option<f64>,
    pub loc_auroc: Option<f64>,
    pub loc_auprc: Option<f64>,
    pub n_bags_evaluated: usize,
    pub n_bags_skipped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub bag_auroc: Option<MeanStd>,
    pub bag_auprc: Option<MeanStd>,
    pub loc_auroc: Option<MeanStd>,
    pub loc_auprc: Option<MeanStd>,
    pub per_seed: Vec<SeedMetrics>,
    pub n_bags_evaluated: usize,
    pub n_bags_skipped: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Localization {
    pub auroc: f64,
    pub auprc: f64,
    pub n_bags_evaluated: usize,
    pub n_bags_skipped: usize,
}

/// Macro-averaged localization over positive bags that contain both
/// instance classes. `attention` is indexed like `bags`; entries for
/// negative bags are never read.
pub fn localization<A: AsRef<[f64]>>(bags: &[Bag], attention: &[A]) -> Result<Localization> {
    if bags.len() != attention.len() {
        return Err(Error::Dimension(format!(
            "{} bags vs {} attention vectors",
            bags.len(),
            attention.len()
        )));
    }
    let mut rocs = Vec::new();
    let mut prcs = Vec::new();
    let mut skipped = 0;
    for (bag, att) in bags.iter().zip(attention) {
        if !bag.bag_label {
            continue;
        }
        let labels = bag.instance_labels.as_ref().ok_or_else(|| {
            Error::Validation(format!("bag {} has no instance labels", bag.bag_id))
        })?;
        let att = att.as_ref();
        if att.len() != labels.len() {
            return Err(Error::Dimension(format!(
                "bag {}: {} attention weights for {} instances",
                bag.bag_id,
                att.len(),
                labels.len()
            )));
        }
        if labels.iter().all(|&l| l) {
            skipped += 1;
            continue;
        }
        rocs.push(auroc(att, labels)?);
        prcs.push(auprc(att, labels)?);
    }
    if rocs.is_empty() {
        return Err(Error::UndefinedMetric("no positive bags with both instance classes".into()));
    }
    let n = rocs.len() as f64;
    Ok(Localization {
        auroc: rocs.iter().sum::<f64>() / n,
        auprc: prcs.iter().sum::<f64>() / n,
        n_bags_evaluated: rocs.len(),
        n_bags_skipped: skipped,
    })
}

/// Bag-level and (optionally) localization metrics for one seed.
/// `probabilities` may be `None` for score-free baselines.
pub fn seed_metrics<A: AsRef<[f64]>>(
    bags: &[Bag],
    probabilities: Option<&[f64]>,
    attention: Option<&[A]>,
) -> Result<SeedMetrics> {
    let (bag_auroc, bag_auprc) = match probabilities {
        Some(p) => {
            let labels: Vec<bool> = bags.iter().map(|b| b.bag_label).collect();
            (Some(auroc(p, &labels)?), Some(auprc(p, &labels)?))
        }
        None => (None, None),
    };
    let loc = attention.map(|a| localization(bags, a)).transpose()?;
    Ok(SeedMetrics {
        bag_auroc,
        bag_auprc,
        loc_auroc: loc.map(|l| l.auroc),
        loc_auprc: loc.map(|l| l.auprc),
        n_bags_evaluated: loc.map_or(0, |l| l.n_bags_evaluated),
        n_bags_skipped: loc.map_or(0, |l| l.n_bags_skipped),
    })
}

pub fn aggregate_seeds(per_seed: Vec<SeedMetrics>) -> Result<MetricsReport> {
    if per_seed.is_empty() {
        return Err(Error::Validation("no per-seed reports to aggregate".into()));
    }
    let collect = |f: fn(&SeedMetrics) -> Option<f64>| -> Option<MeanStd> {
        let vals: Option<Vec<f64>> = per_seed.iter().map(f).collect();
        vals.and_then(|v| MeanStd::of(&v))
    };
    Ok(MetricsReport {
        bag_auroc: collect(|s| s.bag_auroc),
        bag_auprc: collect(|s| s.bag_auprc),
        loc_auroc: collect(|s| s.loc_auroc),
        loc_auprc: collect(|s| s.loc_auprc),
        n_bags_evaluated: per_seed.iter().map(|s| s.n_bags_evaluated).sum(),
        n_bags_skipped: per_seed.iter().map(|s| s.n_bags_skipped).sum(),
        per_seed,
    })
}

impl MetricsReport {
    /// Aligned text table, one row per labeled report.
    pub fn table(rows: &[(&str, &MetricsReport)]) -> String {
        let cell = |m: &Option<MeanStd>| m.map_or_else(|| "-".to_string(), |v| v.display());
        let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(6).max(6);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<width$}  {:>13}  {:>13}  {:>13}  {:>13}",
            "Method", "Loc AUROC", "Loc AUPRC", "Bag AUROC", "Bag AUPRC"
        );
        for (name, r) in rows {
            let _ = writeln!(
                out,
                "{:<width$}  {:>13}  {:>13}  {:>13}  {:>13}",
                name,
                cell(&r.loc_auroc),
                cell(&r.loc_auprc),
                cell(&r.bag_auroc),
                cell(&r.bag_auprc)
            );
        }
        out
    }
}
