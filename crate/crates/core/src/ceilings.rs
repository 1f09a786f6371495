//! Best-in-class ceilings that use instance labels unfairly: block
//! statistics, a windowed instance classifier and label-pooled bag
//! classification. On the shifted-mean benchmark the ceilings are the exact
//! Bayes posteriors from [`crate::synth`].

use std::collections::{BTreeMap, HashMap};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Matrix};
use crate::bagio::{Bag, Dataset};
use crate::error::{Error, Result};
use crate::guidance::label_reference;
use crate::metrics::{auroc, auprc, localization, Localization};
use crate::models::Params;
use crate::numeric::sigmoid;
use crate::synth::{self, SynthConfig};
use crate::train::{fit, TrainConfig, TrainHistory};

/// Runs of negatives at most this long do not split a block.
pub const MAX_GAP: usize = 3;

/// (start, end inclusive, positives) of each merged block.
pub fn find_blocks(labels: &[bool]) -> Vec<(usize, usize, usize)> {
    let mut blocks: Vec<(usize, usize, usize)> = Vec::new();
    for (j, &l) in labels.iter().enumerate() {
        if !l {
            continue;
        }
        match blocks.last_mut() {
            Some((_, end, count)) if j - *end - 1 <= MAX_GAP => {
                *end = j;
                *count += 1;
            }
            _ => blocks.push((j, j, 1)),
        }
    }
    blocks
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Distribution {
    pub mean: f64,
    pub min: f64,
    pub p5: f64,
    pub p25: f64,
    pub p50: f64,
    pub p75: f64,
    pub p95: f64,
    pub max: f64,
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

impl Distribution {
    fn of(values: &[f64]) -> Distribution {
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        Distribution {
            mean: v.iter().sum::<f64>() / v.len() as f64,
            min: v[0],
            p5: percentile(&v, 0.05),
            p25: percentile(&v, 0.25),
            p50: percentile(&v, 0.5),
            p75: percentile(&v, 0.75),
            p95: percentile(&v, 0.95),
            max: v[v.len() - 1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockStats {
    /// Number of bags having k blocks, keyed by k.
    pub blocks_per_bag: BTreeMap<usize, usize>,
    pub bags_with_blocks: usize,
    /// Positive instances per block.
    pub block_length: Distribution,
    /// Positive instances of a block over bag size.
    pub block_fraction: Distribution,
    /// Rounded mean block length, the instance-ceiling window.
    pub r_estimate: usize,
}

pub fn block_stats(dataset: &Dataset) -> Result<BlockStats> {
    let mut blocks_per_bag = BTreeMap::new();
    let mut lengths = Vec::new();
    let mut fractions = Vec::new();
    for bag in &dataset.bags {
        let labels = bag.instance_labels.as_ref().ok_or_else(|| {
            Error::Validation(format!("bag {} has no instance labels", bag.bag_id))
        })?;
        let blocks = find_blocks(labels);
        if blocks.is_empty() {
            continue;
        }
        *blocks_per_bag.entry(blocks.len()).or_insert(0) += 1;
        for &(_, _, count) in &blocks {
            lengths.push(count as f64);
            fractions.push(count as f64 / labels.len() as f64);
        }
    }
    if lengths.is_empty() {
        return Err(Error::Validation("no positive instances".into()));
    }
    let block_length = Distribution::of(&lengths);
    Ok(BlockStats {
        bags_with_blocks: blocks_per_bag.values().sum(),
        blocks_per_bag,
        block_length,
        block_fraction: Distribution::of(&fractions),
        r_estimate: block_length.mean.round() as usize,
    })
}

/// Row j holds instances j - floor(R/2) .. j + R - 1 - floor(R/2),
/// zero-padded at the edges.
pub fn window_matrix(features: &Matrix, r: usize) -> Matrix {
    let (s, m) = features.dim();
    let before = r / 2;
    let mut out = Matrix::zeros((s, r * m));
    for j in 0..s {
        for t in 0..r {
            let src = j as isize + t as isize - before as isize;
            if src < 0 || src >= s as isize {
                continue;
            }
            out.slice_mut(ndarray::s![j, t * m..(t + 1) * m])
                .assign(&features.row(src as usize));
        }
    }
    out
}

/// Kernel-R convolution over the instance sequence followed by a linear head.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowClassifier {
    pub window: usize,
    pub channels: usize,
    pub params: Params,
}

pub const DEFAULT_CHANNELS: usize = 64;

impl WindowClassifier {
    pub fn init(dim: usize, window: usize, channels: usize, seed: u64) -> Result<Self> {
        if window == 0 || channels == 0 || dim == 0 {
            return Err(Error::Config("window, channels and dim must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut normal = |rows: usize, cols: usize, fan_in: usize| {
            let std = 1.0 / (fan_in as f64).sqrt();
            Matrix::from_shape_simple_fn((rows, cols), || rng.sample::<f64, _>(rand_distr::StandardNormal) * std)
        };
        let mut params = Params::default();
        params.insert("conv.weight", normal(channels, window * dim, window * dim));
        params.insert("conv.bias", Matrix::zeros((1, channels)));
        params.insert("head.weight", normal(1, channels, channels));
        params.insert("head.bias", Matrix::zeros((1, 1)));
        Ok(WindowClassifier {
            window,
            channels,
            params,
        })
    }

    fn graph(params: &Params, windows: &Matrix) -> Result<(Graph, BTreeMap<&'static str, crate::autodiff::Var>, crate::autodiff::Var)> {
        let mut g = Graph::new();
        let mut vars = BTreeMap::new();
        for name in ["conv.weight", "conv.bias", "head.weight", "head.bias"] {
            vars.insert(name, g.param(params.get(name)?.clone()));
        }
        let x = g.constant(windows.clone());
        let hidden = g.matmul_t(x, vars["conv.weight"]);
        let hidden = g.add_row(hidden, vars["conv.bias"]);
        let logits = g.matmul_t(hidden, vars["head.weight"]);
        let logits = g.add_row(logits, vars["head.bias"]);
        Ok((g, vars, logits))
    }

    pub fn scores(&self, features: &Matrix) -> Result<Vec<f64>> {
        let (g, _, logits) = Self::graph(&self.params, &window_matrix(features, self.window))?;
        Ok(g.value(logits).iter().map(|&z| sigmoid(z)).collect())
    }

    /// Mean instance BCE for one bag and its gradient.
    pub fn loss_and_grad(params: &Params, windows: &Matrix, labels: &[bool]) -> Result<(f64, Params)> {
        let (mut g, vars, logits) = Self::graph(params, windows)?;
        let targets = Matrix::from_shape_fn((labels.len(), 1), |(j, _)| labels[j] as u8 as f64);
        let loss = g.bce_logits(logits, targets);
        let grads = g.backward(loss, 1.0)?;
        let mut out = Params::default();
        for (name, v) in vars {
            out.insert(name, grads.get_or_zeros(v, g.shape(v)));
        }
        Ok((g.scalar(loss), out))
    }
}

fn labels_of(bag: &Bag) -> Result<&[bool]> {
    bag.instance_labels
        .as_deref()
        .ok_or_else(|| Error::Validation(format!("bag {} has no instance labels", bag.bag_id)))
}

#[derive(Debug, Clone)]
pub struct InstanceCeiling {
    pub classifier: WindowClassifier,
    pub history: TrainHistory,
    pub test: Localization,
}

/// Trains the windowed classifier on instance labels, early-stopping on
/// validation localization AUROC, and evaluates it on the test bags.
pub fn instance_ceiling(
    train_set: &Dataset,
    val_set: &Dataset,
    test_set: &Dataset,
    window: usize,
    channels: usize,
    config: &TrainConfig,
) -> Result<InstanceCeiling> {
    let items: Vec<(Matrix, Vec<bool>)> = train_set
        .bags
        .iter()
        .map(|b| Ok((window_matrix(&b.features_f64(), window), labels_of(b)?.to_vec())))
        .collect::<Result<_>>()?;
    for b in val_set.bags.iter().chain(&test_set.bags) {
        labels_of(b)?;
    }
    let init = WindowClassifier::init(train_set.dim, window, channels, config.seed)?;
    let score_all = |params: &Params, data: &Dataset| -> Result<Vec<Vec<f64>>> {
        let clf = WindowClassifier {
            window,
            channels,
            params: params.clone(),
        };
        data.bags.par_iter().map(|b| clf.scores(&b.features_f64())).collect()
    };
    let crate::train::Fit {
        best: params, history, ..
    } = fit(
        init.params,
        items.len(),
        config,
        |p, i| WindowClassifier::loss_and_grad(p, &items[i].0, &items[i].1),
        |p| Ok(localization(&val_set.bags, &score_all(p, val_set)?)?.auroc),
    )?;
    let test = localization(&test_set.bags, &score_all(&params, test_set)?)?;
    Ok(InstanceCeiling {
        classifier: WindowClassifier {
            window,
            channels,
            params,
        },
        history,
        test,
    })
}

/// Piecewise-linear resampling of a weight profile onto `target_len`
/// positions over the normalized index axis, renormalized to sum to 1.
pub fn interpolate_weights(donor: &[f64], target_len: usize) -> Vec<f64> {
    assert!(!donor.is_empty() && target_len > 0);
    let sample = |u: f64| -> f64 {
        if donor.len() == 1 {
            return donor[0];
        }
        let pos = u * (donor.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(donor.len() - 1);
        donor[lo] + (donor[hi] - donor[lo]) * (pos - lo as f64)
    };
    let raw: Vec<f64> = (0..target_len)
        .map(|j| {
            let u = if target_len == 1 { 0.5 } else { j as f64 / (target_len - 1) as f64 };
            sample(u).max(0.0)
        })
        .collect();
    let total: f64 = raw.iter().sum();
    if total > 0.0 {
        return raw.into_iter().map(|v| v / total).collect();
    }
    // every target position fell between donor zeros: keep the donor's
    // centre of mass
    let donor_total: f64 = donor.iter().sum();
    let centre: f64 = donor.iter().enumerate().map(|(k, w)| k as f64 * w).sum::<f64>() / donor_total;
    let u = if donor.len() == 1 { 0.5 } else { centre / (donor.len() - 1) as f64 };
    let idx = (u * (target_len - 1) as f64).round() as usize;
    (0..target_len).map(|j| if j == idx { 1.0 } else { 0.0 }).collect()
}

/// How negative bags are pooled for the bag ceiling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativePooling {
    /// Weights borrowed from a random positive bag, resampled to length.
    RoiMatched,
    /// Uniform over every instance.
    Uniform,
}

fn donor_index(seed: u64, bag_id: &str, n: usize) -> usize {
    // FNV-1a of the bag id keys the per-bag generator
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bag_id.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ h);
    rng.gen_range(0..n)
}

/// Label-derived pooling weights for every bag of `data`.
pub fn oracle_pooling_weights(data: &Dataset, negatives: NegativePooling, seed: u64) -> Result<Vec<Vec<f64>>> {
    let mut positives: Vec<Vec<f64>> = Vec::new();
    for b in &data.bags {
        if b.bag_label {
            positives.push(label_reference(labels_of(b)?, true)?.r);
        }
    }
    data.bags
        .iter()
        .map(|b| {
            if b.bag_label {
                return Ok(label_reference(labels_of(b)?, true)?.r);
            }
            match negatives {
                NegativePooling::Uniform => Ok(vec![1.0 / b.len() as f64; b.len()]),
                NegativePooling::RoiMatched => {
                    if positives.is_empty() {
                        return Err(Error::Validation("no positive bags to borrow weights from".into()));
                    }
                    let donor = &positives[donor_index(seed, &b.bag_id, positives.len())];
                    Ok(interpolate_weights(donor, b.len()))
                }
            }
        })
        .collect()
}

fn pooled_embeddings(data: &Dataset, weights: &[Vec<f64>]) -> Vec<Vec<f64>> {
    data.bags
        .iter()
        .zip(weights)
        .map(|(b, w)| {
            let wv = ndarray::Array1::from(w.clone());
            wv.dot(&b.features.mapv(f64::from)).to_vec()
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct BagCeiling {
    pub negatives: NegativePooling,
    pub weight: Vec<f64>,
    pub bias: f64,
    pub history: TrainHistory,
    pub test_auroc: f64,
    pub test_auprc: f64,
}

/// Linear bag classifier on label-pooled embeddings.
pub fn bag_ceiling(
    train_set: &Dataset,
    val_set: &Dataset,
    test_set: &Dataset,
    negatives: NegativePooling,
    config: &TrainConfig,
) -> Result<BagCeiling> {
    let pool = |d: &Dataset| -> Result<(Vec<Vec<f64>>, Vec<bool>)> {
        let w = oracle_pooling_weights(d, negatives, config.seed)?;
        Ok((pooled_embeddings(d, &w), d.bags.iter().map(|b| b.bag_label).collect()))
    };
    let (train_x, train_y) = pool(train_set)?;
    let (val_x, val_y) = pool(val_set)?;
    let (test_x, test_y) = pool(test_set)?;
    let dim = train_set.dim;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let std = 1.0 / (dim as f64).sqrt();
    let mut init = Params::default();
    init.insert(
        "classifier.weight",
        Matrix::from_shape_simple_fn((1, dim), || rng.sample::<f64, _>(rand_distr::StandardNormal) * std),
    );
    init.insert("classifier.bias", Matrix::zeros((1, 1)));

    let logits = |p: &Params, xs: &[Vec<f64>]| -> Vec<f64> {
        let w = &p.tensors["classifier.weight"];
        let b = p.tensors["classifier.bias"][[0, 0]];
        xs.iter()
            .map(|x| x.iter().zip(w.iter()).map(|(a, c)| a * c).sum::<f64>() + b)
            .collect()
    };
    let l1 = config.l1_strength;
    let crate::train::Fit {
        best: params, history, ..
    } = fit(
        init,
        train_x.len(),
        config,
        |p, i| {
            let w = &p.tensors["classifier.weight"];
            let z = logits(p, std::slice::from_ref(&train_x[i]))[0];
            let t = train_y[i] as u8 as f64;
            let d = sigmoid(z) - t;
            let mut gw = Array2::from_shape_vec((1, dim), train_x[i].iter().map(|x| x * d).collect())
                .expect("1×M");
            gw.zip_mut_with(w, |g, &wv| {
                if wv != 0.0 {
                    *g += l1 * wv.signum();
                }
            });
            let mut g = Params::default();
            g.insert("classifier.weight", gw);
            g.insert("classifier.bias", Matrix::from_elem((1, 1), d));
            let loss = crate::numeric::bce_with_logit(z, t) + l1 * w.iter().map(|v| v.abs()).sum::<f64>();
            Ok((loss, g))
        },
        |p| auroc(&logits(p, &val_x), &val_y),
    )?;
    let test_scores = logits(&params, &test_x);
    Ok(BagCeiling {
        negatives,
        weight: params.tensors["classifier.weight"].iter().copied().collect(),
        bias: params.tensors["classifier.bias"][[0, 0]],
        history,
        test_auroc: auroc(&test_scores, &test_y)?,
        test_auprc: auprc(&test_scores, &test_y)?,
    })
}

/// Exact posteriors for every bag of a shifted-mean dataset.
pub fn oracle_posteriors(data: &Dataset, config: &SynthConfig) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let scores: Vec<synth::OracleScores> = data
        .bags
        .par_iter()
        .map(|b| synth::oracle_scores(b.features.view(), config))
        .collect::<Result<_>>()?;
    Ok(scores.into_iter().map(|s| (s.instance_posteriors, s.bag_posterior)).unzip())
}

/// Memo of block counts keyed by bag id; used by reports.
pub fn blocks_by_bag(data: &Dataset) -> HashMap<String, usize> {
    data.bags
        .iter()
        .filter_map(|b| b.instance_labels.as_ref().map(|l| (b.bag_id.clone(), find_blocks(l).len())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lbl(bits: &[u8]) -> Vec<bool> {
        bits.iter().map(|&b| b == 1).collect()
    }

    #[test]
    fn gap_rule_boundaries() {
        assert_eq!(find_blocks(&lbl(&[1, 1, 0, 0, 0, 1])), vec![(0, 5, 3)]);
        assert_eq!(find_blocks(&lbl(&[1, 0, 0, 0, 0, 1])), vec![(0, 0, 1), (5, 5, 1)]);
        assert!(find_blocks(&lbl(&[0, 0])).is_empty());
    }

    #[test]
    fn block_merging_is_idempotent() {
        let labels = lbl(&[0, 1, 0, 1, 0, 0, 0, 0, 1, 1, 0, 0, 1]);
        let blocks = find_blocks(&labels);
        let mut filled = vec![false; labels.len()];
        for &(s, e, _) in &blocks {
            for f in filled.iter_mut().take(e + 1).skip(s) {
                *f = true;
            }
        }
        let again: Vec<(usize, usize)> = find_blocks(&filled).iter().map(|b| (b.0, b.1)).collect();
        let spans: Vec<(usize, usize)> = blocks.iter().map(|b| (b.0, b.1)).collect();
        assert_eq!(again, spans);
    }

    #[test]
    fn interpolation_example() {
        let w = interpolate_weights(&[0.0, 0.5, 0.5, 0.0], 8);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let middle: f64 = w[2..6].iter().sum();
        assert!(middle > 0.8, "middle mass {middle}");
        assert_eq!(w[0], 0.0);
        assert_eq!(w[7], 0.0);
        // hand interpolation: raw = [0, 3/14, 3/7, 1/2, 1/2, 3/7, 3/14, 0], total 16/7
        let raw = [0.0, 3.0 / 14.0, 3.0 / 7.0, 0.5, 0.5, 3.0 / 7.0, 3.0 / 14.0, 0.0];
        for j in 0..8 {
            assert!((w[j] - raw[j] * 7.0 / 16.0).abs() < 1e-12);
        }
    }

    #[test]
    fn interpolation_always_normalized() {
        for sd in 1..12 {
            for st in 1..30 {
                let donor: Vec<f64> = (0..sd).map(|k| if k == sd / 3 { 1.0 } else { 0.0 }).collect();
                let w = interpolate_weights(&donor, st);
                assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                assert!(w.iter().all(|&v| v >= 0.0));
            }
        }
    }

    #[test]
    fn window_degenerates_to_instances() {
        let f = Matrix::from_shape_fn((3, 2), |(i, j)| (i * 2 + j) as f64);
        assert_eq!(window_matrix(&f, 1), f);
        let w = window_matrix(&f, 3);
        assert_eq!(w.row(0).to_vec(), vec![0.0, 0.0, 0.0, 1.0, 2.0, 3.0]);
        assert_eq!(w.row(2).to_vec(), vec![2.0, 3.0, 4.0, 5.0, 0.0, 0.0]);
        // even R: floor(R/2) before, the rest after
        let w = window_matrix(&f, 2);
        assert_eq!(w.row(1).to_vec(), vec![0.0, 1.0, 2.0, 3.0]);
    }
}
