//! Shifted-mean MIL generator and its exact Bayes posteriors.
//!
//! Positive bags carry one contiguous block of `R` instances whose first
//! feature is drawn from N(delta, 1); every other entry of every bag is
//! N(0, 1). Relative to the all-null likelihood, a block starting at `u`
//! contributes `sum_{j in block} (delta * h_j1 - delta^2 / 2)`, so both
//! posteriors depend only on the first feature column.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::bagio::{Bag, Dataset, Split};
use crate::error::{Error, Result};
use crate::numeric::{logsumexp, sigmoid};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    /// Feature dimension M.
    pub dim: usize,
    /// Block length R.
    pub block_len: usize,
    pub delta: f64,
    pub s_min: usize,
    pub s_max: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub seed: u64,
    /// Probability that a bag is positive.
    pub bag_prior: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            dim: 768,
            block_len: 12,
            delta: 0.5,
            s_min: 20,
            s_max: 60,
            n_train: 10_000,
            n_val: 2_500,
            n_test: 1_000,
            seed: 0,
            bag_prior: 0.5,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.block_len == 0 {
            return Err(Error::Config("block length R must be at least 1".into()));
        }
        if self.block_len > self.s_min {
            return Err(Error::Config(format!(
                "block length R = {} exceeds minimum bag size {}",
                self.block_len, self.s_min
            )));
        }
        if self.s_min > self.s_max {
            return Err(Error::Config(format!("s_min {} > s_max {}", self.s_min, self.s_max)));
        }
        if self.dim == 0 {
            return Err(Error::Config("feature dimension must be at least 1".into()));
        }
        if !self.delta.is_finite() {
            return Err(Error::Config("delta must be finite".into()));
        }
        if !(self.bag_prior > 0.0 && self.bag_prior < 1.0) {
            return Err(Error::Config("bag prior must lie in (0, 1)".into()));
        }
        Ok(())
    }

    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.n_train,
            Split::Val => self.n_val,
            Split::Test => self.n_test,
        }
    }
}

/// Independent generator for one bag, keyed by (seed, split seed, split, index).
fn bag_rng(seed: u64, split_seed: u64, split: Split, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&split_seed.to_le_bytes());
    key[16] = split as u8 + 1;
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(index);
    rng
}

pub fn generate_bag(config: &SynthConfig, split_seed: u64, split: Split, index: usize) -> Bag {
    let mut rng = bag_rng(config.seed, split_seed, split, index as u64);
    let positive = rng.gen_bool(config.bag_prior);
    let s = rng.gen_range(config.s_min..=config.s_max);
    let r = config.block_len;
    let start = if positive { Some(rng.gen_range(0..=s - r)) } else { None };
    let mut features = Array2::<f32>::zeros((s, config.dim));
    for j in 0..s {
        let in_block = start.is_some_and(|u| j >= u && j < u + r);
        for k in 0..config.dim {
            let z: f64 = rng.sample(StandardNormal);
            let shift = if in_block && k == 0 { config.delta } else { 0.0 };
            features[[j, k]] = (z + shift) as f32;
        }
    }
    let instance_labels = (0..s).map(|j| start.is_some_and(|u| j >= u && j < u + r)).collect();
    let id = format!("s{}-{}-{}-{:05}", config.seed, split_seed, split.name(), index);
    Bag {
        bag_id: id.clone(),
        patient_id: id,
        features,
        bag_label: positive,
        instance_labels: Some(instance_labels),
    }
}

pub fn generate_split(config: &SynthConfig, split_seed: u64, split: Split) -> Result<Dataset> {
    config.validate()?;
    let bags = (0..config.count(split))
        .map(|i| generate_bag(config, split_seed, split, i))
        .collect();
    Dataset::new(bags, config.dim)
}

/// Train, val and test bags in one dataset with their split assignment.
pub fn generate_dataset(config: &SynthConfig, split_seed: u64) -> Result<Dataset> {
    config.validate()?;
    let mut bags = Vec::new();
    let mut assign = BTreeMap::new();
    for split in Split::ALL {
        for i in 0..config.count(split) {
            let bag = generate_bag(config, split_seed, split, i);
            assign.insert(bag.bag_id.clone(), split);
            bags.push(bag);
        }
    }
    let mut ds = Dataset::new(bags, config.dim)?;
    ds.split_assignment = Some(assign);
    Ok(ds)
}

/// Exact posteriors for one bag.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleScores {
    pub instance_posteriors: Vec<f64>,
    pub bag_posterior: f64,
}

/// Unnormalized log weights of each block start (0-based) given the first
/// feature column.
fn start_log_weights(signal: &[f64], block_len: usize, delta: f64) -> Result<Vec<f64>> {
    let s = signal.len();
    if s < block_len || block_len == 0 {
        return Err(Error::Validation(format!(
            "bag of {s} instances cannot hold a block of {block_len}"
        )));
    }
    let per: Vec<f64> = signal.iter().map(|&h| delta * h - 0.5 * delta * delta).collect();
    let mut prefix = vec![0.0; s + 1];
    for (j, &v) in per.iter().enumerate() {
        prefix[j + 1] = prefix[j] + v;
    }
    Ok((0..=s - block_len).map(|u| prefix[u + block_len] - prefix[u]).collect())
}

/// p(y_j = 1 | h, S, y = 1) for each instance, from the first feature column.
pub fn instance_posterior_from_signal(signal: &[f64], block_len: usize, delta: f64) -> Result<Vec<f64>> {
    let logw = start_log_weights(signal, block_len, delta)?;
    let norm = logsumexp(&logw);
    let post_u: Vec<f64> = logw.iter().map(|&l| (l - norm).exp()).collect();
    let s = signal.len();
    let mut prefix = vec![0.0; post_u.len() + 1];
    for (u, &p) in post_u.iter().enumerate() {
        prefix[u + 1] = prefix[u] + p;
    }
    // 0-based: starts u with max(0, j + 1 - R) <= u <= min(S - R, j)
    Ok((0..s)
        .map(|j| {
            let lo = (j + 1).saturating_sub(block_len);
            let hi = j.min(s - block_len);
            (prefix[hi + 1] - prefix[lo]).clamp(0.0, 1.0)
        })
        .collect())
}

/// p(y = 1 | h, S) under the generator's prior.
pub fn bag_posterior_from_signal(signal: &[f64], block_len: usize, delta: f64, prior: f64) -> Result<f64> {
    let logw = start_log_weights(signal, block_len, delta)?;
    let log_ratio = logsumexp(&logw) - (logw.len() as f64).ln();
    Ok(sigmoid(log_ratio + (prior / (1.0 - prior)).ln()))
}

fn first_column(features: ArrayView2<f32>) -> Result<Vec<f64>> {
    if features.ncols() == 0 {
        return Err(Error::Dimension("bag has no feature columns".into()));
    }
    Ok(features.column(0).iter().map(|&x| f64::from(x)).collect())
}

pub fn instance_posterior(features: ArrayView2<f32>, config: &SynthConfig) -> Result<Vec<f64>> {
    instance_posterior_from_signal(&first_column(features)?, config.block_len, config.delta)
}

pub fn bag_posterior(features: ArrayView2<f32>, config: &SynthConfig) -> Result<f64> {
    bag_posterior_from_signal(&first_column(features)?, config.block_len, config.delta, config.bag_prior)
}

pub fn oracle_scores(features: ArrayView2<f32>, config: &SynthConfig) -> Result<OracleScores> {
    let signal = first_column(features)?;
    Ok(OracleScores {
        instance_posteriors: instance_posterior_from_signal(&signal, config.block_len, config.delta)?,
        bag_posterior: bag_posterior_from_signal(&signal, config.block_len, config.delta, config.bag_prior)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::norm_pdf;

    fn small_config() -> SynthConfig {
        SynthConfig {
            dim: 3,
            n_train: 50,
            n_val: 20,
            n_test: 30,
            seed: 9,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn rejects_block_longer_than_min_bag() {
        let cfg = SynthConfig {
            block_len: 21,
            ..SynthConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = SynthConfig {
            block_len: 20,
            ..SynthConfig::default()
        };
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn positive_bags_hold_one_block() {
        let ds = generate_dataset(&small_config(), 1).unwrap();
        for bag in &ds.bags {
            let labels = bag.instance_labels.as_ref().unwrap();
            let ones = labels.iter().filter(|&&l| l).count();
            if bag.bag_label {
                assert_eq!(ones, 12);
                let first = labels.iter().position(|&l| l).unwrap();
                assert!(labels[first..first + 12].iter().all(|&l| l));
            } else {
                assert_eq!(ones, 0);
            }
            assert!((20..=60).contains(&bag.len()));
        }
    }

    #[test]
    fn generation_is_order_independent() {
        let cfg = small_config();
        let ds = generate_dataset(&cfg, 4).unwrap();
        let test = generate_split(&cfg, 4, Split::Test).unwrap();
        assert_eq!(ds.subset(Split::Test).bags, test.bags);
        assert_eq!(generate_bag(&cfg, 4, Split::Test, 7), test.bags[7]);
        assert_ne!(generate_bag(&cfg, 5, Split::Test, 7), test.bags[7]);
    }

    #[test]
    fn degenerate_support_gives_certainty() {
        let post = instance_posterior_from_signal(&[0.3, -1.0, 2.0], 3, 0.5).unwrap();
        assert!(post.iter().all(|&p| (p - 1.0).abs() < 1e-15));
    }

    #[test]
    fn zero_shift_is_uniform_over_starts() {
        let signal: Vec<f64> = (0..40).map(|j| (j as f64 * 0.37).sin() * 3.0).collect();
        let post = instance_posterior_from_signal(&signal, 12, 0.0).unwrap();
        for (j, &p) in post.iter().enumerate() {
            let j1 = j + 1;
            let lo = 1.max(j1 as i64 - 11);
            let hi = 29.min(j1 as i64);
            let expected = (hi - lo + 1) as f64 / 29.0;
            assert!((p - expected).abs() < 1e-12);
            if (12..=29).contains(&j1) {
                assert!((p - 12.0 / 29.0).abs() < 1e-12);
            }
        }
        let bag = bag_posterior_from_signal(&signal, 12, 0.0, 0.5).unwrap();
        assert!((bag - 0.5).abs() < 1e-15);
    }

    #[test]
    fn three_instance_enumeration() {
        let h = [0.7, -0.2, 1.9];
        let w: Vec<f64> = h.iter().map(|&x| (0.5 * x - 0.125f64).exp()).collect();
        let total: f64 = w.iter().sum();
        let post = instance_posterior_from_signal(&h, 1, 0.5).unwrap();
        for j in 0..3 {
            assert!((post[j] - w[j] / total).abs() < 1e-14);
        }
    }

    #[test]
    fn two_instance_bag_enumeration() {
        let h = [1.0, 0.0];
        let l0 = norm_pdf(1.0, 0.0, 1.0) * norm_pdf(0.0, 0.0, 1.0);
        let l1 = 0.5 * (norm_pdf(1.0, 0.5, 1.0) * norm_pdf(0.0, 0.0, 1.0))
            + 0.5 * (norm_pdf(1.0, 0.0, 1.0) * norm_pdf(0.0, 0.5, 1.0));
        let expected = l1 / (l1 + l0);
        let got = bag_posterior_from_signal(&h, 1, 0.5, 0.5).unwrap();
        assert!((got - expected).abs() < 1e-14);
    }

    #[test]
    fn strong_negative_evidence() {
        let h = vec![-10.0; 30];
        assert!(bag_posterior_from_signal(&h, 12, 0.5, 0.5).unwrap() < 0.5);
    }

    #[test]
    fn short_bag_is_an_error() {
        assert!(instance_posterior_from_signal(&[1.0; 5], 6, 0.5).is_err());
        assert!(bag_posterior_from_signal(&[1.0; 5], 6, 0.5, 0.5).is_err());
    }

    #[test]
    fn large_magnitudes_stay_finite() {
        let h: Vec<f64> = (0..30).map(|j| if j % 2 == 0 { 1e3 } else { -1e3 }).collect();
        let post = instance_posterior_from_signal(&h, 12, 0.5).unwrap();
        assert!(post.iter().all(|p| p.is_finite() && (0.0..=1.0).contains(p)));
        let bag = bag_posterior_from_signal(&h, 12, 0.5, 0.5).unwrap();
        assert!(bag.is_finite());
    }
}
