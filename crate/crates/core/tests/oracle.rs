mod common;

use attnguide::synth::{self, SynthConfig};
use attnguide::Split;
use rand::Rng;

#[test]
fn oracle_equals_enumeration() {
    let bad = common::brute_force_mismatches(1000, 5);
    assert!(bad.is_empty(), "{}", bad.join("\n"));
}

#[test]
fn oracle_ignores_all_but_the_first_column() {
    let cfg = SynthConfig {
        dim: 5,
        n_test: 20,
        ..SynthConfig::default()
    };
    let data = synth::generate_split(&cfg, 3, Split::Test).unwrap();
    let mut r = common::rng(8);
    for bag in &data.bags {
        let base = synth::oracle_scores(bag.features.view(), &cfg).unwrap();
        let mut scrambled = bag.features.clone();
        for k in 1..5 {
            for j in 0..bag.len() {
                scrambled[[j, k]] = r.gen_range(-50.0..50.0);
            }
        }
        assert_eq!(synth::oracle_scores(scrambled.view(), &cfg).unwrap(), base);
    }
}

#[test]
fn generated_block_mean_matches_delta() {
    let cfg = SynthConfig {
        dim: 2,
        n_train: 20_000,
        ..SynthConfig::default()
    };
    let data = synth::generate_split(&cfg, 0, Split::Train).unwrap();
    let (mut sum, mut n, mut pos) = (0.0, 0usize, 0usize);
    for bag in data.bags.iter().filter(|b| b.bag_label) {
        pos += 1;
        let labels = bag.instance_labels.as_ref().unwrap();
        for (j, _) in labels.iter().enumerate().filter(|(_, &l)| l) {
            sum += f64::from(bag.features[[j, 0]]);
            n += 1;
        }
        if pos == 10_000 {
            break;
        }
    }
    assert_eq!(pos, 10_000);
    assert!((sum / n as f64 - 0.5).abs() < 0.02, "block mean {}", sum / n as f64);
}

#[test]
fn positive_fraction_per_seed() {
    let cfg = SynthConfig {
        dim: 1,
        ..SynthConfig::default()
    };
    for seed in 0..3 {
        let test = synth::generate_split(&cfg, seed, Split::Test).unwrap();
        assert_eq!(test.len(), 1000);
        assert!((test.positive_fraction() - 0.5).abs() <= 0.04);
    }
}
