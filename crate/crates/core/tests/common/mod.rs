//! Independent reference computations shared by the integration suites.
#![allow(dead_code)]

use attnguide::autodiff::{ChainNorm, Matrix};
use attnguide::guidance::{divergence, Divergence, GuidanceSpec};
use attnguide::models::{bag_objective, Objective};
use attnguide::numeric::bce_with_logit;
use attnguide::synth::{self, SynthConfig};
use attnguide::{Bag, Dataset, Model, ModelSpec, Pooling, Smooth};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}

// ---------------------------------------------------------------- oracle

fn density(x: f64, mean: f64) -> f64 {
    (-(x - mean).powi(2) / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Full density product of a bag under "block starts at u" (None: no block).
pub fn bag_likelihood(h: &Array2<f64>, block: usize, delta: f64, start: Option<usize>) -> f64 {
    let mut p = 1.0;
    for j in 0..h.nrows() {
        for k in 0..h.ncols() {
            let shifted = k == 0 && start.is_some_and(|u| j >= u && j < u + block);
            p *= density(h[[j, k]], if shifted { delta } else { 0.0 });
        }
    }
    p
}

/// Posteriors by enumerating every block start.
pub fn brute_force_posteriors(h: &Array2<f64>, block: usize, delta: f64, prior: f64) -> (Vec<f64>, f64) {
    let s = h.nrows();
    let starts: Vec<f64> = (0..=s - block).map(|u| bag_likelihood(h, block, delta, Some(u))).collect();
    let total: f64 = starts.iter().sum();
    let inst = (0..s)
        .map(|j| {
            starts
                .iter()
                .enumerate()
                .filter(|(u, _)| j >= *u && j < u + block)
                .map(|(_, p)| p)
                .sum::<f64>()
                / total
        })
        .collect();
    let pos = prior * total / starts.len() as f64;
    let neg = (1.0 - prior) * bag_likelihood(h, block, delta, None);
    (inst, pos / (pos + neg))
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs())
    }
}

/// Random small bags checked against direct density-product enumeration.
pub fn brute_force_mismatches(n: usize, seed: u64) -> Vec<String> {
    let mut r = rng(seed);
    let mut bad = Vec::new();
    for i in 0..n {
        let s = r.gen_range(1..=8);
        let m = r.gen_range(1..=2);
        let block = r.gen_range(1..=s);
        let delta = r.gen_range(-1.5..2.0);
        let prior = r.gen_range(0.05..0.95);
        let f32s = Array2::from_shape_simple_fn((s, m), || (r.gen::<f64>() * 4.0 - 1.5) as f32);
        let h = f32s.mapv(f64::from);
        let (inst, bag) = brute_force_posteriors(&h, block, delta, prior);
        let cfg = SynthConfig {
            dim: m,
            block_len: block,
            delta,
            s_min: block,
            s_max: s.max(block),
            bag_prior: prior,
            ..SynthConfig::default()
        };
        let got = synth::oracle_scores(f32s.view(), &cfg).unwrap();
        if rel_err(got.bag_posterior, bag) >= 1e-10 {
            bad.push(format!("bag {i}: {} vs {bag}", got.bag_posterior));
        }
        for (j, (&a, &b)) in got.instance_posteriors.iter().zip(&inst).enumerate() {
            if rel_err(a, b) >= 1e-10 {
                bad.push(format!("bag {i} instance {j}: {a} vs {b}"));
            }
        }
    }
    bad
}

// ------------------------------------------------------------ gradients

/// Objective with every guidance reference frozen at `refs`, from forward
/// passes only.
fn frozen_loss(model: &Model, x: &Matrix, y: bool, spec: Option<&GuidanceSpec>, refs: &[Vec<f64>], l1: f64) -> f64 {
    let out = model.forward(x).unwrap();
    let mut loss = bce_with_logit(out.logit, y as u8 as f64);
    if let Some(g) = spec {
        let rows = guided_rows(&out, g);
        let mut total = 0.0;
        for (r, a) in refs.iter().zip(&rows) {
            total += divergence(g.divergence, r, a, g.epsilon).unwrap().0;
        }
        loss += g.lambda * total / rows.len() as f64;
    }
    loss + l1 * model.params.l1_norm()
}

fn guided_rows(out: &attnguide::models::ForwardResult, g: &GuidanceSpec) -> Vec<Vec<f64>> {
    match (&out.head_attention, g.multi_head) {
        (Some(h), true) => h.rows().into_iter().map(|r| r.to_vec()).collect(),
        _ => vec![out.attention.clone()],
    }
}

/// ‖analytic − central difference‖ / max(‖analytic‖, ‖numeric‖) over every
/// parameter entry, with the guidance reference held fixed.
pub fn gradient_rel_error(model: &Model, x: &Matrix, y: bool, objective: &Objective, step: f64) -> f64 {
    let analytic = bag_objective(model, x, y, objective).unwrap().grads;
    let spec = objective.guidance.as_ref();
    let base = model.forward(x).unwrap();
    let refs: Vec<Vec<f64>> = spec
        .map(|g| guided_rows(&base, g).iter().map(|a| g.reference_for(a).unwrap().r).collect())
        .unwrap_or_default();

    let (mut diff2, mut an2, mut nu2) = (0.0, 0.0, 0.0);
    let mut probe = model.clone();
    for (name, tensor) in &model.params.tensors {
        for idx in 0..tensor.len() {
            let (r, c) = (idx / tensor.ncols(), idx % tensor.ncols());
            let orig = tensor[[r, c]];
            probe.params.tensors.get_mut(name).unwrap()[[r, c]] = orig + step;
            let up = frozen_loss(&probe, x, y, spec, &refs, objective.l1_strength);
            probe.params.tensors.get_mut(name).unwrap()[[r, c]] = orig - step;
            let down = frozen_loss(&probe, x, y, spec, &refs, objective.l1_strength);
            probe.params.tensors.get_mut(name).unwrap()[[r, c]] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic.tensors[name][[r, c]];
            diff2 += (a - numeric).powi(2);
            an2 += a * a;
            nu2 += numeric * numeric;
        }
    }
    let scale = an2.sqrt().max(nu2.sqrt());
    if scale < 1e-12 {
        diff2.sqrt()
    } else {
        diff2.sqrt() / scale
    }
}

pub struct GradCase {
    pub label: String,
    pub spec: ModelSpec,
    pub objective: Objective,
}

/// Every architecture and smoothing variant, unguided and guided by each
/// divergence with λ = 1, at feature dimension `m`.
pub fn gradient_cases(m: usize) -> Vec<GradCase> {
    let archs = [
        ModelSpec::new(Pooling::Max, m),
        ModelSpec::new(Pooling::Mean, m),
        ModelSpec {
            attention_hidden_dim: 3,
            ..ModelSpec::new(Pooling::Abmil, m)
        },
        ModelSpec {
            attention_hidden_dim: 3,
            ..ModelSpec::new(Pooling::Abmil, m).with_smooth(Smooth::Smap)
        },
        ModelSpec {
            heads: 2,
            ..ModelSpec::new(Pooling::Transmil, m)
        },
        ModelSpec {
            heads: 2,
            chain_norm: ChainNorm::RowStochastic,
            ..ModelSpec::new(Pooling::Transmil, m).with_smooth(Smooth::Smtp)
        },
    ];
    let mut cases = Vec::new();
    for spec in archs {
        let mut guidances: Vec<Option<GuidanceSpec>> = vec![None];
        for d in Divergence::ALL {
            guidances.push(Some(GuidanceSpec {
                divergence: d,
                lambda: 1.0,
                ..GuidanceSpec::default()
            }));
        }
        if spec.pooling == Pooling::Transmil {
            guidances.push(Some(GuidanceSpec {
                multi_head: false,
                ..GuidanceSpec::default()
            }));
        }
        for g in guidances {
            let tag = g.as_ref().map_or("bce".to_string(), |g| {
                format!("{}{}", g.divergence.short_name(), if g.multi_head { "" } else { "/pooled" })
            });
            cases.push(GradCase {
                label: format!("{} {tag} M={m}", spec.label()),
                spec: spec.clone(),
                objective: Objective {
                    guidance: g,
                    l1_strength: 0.0,
                },
            });
        }
    }
    cases.push(GradCase {
        label: format!("ABMIL l1 M={m}"),
        spec: ModelSpec {
            attention_hidden_dim: 3,
            ..ModelSpec::new(Pooling::Abmil, m)
        },
        objective: Objective {
            guidance: Some(GuidanceSpec::default()),
            l1_strength: 0.01,
        },
    });
    cases
}

/// Runs the whole finite-difference suite; returns (checks, failures).
pub fn gradient_suite(tolerance: f64) -> (usize, Vec<String>) {
    let mut failures = Vec::new();
    let mut checks = 0;
    for m in [4, 8] {
        for (ci, case) in gradient_cases(m).into_iter().enumerate() {
            for s in [1, 2, 7] {
                for y in [false, true] {
                    let seed = (m * 1000 + ci * 10 + s) as u64 + y as u64;
                    let mut model = Model::init(case.spec.clone(), seed).unwrap();
                    // move the smoothing strengths off their init so the
                    // mixing paths carry gradient
                    for (name, t) in model.params.tensors.iter_mut() {
                        if name.ends_with("alpha") {
                            t.fill(0.3);
                        }
                        if name.ends_with(".bias") || name.ends_with("beta") || name.ends_with("cls_token") {
                            let mut r = rng(seed ^ 77);
                            t.mapv_inplace(|_| 0.1 * r.sample::<f64, _>(StandardNormal));
                        }
                    }
                    let x = normal_matrix(&mut rng(seed), s, m);
                    let err = gradient_rel_error(&model, &x, y, &case.objective, 1e-5);
                    checks += 1;
                    if !(err < tolerance) {
                        failures.push(format!("{} S={s} y={y}: rel err {err:.2e}", case.label));
                    }
                }
            }
        }
    }
    (checks, failures)
}

// ------------------------------------------------------------- toy data

/// Single-feature bags; positive bags are shifted by `gap`, so mean pooling
/// separates them perfectly when `gap` exceeds the spread.
pub fn separable_toy(n: usize, gap: f64, seed: u64) -> Dataset {
    let mut r = rng(seed);
    let bags = (0..n)
        .map(|i| {
            let positive = i % 2 == 0;
            let s = r.gen_range(3..=8);
            let features = Array2::from_shape_simple_fn((s, 1), || {
                let base: f64 = r.gen_range(-0.4..0.4);
                (base + if positive { gap } else { 0.0 }) as f32
            });
            Bag {
                bag_id: format!("toy{seed}-{i}"),
                patient_id: format!("toy{seed}-{i}"),
                features,
                bag_label: positive,
                instance_labels: Some(vec![positive; s]),
            }
        })
        .collect();
    Dataset::new(bags, 1).unwrap()
}

/// Bags whose labels ignore the features.
pub fn noise_toy(n: usize, dim: usize, seed: u64) -> Dataset {
    let mut r = rng(seed);
    let bags = (0..n)
        .map(|i| {
            let s = r.gen_range(2..=6);
            let features = Array2::from_shape_simple_fn((s, dim), || r.sample::<f64, _>(StandardNormal) as f32);
            Bag {
                bag_id: format!("noise{seed}-{i}"),
                patient_id: format!("noise{seed}-{i}"),
                features,
                bag_label: r.gen_bool(0.5),
                instance_labels: None,
            }
        })
        .collect();
    Dataset::new(bags, dim).unwrap()
}

// ------------------------------------------------------------- guidance

/// True when `r` is nonincreasing moving away from its largest entry.
pub fn unimodal(r: &[f64]) -> bool {
    let peak = r
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map_or(0, |(i, _)| i);
    r[..=peak].windows(2).all(|w| w[0] <= w[1]) && r[peak..].windows(2).all(|w| w[0] >= w[1])
}

/// A random attention vector drawn from one of several shapes.
pub fn random_attention(r: &mut ChaCha8Rng) -> Vec<f64> {
    let s = r.gen_range(1..=80);
    let raw: Vec<f64> = match r.gen_range(0..4) {
        // dense
        0 => (0..s).map(|_| r.gen::<f64>()).collect(),
        // peaked softmax
        1 => {
            let temp = r.gen_range(0.05..5.0);
            (0..s).map(|_| (r.sample::<f64, _>(StandardNormal) / temp).exp()).collect()
        }
        // one-hot
        2 => {
            let k = r.gen_range(0..s);
            (0..s).map(|j| if j == k { 1.0 } else { 0.0 }).collect()
        }
        // sparse, possibly multimodal
        _ => (0..s)
            .map(|_| if r.gen_bool(0.2) { r.gen::<f64>() } else { 0.0 })
            .collect(),
    };
    let total: f64 = raw.iter().sum();
    if total == 0.0 {
        return vec![1.0 / s as f64; s];
    }
    raw.into_iter().map(|v| v / total).collect()
}

pub struct GuidanceReport {
    pub inputs: usize,
    pub failures: Vec<String>,
}

/// Reference validity and divergence signs over `n` random attention vectors.
pub fn guidance_properties(n: usize, seed: u64) -> GuidanceReport {
    let mut r = rng(seed);
    let spec = GuidanceSpec::default();
    let mut failures = Vec::new();
    for i in 0..n {
        let a = random_attention(&mut r);
        let reference = attnguide::guidance::normal_reference(&a, spec.variance_floor).unwrap().r;
        let total: f64 = reference.iter().sum();
        if reference.len() != a.len() || reference.iter().any(|&v| !(v >= 0.0)) || (total - 1.0).abs() > 1e-9 {
            failures.push(format!("input {i}: reference is not a probability vector"));
        }
        if !unimodal(&reference) {
            failures.push(format!("input {i}: reference not unimodal"));
        }
        // clamping entries below ε moves a KL by at most ε/e each
        let eps_slack = a.len() as f64 * spec.epsilon;
        for d in Divergence::ALL {
            let (v, _) = divergence(d, &reference, &a, spec.epsilon).unwrap();
            if v < -eps_slack {
                failures.push(format!("input {i}: {d:?}(r, a) = {v}"));
            }
            let (self_v, _) = divergence(d, &a, &a, spec.epsilon).unwrap();
            if self_v.abs() > eps_slack {
                failures.push(format!("input {i}: {d:?}(a, a) = {self_v}"));
            }
            // a distinct distribution (beyond ε effects) has positive divergence
            let gap: f64 = reference.iter().zip(&a).map(|(x, y)| (x - y).abs()).sum();
            if gap > 1e-3 && v <= 0.0 {
                failures.push(format!("input {i}: {d:?} = {v} although r ≠ a"));
            }
        }
        if failures.len() > 20 {
            break;
        }
    }
    GuidanceReport { inputs: n, failures }
}

/// Final mean divergence on one bag after `steps` identical-seed SGD steps
/// for each λ.
pub fn divergence_after_training(bag: &Bag, lambdas: &[f64], steps: usize, divergence: Divergence) -> Vec<f64> {
    let x = bag.features_f64();
    let spec = ModelSpec {
        attention_hidden_dim: 8,
        ..ModelSpec::new(Pooling::Abmil, bag.dim())
    };
    lambdas
        .iter()
        .map(|&lambda| {
            let mut model = Model::init(spec.clone(), 11).unwrap();
            let objective = Objective {
                guidance: Some(GuidanceSpec {
                    divergence,
                    lambda,
                    ..GuidanceSpec::default()
                }),
                l1_strength: 0.0,
            };
            let mut sgd = attnguide::train::Sgd::new(&model.params, 0.01, 0.9);
            for _ in 0..steps {
                let out = bag_objective(&model, &x, bag.bag_label, &objective).unwrap();
                sgd.step(&mut model.params, &out.grads);
            }
            bag_objective(&model, &x, bag.bag_label, &objective).unwrap().divergence
        })
        .collect()
}
