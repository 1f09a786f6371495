use ndarray::{array, Array2};

use super::*;
use crate::autodiff::chain_matrix;
use crate::guidance::{Divergence, GuidanceSpec};

fn bag(s: usize, m: usize, seed: f64) -> Matrix {
    Array2::from_shape_fn((s, m), |(i, j)| ((i * m + j) as f64 * 1.37 + seed).sin())
}

fn assert_distribution(a: &[f64]) {
    assert!(a.iter().all(|&v| v >= 0.0));
    assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-9, "sum = {}", a.iter().sum::<f64>());
}

#[test]
fn mean_pool_examples() {
    let model = Model::init(ModelSpec::new(Pooling::Mean, 3), 0).unwrap();
    let single = array![[0.5, -1.0, 2.0]];
    assert_eq!(model.forward(&single).unwrap().embedding, vec![0.5, -1.0, 2.0]);
    let pair = array![[0.0, 0.0, 0.0], [2.0, 2.0, 2.0]];
    let out = model.forward(&pair).unwrap();
    assert_eq!(out.embedding, vec![1.0; 3]);
    assert_eq!(out.attention, vec![0.5, 0.5]);
}

#[test]
fn max_pool_attention_examples() {
    assert_eq!(max_pool_attention(&array![[1.0, -2.0]]), vec![1.0]);
    let dominant = array![[0.0, 0.0, 0.0], [5.0, 5.0, 5.0], [1.0, 1.0, 1.0]];
    assert_eq!(max_pool_attention(&dominant), vec![0.0, 1.0, 0.0]);
    let spread = array![[3.0, 0.0, 0.0], [0.0, 3.0, 0.0], [0.0, 0.0, 3.0]];
    let att = max_pool_attention(&spread);
    for v in att {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let model = Model::init(ModelSpec::new(Pooling::Max, 3), 0).unwrap();
    assert_eq!(model.forward(&spread).unwrap().embedding, vec![3.0; 3]);
}

#[test]
fn abmil_uniform_cases() {
    let spec = ModelSpec {
        attention_hidden_dim: 4,
        ..ModelSpec::new(Pooling::Abmil, 3)
    };
    let model = Model::init(spec, 1).unwrap();
    let same = Array2::from_shape_fn((5, 3), |(_, j)| j as f64 - 0.3);
    for v in model.forward(&same).unwrap().attention {
        assert!((v - 0.2).abs() < 1e-15);
    }
    let mut zero_w = model.clone();
    zero_w.params.insert("abmil.w.weight", Matrix::zeros((1, 4)));
    for v in zero_w.forward(&bag(6, 3, 0.2)).unwrap().attention {
        assert!((v - 1.0 / 6.0).abs() < 1e-15);
    }
}

fn small_transmil() -> ModelSpec {
    ModelSpec {
        heads: 2,
        ..ModelSpec::new(Pooling::Transmil, 8)
    }
}

#[test]
fn transmil_attention_shapes() {
    let model = Model::init(small_transmil(), 3).unwrap();
    let one = model.forward(&bag(1, 8, 0.0)).unwrap();
    assert_eq!(one.attention, vec![1.0]);
    let out = model.forward(&bag(5, 8, 0.4)).unwrap();
    assert_distribution(&out.attention);
    let heads = out.head_attention.unwrap();
    assert_eq!(heads.dim(), (2, 5));
    for row in heads.rows() {
        assert_distribution(&row.to_vec());
    }
    assert_eq!(out.embedding.len(), 8);
}

#[test]
fn transmil_zero_projections_are_uniform() {
    let mut model = Model::init(small_transmil(), 3).unwrap();
    for block in ["block1", "block2"] {
        for p in ["q", "k"] {
            model.params.insert(format!("{block}.{p}.weight"), Matrix::zeros((8, 8)));
        }
    }
    let out = model.forward(&bag(4, 8, 0.9)).unwrap();
    for v in out.attention {
        assert!((v - 0.25).abs() < 1e-12);
    }
}

#[test]
fn rejects_bad_specs_and_inputs() {
    assert!(ModelSpec::new(Pooling::Mean, 4).with_smooth(Smooth::Smap).validate().is_err());
    assert!(ModelSpec::new(Pooling::Abmil, 4).with_smooth(Smooth::Smtp).validate().is_err());
    let mut t = ModelSpec::new(Pooling::Transmil, 10);
    t.heads = 4;
    assert!(t.validate().is_err());
    let model = Model::init(ModelSpec::new(Pooling::Mean, 4), 0).unwrap();
    assert!(matches!(model.forward(&bag(3, 5, 0.0)), Err(Error::Dimension(_))));
    assert!(model.forward(&Matrix::zeros((0, 4))).is_err());
}

#[test]
fn smooth_operator_examples() {
    let h = bag(4, 3, 0.1);
    // alpha_raw -> -inf: no mixing
    let out = smooth_operator(&h, -800.0, 10, ChainNorm::Symmetric);
    assert!((&out - &h).iter().all(|d| d.abs() < 1e-12));

    // S = 1: A = 0 so g = (1 - α) h after any number of iterations
    let single = array![[2.0, -4.0]];
    let out = smooth_operator(&single, 0.0, 10, ChainNorm::Symmetric);
    assert_eq!(out, array![[1.0, -2.0]]);

    // S = 3, α = 0.5, T = 1: g = 0.5 h + 0.5 A h
    let h3 = array![[1.0, 0.0], [2.0, 1.0], [4.0, -1.0]];
    let r = 1.0 / 2f64.sqrt();
    let expected = array![
        [0.5 * 1.0 + 0.5 * r * 2.0, 0.5 * r * 1.0],
        [0.5 * 2.0 + 0.5 * r * (1.0 + 4.0), 0.5 + 0.5 * r * (0.0 - 1.0)],
        [0.5 * 4.0 + 0.5 * r * 2.0, -0.5 + 0.5 * r * 1.0]
    ];
    let out = smooth_operator(&h3, 0.0, 1, ChainNorm::Symmetric);
    assert!((&out - &expected).iter().all(|d| d.abs() < 1e-14));
    let dense = &h3 * 0.5 + &(chain_matrix(3, ChainNorm::Symmetric).dot(&h3) * 0.5);
    assert!((&out - &dense).iter().all(|d| d.abs() < 1e-14));
}

#[test]
fn smoothing_a_constant_signal() {
    let c = Array2::from_shape_fn((6, 2), |(_, j)| 1.5 + j as f64);
    // row-stochastic: constant is a fixed point for any α
    for alpha_raw in [-2.0, 0.0, 3.0] {
        let out = smooth_operator(&c, alpha_raw, 10, ChainNorm::RowStochastic);
        assert!((&out - &c).iter().all(|d| d.abs() < 1e-12));
    }
    // symmetric: interior rows have A-row-sum 1/√2 + 1/2 (next to an end)
    // or 1, end rows 1/√2, so a constant signal is not preserved
    let out = smooth_operator(&c, 0.0, 1, ChainNorm::Symmetric);
    let r = 1.0 / 2f64.sqrt();
    assert!((out[[0, 0]] - (0.75 + 0.75 * r)).abs() < 1e-12);
    assert!((out[[1, 0]] - (0.75 + 0.75 * (r + 0.5))).abs() < 1e-12);
    assert!((out[[2, 0]] - 1.5).abs() < 1e-12);
}

#[test]
fn classifier_examples() {
    assert_eq!(classify(&[1.0, 2.0], &[0.0, 0.0], 0.0).1, 0.5);
    assert!((classify(&[0.0], &[0.0], 50.0).1 - 1.0).abs() < 1e-9);
    let (logit, _) = classify(&[0.5, -1.0, 2.0, 0.25], &[1.0, 2.0, -0.5, 4.0], 0.1);
    assert!((logit - (0.5 - 2.0 - 1.0 + 1.0 + 0.1)).abs() < 1e-15);
}

#[test]
fn permutation_equivariance() {
    let perm = [3, 0, 4, 1, 2];
    let x = bag(5, 4, 0.7);
    let px = Array2::from_shape_fn((5, 4), |(i, j)| x[[perm[i], j]]);
    for pooling in [Pooling::Mean, Pooling::Max, Pooling::Abmil] {
        let spec = ModelSpec {
            attention_hidden_dim: 3,
            ..ModelSpec::new(pooling, 4)
        };
        let model = Model::init(spec, 5).unwrap();
        let a = model.forward(&x).unwrap();
        let b = model.forward(&px).unwrap();
        assert!((a.logit - b.logit).abs() < 1e-12, "{pooling:?}");
        for (za, zb) in a.embedding.iter().zip(&b.embedding) {
            assert!((za - zb).abs() < 1e-12);
        }
        for i in 0..5 {
            assert!((b.attention[i] - a.attention[perm[i]]).abs() < 1e-12);
        }
    }
}

#[test]
fn order_sensitivity() {
    let x = bag(6, 8, 0.3);
    let rev = Array2::from_shape_fn((6, 8), |(i, j)| x[[5 - i, j]]);
    let tm = Model::init(small_transmil(), 2).unwrap();
    assert!((tm.forward(&x).unwrap().logit - tm.forward(&rev).unwrap().logit).abs() > 1e-9);
    let x4 = bag(6, 4, 0.3);
    let swapped = Array2::from_shape_fn((6, 4), |(i, j)| {
        let src = match i {
            0 => 3,
            3 => 0,
            k => k,
        };
        x4[[src, j]]
    });
    let spec = ModelSpec {
        attention_hidden_dim: 3,
        ..ModelSpec::new(Pooling::Abmil, 4).with_smooth(Smooth::Smap)
    };
    let sm = Model::init(spec, 2).unwrap();
    assert!((sm.forward(&x4).unwrap().logit - sm.forward(&swapped).unwrap().logit).abs() > 1e-9);
}

#[test]
fn objective_with_zero_lambda_is_bce() {
    let spec = ModelSpec {
        attention_hidden_dim: 3,
        ..ModelSpec::new(Pooling::Abmil, 4)
    };
    let model = Model::init(spec, 8).unwrap();
    let x = bag(5, 4, 0.0);
    let obj = Objective {
        guidance: Some(GuidanceSpec {
            lambda: 0.0,
            divergence: Divergence::ReverseKl,
            ..GuidanceSpec::default()
        }),
        l1_strength: 0.0,
    };
    let out = bag_objective(&model, &x, true, &obj).unwrap();
    assert!((out.loss - out.bce).abs() < 1e-15);
    assert!(out.divergence > 0.0);
}

#[test]
fn checkpoint_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let model = Model::init(small_transmil().with_smooth(Smooth::Smtp), 4).unwrap();
    save_checkpoint(&model, &path).unwrap();
    assert!(sidecar_path(&path).exists());
    let loaded = load_checkpoint(&path).unwrap();
    assert_eq!(loaded, model);
}
