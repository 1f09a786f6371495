use std::collections::BTreeMap;

use crate::autodiff::{Graph, Matrix, Var};
use crate::models::{smooth, ModelSpec, Pooled, Smooth};

pub(crate) fn mean_pool(graph: &mut Graph, x: Var) -> Pooled {
    let s = graph.shape(x).0;
    let embedding = graph.mean_rows(x);
    let attention = graph.constant(Matrix::from_elem((1, s), 1.0 / s as f64));
    Pooled {
        embedding,
        attention,
        heads: None,
    }
}

/// Share of feature columns whose maximum sits at each instance (first
/// index wins ties).
pub fn max_pool_attention(features: &Matrix) -> Vec<f64> {
    let (s, m) = features.dim();
    let mut counts = vec![0usize; s];
    for col in features.columns() {
        let mut best = 0;
        for (j, &v) in col.iter().enumerate() {
            if v > col[best] {
                best = j;
            }
        }
        counts[best] += 1;
    }
    counts.into_iter().map(|c| c as f64 / m as f64).collect()
}

pub(crate) fn max_pool(graph: &mut Graph, x: Var) -> Pooled {
    let embedding = graph.col_max(x);
    let att = max_pool_attention(graph.value(x));
    let s = att.len();
    let attention = graph.constant(Matrix::from_shape_vec((1, s), att).expect("1×S"));
    Pooled {
        embedding,
        attention,
        heads: None,
    }
}

/// a = softmax_j(wᵀ tanh(V h_j)), z = Σ a_j h_j.
pub(crate) fn abmil(graph: &mut Graph, x: Var, vars: &BTreeMap<String, Var>, spec: &ModelSpec) -> Pooled {
    let h = match spec.smooth {
        Smooth::Smap => smooth::smooth_graph(graph, x, vars["sm.alpha"], spec.sm_iterations, spec.chain_norm),
        _ => x,
    };
    let hidden = graph.matmul_t(h, vars["abmil.v.weight"]);
    let hidden = graph.tanh(hidden);
    let scores = graph.matmul_t(hidden, vars["abmil.w.weight"]);
    let scores = graph.transpose(scores);
    let attention = graph.softmax_rows(scores);
    let embedding = graph.matmul(attention, h);
    Pooled {
        embedding,
        attention,
        heads: None,
    }
}
