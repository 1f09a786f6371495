//! Iterative chain-graph smoother: g ← (1 − α) h + α A g, starting at g = h,
//! with α = sigmoid(alpha_raw).

use crate::autodiff::{ChainNorm, Graph, Matrix, Var};

pub(crate) fn smooth_graph(graph: &mut Graph, h: Var, alpha_raw: Var, iterations: usize, norm: ChainNorm) -> Var {
    let alpha = graph.sigmoid(alpha_raw);
    let keep = graph.one_minus(alpha);
    let base = graph.scale_by(h, keep);
    let mut g = h;
    for _ in 0..iterations {
        let mixed = graph.chain_mix(g, norm);
        let mixed = graph.scale_by(mixed, alpha);
        g = graph.add(base, mixed);
    }
    g
}

/// Smoothed copy of `features` without recording gradients.
pub fn smooth_operator(features: &Matrix, alpha_raw: f64, iterations: usize, norm: ChainNorm) -> Matrix {
    let mut graph = Graph::new();
    let h = graph.constant(features.clone());
    let a = graph.constant(Matrix::from_elem((1, 1), alpha_raw));
    let out = smooth_graph(&mut graph, h, a, iterations, norm);
    graph.value(out).clone()
}
