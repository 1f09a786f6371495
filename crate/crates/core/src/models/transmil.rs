//! TransMIL with full scaled dot-product attention: class token, pre-norm
//! MHSA block, PPEG (depthwise sequence convolutions), second MHSA block.
//! The bag embedding is the class-token output of the second block.

use std::collections::BTreeMap;

use crate::autodiff::{Graph, Var};
use crate::models::{smooth, ModelSpec, Pooled, Smooth};

struct BlockOut {
    out: Var,
    /// Per-head (S+1)×(S+1) attention maps.
    maps: Vec<Var>,
}

fn mhsa_block(graph: &mut Graph, x: Var, vars: &BTreeMap<String, Var>, block: &str, spec: &ModelSpec) -> BlockOut {
    let p = |name: &str| vars[&format!("{block}.{name}")];
    let normed = graph.layer_norm_rows(x, spec.layer_norm_eps);
    let normed = graph.mul_row(normed, p("ln.gamma"));
    let normed = graph.add_row(normed, p("ln.beta"));

    let project = |graph: &mut Graph, name: &str| {
        let y = graph.matmul(normed, p(&format!("{name}.weight")));
        graph.add_row(y, p(&format!("{name}.bias")))
    };
    let q = project(graph, "q");
    let k = project(graph, "k");
    let v = project(graph, "v");

    let d = spec.model_dim / spec.heads;
    let scale = 1.0 / (d as f64).sqrt();
    let mut heads = Vec::with_capacity(spec.heads);
    let mut maps = Vec::with_capacity(spec.heads);
    for h in 0..spec.heads {
        let qh = graph.slice_cols(q, h * d, d);
        let kh = graph.slice_cols(k, h * d, d);
        let vh = graph.slice_cols(v, h * d, d);
        let scores = graph.matmul_t(qh, kh);
        let scores = graph.scale(scores, scale);
        let attn = graph.softmax_rows(scores);
        heads.push(graph.matmul(attn, vh));
        maps.push(attn);
    }
    let concat = graph.concat_cols(&heads);
    let projected = graph.matmul(concat, p("out.weight"));
    let projected = graph.add_row(projected, p("out.bias"));
    BlockOut {
        out: graph.add(x, projected),
        maps,
    }
}

/// Applies `f` to the instance rows, leaving the class token row untouched.
fn on_instances(graph: &mut Graph, x: Var, f: impl FnOnce(&mut Graph, Var) -> Var) -> Var {
    let s = graph.shape(x).0 - 1;
    let cls = graph.slice_rows(x, 0, 1);
    let inst = graph.slice_rows(x, 1, s);
    let inst = f(graph, inst);
    graph.concat_rows(&[cls, inst])
}

fn ppeg(graph: &mut Graph, inst: Var, vars: &BTreeMap<String, Var>, kernels: &[usize]) -> Var {
    let mut acc = inst;
    for &k in kernels {
        let conv = graph.depthwise_conv(inst, vars[&format!("ppeg.k{k}.weight")]);
        let conv = graph.add_row(conv, vars[&format!("ppeg.k{k}.bias")]);
        acc = graph.add(acc, conv);
    }
    acc
}

pub(crate) fn forward(graph: &mut Graph, x: Var, vars: &BTreeMap<String, Var>, spec: &ModelSpec) -> Pooled {
    let s = graph.shape(x).0;
    let tokens = graph.concat_rows(&[vars["transmil.cls_token"], x]);

    let b1 = mhsa_block(graph, tokens, vars, "block1", spec);
    let mut h = b1.out;
    if spec.smooth == Smooth::Smtp {
        h = on_instances(graph, h, |g, inst| {
            smooth::smooth_graph(g, inst, vars["sm1.alpha"], spec.sm_iterations, spec.chain_norm)
        });
    }
    h = on_instances(graph, h, |g, inst| ppeg(g, inst, vars, &spec.ppeg_kernels));

    let b2 = mhsa_block(graph, h, vars, "block2", spec);
    let mut out = b2.out;
    if spec.smooth == Smooth::Smtp {
        // only instance tokens change; the class token read below does not
        out = on_instances(graph, out, |g, inst| {
            smooth::smooth_graph(g, inst, vars["sm2.alpha"], spec.sm_iterations, spec.chain_norm)
        });
    }
    let embedding = graph.slice_rows(out, 0, 1);

    // class-token rows of the second block, self entry dropped
    let cls_rows: Vec<Var> = b2.maps.iter().map(|&m| graph.slice_rows(m, 0, 1)).collect();
    let per_head: Vec<Var> = cls_rows
        .iter()
        .map(|&row| {
            let inst = graph.slice_cols(row, 1, s);
            graph.normalize_rows(inst)
        })
        .collect();
    let heads = graph.concat_rows(&per_head);
    let stacked = graph.concat_rows(&cls_rows);
    let mean = graph.mean_rows(stacked);
    let mean = graph.slice_cols(mean, 1, s);
    let attention = graph.normalize_rows(mean);

    Pooled {
        embedding,
        attention,
        heads: Some(heads),
    }
}
