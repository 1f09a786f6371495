//! Per-bag training objective: BCE + λ·D(r, a) + L1, with gradients for
//! every parameter.

use crate::autodiff::{Gradients, Matrix, Var};
use crate::error::{Error, Result};
use crate::guidance::{divergence, GuidanceSpec};
use crate::models::{ForwardResult, Model, Params, Trace};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Objective {
    pub guidance: Option<GuidanceSpec>,
    pub l1_strength: f64,
}

#[derive(Debug, Clone)]
pub struct BagObjective {
    pub loss: f64,
    pub bce: f64,
    /// Divergence averaged over guided rows, before λ.
    pub divergence: f64,
    pub grads: Params,
    pub forward: ForwardResult,
}

impl Trace {
    /// Parameter gradients from a finished reverse pass.
    pub fn param_grads(&self, grads: &Gradients) -> Params {
        Params {
            tensors: self
                .params
                .iter()
                .map(|(name, &v)| (name.clone(), grads.get_or_zeros(v, self.graph.shape(v))))
                .collect(),
        }
    }

    /// Attention rows the guidance term acts on.
    fn guided_rows(&mut self, multi_head: bool) -> Vec<Var> {
        match (multi_head, self.head_attention) {
            (true, Some(heads)) => {
                let h = self.graph.shape(heads).0;
                (0..h).map(|i| self.graph.slice_rows(heads, i, 1)).collect()
            }
            _ => vec![self.attention],
        }
    }
}

/// Loss and gradients for one bag. The guidance reference is rebuilt from
/// the current attention on every call and enters the graph as a constant.
pub fn bag_objective(model: &Model, features: &Matrix, label: bool, objective: &Objective) -> Result<BagObjective> {
    let mut trace = model.trace(features)?;
    let target = if label { 1.0 } else { 0.0 };
    let bce = trace.graph.bce_logit(trace.logit, target);
    let mut loss = bce;
    let mut mean_div = 0.0;

    if let Some(spec) = &objective.guidance {
        spec.validate()?;
        let rows = trace.guided_rows(spec.multi_head);
        let mut terms = Vec::with_capacity(rows.len());
        for row in &rows {
            let a: Vec<f64> = trace.graph.value(*row).iter().copied().collect();
            let reference = spec.reference_for(&a)?;
            let (value, grad) = divergence(spec.divergence, &reference.r, &a, spec.epsilon)?;
            mean_div += value / rows.len() as f64;
            let grad = Matrix::from_shape_vec((1, grad.len()), grad).expect("1×S");
            terms.push(trace.graph.penalty(*row, value, grad));
        }
        if spec.lambda > 0.0 {
            let mut total = terms[0];
            for &t in &terms[1..] {
                total = trace.graph.add(total, t);
            }
            let scaled = trace.graph.scale(total, spec.lambda / rows.len() as f64);
            loss = trace.graph.add(loss, scaled);
        }
    }

    let mut value = trace.graph.scalar(loss);
    let grads = trace.graph.backward(loss, 1.0)?;
    let mut param_grads = trace.param_grads(&grads);

    if objective.l1_strength < 0.0 {
        return Err(Error::Config("l1_strength must be >= 0".into()));
    }
    if objective.l1_strength > 0.0 {
        value += objective.l1_strength * model.params.l1_norm();
        for (name, g) in param_grads.tensors.iter_mut() {
            if Params::is_penalized(name) {
                let w = model.params.get(name)?;
                // subgradient 0 at w = 0
                g.zip_mut_with(w, |gv, &wv| {
                    if wv != 0.0 {
                        *gv += objective.l1_strength * wv.signum();
                    }
                });
            }
        }
    }

    Ok(BagObjective {
        loss: value,
        bce: trace.graph.scalar(bce),
        divergence: mean_div,
        grads: param_grads,
        forward: trace.result(),
    })
}
