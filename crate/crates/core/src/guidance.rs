//! Reference distributions over instance positions, divergences with exact
//! gradients, and the guided objective.
//!
//! Positions are 1-based (`j = 1..S`) in every formula here.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{bce_with_logit, norm_pdf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceKind {
    NormalGuidance,
    CenteredGaussian,
    LabelGuidance,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceDistribution {
    pub r: Vec<f64>,
    pub kind: ReferenceKind,
    /// The reference is a constant for differentiation.
    pub stop_gradient: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Divergence {
    #[serde(rename = "se")]
    SquaredError,
    #[serde(rename = "fkl")]
    ForwardKl,
    #[serde(rename = "rkl")]
    ReverseKl,
}

impl Divergence {
    pub const ALL: [Divergence; 3] = [Divergence::SquaredError, Divergence::ForwardKl, Divergence::ReverseKl];

    pub fn short_name(self) -> &'static str {
        match self {
            Divergence::SquaredError => "se",
            Divergence::ForwardKl => "fkl",
            Divergence::ReverseKl => "rkl",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "se" | "squared_error" => Ok(Divergence::SquaredError),
            "fkl" | "forward_kl" => Ok(Divergence::ForwardKl),
            "rkl" | "reverse_kl" => Ok(Divergence::ReverseKl),
            other => Err(Error::Config(format!("unknown divergence {other:?}"))),
        }
    }
}

/// Which reference a training run regularizes attention toward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceReference {
    /// Moment-matched discretized normal of the current attention.
    Normal,
    /// Fixed unit-variance bell at the bag centre.
    Centered,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceSpec {
    #[serde(default = "default_divergence")]
    pub divergence: Divergence,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_variance_floor")]
    pub variance_floor: f64,
    #[serde(default = "default_reference")]
    pub reference: GuidanceReference,
    /// Guide every head of a multi-head model separately and average the
    /// divergences; otherwise the head-averaged attention is guided.
    #[serde(default = "default_multi_head")]
    pub multi_head: bool,
}

fn default_divergence() -> Divergence {
    Divergence::ForwardKl
}
fn default_lambda() -> f64 {
    1.0
}
fn default_epsilon() -> f64 {
    1e-12
}
fn default_variance_floor() -> f64 {
    0.25
}
fn default_reference() -> GuidanceReference {
    GuidanceReference::Normal
}
fn default_multi_head() -> bool {
    true
}

impl Default for GuidanceSpec {
    fn default() -> Self {
        GuidanceSpec {
            divergence: default_divergence(),
            lambda: default_lambda(),
            epsilon: default_epsilon(),
            variance_floor: default_variance_floor(),
            reference: default_reference(),
            multi_head: default_multi_head(),
        }
    }
}

impl GuidanceSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("epsilon must be > 0".into()));
        }
        if !(self.variance_floor > 0.0) {
            return Err(Error::Config("variance_floor must be > 0".into()));
        }
        Ok(())
    }

    /// Reference for one attention row under this spec.
    pub fn reference_for(&self, attention: &[f64]) -> Result<ReferenceDistribution> {
        match self.reference {
            GuidanceReference::Normal => normal_reference(attention, self.variance_floor),
            GuidanceReference::Centered => Ok(centered_gaussian_reference(attention.len())),
        }
    }
}

fn discretized_normal(s: usize, mean: f64, var: f64) -> Vec<f64> {
    let raw: Vec<f64> = (1..=s).map(|j| norm_pdf(j as f64, mean, var)).collect();
    let total: f64 = raw.iter().sum();
    if total > 0.0 && total.is_finite() {
        raw.into_iter().map(|v| v / total).collect()
    } else {
        // mean far outside 1..S with a tiny variance underflows every
        // density; fall back to the nearest position
        let nearest = (mean.round().clamp(1.0, s as f64) as usize) - 1;
        (0..s).map(|j| if j == nearest { 1.0 } else { 0.0 }).collect()
    }
}

/// r_j ∝ NormPDF(j | S/2, 1).
pub fn centered_gaussian_reference(s: usize) -> ReferenceDistribution {
    ReferenceDistribution {
        r: discretized_normal(s.max(1), s as f64 / 2.0, 1.0),
        kind: ReferenceKind::CenteredGaussian,
        stop_gradient: true,
    }
}

/// Moments E[J] and Var(J) of the attended position.
pub fn position_moments(a: &[f64]) -> (f64, f64) {
    let mean: f64 = a.iter().enumerate().map(|(j, &w)| (j + 1) as f64 * w).sum();
    let second: f64 = a.iter().enumerate().map(|(j, &w)| ((j + 1) as f64).powi(2) * w).sum();
    (mean, second - mean * mean)
}

/// Discretized normal matching the first two moments of the attention.
pub fn normal_reference(a: &[f64], variance_floor: f64) -> Result<ReferenceDistribution> {
    if a.is_empty() {
        return Err(Error::Validation("attention vector is empty".into()));
    }
    let total: f64 = a.iter().sum();
    if (total - 1.0).abs() > 1e-6 || a.iter().any(|&w| !(w >= -1e-12)) {
        return Err(Error::Validation(format!(
            "attention must be a probability vector (sum = {total})"
        )));
    }
    let (mean, var) = position_moments(a);
    Ok(ReferenceDistribution {
        r: discretized_normal(a.len(), mean, var.max(variance_floor)),
        kind: ReferenceKind::NormalGuidance,
        stop_gradient: true,
    })
}

/// Uniform over positive instances, or over all instances for a negative bag.
pub fn label_reference(instance_labels: &[bool], bag_label: bool) -> Result<ReferenceDistribution> {
    let s = instance_labels.len();
    if s == 0 {
        return Err(Error::Validation("empty label vector".into()));
    }
    let r = if bag_label {
        let k = instance_labels.iter().filter(|&&l| l).count();
        if k == 0 {
            return Err(Error::Validation("positive bag without positive instances".into()));
        }
        instance_labels
            .iter()
            .map(|&l| if l { 1.0 / k as f64 } else { 0.0 })
            .collect()
    } else {
        if instance_labels.iter().any(|&l| l) {
            return Err(Error::Validation("negative bag with a positive instance".into()));
        }
        vec![1.0 / s as f64; s]
    };
    Ok(ReferenceDistribution {
        r,
        kind: ReferenceKind::LabelGuidance,
        stop_gradient: true,
    })
}

/// Value of D(r, a) and its gradient with respect to `a`; `r` is constant.
pub fn divergence(kind: Divergence, r: &[f64], a: &[f64], epsilon: f64) -> Result<(f64, Vec<f64>)> {
    if r.len() != a.len() {
        return Err(Error::Dimension(format!("reference length {} vs attention {}", r.len(), a.len())));
    }
    let mut value = 0.0;
    let mut grad = vec![0.0; a.len()];
    for j in 0..a.len() {
        let (rj, aj) = (r[j], a[j]);
        match kind {
            Divergence::SquaredError => {
                value += (rj - aj).powi(2);
                grad[j] = -2.0 * (rj - aj);
            }
            Divergence::ForwardKl => {
                if rj > 0.0 {
                    let ac = aj.max(epsilon);
                    value += rj * (rj / ac).ln();
                    grad[j] = if aj > epsilon { -rj / aj } else { 0.0 };
                }
            }
            Divergence::ReverseKl => {
                if aj > 0.0 {
                    let log_ratio = (aj.max(epsilon) / rj.max(epsilon)).ln();
                    value += aj * log_ratio;
                    grad[j] = if aj > epsilon { log_ratio + 1.0 } else { log_ratio };
                }
            }
        }
    }
    Ok((value, grad))
}

/// BCE plus λ times the divergence, averaged over heads when several
/// (reference, attention) pairs are given.
pub fn guided_loss(
    y: bool,
    logit: f64,
    pairs: &[(&[f64], &[f64])],
    spec: &GuidanceSpec,
) -> Result<f64> {
    if spec.lambda < 0.0 {
        return Err(Error::Config("lambda must be >= 0".into()));
    }
    let bce = bce_with_logit(logit, y as u8 as f64);
    if spec.lambda == 0.0 || pairs.is_empty() {
        return Ok(bce);
    }
    let mut total = 0.0;
    for (r, a) in pairs {
        total += divergence(spec.divergence, r, a, spec.epsilon)?.0;
    }
    Ok(bce + spec.lambda * total / pairs.len() as f64)
}
