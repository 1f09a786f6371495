//! Pooling architectures on top of the autodiff graph.
//!
//! Every model maps an S×M bag to a bag embedding, an attention vector over
//! the S instances and a logit from the linear classifier head.

mod checkpoint;
mod objective;
mod pooling;
mod smooth;
mod transmil;

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{ChainNorm, Graph, Matrix, Var};
use crate::error::{Error, Result};
use crate::numeric::sigmoid;

pub use checkpoint::{load_checkpoint, read_params, save_checkpoint, sidecar_path, write_params};
pub use objective::{bag_objective, BagObjective, Objective};
pub use pooling::max_pool_attention;
pub use smooth::smooth_operator;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Max,
    Mean,
    Abmil,
    Transmil,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Smooth {
    None,
    /// One smoother before ABMIL attention pooling.
    Smap,
    /// One smoother after each TransMIL self-attention block.
    Smtp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub pooling: Pooling,
    #[serde(default = "default_smooth")]
    pub smooth: Smooth,
    #[serde(default = "default_hidden")]
    pub attention_hidden_dim: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    #[serde(default = "default_model_dim")]
    pub model_dim: usize,
    #[serde(default = "default_kernels")]
    pub ppeg_kernels: Vec<usize>,
    #[serde(default = "default_iterations")]
    pub sm_iterations: usize,
    #[serde(default = "default_chain_norm")]
    pub chain_norm: ChainNorm,
    #[serde(default = "default_ln_eps")]
    pub layer_norm_eps: f64,
}

fn default_smooth() -> Smooth {
    Smooth::None
}
fn default_hidden() -> usize {
    128
}
fn default_heads() -> usize {
    8
}
fn default_model_dim() -> usize {
    768
}
fn default_kernels() -> Vec<usize> {
    vec![3, 5, 7]
}
fn default_iterations() -> usize {
    10
}
fn default_chain_norm() -> ChainNorm {
    ChainNorm::Symmetric
}
fn default_ln_eps() -> f64 {
    1e-5
}

impl ModelSpec {
    pub fn new(pooling: Pooling, model_dim: usize) -> Self {
        ModelSpec {
            pooling,
            smooth: Smooth::None,
            attention_hidden_dim: default_hidden(),
            heads: default_heads(),
            model_dim,
            ppeg_kernels: default_kernels(),
            sm_iterations: default_iterations(),
            chain_norm: default_chain_norm(),
            layer_norm_eps: default_ln_eps(),
        }
    }

    pub fn with_smooth(mut self, smooth: Smooth) -> Self {
        self.smooth = smooth;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 {
            return Err(Error::Config("model_dim must be positive".into()));
        }
        match (self.pooling, self.smooth) {
            (_, Smooth::None) | (Pooling::Abmil, Smooth::Smap) | (Pooling::Transmil, Smooth::Smtp) => {}
            (p, s) => {
                return Err(Error::Config(format!(
                    "smoothing {s:?} is not available for {p:?} pooling"
                )))
            }
        }
        if self.pooling == Pooling::Abmil && self.attention_hidden_dim == 0 {
            return Err(Error::Config("attention_hidden_dim must be positive".into()));
        }
        if self.pooling == Pooling::Transmil {
            if self.heads == 0 || self.model_dim % self.heads != 0 {
                return Err(Error::Config(format!(
                    "model_dim {} is not divisible by {} heads",
                    self.model_dim, self.heads
                )));
            }
            if self.ppeg_kernels.iter().any(|k| k % 2 == 0) {
                return Err(Error::Config("PPEG kernels must have odd length".into()));
            }
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        let base = format!("{:?}", self.pooling).to_lowercase();
        match self.smooth {
            Smooth::None => base,
            s => format!("{base}+{}", format!("{s:?}").to_lowercase()),
        }
    }
}

/// Named trainable tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Params {
    pub tensors: BTreeMap<String, Matrix>,
}

impl Params {
    pub fn get(&self, name: &str) -> Result<&Matrix> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Validation(format!("missing parameter {name}")))
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) {
        self.tensors.insert(name.into(), value);
    }

    /// Whether the L1 penalty applies: weights of pooling modules and the
    /// classifier, not biases, class token, norm affine or smoothing scalars.
    pub fn is_penalized(name: &str) -> bool {
        name.ends_with(".weight")
    }

    pub fn l1_norm(&self) -> f64 {
        self.tensors
            .iter()
            .filter(|(n, _)| Self::is_penalized(n))
            .map(|(_, t)| t.iter().map(|v| v.abs()).sum::<f64>())
            .sum()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    pub fn zeros_like(&self) -> Params {
        Params {
            tensors: self
                .tensors
                .iter()
                .map(|(n, t)| (n.clone(), Matrix::zeros(t.dim())))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: Params,
}

/// Graph of one forward pass with handles to its outputs.
pub struct Trace {
    pub graph: Graph,
    pub params: BTreeMap<String, Var>,
    /// 1×M
    pub embedding: Var,
    /// 1×1
    pub logit: Var,
    /// 1×S pooled attention.
    pub attention: Var,
    /// H×S per-head attention (TransMIL only).
    pub head_attention: Option<Var>,
}

/// Plain values of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardResult {
    pub embedding: Vec<f64>,
    pub attention: Vec<f64>,
    pub head_attention: Option<Array2<f64>>,
    pub logit: f64,
    pub probability: f64,
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn normal(&mut self, rows: usize, cols: usize, fan_in: usize) -> Matrix {
        let dist = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).expect("valid std");
        Matrix::from_shape_simple_fn((rows, cols), || dist.sample(&mut self.rng))
    }
}

impl Model {
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Model> {
        spec.validate()?;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let m = spec.model_dim;
        let mut params = Params::default();
        match spec.pooling {
            Pooling::Max | Pooling::Mean => {}
            Pooling::Abmil => {
                let l = spec.attention_hidden_dim;
                params.insert("abmil.v.weight", init.normal(l, m, m));
                params.insert("abmil.w.weight", init.normal(1, l, l));
                if spec.smooth == Smooth::Smap {
                    params.insert("sm.alpha", Matrix::zeros((1, 1)));
                }
            }
            Pooling::Transmil => {
                params.insert("transmil.cls_token", Matrix::zeros((1, m)));
                for block in ["block1", "block2"] {
                    params.insert(format!("{block}.ln.gamma"), Matrix::ones((1, m)));
                    params.insert(format!("{block}.ln.beta"), Matrix::zeros((1, m)));
                    for proj in ["q", "k", "v", "out"] {
                        params.insert(format!("{block}.{proj}.weight"), init.normal(m, m, m));
                        params.insert(format!("{block}.{proj}.bias"), Matrix::zeros((1, m)));
                    }
                }
                for &k in &spec.ppeg_kernels {
                    params.insert(format!("ppeg.k{k}.weight"), init.normal(m, k, k));
                    params.insert(format!("ppeg.k{k}.bias"), Matrix::zeros((1, m)));
                }
                if spec.smooth == Smooth::Smtp {
                    params.insert("sm1.alpha", Matrix::zeros((1, 1)));
                    params.insert("sm2.alpha", Matrix::zeros((1, 1)));
                }
            }
        }
        params.insert("classifier.weight", init.normal(1, m, m));
        params.insert("classifier.bias", Matrix::zeros((1, 1)));
        Ok(Model { spec, params })
    }

    pub fn from_parts(spec: ModelSpec, params: Params) -> Result<Model> {
        spec.validate()?;
        let reference = Model::init(spec.clone(), 0)?;
        for (name, t) in &reference.params.tensors {
            let got = params.get(name)?;
            if got.dim() != t.dim() {
                return Err(Error::Dimension(format!(
                    "parameter {name}: expected {:?}, got {:?}",
                    t.dim(),
                    got.dim()
                )));
            }
        }
        if params.tensors.len() != reference.params.tensors.len() {
            return Err(Error::Validation("checkpoint holds unexpected parameters".into()));
        }
        Ok(Model { spec, params })
    }

    /// Records one forward pass over `features` (S×M).
    pub fn trace(&self, features: &Matrix) -> Result<Trace> {
        let (s, m) = features.dim();
        if s == 0 {
            return Err(Error::Validation("empty bag".into()));
        }
        if m != self.spec.model_dim {
            return Err(Error::Dimension(format!(
                "bag has M = {m}, model expects {}",
                self.spec.model_dim
            )));
        }
        let mut graph = Graph::new();
        let mut vars = BTreeMap::new();
        for (name, value) in &self.params.tensors {
            vars.insert(name.clone(), graph.param(value.clone()));
        }
        let x = graph.constant(features.clone());
        let pooled = match self.spec.pooling {
            Pooling::Mean => pooling::mean_pool(&mut graph, x),
            Pooling::Max => pooling::max_pool(&mut graph, x),
            Pooling::Abmil => pooling::abmil(&mut graph, x, &vars, &self.spec),
            Pooling::Transmil => transmil::forward(&mut graph, x, &vars, &self.spec),
        };
        let logit = classifier(&mut graph, pooled.embedding, vars["classifier.weight"], vars["classifier.bias"]);
        Ok(Trace {
            graph,
            params: vars,
            embedding: pooled.embedding,
            logit,
            attention: pooled.attention,
            head_attention: pooled.heads,
        })
    }

    pub fn forward(&self, features: &Matrix) -> Result<ForwardResult> {
        let t = self.trace(features)?;
        Ok(t.result())
    }
}

impl Trace {
    pub fn result(&self) -> ForwardResult {
        let logit = self.graph.scalar(self.logit);
        ForwardResult {
            embedding: self.graph.value(self.embedding).iter().copied().collect(),
            attention: self.graph.value(self.attention).iter().copied().collect(),
            head_attention: self.head_attention.map(|h| self.graph.value(h).clone()),
            logit,
            probability: sigmoid(logit),
        }
    }
}

pub(crate) struct Pooled {
    pub embedding: Var,
    pub attention: Var,
    pub heads: Option<Var>,
}

/// logit = w·z + b on a 1×M embedding.
pub fn classifier(graph: &mut Graph, z: Var, weight: Var, bias: Var) -> Var {
    let dot = graph.matmul_t(z, weight);
    graph.add(dot, bias)
}

/// (logit, probability) for plain vectors.
pub fn classify(z: &[f64], weight: &[f64], bias: f64) -> (f64, f64) {
    let logit = z.iter().zip(weight).map(|(a, b)| a * b).sum::<f64>() + bias;
    (logit, sigmoid(logit))
}

#[cfg(test)]
mod tests;
