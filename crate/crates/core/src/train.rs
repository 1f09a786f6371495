//! Mini-batch SGD with momentum, L1 penalty, best-validation checkpointing
//! and the learning-rate × L1 grid.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bagio::Dataset;
use crate::error::{Error, Result};
use crate::guidance::GuidanceSpec;
use crate::metrics::auroc;
use crate::models::{bag_objective, Model, ModelSpec, Objective, Params};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub l1_strength: f64,
    pub lr_grid: Vec<f64>,
    pub l1_grid: Vec<f64>,
    pub seed: u64,
    /// Train on at most this many bags (the first ones in file order).
    pub max_train_bags: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            momentum: 0.9,
            batch_size: 64,
            epochs: 1000,
            l1_strength: 0.0,
            lr_grid: vec![0.1, 0.01, 0.001, 0.0001],
            l1_grid: vec![1.0, 0.1, 0.01, 0.001, 0.0001, 1e-5, 1e-6, 0.0],
            seed: 0,
            max_train_bags: None,
        }
    }
}

impl TrainConfig {
    /// 2000 training bags and 200 epochs; everything else unchanged.
    pub fn desk_scale(mut self) -> Self {
        self.epochs = 200;
        self.max_train_bags = Some(2000);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if !(self.l1_strength >= 0.0) {
            return Err(Error::Config("l1_strength must be >= 0".into()));
        }
        if self.lr_grid.is_empty() || self.l1_grid.is_empty() {
            return Err(Error::Config("grids must be nonempty".into()));
        }
        Ok(())
    }
}

/// Heavy-ball SGD: v ← μv − lr·g, θ ← θ + v.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: Params,
}

impl Sgd {
    pub fn new(params: &Params, learning_rate: f64, momentum: f64) -> Self {
        Sgd {
            learning_rate,
            momentum,
            velocity: params.zeros_like(),
        }
    }

    pub fn step(&mut self, params: &mut Params, grads: &Params) {
        for (name, p) in params.tensors.iter_mut() {
            let v = self.velocity.tensors.get_mut(name).expect("velocity for every parameter");
            let g = &grads.tensors[name];
            v.zip_mut_with(g, |vv, &gg| *vv = self.momentum * *vv - self.learning_rate * gg);
            *p += &*v;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_auroc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Earliest epoch reaching the best validation AUROC.
    pub best_epoch: usize,
    pub best_val_auroc: f64,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_auroc\n");
        for r in &self.epochs {
            let _ = writeln!(out, "{},{},{}", r.epoch, r.train_loss, r.val_auroc);
        }
        out
    }
}

/// Generic minibatch loop over `n_items` examples.
///
/// `item_grad(params, i)` returns the loss and gradient of example `i`
/// (penalties included); `validate(params)` returns the score used to pick
/// the best epoch.
pub fn fit<G, V>(
    mut params: Params,
    n_items: usize,
    config: &TrainConfig,
    item_grad: G,
    validate: V,
) -> Result<Fit>
where
    G: Fn(&Params, usize) -> Result<(f64, Params)> + Sync,
    V: Fn(&Params) -> Result<f64>,
{
    config.validate()?;
    if n_items == 0 {
        return Err(Error::Validation("no training examples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_5eed);
    let mut sgd = Sgd::new(&params, config.learning_rate, config.momentum);
    let mut order: Vec<usize> = (0..n_items).collect();
    let mut history = TrainHistory {
        epochs: Vec::with_capacity(config.epochs),
        best_epoch: 0,
        best_val_auroc: f64::NEG_INFINITY,
    };
    let mut best = params.clone();

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let results: Vec<Result<(f64, Params)>> =
                batch.par_iter().map(|&i| item_grad(&params, i)).collect();
            let mut total = params.zeros_like();
            let mut batch_loss = 0.0;
            for r in results {
                let (loss, grads) = r?;
                batch_loss += loss;
                for (name, g) in grads.tensors {
                    *total.tensors.get_mut(&name).expect("known parameter") += &g;
                }
            }
            let scale = 1.0 / batch.len() as f64;
            for g in total.tensors.values_mut() {
                *g *= scale;
            }
            if !batch_loss.is_finite() || total.tensors.values().any(|g| g.iter().any(|v| !v.is_finite())) {
                return Err(Error::NonFinite(format!(
                    "non-finite loss or gradient at epoch {epoch} (batch loss {batch_loss})"
                )));
            }
            loss_sum += batch_loss;
            sgd.step(&mut params, &total);
        }
        let val = validate(&params)?;
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / n_items as f64,
            val_auroc: val,
        });
        if val > history.best_val_auroc {
            history.best_val_auroc = val;
            history.best_epoch = epoch;
            best = params.clone();
        }
    }
    Ok(Fit {
        best,
        last: params,
        history,
    })
}

/// Result of [`fit`].
#[derive(Debug, Clone)]
pub struct Fit {
    /// Parameters after the best validation epoch.
    pub best: Params,
    /// Parameters after the final epoch.
    pub last: Params,
    pub history: TrainHistory,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the best validation epoch.
    pub model: Model,
    /// Parameters after the final epoch.
    pub last_params: Params,
    pub history: TrainHistory,
}

/// Bag probabilities in dataset order.
pub fn predict(model: &Model, data: &Dataset) -> Result<Vec<f64>> {
    data.bags
        .par_iter()
        .map(|b| model.forward(&b.features_f64()).map(|f| f.probability))
        .collect()
}

pub fn bag_auroc(model: &Model, data: &Dataset) -> Result<f64> {
    let probs = predict(model, data)?;
    let labels: Vec<bool> = data.bags.iter().map(|b| b.bag_label).collect();
    auroc(&probs, &labels)
}

pub fn train(
    spec: &ModelSpec,
    guidance: Option<&GuidanceSpec>,
    config: &TrainConfig,
    train_set: &Dataset,
    val_set: &Dataset,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Validation("training and validation splits must be nonempty".into()));
    }
    if train_set.dim != spec.model_dim || val_set.dim != spec.model_dim {
        return Err(Error::Dimension(format!(
            "data has M = {}/{}, model expects {}",
            train_set.dim, val_set.dim, spec.model_dim
        )));
    }
    // the loop below only ever sees bag labels
    let limit = config.max_train_bags.unwrap_or(usize::MAX).min(train_set.len());
    let bags: Vec<(ndarray::Array2<f64>, bool)> = train_set.bags[..limit]
        .iter()
        .map(|b| (b.features_f64(), b.bag_label))
        .collect();
    let val = val_set.without_instance_labels();

    let model = Model::init(spec.clone(), config.seed)?;
    let objective = Objective {
        guidance: guidance.cloned(),
        l1_strength: config.l1_strength,
    };
    let fitted = fit(
        model.params.clone(),
        bags.len(),
        config,
        |params, i| {
            let m = Model {
                spec: spec.clone(),
                params: params.clone(),
            };
            let (x, y) = &bags[i];
            let out = bag_objective(&m, x, *y, &objective)?;
            Ok((out.loss, out.grads))
        },
        |params| {
            let m = Model {
                spec: spec.clone(),
                params: params.clone(),
            };
            bag_auroc(&m, &val)
        },
    )?;
    Ok(TrainOutcome {
        model: Model {
            spec: spec.clone(),
            params: fitted.best,
        },
        last_params: fitted.last,
        history: fitted.history,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridCell {
    pub learning_rate: f64,
    pub l1_strength: f64,
    pub best_epoch: Option<usize>,
    pub best_val_auroc: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct GridResult {
    pub cells: Vec<GridCell>,
    pub best_learning_rate: f64,
    pub best_l1_strength: f64,
    pub best: TrainOutcome,
}

impl GridResult {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("learning_rate,l1_strength,best_epoch,best_val_auroc,status\n");
        for c in &self.cells {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                c.learning_rate,
                c.l1_strength,
                c.best_epoch.map_or(String::new(), |e| e.to_string()),
                c.best_val_auroc.map_or(String::new(), |v| v.to_string()),
                c.error.as_deref().map_or("ok".to_string(), |e| format!("\"{}\"", e.replace('"', "'")))
            );
        }
        out
    }
}

/// `a` beats `b`: higher validation AUROC, then smaller L1, then smaller lr.
fn better(a: (f64, f64, f64), b: (f64, f64, f64)) -> bool {
    let (va, l1a, lra) = a;
    let (vb, l1b, lrb) = b;
    va > vb || (va == vb && (l1a < l1b || (l1a == l1b && lra < lrb)))
}

pub fn grid_search(
    spec: &ModelSpec,
    guidance: Option<&GuidanceSpec>,
    config: &TrainConfig,
    train_set: &Dataset,
    val_set: &Dataset,
) -> Result<GridResult> {
    config.validate()?;
    let grid: Vec<(f64, f64)> = config
        .lr_grid
        .iter()
        .flat_map(|&lr| config.l1_grid.iter().map(move |&l1| (lr, l1)))
        .collect();
    let workers = rayon::current_num_threads().max(1);
    let mut cells = Vec::with_capacity(grid.len());
    let mut best: Option<(f64, f64, TrainOutcome)> = None;
    for chunk in grid.chunks(workers) {
        let outcomes: Vec<Result<TrainOutcome>> = chunk
            .par_iter()
            .map(|&(lr, l1)| {
                let cfg = TrainConfig {
                    learning_rate: lr,
                    l1_strength: l1,
                    ..config.clone()
                };
                train(spec, guidance, &cfg, train_set, val_set)
            })
            .collect();
        for (&(lr, l1), outcome) in chunk.iter().zip(outcomes) {
            match outcome {
                Ok(o) => {
                    let v = o.history.best_val_auroc;
                    cells.push(GridCell {
                        learning_rate: lr,
                        l1_strength: l1,
                        best_epoch: Some(o.history.best_epoch),
                        best_val_auroc: Some(v),
                        error: None,
                    });
                    let replace = match &best {
                        None => true,
                        Some((blr, bl1, b)) => better((v, l1, lr), (b.history.best_val_auroc, *bl1, *blr)),
                    };
                    if replace {
                        best = Some((lr, l1, o));
                    }
                }
                Err(e) => cells.push(GridCell {
                    learning_rate: lr,
                    l1_strength: l1,
                    best_epoch: None,
                    best_val_auroc: None,
                    error: Some(e.to_string()),
                }),
            }
        }
    }
    let (best_learning_rate, best_l1_strength, best) =
        best.ok_or_else(|| Error::Validation("every grid cell failed".into()))?;
    Ok(GridResult {
        cells,
        best_learning_rate,
        best_l1_strength,
        best,
    })
}
