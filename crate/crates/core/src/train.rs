//! Full-batch training with gradient descent or Adam.

use std::io::{self, Write};

use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adcore::AdError;
use crate::conservation::{ConservationError, DiagnosticsRecord};
use crate::fmt_f64;
use crate::graphio::Dataset;
use crate::init::{initialize, InitError, InitSpec};
use crate::model::{accuracy, Dropout, GatNetwork, ModelError, NetworkConfig, Params};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("training mask is empty")]
    EmptyMask,
    #[error("non-finite gradient")]
    NonFiniteGradient,
    #[error("gradient layout does not match parameters")]
    LayoutMismatch,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Init(#[from] InitError),
    #[error(transparent)]
    Conservation(#[from] ConservationError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Gd,
    Adam,
}

fn default_max_epochs() -> usize {
    5000
}
fn default_converge_loss() -> f64 {
    1e-4
}
fn default_diag_every() -> usize {
    25
}
fn default_change_threshold() -> f64 {
    0.5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub lr: f64,
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_converge_loss")]
    pub converge_loss: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub dropout: f64,
    /// Diagnostics cadence in epochs; 0 disables snapshots.
    #[serde(default = "default_diag_every")]
    pub diag_every: usize,
    /// Relative-change threshold for the per-snapshot change fraction.
    #[serde(default = "default_change_threshold")]
    pub change_threshold: f64,
    #[serde(default)]
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(optimizer: Optimizer, lr: f64) -> Self {
        TrainConfig {
            optimizer,
            lr,
            max_epochs: default_max_epochs(),
            converge_loss: default_converge_loss(),
            weight_decay: 0.0,
            dropout: 0.0,
            diag_every: default_diag_every(),
            change_threshold: default_change_threshold(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        Ok(())
    }
}

fn check_grads(params: &Params, grads: &Params) -> Result<(), TrainError> {
    if !params.same_layout(grads) {
        return Err(TrainError::LayoutMismatch);
    }
    if !grads.is_finite() {
        return Err(TrainError::NonFiniteGradient);
    }
    Ok(())
}

/// `w <- w - lr (g + weight_decay w)`.
pub fn gd_step(params: &mut Params, grads: &Params, lr: f64, weight_decay: f64) -> Result<(), TrainError> {
    check_grads(params, grads)?;
    for (p, g) in params.tensors_mut().zip(grads.tensors()) {
        for (w, &d) in p.data_mut().iter_mut().zip(g.data()) {
            *w -= lr * (d + weight_decay * *w);
        }
    }
    Ok(())
}

/// Moment estimates for Adam.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Params,
    pub v: Params,
    pub step: u64,
}

impl AdamState {
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.999;
    pub const EPS: f64 = 1e-8;

    pub fn new(like: &Params) -> Self {
        let mut m = like.clone();
        for t in m.tensors_mut() {
            t.data_mut().fill(0.0);
        }
        AdamState { v: m.clone(), m, step: 0 }
    }
}

/// Bias-corrected Adam update. Weight decay is added to the gradient.
pub fn adam_step(
    params: &mut Params,
    grads: &Params,
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
) -> Result<(), TrainError> {
    check_grads(params, grads)?;
    if !state.m.same_layout(params) {
        return Err(TrainError::LayoutMismatch);
    }
    state.step += 1;
    let b1 = AdamState::BETA1;
    let b2 = AdamState::BETA2;
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    let tensors = params.tensors_mut().zip(grads.tensors()).zip(state.m.tensors_mut().zip(state.v.tensors_mut()));
    for ((p, g), (m, v)) in tensors {
        let it = p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut().iter_mut().zip(v.data_mut()));
        for ((w, &d), (mi, vi)) in it {
            let d = d + weight_decay * *w;
            *mi = b1 * *mi + (1.0 - b1) * d;
            *vi = b2 * *vi + (1.0 - b2) * d * d;
            *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + AdamState::EPS);
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    pub test_acc: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Earliest epoch attaining the highest validation accuracy.
    pub best_epoch: usize,
    pub best_params: Params,
    pub init_params: Params,
    pub final_params: Params,
    pub diagnostics: Vec<DiagnosticsRecord>,
    pub converged: bool,
    pub diverged_at: Option<usize>,
}

pub const HISTORY_HEADER: &str = "epoch,train_loss,train_acc,val_acc,test_acc";

impl TrainHistory {
    /// Metrics of the best epoch; `None` if no epoch completed.
    pub fn best(&self) -> Option<&EpochRecord> {
        self.epochs.get(self.best_epoch)
    }

    pub fn write_history_csv(&self, out: &mut impl Write) -> io::Result<()> {
        writeln!(out, "{HISTORY_HEADER}")?;
        for r in &self.epochs {
            writeln!(
                out,
                "{},{},{},{},{}",
                r.epoch,
                fmt_f64(r.train_loss),
                fmt_f64(r.train_acc),
                fmt_f64(r.val_acc),
                fmt_f64(r.test_acc)
            )?;
        }
        Ok(())
    }

    pub fn write_diagnostics_csv(&self, out: &mut impl Write) -> io::Result<()> {
        writeln!(out, "{}", crate::conservation::DIAGNOSTICS_HEADER)?;
        for d in &self.diagnostics {
            d.write_csv(out)?;
        }
        Ok(())
    }
}

/// Training ids minus isolated nodes.
pub fn loss_mask(data: &Dataset) -> Vec<usize> {
    let isolated = data.graph.isolated_nodes();
    if isolated.is_empty() {
        return data.train.clone();
    }
    let mask: Vec<usize> = data.train.iter().copied().filter(|v| isolated.binary_search(v).is_err()).collect();
    if mask.len() != data.train.len() {
        warn!("excluding {} isolated training nodes from the loss", data.train.len() - mask.len());
    }
    mask
}

fn is_divergence(e: &ModelError) -> bool {
    matches!(e, ModelError::Ad(AdError::NonFinite { .. }))
}

/// Initializes a network and trains it.
pub fn train(
    data: &Dataset,
    net_config: &NetworkConfig,
    init: &InitSpec,
    config: &TrainConfig,
) -> Result<TrainHistory, TrainError> {
    let net = initialize(net_config, init)?;
    train_network(net, data, config)
}

/// Trains `net` on `data` from its current parameters.
pub fn train_network(mut net: GatNetwork, data: &Dataset, config: &TrainConfig) -> Result<TrainHistory, TrainError> {
    config.validate()?;
    net.config.validate()?;
    net.check_layout()?;
    let mask = loss_mask(data);
    if mask.is_empty() {
        return Err(TrainError::EmptyMask);
    }
    let graph = if net.config.self_loops { data.graph.add_self_loops() } else { data.graph.clone() };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = (config.optimizer == Optimizer::Adam).then(|| AdamState::new(&net.params));
    let init_params = net.params.clone();
    let mut previous: Option<Params> = None;
    let mut h = TrainHistory {
        epochs: Vec::new(),
        best_epoch: 0,
        best_params: net.params.clone(),
        init_params: init_params.clone(),
        final_params: net.params.clone(),
        diagnostics: Vec::new(),
        converged: false,
        diverged_at: None,
    };
    let mut best_val = f64::NEG_INFINITY;
    let is_diag = |e: usize| config.diag_every > 0 && e.is_multiple_of(config.diag_every);

    for epoch in 0..config.max_epochs {
        let pass = if config.dropout > 0.0 {
            net.forward_with_dropout(&graph, &data.features, Dropout { rate: config.dropout, rng: &mut rng })
        } else {
            net.forward(&graph, &data.features)
        };
        let outcome = pass.and_then(|p| p.loss_and_grads(&data.labels, &mask));
        let (loss, grads, logits) = match outcome {
            Ok(v) => v,
            Err(e) if is_divergence(&e) => {
                warn!("training diverged at epoch {epoch}");
                h.diverged_at = Some(epoch);
                break;
            }
            Err(e) => return Err(e.into()),
        };
        let logits = if config.dropout > 0.0 { net.forward(&graph, &data.features)?.logits().clone() } else { logits };
        let rec = EpochRecord {
            epoch,
            train_loss: loss,
            train_acc: accuracy(&logits, &data.labels, &data.train),
            val_acc: accuracy(&logits, &data.labels, &data.val),
            test_acc: accuracy(&logits, &data.labels, &data.test),
        };
        h.epochs.push(rec);
        if rec.val_acc > best_val {
            best_val = rec.val_acc;
            h.best_epoch = epoch;
            h.best_params = net.params.clone();
        }
        if is_diag(epoch) {
            let d = DiagnosticsRecord::capture(
                epoch,
                &net,
                &grads,
                &init_params,
                previous.as_ref(),
                config.change_threshold,
            )?;
            h.diagnostics.push(d);
        }
        if loss <= config.converge_loss {
            h.converged = true;
            break;
        }
        previous = is_diag(epoch + 1).then(|| net.params.clone());
        let step = match adam.as_mut() {
            Some(state) => adam_step(&mut net.params, &grads, state, config.lr, config.weight_decay),
            None => gd_step(&mut net.params, &grads, config.lr, config.weight_decay),
        };
        match step {
            Err(TrainError::NonFiniteGradient) => {
                h.diverged_at = Some(epoch);
                break;
            }
            other => other?,
        }
        if !net.params.is_finite() {
            warn!("parameters became non-finite after epoch {epoch}");
            h.diverged_at = Some(epoch + 1);
            break;
        }
    }
    h.final_params = net.params;
    Ok(h)
}
