//! Conservation-law quantities computed from parameter and gradient
//! snapshots.
//!
//! For hidden neuron `i` of layer `l` (all sums over the neuron's fan, see
//! [`NetworkConfig::neuron_fan`]):
//!
//! ```text
//! delta = <W^l[i,:], dW^l[i,:]> - a^l[i] da^l[i] - <W^{l+1}[:,i], dW^{l+1}[:,i]>
//! c     = |W^l[i,:]|^2 - a^l[i]^2 - |W^{l+1}[:,i]|^2
//! ```
//!
//! Without weight sharing the target matrices `W_t^l[i,:]` and
//! `W_t^{l+1}[:,i]` join the incoming and outgoing terms respectively.
//! `delta` vanishes identically for positively homogeneous activations and
//! `c` is then constant under gradient flow.

use std::io::{self, Write};

use thiserror::Error;

use crate::adcore::Tensor;
use crate::fmt_f64;
use crate::graphio::Dataset;
use crate::model::{GatNetwork, ModelError, NetworkConfig, NeuronFan, Params};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConservationError {
    #[error("parameter snapshots have different layouts")]
    LayoutMismatch,
    #[error("layer {layer} has zero feature-weight norm")]
    ZeroWeightNorm { layer: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

type Result<T> = std::result::Result<T, ConservationError>;

/// The three constituent sums of one neuron's gradient identity.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DeltaTerms {
    pub incoming: f64,
    pub attention: f64,
    pub outgoing: f64,
}

impl DeltaTerms {
    pub fn value(&self) -> f64 {
        self.incoming - self.attention - self.outgoing
    }

    pub fn scale(&self) -> f64 {
        self.incoming.abs().max(self.attention.abs()).max(self.outgoing.abs())
    }

    /// `|delta|` over the largest constituent magnitude; 0 when all terms
    /// vanish.
    pub fn relative(&self) -> f64 {
        let s = self.scale();
        if s == 0.0 {
            0.0
        } else {
            self.value().abs() / s
        }
    }
}

fn row_dot(a: &Tensor, b: &Tensor, r: usize) -> f64 {
    a.row(r).iter().zip(b.row(r)).map(|(x, y)| x * y).sum()
}

fn col_dot(a: &Tensor, b: &Tensor, c: usize) -> f64 {
    a.col_iter(c).zip(b.col_iter(c)).map(|(x, y)| x * y).sum()
}

fn check_layout(params: &Params, other: &Params) -> Result<()> {
    if params.same_layout(other) {
        Ok(())
    } else {
        Err(ConservationError::LayoutMismatch)
    }
}

/// Sum of `f(param, other)` over the fan's incoming rows, attention
/// entries, and outgoing columns.
fn fan_terms(
    p: &Params,
    q: &Params,
    layer: usize,
    fan: &NeuronFan,
    rowf: impl Fn(&Tensor, &Tensor, usize) -> f64,
    colf: impl Fn(&Tensor, &Tensor, usize) -> f64,
) -> DeltaTerms {
    let mut t = DeltaTerms::default();
    for &(k, r) in &fan.incoming {
        let (hp, hq) = (&p.layer(layer).heads[k], &q.layer(layer).heads[k]);
        t.incoming += hp.feature_mats().zip(hq.feature_mats()).map(|(x, y)| rowf(x, y, r)).sum::<f64>();
        t.attention += hp.a.data()[r] * hq.a.data()[r];
    }
    for &(k, c) in &fan.outgoing {
        let (hp, hq) = (&p.layer(layer + 1).heads[k], &q.layer(layer + 1).heads[k]);
        t.outgoing += hp.feature_mats().zip(hq.feature_mats()).map(|(x, y)| colf(x, y, c)).sum::<f64>();
    }
    t
}

/// Constituent terms of `delta` for neuron `i` of hidden layer `layer`.
pub fn delta_terms(net: &GatNetwork, grads: &Params, layer: usize, i: usize) -> Result<DeltaTerms> {
    check_layout(&net.params, grads)?;
    let fan = net.config.neuron_fan(layer, i)?;
    Ok(fan_terms(&net.params, grads, layer, &fan, row_dot, col_dot))
}

pub fn delta(net: &GatNetwork, grads: &Params, layer: usize, i: usize) -> Result<f64> {
    Ok(delta_terms(net, grads, layer, i)?.value())
}

pub fn delta_relative(net: &GatNetwork, grads: &Params, layer: usize, i: usize) -> Result<f64> {
    Ok(delta_terms(net, grads, layer, i)?.relative())
}

/// Balancedness constant of neuron `i` in hidden layer `layer`.
pub fn c_value(net: &GatNetwork, layer: usize, i: usize) -> Result<f64> {
    let fan = net.config.neuron_fan(layer, i)?;
    let p = &net.params;
    let t = fan_terms(p, p, layer, &fan, |x, _, r| x.row_norm_sq(r), |x, _, c| x.col_norm_sq(c));
    Ok(t.value())
}

/// `delta` summed over the neurons of one hidden layer. Equals
/// `<W^l, dW^l> - <a^l, da^l> - <W^{l+1}, dW^{l+1}>`.
pub fn layer_delta(net: &GatNetwork, grads: &Params, layer: usize) -> Result<f64> {
    let mut s = 0.0;
    for i in 0..net.config.widths[layer] {
        s += delta(net, grads, layer, i)?;
    }
    Ok(s)
}

/// Worst-case `delta` over every hidden neuron.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DeltaSummary {
    pub max_abs: f64,
    /// Max of `|delta| / max|term|`.
    pub max_relative: f64,
    /// Max of `|delta| / (1 + max|term|)`.
    pub max_unit_relative: f64,
}

pub fn delta_summary(net: &GatNetwork, grads: &Params) -> Result<DeltaSummary> {
    let mut s = DeltaSummary::default();
    for l in 1..net.depth() {
        for i in 0..net.config.widths[l] {
            let t = delta_terms(net, grads, l, i)?;
            let v = t.value().abs();
            s.max_abs = s.max_abs.max(v);
            s.max_relative = s.max_relative.max(t.relative());
            s.max_unit_relative = s.max_unit_relative.max(v / (1.0 + t.scale()));
        }
    }
    Ok(s)
}

pub fn max_abs_c(net: &GatNetwork) -> f64 {
    let mut m: f64 = 0.0;
    for l in 1..net.depth() {
        for i in 0..net.config.widths[l] {
            m = m.max(c_value(net, l, i).expect("in range").abs());
        }
    }
    m
}

fn feature_inner(p: &Params, q: &Params, layer: usize) -> f64 {
    p.layer(layer)
        .heads
        .iter()
        .zip(&q.layer(layer).heads)
        .flat_map(|(hp, hq)| hp.feature_mats().zip(hq.feature_mats()))
        .map(|(x, y)| x.dot(y))
        .sum()
}

fn attention_inner(p: &Params, q: &Params, layer: usize) -> f64 {
    p.layer(layer).heads.iter().zip(&q.layer(layer).heads).map(|(hp, hq)| hp.a.dot(&hq.a)).sum()
}

/// `sum <W^1, dW^1> - sum_{l<L} <a^l, da^l> - sum <W^L, dW^L>`; zero for
/// single-layer networks. Equals the sum of `delta` over all hidden
/// neurons.
pub fn telescoped_residual(net: &GatNetwork, grads: &Params) -> Result<f64> {
    check_layout(&net.params, grads)?;
    let depth = net.depth();
    if depth < 2 {
        return Ok(0.0);
    }
    let p = &net.params;
    let first = feature_inner(p, grads, 1);
    let attn: f64 = (1..depth).map(|l| attention_inner(p, grads, l)).sum();
    let last = feature_inner(p, grads, depth);
    Ok(first - attn - last)
}

/// Layer quantity `|W^l|^2 - |a^l|^2 - |W^{l+1}|^2` (hidden `layer`).
pub fn layer_quantity(params: &Params, layer: usize) -> f64 {
    feature_inner(params, params, layer)
        - attention_inner(params, params, layer)
        - feature_inner(params, params, layer + 1)
}

/// Change of the layer quantity across one optimizer step. Zero under
/// exact gradient flow; a finite step leaves an `O(lr^2)` residue.
pub fn layer_law_drift(before: &Params, after: &Params, layer: usize) -> Result<f64> {
    check_layout(before, after)?;
    if layer == 0 || layer + 1 > before.layers.len() {
        return Err(ModelError::LayerOutOfRange { layer, max: before.layers.len().saturating_sub(1) }.into());
    }
    Ok(layer_quantity(after, layer) - layer_quantity(before, layer))
}

/// Per-layer `|dW|_F / |W|_F`, and the same for attention when `|a| > 0`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RelGradNorm {
    pub w: f64,
    pub a: Option<f64>,
}

pub fn relative_grad_norms(net: &GatNetwork, grads: &Params) -> Result<Vec<RelGradNorm>> {
    check_layout(&net.params, grads)?;
    let p = &net.params;
    (1..=net.depth())
        .map(|l| {
            let wn = feature_inner(p, p, l).sqrt();
            if wn == 0.0 {
                return Err(ConservationError::ZeroWeightNorm { layer: l });
            }
            let gn = feature_inner(grads, grads, l).sqrt();
            let an = attention_inner(p, p, l).sqrt();
            let a = (an > 0.0).then(|| attention_inner(grads, grads, l).sqrt() / an);
            Ok(RelGradNorm { w: gn / wn, a })
        })
        .collect()
}

/// Per-layer change statistics between two snapshots.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ChangeStats {
    /// Among feature weights with `|w*| >= sig`, the fraction with
    /// `|(w* - w0) / w*| > threshold`.
    pub feature_fraction: f64,
    /// Fraction of attention entries with `|a* - a0| > threshold`.
    pub attention_fraction: f64,
    /// Fraction of feature weights with `w* == w0`, unfiltered.
    pub zero_change_fraction: f64,
}

fn fraction(hits: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}

pub fn param_change_stats(init: &Params, best: &Params, sig: f64, threshold: f64) -> Result<Vec<ChangeStats>> {
    check_layout(init, best)?;
    Ok(init
        .layers
        .iter()
        .zip(&best.layers)
        .map(|(l0, l1)| {
            let (mut sig_n, mut changed, mut same, mut all) = (0, 0, 0, 0);
            let (mut a_n, mut a_changed) = (0, 0);
            for (h0, h1) in l0.heads.iter().zip(&l1.heads) {
                for (m0, m1) in h0.feature_mats().zip(h1.feature_mats()) {
                    for (&w0, &w1) in m0.data().iter().zip(m1.data()) {
                        all += 1;
                        if w0 == w1 {
                            same += 1;
                        }
                        if w1.abs() >= sig {
                            sig_n += 1;
                            if ((w1 - w0) / w1).abs() > threshold {
                                changed += 1;
                            }
                        }
                    }
                }
                for (&a0, &a1) in h0.a.data().iter().zip(h1.a.data()) {
                    a_n += 1;
                    if (a1 - a0).abs() > threshold {
                        a_changed += 1;
                    }
                }
            }
            ChangeStats {
                feature_fraction: fraction(changed, sig_n),
                attention_fraction: fraction(a_changed, a_n),
                zero_change_fraction: fraction(same, all),
            }
        })
        .collect())
}

/// Significance filter on trained weights.
pub const SIGNIFICANCE: f64 = 1e-4;

/// One diagnostics snapshot.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagnosticsRecord {
    pub epoch: usize,
    /// `delta[l-1][i]` for hidden layers `l = 1..L-1`.
    pub delta: Vec<Vec<f64>>,
    pub delta_abs_max: Vec<f64>,
    pub delta_abs_mean: Vec<f64>,
    pub c: Vec<Vec<f64>>,
    /// Layer-law drift over the step that produced this snapshot; absent
    /// before the first step.
    pub layer_norm_drift: Option<Vec<f64>>,
    /// All layers `1..=L`.
    pub rel_grad_norm_w: Vec<f64>,
    pub rel_grad_norm_a: Vec<Option<f64>>,
    pub change_fraction: Vec<f64>,
    pub zero_change_fraction: Vec<f64>,
}

pub const DIAGNOSTICS_HEADER: &str = "epoch,layer,metric,neuron,value";

impl DiagnosticsRecord {
    /// Snapshot at parameters `net` with gradient `grads`; `init` is the
    /// epoch-0 parameter set and `previous` the parameters one step back.
    pub fn capture(
        epoch: usize,
        net: &GatNetwork,
        grads: &Params,
        init: &Params,
        previous: Option<&Params>,
        change_threshold: f64,
    ) -> Result<Self> {
        let depth = net.depth();
        let mut delta = Vec::new();
        let mut c = Vec::new();
        for l in 1..depth {
            let n = net.config.widths[l];
            delta.push((0..n).map(|i| self::delta(net, grads, l, i)).collect::<Result<Vec<_>>>()?);
            c.push((0..n).map(|i| c_value(net, l, i)).collect::<Result<Vec<_>>>()?);
        }
        let delta_abs_max = delta.iter().map(|d| d.iter().fold(0.0f64, |m, x| m.max(x.abs()))).collect();
        let delta_abs_mean = delta.iter().map(|d| d.iter().map(|x| x.abs()).sum::<f64>() / d.len() as f64).collect();
        let layer_norm_drift = previous
            .map(|prev| (1..depth).map(|l| layer_law_drift(prev, &net.params, l)).collect::<Result<Vec<_>>>())
            .transpose()?;
        let p = &net.params;
        let (rel_grad_norm_w, rel_grad_norm_a) = (1..=depth)
            .map(|l| {
                let wn = feature_inner(p, p, l).sqrt();
                let w = feature_inner(grads, grads, l).sqrt() / wn;
                let an = attention_inner(p, p, l).sqrt();
                let a = (an > 0.0).then(|| attention_inner(grads, grads, l).sqrt() / an);
                (w, a)
            })
            .unzip();
        let stats = param_change_stats(init, p, SIGNIFICANCE, change_threshold)?;
        Ok(DiagnosticsRecord {
            epoch,
            delta,
            delta_abs_max,
            delta_abs_mean,
            c,
            layer_norm_drift,
            rel_grad_norm_w,
            rel_grad_norm_a,
            change_fraction: stats.iter().map(|s| s.feature_fraction).collect(),
            zero_change_fraction: stats.iter().map(|s| s.zero_change_fraction).collect(),
        })
    }

    /// Appends this record's rows (no header). Layer aggregates use neuron
    /// `-1`; an undefined attention ratio is written as `undefined`.
    pub fn write_csv(&self, out: &mut impl Write) -> io::Result<()> {
        let e = self.epoch;
        for (li, (d, c)) in self.delta.iter().zip(&self.c).enumerate() {
            let l = li + 1;
            for (i, x) in d.iter().enumerate() {
                writeln!(out, "{e},{l},delta,{i},{}", fmt_f64(*x))?;
            }
            writeln!(out, "{e},{l},delta_abs_max,-1,{}", fmt_f64(self.delta_abs_max[li]))?;
            writeln!(out, "{e},{l},delta_abs_mean,-1,{}", fmt_f64(self.delta_abs_mean[li]))?;
            for (i, x) in c.iter().enumerate() {
                writeln!(out, "{e},{l},c,{i},{}", fmt_f64(*x))?;
            }
            if let Some(drift) = &self.layer_norm_drift {
                writeln!(out, "{e},{l},layer_norm_drift,-1,{}", fmt_f64(drift[li]))?;
            }
        }
        for li in 0..self.rel_grad_norm_w.len() {
            let l = li + 1;
            writeln!(out, "{e},{l},rel_grad_norm_w,-1,{}", fmt_f64(self.rel_grad_norm_w[li]))?;
            match self.rel_grad_norm_a[li] {
                Some(a) => writeln!(out, "{e},{l},rel_grad_norm_a,-1,{}", fmt_f64(a))?,
                None => writeln!(out, "{e},{l},rel_grad_norm_a,-1,undefined")?,
            }
            writeln!(out, "{e},{l},change_fraction,-1,{}", fmt_f64(self.change_fraction[li]))?;
            writeln!(out, "{e},{l},zero_change_fraction,-1,{}", fmt_f64(self.zero_change_fraction[li]))?;
        }
        Ok(())
    }
}

/// Largest relative loss change over rescales of the listed neurons.
pub fn max_rescale_deviation(
    net: &GatNetwork,
    data: &Dataset,
    mask: &[usize],
    picks: &[(usize, usize)],
    lambdas: &[f64],
) -> Result<f64> {
    let base = net.loss(data, mask)?;
    let mut worst: f64 = 0.0;
    for &(l, i) in picks {
        for &lambda in lambdas {
            let moved = net.rescale_neuron(l, i, lambda)?.loss(data, mask)?;
            worst = worst.max((moved - base).abs() / base.abs().max(f64::MIN_POSITIVE));
        }
    }
    Ok(worst)
}

/// Every `(layer, neuron)` pair of the hidden layers.
pub fn hidden_neurons(config: &NetworkConfig) -> Vec<(usize, usize)> {
    (1..config.depth()).flat_map(|l| (0..config.widths[l]).map(move |i| (l, i))).collect()
}
