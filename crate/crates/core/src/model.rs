//! GATv2 / GCN-mean networks and their forward pass on the tape.
//!
//! Layer `l` maps `h^{l-1}` to
//! `h_v^l = phi(sum_{u in N(v)} alpha_uv W_s h_u^{l-1})` with
//! `alpha_uv = softmax_u(a^T LeakyReLU(W_s h_u^{l-1} + W_t h_v^{l-1}))`,
//! and `W_s = W_t = W` under weight sharing. The `gcn_mean` variant fixes
//! `alpha_uv = 1/|N(v)|`, which is what `a = 0` gives.
//!
//! Layer numbers in the public API are 1-based (`1..=L`), matching the
//! usual notation; neuron indices are 0-based.

use std::borrow::Cow;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adcore::{Activation, AdError, Gradients, Tape, Tensor, Var};
use crate::graphio::{Dataset, Graph};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid network config: {0}")]
    InvalidConfig(String),
    #[error("layer {layer} outside 1..={max}")]
    LayerOutOfRange { layer: usize, max: usize },
    #[error("neuron {neuron} outside layer of width {width}")]
    NeuronOutOfRange { neuron: usize, width: usize },
    #[error("rescale factor must be positive and finite, got {0}")]
    InvalidScale(f64),
    #[error("input has {got} features, network expects {expected}")]
    FeatureDim { expected: usize, got: usize },
    #[error("parameter layout does not match the network config")]
    LayoutMismatch,
    #[error(transparent)]
    Ad(#[from] AdError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadAggregation {
    Concat,
    Average,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Gatv2,
    GcnMean,
}

/// Architecture of a network.
///
/// With `K > 1` heads and concat aggregation, each hidden layer's output is
/// the concatenation of `K` slices of width `n_l / K`, and head `k` of the
/// next layer reads only slice `k`. With average aggregation every head has
/// the full width `n_l` and reads the full (averaged) input. The output
/// layer always averages its heads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    /// `n_0, ..., n_L`.
    pub widths: Vec<usize>,
    pub heads: usize,
    pub head_agg: HeadAggregation,
    pub activation: Activation,
    /// Negative slope of the LeakyReLU inside the attention score.
    pub attn_slope: f64,
    pub weight_sharing: bool,
    pub variant: Variant,
    pub final_activation: bool,
    pub self_loops: bool,
}

/// Shape of one head's feature matrix and the input columns it reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadGeometry {
    pub rows: usize,
    pub cols: usize,
    pub input_offset: usize,
}

/// Parameters attached to neuron `i` of a hidden layer: the rows it owns in
/// the layer's heads (incoming weights and attention entry) and the columns
/// that read it in the next layer's heads (outgoing weights).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NeuronFan {
    pub incoming: Vec<(usize, usize)>,
    pub outgoing: Vec<(usize, usize)>,
}

impl NetworkConfig {
    /// Single-head, weight-shared GATv2 with ReLU, self-loops, and linear
    /// output logits.
    pub fn new(widths: Vec<usize>) -> Self {
        NetworkConfig {
            widths,
            heads: 1,
            head_agg: HeadAggregation::Concat,
            activation: Activation::Relu,
            attn_slope: 0.2,
            weight_sharing: true,
            variant: Variant::Gatv2,
            final_activation: false,
            self_loops: true,
        }
    }

    /// `n_0 -> hidden x (depth - 1) -> n_L`.
    pub fn uniform(in_dim: usize, hidden: usize, depth: usize, classes: usize) -> Self {
        let mut widths = vec![in_dim];
        widths.extend(std::iter::repeat_n(hidden, depth.saturating_sub(1)));
        widths.push(classes);
        NetworkConfig::new(widths)
    }

    pub fn depth(&self) -> usize {
        self.widths.len().saturating_sub(1)
    }

    pub fn has_target_weights(&self) -> bool {
        !self.weight_sharing && self.variant == Variant::Gatv2
    }

    pub fn has_attention(&self) -> bool {
        self.variant == Variant::Gatv2
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.depth() == 0 {
            return bad("need at least one layer".into());
        }
        if self.widths.contains(&0) {
            return bad(format!("zero width in {:?}", self.widths));
        }
        if self.heads == 0 {
            return bad("heads must be >= 1".into());
        }
        if self.head_agg == HeadAggregation::Concat {
            for l in 1..self.depth() {
                if !self.widths[l].is_multiple_of(self.heads) {
                    return bad(format!("hidden width {} not divisible by {} heads", self.widths[l], self.heads));
                }
            }
        }
        if !(self.attn_slope > 0.0 && self.attn_slope < 1.0) {
            return bad(format!("attn_slope {} outside (0, 1)", self.attn_slope));
        }
        self.activation.validate()?;
        Ok(())
    }

    fn concat_output(&self, layer: usize) -> bool {
        self.head_agg == HeadAggregation::Concat && layer < self.depth()
    }

    fn sliced_input(&self, layer: usize) -> bool {
        self.head_agg == HeadAggregation::Concat && layer > 1
    }

    /// Geometry of head `k` in layer `layer` (1-based).
    pub fn head_geometry(&self, layer: usize, k: usize) -> HeadGeometry {
        let out = self.widths[layer];
        let inp = self.widths[layer - 1];
        let rows = if self.concat_output(layer) { out / self.heads } else { out };
        let (cols, input_offset) = if self.sliced_input(layer) {
            let s = inp / self.heads;
            (s, k * s)
        } else {
            (inp, 0)
        };
        HeadGeometry { rows, cols, input_offset }
    }

    pub fn check_layer(&self, layer: usize, max: usize) -> Result<(), ModelError> {
        if layer == 0 || layer > max {
            return Err(ModelError::LayerOutOfRange { layer, max });
        }
        Ok(())
    }

    /// Parameter coordinates of hidden neuron `i` of layer `layer`
    /// (`1 <= layer <= L - 1`).
    pub fn neuron_fan(&self, layer: usize, i: usize) -> Result<NeuronFan, ModelError> {
        self.check_layer(layer, self.depth().saturating_sub(1))?;
        let width = self.widths[layer];
        if i >= width {
            return Err(ModelError::NeuronOutOfRange { neuron: i, width });
        }
        let incoming = if self.concat_output(layer) {
            let s = width / self.heads;
            vec![(i / s, i % s)]
        } else {
            (0..self.heads).map(|k| (k, i)).collect()
        };
        let outgoing = if self.sliced_input(layer + 1) {
            let s = width / self.heads;
            vec![(i / s, i % s)]
        } else {
            (0..self.heads).map(|k| (k, i)).collect()
        };
        Ok(NeuronFan { incoming, outgoing })
    }
}

/// Parameters of one attention head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadParams {
    /// Source (and, when shared, target) feature matrix.
    pub w: Tensor,
    /// Target feature matrix when weights are not shared.
    pub w_t: Option<Tensor>,
    /// Attention vector as a column; all zeros and frozen for `gcn_mean`.
    pub a: Tensor,
}

impl HeadParams {
    /// Feature matrices of the head (`w`, then `w_t` if present).
    pub fn feature_mats(&self) -> impl Iterator<Item = &Tensor> {
        std::iter::once(&self.w).chain(self.w_t.as_ref())
    }

    pub fn feature_mats_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        std::iter::once(&mut self.w).chain(self.w_t.as_mut())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub heads: Vec<HeadParams>,
}

/// Per-layer, per-head parameters. Gradients use the same layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub layers: Vec<LayerParams>,
}

impl Params {
    pub fn zeros(config: &NetworkConfig) -> Self {
        let layers = (1..=config.depth())
            .map(|l| LayerParams {
                heads: (0..config.heads)
                    .map(|k| {
                        let g = config.head_geometry(l, k);
                        HeadParams {
                            w: Tensor::zeros(g.rows, g.cols),
                            w_t: config.has_target_weights().then(|| Tensor::zeros(g.rows, g.cols)),
                            a: Tensor::zeros(g.rows, 1),
                        }
                    })
                    .collect(),
            })
            .collect();
        Params { layers }
    }

    /// Layer `layer`, 1-based.
    pub fn layer(&self, layer: usize) -> &LayerParams {
        &self.layers[layer - 1]
    }

    pub fn layer_mut(&mut self, layer: usize) -> &mut LayerParams {
        &mut self.layers[layer - 1]
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flat_map(|l| l.heads.iter()).flat_map(|h| h.feature_mats().chain(std::iter::once(&h.a)))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers.iter_mut().flat_map(|l| l.heads.iter_mut()).flat_map(|h| {
            let HeadParams { w, w_t, a } = h;
            std::iter::once(w).chain(w_t.as_mut()).chain(std::iter::once(a))
        })
    }

    pub fn same_layout(&self, other: &Params) -> bool {
        self.tensors().count() == other.tensors().count()
            && self.tensors().zip(other.tensors()).all(|(a, b)| a.shape() == b.shape())
    }

    pub fn num_values(&self) -> usize {
        self.tensors().map(Tensor::len).sum()
    }

    /// All values in `tensors()` order.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors().flat_map(|t| t.data().iter().copied()).collect()
    }

    /// Inverse of [`Params::flatten`].
    pub fn assign_flat(&mut self, values: &[f64]) {
        assert_eq!(values.len(), self.num_values());
        let mut off = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&values[off..off + n]);
            off += n;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().all(Tensor::is_finite)
    }
}

/// A configured network with its parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GatNetwork {
    pub config: NetworkConfig,
    pub params: Params,
}

/// Tape handles of one head's parameters.
#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub w: Var,
    pub w_t: Option<Var>,
    pub a: Option<Var>,
}

/// A recorded forward pass.
#[derive(Debug)]
pub struct ForwardPass {
    pub tape: Tape,
    pub logits: Var,
    /// Parameter handles per layer and head.
    pub params: Vec<Vec<HeadVars>>,
    /// Attention coefficients (`E x 1`) per layer and head.
    pub attention: Vec<Vec<Var>>,
    pub graph: Graph,
}

impl ForwardPass {
    /// Masked cross-entropy on the tape, then one backward sweep.
    pub fn loss_and_grads(
        mut self,
        labels: &Arc<[usize]>,
        mask: &[usize],
    ) -> Result<(f64, Params, Tensor), ModelError> {
        let loss = self.tape.masked_cross_entropy(self.logits, labels.clone(), Arc::from(mask))?;
        let loss_value = self.tape.value(loss).data()[0];
        let logits = self.tape.value(self.logits).clone();
        let mut grads = self.tape.backward(loss)?;
        let params = collect_grads(&self.params, &mut grads, &logits);
        Ok((loss_value, params, logits))
    }

    pub fn logits(&self) -> &Tensor {
        self.tape.value(self.logits)
    }
}

fn collect_grads(vars: &[Vec<HeadVars>], grads: &mut Gradients, _logits: &Tensor) -> Params {
    let layers = vars
        .iter()
        .map(|heads| LayerParams {
            heads: heads
                .iter()
                .map(|hv| {
                    let w = grads.take(hv.w).expect("param gradient");
                    let w_t = hv.w_t.map(|v| grads.take(v).expect("param gradient"));
                    let a = match hv.a {
                        Some(v) => grads.take(v).expect("param gradient"),
                        None => Tensor::zeros(w.rows(), 1),
                    };
                    HeadParams { w, w_t, a }
                })
                .collect(),
        })
        .collect();
    Params { layers }
}

/// Dropout on layer inputs: each entry is zeroed with probability `rate`
/// and survivors are scaled by `1 / (1 - rate)`.
pub struct Dropout<'a> {
    pub rate: f64,
    pub rng: &'a mut ChaCha8Rng,
}

/// Records the parameters of `net` on `tape`.
pub fn register_params(tape: &mut Tape, net: &GatNetwork) -> Result<Vec<Vec<HeadVars>>, ModelError> {
    let attention = net.config.has_attention();
    net.params
        .layers
        .iter()
        .map(|layer| {
            layer
                .heads
                .iter()
                .map(|h| {
                    Ok(HeadVars {
                        w: tape.param(h.w.clone())?,
                        w_t: h.w_t.as_ref().map(|t| tape.param(t.clone())).transpose()?,
                        a: if attention { Some(tape.param(h.a.clone())?) } else { None },
                    })
                })
                .collect()
        })
        .collect()
}

/// One layer (1-based `layer`) applied to `h_in`. Returns the layer output
/// and each head's attention coefficients.
pub fn layer_forward(
    tape: &mut Tape,
    config: &NetworkConfig,
    layer: usize,
    heads: &[HeadVars],
    h_in: Var,
    graph: &Graph,
) -> Result<(Var, Vec<Var>), ModelError> {
    let seg = graph.segments().clone();
    let mut outs = Vec::with_capacity(heads.len());
    let mut alphas = Vec::with_capacity(heads.len());
    let in_width = tape.value(h_in).cols();
    let is_last = layer == config.depth();
    let gcn_weights = match config.variant {
        Variant::GcnMean => {
            let w: Vec<f64> = graph.targets().iter().map(|&v| 1.0 / graph.in_degree(v) as f64).collect();
            Some(tape.constant(Tensor::column(&w))?)
        }
        Variant::Gatv2 => None,
    };
    for (k, hv) in heads.iter().enumerate() {
        let geo = config.head_geometry(layer, k);
        let x = if geo.input_offset == 0 && geo.cols == in_width {
            h_in
        } else {
            tape.slice_cols(h_in, geo.input_offset, geo.input_offset + geo.cols)?
        };
        let w_t = tape.transpose(hv.w)?;
        let z = tape.matmul(x, w_t)?;
        let z_src = tape.gather_rows(z, graph.sources().clone())?;
        let alpha = match (config.variant, gcn_weights) {
            (Variant::GcnMean, Some(w)) => w,
            _ => {
                let z_tgt_nodes = match hv.w_t {
                    Some(wt) => {
                        let wt_t = tape.transpose(wt)?;
                        tape.matmul(x, wt_t)?
                    }
                    None => z,
                };
                let z_tgt = tape.gather_rows(z_tgt_nodes, graph.targets().clone())?;
                let pre = tape.add(z_src, z_tgt)?;
                let act = tape.activation(pre, Activation::LeakyRelu(config.attn_slope))?;
                let a = hv.a.ok_or(ModelError::LayoutMismatch)?;
                let scores = tape.matmul(act, a)?;
                tape.segment_softmax(scores, seg.clone())?
            }
        };
        let mut out = tape.segment_weighted_sum(z_src, alpha, seg.clone())?;
        if !is_last || config.final_activation {
            out = tape.activation(out, config.activation)?;
        }
        outs.push(out);
        alphas.push(alpha);
    }
    let combined = if outs.len() == 1 {
        outs[0]
    } else if config.head_agg == HeadAggregation::Concat && !is_last {
        tape.concat_cols(&outs)?
    } else {
        let mut acc = outs[0];
        for &o in &outs[1..] {
            acc = tape.add(acc, o)?;
        }
        tape.scale(acc, 1.0 / outs.len() as f64)?
    };
    Ok((combined, alphas))
}

impl GatNetwork {
    /// Network with all-zero parameters.
    pub fn zeros(config: NetworkConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let params = Params::zeros(&config);
        Ok(GatNetwork { config, params })
    }

    pub fn depth(&self) -> usize {
        self.config.depth()
    }

    pub fn head(&self, layer: usize, k: usize) -> &HeadParams {
        &self.params.layers[layer - 1].heads[k]
    }

    pub fn head_mut(&mut self, layer: usize, k: usize) -> &mut HeadParams {
        &mut self.params.layers[layer - 1].heads[k]
    }

    pub fn check_layout(&self) -> Result<(), ModelError> {
        if self.params.same_layout(&Params::zeros(&self.config)) {
            Ok(())
        } else {
            Err(ModelError::LayoutMismatch)
        }
    }

    /// Records the whole network on a fresh tape.
    pub fn forward(&self, graph: &Graph, features: &Tensor) -> Result<ForwardPass, ModelError> {
        self.forward_impl(graph, features, None)
    }

    pub fn forward_with_dropout(
        &self,
        graph: &Graph,
        features: &Tensor,
        dropout: Dropout<'_>,
    ) -> Result<ForwardPass, ModelError> {
        self.forward_impl(graph, features, Some(dropout))
    }

    fn forward_impl(
        &self,
        graph: &Graph,
        features: &Tensor,
        mut dropout: Option<Dropout<'_>>,
    ) -> Result<ForwardPass, ModelError> {
        if features.cols() != self.config.widths[0] {
            return Err(ModelError::FeatureDim { expected: self.config.widths[0], got: features.cols() });
        }
        if features.rows() != graph.num_nodes() {
            return Err(ModelError::InvalidConfig(format!(
                "{} feature rows for {} nodes",
                features.rows(),
                graph.num_nodes()
            )));
        }
        let graph: Cow<'_, Graph> = if self.config.self_loops && !graph.self_loops_added() {
            Cow::Owned(graph.add_self_loops())
        } else {
            Cow::Borrowed(graph)
        };
        let mut tape = Tape::new();
        let vars = register_params(&mut tape, self)?;
        let mut h = tape.constant(features.clone())?;
        let mut attention = Vec::with_capacity(vars.len());
        for (idx, heads) in vars.iter().enumerate() {
            if let Some(d) = dropout.as_mut() {
                if d.rate > 0.0 {
                    let (r, c) = tape.value(h).shape();
                    let keep = 1.0 / (1.0 - d.rate);
                    let mask: Vec<f64> =
                        (0..r * c).map(|_| if d.rng.random::<f64>() < d.rate { 0.0 } else { keep }).collect();
                    h = tape.mul_const(h, Tensor::new(r, c, mask)?)?;
                }
            }
            let (out, alphas) = layer_forward(&mut tape, &self.config, idx + 1, heads, h, &graph)?;
            h = out;
            attention.push(alphas);
        }
        Ok(ForwardPass { tape, logits: h, params: vars, attention, graph: graph.into_owned() })
    }

    /// Mean cross-entropy over `mask` and its gradient.
    pub fn loss_and_grads(&self, data: &Dataset, mask: &[usize]) -> Result<(f64, Params), ModelError> {
        let pass = self.forward(&data.graph, &data.features)?;
        let (loss, grads, _) = pass.loss_and_grads(&data.labels, mask)?;
        Ok((loss, grads))
    }

    pub fn loss(&self, data: &Dataset, mask: &[usize]) -> Result<f64, ModelError> {
        let mut pass = self.forward(&data.graph, &data.features)?;
        let l = pass.tape.masked_cross_entropy(pass.logits, data.labels.clone(), Arc::from(mask))?;
        Ok(pass.tape.value(l).data()[0])
    }

    pub fn logits(&self, data: &Dataset) -> Result<Tensor, ModelError> {
        let pass = self.forward(&data.graph, &data.features)?;
        Ok(pass.logits().clone())
    }

    /// Copy of the network with neuron `i` of hidden layer `layer` rescaled:
    /// incoming rows times `lambda`, attention entry and outgoing columns
    /// times `1 / lambda`.
    pub fn rescale_neuron(&self, layer: usize, i: usize, lambda: f64) -> Result<GatNetwork, ModelError> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(ModelError::InvalidScale(lambda));
        }
        let fan = self.config.neuron_fan(layer, i)?;
        let mut net = self.clone();
        for &(k, row) in &fan.incoming {
            let h = net.head_mut(layer, k);
            for m in h.feature_mats_mut() {
                m.scale_row(row, lambda);
            }
            h.a.data_mut()[row] /= lambda;
        }
        for &(k, col) in &fan.outgoing {
            for m in net.head_mut(layer + 1, k).feature_mats_mut() {
                m.scale_col(col, 1.0 / lambda);
            }
        }
        Ok(net)
    }
}

/// Index of the largest logit per row; ties go to the lowest class.
pub fn predictions(logits: &Tensor) -> Vec<usize> {
    (0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            let mut best = 0;
            for (c, &x) in row.iter().enumerate() {
                if x > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

pub fn accuracy(logits: &Tensor, labels: &[usize], mask: &[usize]) -> f64 {
    if mask.is_empty() {
        return 0.0;
    }
    let pred = predictions(logits);
    let hits = mask.iter().filter(|&&v| pred[v] == labels[v]).count();
    hits as f64 / mask.len() as f64
}
