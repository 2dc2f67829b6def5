//! Parameter initialization schemes.
//!
//! Every scheme is a pure function of `(NetworkConfig, InitSpec)`: the RNG is
//! a `ChaCha8Rng` seeded from `InitSpec::seed`, and draws happen layer by
//! layer, head by head, in the order `W`, `W_t`, `a`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adcore::Tensor;
use crate::model::{GatNetwork, ModelError, NetworkConfig};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InitError {
    #[error("beta must be positive and finite, got {0}")]
    InvalidBeta(f64),
    #[error("degenerate norm {norm:e} at layer {layer}, neuron {neuron}")]
    DegenerateNorm { layer: usize, neuron: usize, norm: f64 },
    #[error("infeasible widths: {0}")]
    InfeasibleWidths(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    Xavier,
    XavierZeroAttn,
    BalXavier,
    BalLlortho,
    Identity,
    LlIdentity,
    BalIdentity,
    BalLlIdentity,
}

impl InitScheme {
    pub fn is_balanced(self) -> bool {
        matches!(
            self,
            InitScheme::BalXavier | InitScheme::BalLlortho | InitScheme::BalIdentity | InitScheme::BalLlIdentity
        )
    }
}

fn default_beta() -> f64 {
    2.0
}

/// Initialization block of an experiment config.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitSpec {
    pub scheme: InitScheme,
    /// Target squared norm of first-layer rows; used by `bal_xavier`.
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default)]
    pub seed: u64,
}

impl InitSpec {
    pub fn new(scheme: InitScheme, seed: u64) -> Self {
        InitSpec { scheme, beta: default_beta(), seed }
    }

    pub fn validate(&self) -> Result<(), InitError> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(InitError::InvalidBeta(self.beta));
        }
        Ok(())
    }
}

/// Builds a network from `config` according to `spec`.
pub fn initialize(config: &NetworkConfig, spec: &InitSpec) -> Result<GatNetwork, InitError> {
    spec.validate()?;
    let net = GatNetwork::zeros(config.clone())?;
    match spec.scheme {
        InitScheme::Xavier => Ok(xavier(&net, spec.seed, false)),
        InitScheme::XavierZeroAttn => Ok(xavier(&net, spec.seed, true)),
        InitScheme::BalXavier => balance(&xavier(&net, spec.seed, false), spec.beta),
        InitScheme::BalLlortho => balance(&ll_orthogonal(&net, spec.seed)?, 2.0),
        InitScheme::Identity => identity_variant(&net, IdentityKind::Identity, spec.seed),
        InitScheme::LlIdentity => identity_variant(&net, IdentityKind::LlIdentity, spec.seed),
        InitScheme::BalIdentity => balance(&identity_variant(&net, IdentityKind::Identity, spec.seed)?, 1.0),
        InitScheme::BalLlIdentity => balance(&identity_variant(&net, IdentityKind::LlIdentity, spec.seed)?, 2.0),
    }
}

fn uniform_fill(t: &mut Tensor, bound: f64, rng: &mut ChaCha8Rng) {
    for x in t.data_mut() {
        *x = rng.random_range(-bound..=bound);
    }
}

fn xavier_bound(fan_out: usize, fan_in: usize) -> f64 {
    (6.0 / (fan_out + fan_in) as f64).sqrt()
}

/// Uniform Xavier draw for every head's matrices. The attention vector is
/// treated as an `n x 1` matrix, so `E a[i]^2 = 2 / (1 + n)`.
pub fn xavier(net: &GatNetwork, seed: u64, zero_attention: bool) -> GatNetwork {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = net.clone();
    let attention = out.config.has_attention();
    for layer in &mut out.params.layers {
        for head in &mut layer.heads {
            let (r, c) = head.w.shape();
            let bound = xavier_bound(r, c);
            uniform_fill(&mut head.w, bound, &mut rng);
            if let Some(wt) = head.w_t.as_mut() {
                uniform_fill(wt, bound, &mut rng);
            }
            if attention && !zero_attention {
                uniform_fill(&mut head.a, xavier_bound(r, 1), &mut rng);
            } else {
                head.a = Tensor::zeros(r, 1);
            }
        }
    }
    out
}

/// `(head, row)` pairs holding the incoming weights of neuron `i` in any
/// layer `1..=L`.
fn incoming_rows(config: &NetworkConfig, layer: usize, i: usize) -> Result<Vec<(usize, usize)>, InitError> {
    if layer < config.depth() {
        return Ok(config.neuron_fan(layer, i)?.incoming);
    }
    Ok((0..config.heads).map(|k| (k, i)).collect())
}

fn incoming_norm_sq(net: &GatNetwork, layer: usize, rows: &[(usize, usize)]) -> f64 {
    rows.iter().map(|&(k, r)| net.head(layer, k).feature_mats().map(|m| m.row_norm_sq(r)).sum::<f64>()).sum()
}

/// Layerwise balancing: zero all attention, scale every first-layer
/// neuron's incoming rows to squared norm `beta`, then walk `l = 1..L-1`
/// and scale each neuron's outgoing columns so their squared norm equals
/// that of its incoming rows. Afterwards `c = 0` for every hidden neuron.
pub fn balance(net: &GatNetwork, beta: f64) -> Result<GatNetwork, InitError> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(InitError::InvalidBeta(beta));
    }
    let mut out = net.clone();
    for h in out.params.layers.iter_mut().flat_map(|l| l.heads.iter_mut()) {
        h.a = Tensor::zeros(h.a.rows(), 1);
    }
    let config = out.config.clone();
    for i in 0..config.widths[1] {
        let rows = incoming_rows(&config, 1, i)?;
        let norm = incoming_norm_sq(&out, 1, &rows);
        if norm.sqrt() <= 1e-12 {
            return Err(InitError::DegenerateNorm { layer: 1, neuron: i, norm: norm.sqrt() });
        }
        let s = (beta / norm).sqrt();
        for &(k, r) in &rows {
            for m in out.head_mut(1, k).feature_mats_mut() {
                m.scale_row(r, s);
            }
        }
    }
    for l in 1..config.depth() {
        for i in 0..config.widths[l] {
            let fan = config.neuron_fan(l, i)?;
            let inc = incoming_norm_sq(&out, l, &fan.incoming);
            let outg: f64 = fan
                .outgoing
                .iter()
                .map(|&(k, col)| out.head(l + 1, k).feature_mats().map(|m| m.col_norm_sq(col)).sum::<f64>())
                .sum();
            if outg.sqrt() <= 1e-12 {
                return Err(InitError::DegenerateNorm { layer: l + 1, neuron: i, norm: outg.sqrt() });
            }
            let s = (inc / outg).sqrt();
            for &(k, col) in &fan.outgoing {
                for m in out.head_mut(l + 1, k).feature_mats_mut() {
                    m.scale_col(col, s);
                }
            }
        }
    }
    Ok(out)
}

/// Orthonormal rows if `rows <= cols`, orthonormal columns otherwise,
/// obtained by Gram-Schmidt on a standard Gaussian draw.
pub fn random_orthonormal(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let mut g = Tensor::zeros(rows, cols);
    for x in g.data_mut() {
        *x = rng.sample(StandardNormal);
    }
    if rows <= cols {
        orthonormalize_rows(&mut g);
        g
    } else {
        let mut t = g.transpose();
        orthonormalize_rows(&mut t);
        t.transpose()
    }
}

/// Modified Gram-Schmidt with one re-orthogonalization pass per row.
fn orthonormalize_rows(m: &mut Tensor) {
    let cols = m.cols();
    for r in 0..m.rows() {
        for _pass in 0..2 {
            for p in 0..r {
                let proj: f64 = (0..cols).map(|c| m.get(r, c) * m.get(p, c)).sum();
                for c in 0..cols {
                    let v = m.get(r, c) - proj * m.get(p, c);
                    m.set(r, c, v);
                }
            }
        }
        let n = m.row_norm_sq(r).sqrt();
        m.scale_row(r, 1.0 / n);
    }
}

/// `[U; -U]`.
fn ll_stack(u: &Tensor) -> Tensor {
    let (r, c) = u.shape();
    let mut w = Tensor::zeros(2 * r, c);
    for i in 0..r {
        for j in 0..c {
            w.set(i, j, u.get(i, j));
            w.set(i + r, j, -u.get(i, j));
        }
    }
    w
}

/// `[U, -U]`.
fn ll_side(u: &Tensor) -> Tensor {
    let (r, c) = u.shape();
    let mut w = Tensor::zeros(r, 2 * c);
    for i in 0..r {
        for j in 0..c {
            w.set(i, j, u.get(i, j));
            w.set(i, j + c, -u.get(i, j));
        }
    }
    w
}

/// `[[U, -U], [-U, U]]`.
fn ll_block(u: &Tensor) -> Tensor {
    let (r, c) = u.shape();
    let mut w = Tensor::zeros(2 * r, 2 * c);
    for i in 0..r {
        for j in 0..c {
            let x = u.get(i, j);
            w.set(i, j, x);
            w.set(i, j + c, -x);
            w.set(i + r, j, -x);
            w.set(i + r, j + c, x);
        }
    }
    w
}

fn need_even(what: &str, n: usize) -> Result<(), InitError> {
    if !n.is_multiple_of(2) {
        return Err(InitError::InfeasibleWidths(format!("{what} has odd extent {n}")));
    }
    Ok(())
}

/// Looks-linear matrix for one head, with `make_u(rows, cols)` supplying
/// the block `U`.
fn ll_matrix(
    layer: usize,
    depth: usize,
    rows: usize,
    cols: usize,
    make_u: &mut dyn FnMut(usize, usize) -> Result<Tensor, InitError>,
) -> Result<Tensor, InitError> {
    if depth == 1 {
        return make_u(rows, cols);
    }
    if layer == 1 {
        need_even("first-layer head", rows)?;
        Ok(ll_stack(&make_u(rows / 2, cols)?))
    } else if layer == depth {
        need_even("last-layer head input", cols)?;
        Ok(ll_side(&make_u(rows, cols / 2)?))
    } else {
        need_even("hidden head output", rows)?;
        need_even("hidden head input", cols)?;
        Ok(ll_block(&make_u(rows / 2, cols / 2)?))
    }
}

/// Mirrored looks-linear weights with random orthonormal blocks and zero
/// attention. Non-shared target matrices copy the source matrix. The
/// result is not yet balanced; [`initialize`] applies `balance(_, 2)`.
pub fn ll_orthogonal(net: &GatNetwork, seed: u64) -> Result<GatNetwork, InitError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = net.clone();
    let depth = out.depth();
    if depth > 1 {
        let g = out.config.head_geometry(1, 0);
        if g.rows / 2 > g.cols {
            return Err(InitError::InfeasibleWidths(format!(
                "first-layer half width {} exceeds input width {}",
                g.rows / 2,
                g.cols
            )));
        }
    }
    for l in 1..=depth {
        for k in 0..out.config.heads {
            let (rows, cols) = out.head(l, k).w.shape();
            let w = ll_matrix(l, depth, rows, cols, &mut |r, c| Ok(random_orthonormal(r, c, &mut rng)))?;
            let h = out.head_mut(l, k);
            if h.w_t.is_some() {
                h.w_t = Some(w.clone());
            }
            h.w = w;
            h.a = Tensor::zeros(rows, 1);
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IdentityKind {
    Identity,
    LlIdentity,
}

fn square_identity(r: usize, c: usize) -> Result<Tensor, InitError> {
    if r != c {
        return Err(InitError::InfeasibleWidths(format!("identity block needs a square shape, got {r}x{c}")));
    }
    Ok(Tensor::identity(r))
}

/// Hidden layers set to `I` or to the looks-linear block with `U = I`;
/// first and last layers keep a Xavier draw. Attention starts at zero.
pub fn identity_variant(net: &GatNetwork, kind: IdentityKind, seed: u64) -> Result<GatNetwork, InitError> {
    let mut out = xavier(net, seed, true);
    let depth = out.depth();
    for l in 2..depth {
        for k in 0..out.config.heads {
            let (rows, cols) = out.head(l, k).w.shape();
            let w = match kind {
                IdentityKind::Identity => square_identity(rows, cols)?,
                IdentityKind::LlIdentity => ll_matrix(l, depth, rows, cols, &mut square_identity)?,
            };
            let h = out.head_mut(l, k);
            if h.w_t.is_some() {
                h.w_t = Some(w.clone());
            }
            h.w = w;
        }
    }
    Ok(out)
}
