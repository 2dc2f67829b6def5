//! Graph attention networks (GATv2 and mean-aggregation GCN) with exact
//! reverse-mode gradients, balanced initialization schemes, and diagnostics
//! for the per-neuron norm conservation laws of gradient flow.

pub mod adcore;
pub mod conservation;
pub mod graphio;
pub mod init;
pub mod model;
pub mod train;

/// Formats a float with 17 significant digits, enough to round-trip any
/// `f64` exactly.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}
