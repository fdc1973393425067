//! Analytical FLOPs. One multiply-add is two FLOPs; `factor` multiplies the
//! forward cost to cover a training step (4 throughout the reference numbers).

use serde::Serialize;

use crate::error::{Error, Result};
use crate::memory::MemoryGeometry;
use crate::selectors::SelectorKind;
use crate::training::ModelConfig;

/// Forward multiplier used by the reference numbers.
pub const CONVENTION_FACTOR: f64 = 4.0;
/// Tokens per batch of the reference setup (`0.5 · 1024²`).
pub const REFERENCE_BATCH_TOKENS: f64 = 524_288.0;
/// Training budget of the reference setup.
pub const REFERENCE_TRAIN_TOKENS: f64 = 60e9;

/// FLOPs of `n_gates` learned gates, each a `d × B` product per token.
pub fn gate_flops(d: usize, num_blocks: usize, n_gates: usize, tokens: f64, factor: f64) -> f64 {
    2.0 * d as f64 * num_blocks as f64 * n_gates as f64 * tokens * factor
}

/// Multiply-adds per token of one memory layer, split by role.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LayerMacs {
    pub keys: f64,
    pub values: f64,
    pub gate: f64,
}

impl LayerMacs {
    pub fn total(&self) -> f64 {
        self.keys + self.values + self.gate
    }
}

/// Side of the product-key grid; `⌈√d_m⌉` when `d_m` is not square.
fn pkm_side(d_m: usize) -> f64 {
    let s = (d_m as f64).sqrt().floor() as usize;
    (if s * s == d_m { s } else { s + 1 }) as f64
}

/// Per-token cost of one memory layer. Full-scoring selectors pay the whole
/// key table, routed ones the selected keys plus their gate.
pub fn layer_macs(kind: &SelectorKind, geo: &MemoryGeometry) -> LayerMacs {
    let d = geo.d() as f64;
    let dm = geo.memory_size() as f64;
    let k = geo.active_cells() as f64;
    let b = geo.num_blocks() as f64;
    let pkm = |d_low: usize| d * d_low as f64 + 2.0 * pkm_side(geo.memory_size()) * (d_low as f64 / 2.0);
    let values = k * d;
    let (keys, gate) = match kind {
        SelectorKind::Dense {} => (dm * d, 0.0),
        SelectorKind::VanillaM { .. } | SelectorKind::NaiveAnn { .. } => (dm * d, 0.0),
        SelectorKind::Controller { controller_rank: None } => (dm * d, 0.0),
        SelectorKind::Controller { controller_rank: Some(r) } => (k * d, (d + dm) * *r as f64),
        SelectorKind::AvgK {} | SelectorKind::Switch { .. } => (k * d, d * b),
        SelectorKind::RandHash {} => (k * d, 0.0),
        SelectorKind::Pkm { d_low, .. } => (pkm(*d_low), 0.0),
        SelectorKind::LoRKM { d_low, .. } => (d * *d_low as f64 + dm * *d_low as f64, 0.0),
        SelectorKind::PkmFfn { d_low, .. } => (k * d + pkm(*d_low), 0.0),
    };
    LayerMacs { keys, values, gate }
}

/// Whole-model accounting for one configuration.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FlopsReport {
    /// Learned-gate FLOPs per token, all memory layers.
    pub gate_flops: f64,
    /// Memory-layer FLOPs per token (keys, values and gates).
    pub memory_flops: f64,
    pub model_flops_per_token: f64,
    pub tokens: f64,
    /// `model_flops_per_token × tokens`.
    pub train_total: f64,
    pub convention_factor: f64,
}

/// Per-token MACs: each layer pays `4d²` for projections and `2·s·d` for
/// attention scores and context over the full window, every FFN its keys and
/// values, plus a `d · vocab` output head.
pub fn model_flops(config: &ModelConfig, tokens: f64, factor: f64) -> Result<FlopsReport> {
    config.validate()?;
    if !(tokens >= 0.0 && factor > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "tokens {tokens} and factor {factor} must be non-negative and positive"
        )));
    }
    let d = config.d as f64;
    let s = config.seq_len as f64;
    let dense = layer_macs(&SelectorKind::Dense {}, &ModelConfig::dense_geometry(config.d)?);
    let sparse = layer_macs(&config.selector, &config.sffn_geometry()?);
    let n_sparse = config.sffn_layers.len() as f64;
    let n_dense = config.layers as f64 - n_sparse;
    let backbone = config.layers as f64 * (4.0 * d * d + 2.0 * s * d) + d * config.vocab_size as f64;
    let macs = backbone + n_dense * dense.total() + n_sparse * sparse.total();
    let per_token = 2.0 * factor * macs;
    Ok(FlopsReport {
        gate_flops: 2.0 * factor * n_sparse * sparse.gate,
        memory_flops: 2.0 * factor * n_sparse * sparse.total(),
        model_flops_per_token: per_token,
        tokens,
        train_total: per_token * tokens,
        convention_factor: factor,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gate_flops_is_linear() {
        let base = gate_flops(1024, 16, 4, 1000.0, 4.0);
        assert_eq!(gate_flops(1024, 32, 4, 1000.0, 4.0), 2.0 * base);
        assert_eq!(gate_flops(1024, 16, 8, 1000.0, 4.0), 2.0 * base);
        assert_eq!(gate_flops(1024, 16, 4, 2000.0, 4.0), 2.0 * base);
    }

    #[test]
    fn desk_dense_counts_by_hand() {
        let cfg = ModelConfig::desk(SelectorKind::Dense {}, 1);
        let r = model_flops(&cfg, 10.0, 1.0).unwrap();
        // 4 layers × (4·64² + 2·128·64 + 2·256·64) + 64·256
        let macs = 4.0 * (16384.0 + 16384.0 + 32768.0) + 16384.0;
        assert_eq!(r.model_flops_per_token, 2.0 * macs);
        assert_eq!(r.train_total, 20.0 * macs);
        assert_eq!(r.gate_flops, 0.0);
    }

    #[test]
    fn pkm_side_rounds_up() {
        assert_eq!(pkm_side(65536), 256.0);
        assert_eq!(pkm_side(1000), 32.0);
    }
}
