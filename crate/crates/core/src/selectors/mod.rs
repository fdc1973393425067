//! Block-selection methods.
//!
//! Direct selectors score blocks from the key table itself (VanillaM, Avg-K,
//! the controllers, Naive-ANN); indirect selectors use a separate gate (the
//! token hash table, learned expert embeddings, a product-key gate).

mod direct;
mod gates;
mod keys;

use serde::{Deserialize, Serialize};

pub use direct::{
    block_means, score_avgk, score_vanilla, select_avgk, select_controller, select_naive_ann,
    select_vanillam,
};
pub use gates::{
    build_randhash, gate_softmax, select_randhash, select_switch, ExpertEmbeddings, HashGateTable,
};
pub(crate) use keys::product_pre_scores;
pub use keys::{
    lorkm_scores, pkm_scores, select_pkm_ffn, BatchNorm, KeyTable, LowRankKeys, ProductKeys,
};

/// Reduction applied to the post-GeLU coefficients of a block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregator {
    #[default]
    Avg,
    AvgAbs,
    Max,
    Min,
}

impl Aggregator {
    pub const ALL: [Aggregator; 4] = [
        Aggregator::Avg,
        Aggregator::AvgAbs,
        Aggregator::Max,
        Aggregator::Min,
    ];

    /// Aggregates a non-empty slice; the empty slice maps to NaN.
    pub fn apply(self, values: &[f64]) -> f64 {
        if values.is_empty() {
            return f64::NAN;
        }
        match self {
            Aggregator::Avg => values.iter().sum::<f64>() / values.len() as f64,
            Aggregator::AvgAbs => values.iter().map(|v| v.abs()).sum::<f64>() / values.len() as f64,
            Aggregator::Max => values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            Aggregator::Min => values.iter().copied().fold(f64::INFINITY, f64::min),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Aggregator::Avg => "avg",
            Aggregator::AvgAbs => "avg-abs",
            Aggregator::Max => "max",
            Aggregator::Min => "min",
        }
    }
}

fn default_d_low() -> usize {
    128
}

fn default_true() -> bool {
    true
}

fn default_aux_weight() -> f64 {
    0.01
}

/// Every layer variant the training harness can build.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SelectorKind {
    /// All cells active, no selection.
    Dense {},
    /// Exact top-b blocks by aggregated post-GeLU coefficients.
    #[serde(rename = "vanillam")]
    VanillaM {
        #[serde(default)]
        aggregator: Aggregator,
    },
    /// Top-b blocks by the dot product with each block's mean key.
    #[serde(rename = "avgk")]
    AvgK {},
    /// Static per-token random block assignment.
    #[serde(rename = "randhash")]
    RandHash {},
    /// Learned softmax gate, top-1 block with soft weight and balance loss.
    Switch {
        #[serde(default = "default_aux_weight")]
        aux_loss_weight: f64,
        #[serde(default = "default_true")]
        scale_expert_grads: bool,
    },
    /// Product-key memory (cell level).
    Pkm {
        #[serde(default = "default_d_low")]
        d_low: usize,
        #[serde(default = "default_true")]
        batch_norm: bool,
    },
    /// Low-rank key memory (cell level).
    #[serde(rename = "lorkm")]
    LoRKM {
        #[serde(default = "default_d_low")]
        d_low: usize,
        #[serde(default)]
        batch_norm: bool,
    },
    /// Full key/value memory gated by product-key coefficients.
    PkmFfn {
        #[serde(default = "default_d_low")]
        d_low: usize,
        #[serde(default = "default_true")]
        batch_norm: bool,
    },
    /// Top-1 cell per block; scored by the keys, or by a low-rank controller
    /// when `controller_rank` is set.
    Controller {
        #[serde(default)]
        controller_rank: Option<usize>,
    },
    /// Exact top-k cells with `sabotage_pct` percent randomly swapped out.
    NaiveAnn { sabotage_pct: f64 },
}

impl SelectorKind {
    pub fn name(&self) -> &'static str {
        match self {
            SelectorKind::Dense {} => "dense",
            SelectorKind::VanillaM { .. } => "vanillam",
            SelectorKind::AvgK {} => "avgk",
            SelectorKind::RandHash {} => "randhash",
            SelectorKind::Switch { .. } => "switch",
            SelectorKind::Pkm { .. } => "pkm",
            SelectorKind::LoRKM { .. } => "lorkm",
            SelectorKind::PkmFfn { .. } => "pkm-ffn",
            SelectorKind::Controller { .. } => "controller",
            SelectorKind::NaiveAnn { .. } => "naive-ann",
        }
    }

    /// Whether block relevance is computed from the memory's own key table.
    pub fn is_direct(&self) -> bool {
        matches!(
            self,
            SelectorKind::VanillaM { .. }
                | SelectorKind::AvgK {}
                | SelectorKind::Pkm { .. }
                | SelectorKind::LoRKM { .. }
                | SelectorKind::Controller { .. }
                | SelectorKind::NaiveAnn { .. }
        )
    }

    /// Variants whose selection is defined over single cells (`g = 1`).
    pub fn requires_unit_blocks(&self) -> bool {
        matches!(
            self,
            SelectorKind::Pkm { .. }
                | SelectorKind::LoRKM { .. }
                | SelectorKind::PkmFfn { .. }
                | SelectorKind::NaiveAnn { .. }
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aggregators_agree_on_identical_values() {
        let v = [0.75; 5];
        for a in Aggregator::ALL {
            assert_eq!(a.apply(&v), 0.75);
        }
        assert_eq!(Aggregator::AvgAbs.apply(&[-1.0, 3.0]), 2.0);
        assert_eq!(Aggregator::Min.apply(&[-1.0, 3.0]), -1.0);
        assert_eq!(Aggregator::Max.apply(&[-1.0, 3.0]), 3.0);
        assert_eq!(Aggregator::Avg.apply(&[-1.0, 3.0]), 1.0);
    }

    #[test]
    fn selector_kind_serde() {
        let k: SelectorKind = serde_json::from_str(r#"{"kind":"vanillam","aggregator":"max"}"#).unwrap();
        assert_eq!(k, SelectorKind::VanillaM { aggregator: Aggregator::Max });
        let p: SelectorKind = serde_json::from_str(r#"{"kind":"pkm"}"#).unwrap();
        assert_eq!(p, SelectorKind::Pkm { d_low: 128, batch_norm: true });
        let l: SelectorKind = serde_json::from_str(r#"{"kind":"lorkm","d_low":16}"#).unwrap();
        assert_eq!(l, SelectorKind::LoRKM { d_low: 16, batch_norm: false });
        let a: SelectorKind = serde_json::from_str(r#"{"kind":"avgk"}"#).unwrap();
        assert_eq!(a, SelectorKind::AvgK {});
        assert!(serde_json::from_str::<SelectorKind>(r#"{"kind":"avgk","g":4}"#).is_err());
        assert!(serde_json::from_str::<SelectorKind>(r#"{"kind":"pkm","rank":4}"#).is_err());
    }
}
