//! The desk-scale training smoke test: eight layer variants on about 1 MB of
//! text, and the checks applied to each finished run.

use sffn_core::selectors::{Aggregator, SelectorKind};
use sffn_core::training::{moving_average, MetricsRow, ModelConfig, OptimConfig, TrainConfig};

use crate::verify::Check;

pub const SMOKE_STEPS: usize = 2000;
/// Window of the training-loss moving average compared at step 200 and at
/// the last step.
pub const SMOKE_WINDOW: usize = 200;
/// Rank of the product and low-rank keys at width 64.
pub const SMOKE_D_LOW: usize = 32;

pub fn smoke_train_config() -> TrainConfig {
    TrainConfig {
        steps: SMOKE_STEPS,
        batch_size: 1,
        eval_interval: 200,
        val_seqs: 8,
        val_fraction: 0.1,
        optim: OptimConfig::default(),
    }
}

/// `(name, model)` for every smoke variant; Avg-K runs at `g = 4·d` and at
/// `g = 16`.
pub fn smoke_variants() -> Vec<(&'static str, ModelConfig)> {
    let d = ModelConfig::desk(SelectorKind::Dense {}, 1).d;
    let pkm = SelectorKind::Pkm {
        d_low: SMOKE_D_LOW,
        batch_norm: true,
    };
    let pkm_ffn = SelectorKind::PkmFfn {
        d_low: SMOKE_D_LOW,
        batch_norm: true,
    };
    let switch = SelectorKind::Switch {
        aux_loss_weight: 0.01,
        scale_expert_grads: true,
    };
    vec![
        ("dense", ModelConfig::desk(SelectorKind::Dense {}, 4 * d)),
        ("vanillam-g1", ModelConfig::desk(SelectorKind::VanillaM { aggregator: Aggregator::Avg }, 1)),
        ("randhash-g1", ModelConfig::desk(SelectorKind::RandHash {}, 1)),
        ("switch-g256", ModelConfig::desk(switch, 4 * d)),
        ("avgk-g256", ModelConfig::desk(SelectorKind::AvgK {}, 4 * d)),
        ("avgk-g16", ModelConfig::desk(SelectorKind::AvgK {}, 16)),
        ("pkm-g1", ModelConfig::desk(pkm, 1)),
        ("pkm-ffn-g1", ModelConfig::desk(pkm_ffn, 1)),
    ]
}

/// Finite losses, final held-out perplexity below the initial one, and a
/// lower training-loss moving average at the end than at step 200.
pub fn assess_run(name: &str, metrics: &[MetricsRow], steps: usize) -> Vec<Check> {
    let train: Vec<f64> = metrics.iter().filter_map(|r| r.train_loss).collect();
    let ppl: Vec<f64> = metrics.iter().filter_map(|r| r.val_ppl).collect();
    let non_finite = metrics
        .iter()
        .flat_map(|r| [r.train_loss, r.val_ppl, r.aux_loss])
        .flatten()
        .filter(|v| !v.is_finite())
        .count();
    let mut checks = vec![
        Check::equals(format!("{name}: steps completed"), train.len() as f64, steps as f64),
        Check::equals(format!("{name}: non-finite metrics"), non_finite as f64, 0.0),
    ];
    let (first, last) = (ppl.first().copied().unwrap_or(f64::NAN), ppl.last().copied().unwrap_or(f64::NAN));
    checks.push(Check::below(format!("{name}: final val ppl"), last, first).with_detail("threshold is the initial val ppl"));
    let early = moving_average(&train, SMOKE_WINDOW, SMOKE_WINDOW).unwrap_or(f64::NAN);
    let late = moving_average(&train, train.len(), SMOKE_WINDOW).unwrap_or(f64::NAN);
    checks.push(
        Check::below(format!("{name}: train loss MA{SMOKE_WINDOW} at end"), late, early)
            .with_detail(format!("threshold is the MA{SMOKE_WINDOW} at step {SMOKE_WINDOW}")),
    );
    checks
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variants_are_valid_desk_models() {
        let v = smoke_variants();
        assert_eq!(v.len(), 8);
        for (name, m) in &v {
            m.validate().unwrap_or_else(|e| panic!("{name}: {e}"));
            assert_eq!((m.d, m.layers, m.seq_len, m.vocab_size), (64, 4, 128, 256));
        }
    }

    #[test]
    fn assessment_flags_flat_runs() {
        let rows: Vec<MetricsRow> = (0..=400)
            .map(|s| MetricsRow {
                step: s,
                train_loss: (s > 0).then_some(2.0),
                val_ppl: (s % 200 == 0).then_some(7.0),
                aux_loss: None,
            })
            .collect();
        let checks = assess_run("flat", &rows, 400);
        assert!(checks[0].passed && checks[1].passed);
        assert!(!checks[2].passed && !checks[3].passed);
    }
}
