use serde::{Deserialize, Serialize};

use super::data::TokenSplits;
use super::loss::{scale_expert_grads, LossReport};
use super::model::{Batch, Model, ModelConfig};
use super::optim::{OptimConfig, OptimState};
use super::sffn::ForwardCtx;
use crate::error::{Error, Result};
use crate::memory::BlockSelection;

fn default_val_fraction() -> f64 {
    0.1
}

/// Schedule of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub eval_interval: usize,
    /// Held-out windows per evaluation.
    pub val_seqs: usize,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    #[serde(default)]
    pub optim: OptimConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 1,
            eval_interval: 200,
            val_seqs: 8,
            val_fraction: default_val_fraction(),
            optim: OptimConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_interval == 0 || self.val_seqs == 0 {
            return Err(Error::InvalidArgument(
                "batch_size, eval_interval and val_seqs must be positive".into(),
            ));
        }
        self.optim.validate()
    }
}

/// One line of `metrics.csv`. Step 0 carries the initial evaluation only.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub train_loss: Option<f64>,
    pub val_ppl: Option<f64>,
    pub aux_loss: Option<f64>,
}

pub const METRICS_HEADER: &str = "step,train_loss,val_ppl,aux_loss";

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.17e}")).unwrap_or_default()
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{}",
            self.step,
            cell(self.train_loss),
            cell(self.val_ppl),
            cell(self.aux_loss)
        )
    }
}

/// Renders rows under [`METRICS_HEADER`].
pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.to_csv());
        out.push('\n');
    }
    out
}

/// Stepwise driver for [`train_lm`]; keeps metrics when a run stops early.
pub struct Trainer {
    model: Model,
    optim: OptimState,
    splits: TokenSplits,
    config: TrainConfig,
    seed: u64,
    step: usize,
    metrics: Vec<MetricsRow>,
}

impl Trainer {
    pub fn new(model_config: ModelConfig, config: TrainConfig, tokens: Vec<usize>, seed: u64) -> Result<Self> {
        config.validate()?;
        let splits = TokenSplits::new(tokens, config.val_fraction, model_config.seq_len)?;
        if let Some(&t) = splits.train.iter().chain(&splits.val).find(|&&t| t >= model_config.vocab_size) {
            return Err(Error::TokenOutOfVocab {
                token: t,
                vocab: model_config.vocab_size,
            });
        }
        let model = Model::new(model_config, seed)?;
        let optim = OptimState::new(config.optim, &model.params);
        Ok(Self {
            model,
            optim,
            splits,
            config,
            seed,
            step: 0,
            metrics: Vec::new(),
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn metrics(&self) -> &[MetricsRow] {
        &self.metrics
    }

    pub fn splits(&self) -> &TokenSplits {
        &self.splits
    }

    fn val_batch(&self) -> Result<Batch> {
        self.splits.val_batch(self.config.val_seqs, self.model.config().seq_len)
    }

    /// Held-out loss in evaluation mode.
    pub fn evaluate(&self) -> Result<LossReport> {
        Ok(self.model.forward(&self.val_batch()?, ForwardCtx::eval(), None)?.loss)
    }

    /// Per memory layer, per held-out token, the selections of an
    /// evaluation pass, with the batch that produced them.
    pub fn val_routing(&self) -> Result<(Batch, Vec<Vec<BlockSelection>>)> {
        let batch = self.val_batch()?;
        let trace = self.model.forward(&batch, ForwardCtx::eval(), None)?;
        let routing = self.model.sparse_routing(&trace);
        Ok((batch, routing))
    }

    /// Runs the remaining steps. A non-finite loss stops the run with
    /// [`Error::Diverged`]; metrics recorded so far are kept.
    pub fn run(&mut self) -> Result<()> {
        if self.step == 0 && self.metrics.is_empty() {
            let ppl = self.evaluate()?.clm_loss.exp();
            self.metrics.push(MetricsRow {
                step: 0,
                train_loss: None,
                val_ppl: Some(ppl),
                aux_loss: None,
            });
        }
        let total = self.config.steps;
        let seq_len = self.model.config().seq_len;
        let gated = self.model.config().gated_layers() > 0;
        while self.step < total {
            let step = self.step + 1;
            let batch = self
                .splits
                .train_batch(self.config.batch_size, seq_len, self.seed, step as u64)?;
            let trace = self.model.forward(&batch, ForwardCtx::train(step as u64), None)?;
            let loss = trace.loss;
            if !loss.total.is_finite() {
                return Err(Error::Diverged {
                    step,
                    loss: loss.total,
                });
            }
            let mut grads = self.model.backward(&trace)?;
            scale_expert_grads(&mut grads, &self.model.params);
            if !grads.is_finite() {
                return Err(Error::Diverged {
                    step,
                    loss: f64::NAN,
                });
            }
            self.model.update_running_stats(&trace);
            let lr = self.config.optim.lr_at(step, total);
            self.optim.update(&mut self.model.params, &grads, lr);
            self.step = step;
            let val_ppl = if step % self.config.eval_interval == 0 || step == total {
                let v = self.evaluate()?.clm_loss;
                if !v.is_finite() {
                    return Err(Error::Diverged { step, loss: v });
                }
                Some(v.exp())
            } else {
                None
            };
            self.metrics.push(MetricsRow {
                step,
                train_loss: Some(loss.clm_loss),
                val_ppl,
                aux_loss: gated.then_some(loss.aux_loss),
            });
        }
        Ok(())
    }
}

/// Result of a finished run.
pub struct TrainRun {
    pub model: Model,
    pub metrics: Vec<MetricsRow>,
}

impl TrainRun {
    pub fn initial_val_ppl(&self) -> Option<f64> {
        self.metrics.first().and_then(|r| r.val_ppl)
    }

    pub fn final_val_ppl(&self) -> Option<f64> {
        self.metrics.iter().rev().find_map(|r| r.val_ppl)
    }

    /// Training losses of steps `1..=steps`.
    pub fn train_losses(&self) -> Vec<f64> {
        self.metrics.iter().filter_map(|r| r.train_loss).collect()
    }
}

/// Trains a byte-level causal LM on `tokens` and records train loss every
/// step and held-out perplexity every `eval_interval` steps and at the end.
pub fn train_lm(model_config: ModelConfig, config: TrainConfig, tokens: Vec<usize>, seed: u64) -> Result<TrainRun> {
    let mut trainer = Trainer::new(model_config, config, tokens, seed)?;
    trainer.run()?;
    let metrics = trainer.metrics.clone();
    Ok(TrainRun {
        model: trainer.into_model(),
        metrics,
    })
}

/// Mean of the `window` values ending at 1-based position `end`.
pub fn moving_average(values: &[f64], end: usize, window: usize) -> Option<f64> {
    if window == 0 || end < window || end > values.len() {
        return None;
    }
    Some(values[end - window..end].iter().sum::<f64>() / window as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metrics_rendering() {
        let rows = [
            MetricsRow {
                step: 0,
                train_loss: None,
                val_ppl: Some(256.0),
                aux_loss: None,
            },
            MetricsRow {
                step: 1,
                train_loss: Some(5.5),
                val_ppl: None,
                aux_loss: Some(1.0),
            },
        ];
        let csv = metrics_csv(&rows);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "step,train_loss,val_ppl,aux_loss");
        assert_eq!(lines[1], "0,,2.56000000000000000e2,");
        assert!(lines[2].starts_with("1,5.5"));
    }

    #[test]
    fn moving_average_window() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(moving_average(&v, 4, 2), Some(3.5));
        assert_eq!(moving_average(&v, 2, 2), Some(1.5));
        assert_eq!(moving_average(&v, 1, 2), None);
    }
}
