use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::layers::{attention, attention_backward, cross_entropy, layer_norm, layer_norm_backward, AttnCache, LnCache};
use super::loss::LossReport;
use super::params::{Grads, ParamId, ParamRole, ParamStore};
use super::sffn::{ForwardCtx, SffnLayer, SffnTrace};
use crate::error::{shape, Error, Result};
use crate::memory::{BlockSelection, MemoryGeometry};
use crate::rng::RngStream;
use crate::selectors::SelectorKind;
use crate::tensor::{axpy, matmul, matmul_at, matmul_bt, Matrix};

fn default_init_std() -> f64 {
    0.02
}

fn default_heads() -> usize {
    1
}

/// Size of the sparse memory: `d_m = multiplier · 4 · d` cells in blocks of
/// `block_size`, `active_cells` of them used per token.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemoryConfig {
    pub multiplier: usize,
    pub block_size: usize,
    pub active_cells: usize,
}

/// Architecture of the causal language model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub d: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    pub seq_len: usize,
    pub vocab_size: usize,
    /// Layers whose FFN is replaced by the sparse memory.
    pub sffn_layers: Vec<usize>,
    pub memory: MemoryConfig,
    pub selector: SelectorKind,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
}

impl ModelConfig {
    /// Four layers of width 64 over bytes, memory layers at 1 and 3 with
    /// `d_m = 1024` and 256 active cells.
    pub fn desk(selector: SelectorKind, block_size: usize) -> Self {
        Self {
            layers: 4,
            d: 64,
            heads: 1,
            seq_len: 128,
            vocab_size: 256,
            sffn_layers: vec![1, 3],
            memory: MemoryConfig {
                multiplier: 4,
                block_size,
                active_cells: 256,
            },
            selector,
            init_std: 0.02,
        }
    }

    /// The 24-layer, width-1024 configuration with memory layers 5, 11, 17
    /// and 23. Used for FLOPs accounting only.
    pub fn paper(selector: SelectorKind, multiplier: usize, block_size: usize, active_cells: usize) -> Self {
        Self {
            layers: 24,
            d: 1024,
            heads: 16,
            seq_len: 2048,
            vocab_size: 50257,
            sffn_layers: vec![5, 11, 17, 23],
            memory: MemoryConfig {
                multiplier,
                block_size,
                active_cells,
            },
            selector,
            init_std: 0.02,
        }
    }

    /// Memory geometry of the sparse layers. The dense baseline keeps the
    /// `4·d` FFN everywhere.
    pub fn sffn_geometry(&self) -> Result<MemoryGeometry> {
        match self.selector {
            SelectorKind::Dense {} => Self::dense_geometry(self.d),
            _ => MemoryGeometry::with_multiplier(
                self.d,
                self.memory.multiplier,
                self.memory.block_size,
                self.memory.active_cells,
            ),
        }
    }

    pub fn dense_geometry(d: usize) -> Result<MemoryGeometry> {
        MemoryGeometry::new(d, 4 * d, 4 * d, 4 * d)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.d == 0 || self.seq_len == 0 || self.vocab_size == 0 {
            return Err(Error::InvalidArgument(
                "layers, d, seq_len and vocab_size must be positive".into(),
            ));
        }
        if self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "{} heads do not divide width {}",
                self.heads, self.d
            )));
        }
        if let Some(&l) = self.sffn_layers.iter().find(|&&l| l >= self.layers) {
            return Err(Error::InvalidArgument(format!(
                "memory layer index {l} outside 0..{}",
                self.layers
            )));
        }
        let mut sorted = self.sffn_layers.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.sffn_layers.len() {
            return Err(Error::InvalidArgument("duplicate memory layer index".into()));
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return Err(Error::InvalidArgument(format!("init_std {} must be positive", self.init_std)));
        }
        self.sffn_geometry()?;
        Ok(())
    }

    /// Number of memory layers with a learned gate.
    pub fn gated_layers(&self) -> usize {
        match self.selector {
            SelectorKind::Switch { .. } => self.sffn_layers.len(),
            _ => 0,
        }
    }

    pub fn aux_loss_weight(&self) -> f64 {
        match self.selector {
            SelectorKind::Switch { aux_loss_weight, .. } => aux_loss_weight,
            _ => 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Block {
    ln1: (ParamId, ParamId),
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    ln2: (ParamId, ParamId),
    ffn: SffnLayer,
    sparse: bool,
}

/// Token windows of one step: `inputs` and `targets` are `n_seq` concatenated
/// windows of `seq_len` tokens each.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub seq_len: usize,
}

impl Batch {
    /// Builds a batch from windows of `seq_len + 1` tokens.
    pub fn from_windows(windows: &[&[usize]]) -> Result<Self> {
        let seq_len = windows
            .first()
            .map(|w| w.len().saturating_sub(1))
            .ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
        if seq_len == 0 || windows.iter().any(|w| w.len() != seq_len + 1) {
            return Err(Error::InvalidArgument(
                "batch windows must share a length of at least 2".into(),
            ));
        }
        let mut inputs = Vec::with_capacity(windows.len() * seq_len);
        let mut targets = Vec::with_capacity(windows.len() * seq_len);
        for w in windows {
            inputs.extend_from_slice(&w[..seq_len]);
            targets.extend_from_slice(&w[1..]);
        }
        Ok(Self {
            inputs,
            targets,
            seq_len,
        })
    }

    pub fn num_sequences(&self) -> usize {
        self.inputs.len() / self.seq_len
    }
}

struct BlockCache {
    ln1: LnCache,
    a: Matrix,
    attn: AttnCache,
    ln2: LnCache,
    ffn: SffnTrace,
}

/// Forward state of the whole model for one batch.
pub struct ModelTrace {
    pub loss: LossReport,
    blocks: Vec<BlockCache>,
    ln_f: LnCache,
    hf: Matrix,
    dlogits: Matrix,
    inputs: Vec<usize>,
    seq_len: usize,
}

impl ModelTrace {
    /// Per memory layer, the per-token selections.
    pub fn routing(&self) -> Vec<Vec<BlockSelection>> {
        self.sffn_traces().map(|t| t.routes.clone()).collect()
    }

    fn sffn_traces(&self) -> impl Iterator<Item = &SffnTrace> {
        self.blocks.iter().map(|b| &b.ffn)
    }
}

/// Pre-norm causal transformer with tied input and output embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    pub params: ParamStore,
    embed: ParamId,
    pos: ParamId,
    blocks: Vec<Block>,
    ln_f: (ParamId, ParamId),
}

impl Model {
    /// Initializes every matrix from `N(0, init_std²)` with the stream
    /// `(seed, "init", 0)`; norms start at the identity.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = RngStream::new(seed, "init", 0);
        let mut params = ParamStore::new();
        let (d, std) = (config.d, config.init_std);
        let embed = params.add_normal("embed", ParamRole::Weight, config.vocab_size, d, std, &mut rng);
        let pos = params.add_normal("pos", ParamRole::Weight, config.seq_len, d, std, &mut rng);
        let norm = |p: &mut ParamStore, name: String| {
            (
                p.add(format!("{name}.gamma"), ParamRole::Norm, Matrix::filled(1, d, 1.0)),
                p.add(format!("{name}.beta"), ParamRole::Norm, Matrix::zeros(1, d)),
            )
        };
        let sparse_geo = config.sffn_geometry()?;
        let mut blocks = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let pre = format!("layers.{l}");
            let ln1 = norm(&mut params, format!("{pre}.ln1"));
            let wq = params.add_normal(&format!("{pre}.attn.wq"), ParamRole::Weight, d, d, std, &mut rng);
            let wk = params.add_normal(&format!("{pre}.attn.wk"), ParamRole::Weight, d, d, std, &mut rng);
            let wv = params.add_normal(&format!("{pre}.attn.wv"), ParamRole::Weight, d, d, std, &mut rng);
            let wo = params.add_normal(&format!("{pre}.attn.wo"), ParamRole::Weight, d, d, std, &mut rng);
            let ln2 = norm(&mut params, format!("{pre}.ln2"));
            let sparse = config.sffn_layers.contains(&l);
            let (kind, geo) = if sparse {
                (config.selector.clone(), sparse_geo)
            } else {
                (SelectorKind::Dense {}, ModelConfig::dense_geometry(d)?)
            };
            let layer_seed = RngStream::new(seed, "layer-seed", l as u64).next_u64();
            let ffn = SffnLayer::new(
                &format!("{pre}.ffn"),
                kind,
                geo,
                config.vocab_size,
                &mut params,
                &mut rng,
                layer_seed,
                std,
            )?;
            blocks.push(Block {
                ln1,
                wq,
                wk,
                wv,
                wo,
                ln2,
                ffn,
                sparse,
            });
        }
        let ln_f = norm(&mut params, "ln_f".into());
        Ok(Self {
            config,
            params,
            embed,
            pos,
            blocks,
            ln_f,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// The memory layers, in depth order.
    pub fn sffn_layers(&self) -> impl Iterator<Item = &SffnLayer> {
        self.blocks.iter().filter(|b| b.sparse).map(|b| &b.ffn)
    }

    /// Depth indices of the memory layers.
    pub fn sparse_layer_indices(&self) -> Vec<usize> {
        self.blocks.iter().enumerate().filter(|(_, b)| b.sparse).map(|(l, _)| l).collect()
    }

    /// Forward pass and loss. `frozen` replays earlier selections, one list
    /// per memory layer including the dense ones.
    pub fn forward(&self, batch: &Batch, ctx: ForwardCtx, frozen: Option<&[Vec<BlockSelection>]>) -> Result<ModelTrace> {
        let s = batch.seq_len;
        if s == 0 || s > self.config.seq_len || batch.inputs.len() % s != 0 || batch.inputs.len() != batch.targets.len() {
            return Err(shape(
                "model",
                format!(
                    "{} inputs, {} targets, window {s}, context {}",
                    batch.inputs.len(),
                    batch.targets.len(),
                    self.config.seq_len
                ),
            ));
        }
        let vocab = self.config.vocab_size;
        if let Some(&t) = batch.inputs.iter().chain(&batch.targets).find(|&&t| t >= vocab) {
            return Err(Error::TokenOutOfVocab { token: t, vocab });
        }
        if let Some(f) = frozen {
            if f.len() != self.blocks.len() {
                return Err(shape("model", format!("{} frozen layers for {}", f.len(), self.blocks.len())));
            }
        }
        let p = &self.params;
        let d = self.config.d;
        let rows = batch.inputs.len();
        let embed = p.get(self.embed);
        let pos = p.get(self.pos);
        let mut h = Matrix::zeros(rows, d);
        for (r, &tok) in batch.inputs.iter().enumerate() {
            let out = h.row_mut(r);
            out.copy_from_slice(embed.row(tok));
            axpy(1.0, pos.row(r % s), out);
        }
        let mut caches = Vec::with_capacity(self.blocks.len());
        let mut aux_sum = 0.0;
        for (l, b) in self.blocks.iter().enumerate() {
            let (a, ln1) = layer_norm(&h, p.get(b.ln1.0), p.get(b.ln1.1));
            let attn = attention(
                &a,
                matmul(&a, p.get(b.wq))?,
                matmul(&a, p.get(b.wk))?,
                matmul(&a, p.get(b.wv))?,
                self.config.heads,
                s,
            );
            h.add_assign(&matmul(&attn.ctx, p.get(b.wo))?)?;
            let (f, ln2) = layer_norm(&h, p.get(b.ln2.0), p.get(b.ln2.1));
            let fr = match frozen {
                Some(fz) if b.sparse => Some(fz[l].as_slice()),
                _ => None,
            };
            let (y, ffn) = b.ffn.forward(p, &f, &batch.inputs, ctx, fr)?;
            h.add_assign(&y)?;
            aux_sum += ffn.aux_loss.unwrap_or(0.0);
            caches.push(BlockCache { ln1, a, attn, ln2, ffn });
        }
        let (hf, ln_f) = layer_norm(&h, p.get(self.ln_f.0), p.get(self.ln_f.1));
        let logits = matmul_bt(&hf, embed)?;
        let (clm, dlogits) = cross_entropy(&logits, &batch.targets);
        let gated = self.config.gated_layers();
        let aux = if gated > 0 { aux_sum / gated as f64 } else { 0.0 };
        let loss = LossReport {
            clm_loss: clm,
            aux_loss: aux,
            total: clm + self.config.aux_loss_weight() * aux,
            tokens: rows,
        };
        Ok(ModelTrace {
            loss,
            blocks: caches,
            ln_f,
            hf,
            dlogits,
            inputs: batch.inputs.clone(),
            seq_len: s,
        })
    }

    /// Gradient of `trace.loss.total` with respect to every parameter.
    pub fn backward(&self, trace: &ModelTrace) -> Result<Grads> {
        let p = &self.params;
        let mut grads = p.zero_grads();
        let embed = p.get(self.embed);
        grads.get_mut(self.embed).add_assign(&matmul_at(&trace.dlogits, &trace.hf)?)?;
        let dhf = matmul(&trace.dlogits, embed)?;
        let mut dh = self.norm_backward(&dhf, &trace.ln_f, self.ln_f, &mut grads);
        let gated = self.config.gated_layers();
        let aux_grad = if gated > 0 {
            self.config.aux_loss_weight() / gated as f64
        } else {
            0.0
        };
        for (b, c) in self.blocks.iter().zip(&trace.blocks).rev() {
            let df = b.ffn.backward(p, &c.ffn, &dh, aux_grad, &mut grads)?;
            dh.add_assign(&self.norm_backward(&df, &c.ln2, b.ln2, &mut grads))?;
            grads.get_mut(b.wo).add_assign(&matmul_at(&c.attn.ctx, &dh)?)?;
            let dctx = matmul_bt(&dh, p.get(b.wo))?;
            let (dq, dk, dv) = attention_backward(&dctx, &c.attn, self.config.heads, trace.seq_len);
            grads.get_mut(b.wq).add_assign(&matmul_at(&c.a, &dq)?)?;
            grads.get_mut(b.wk).add_assign(&matmul_at(&c.a, &dk)?)?;
            grads.get_mut(b.wv).add_assign(&matmul_at(&c.a, &dv)?)?;
            let mut da = matmul_bt(&dq, p.get(b.wq))?;
            da.add_assign(&matmul_bt(&dk, p.get(b.wk))?)?;
            da.add_assign(&matmul_bt(&dv, p.get(b.wv))?)?;
            dh.add_assign(&self.norm_backward(&da, &c.ln1, b.ln1, &mut grads))?;
        }
        for (r, &tok) in trace.inputs.iter().enumerate() {
            axpy(1.0, dh.row(r), grads.get_mut(self.embed).row_mut(tok));
            axpy(1.0, dh.row(r), grads.get_mut(self.pos).row_mut(r % trace.seq_len));
        }
        Ok(grads)
    }

    fn norm_backward(&self, dy: &Matrix, cache: &LnCache, ids: (ParamId, ParamId), grads: &mut Grads) -> Matrix {
        let (mut dg, mut db) = (grads.get(ids.0).clone(), grads.get(ids.1).clone());
        let dx = layer_norm_backward(dy, cache, self.params.get(ids.0), &mut dg, &mut db);
        *grads.get_mut(ids.0) = dg;
        *grads.get_mut(ids.1) = db;
        dx
    }

    /// Folds training-mode batch statistics into running statistics.
    pub fn update_running_stats(&mut self, trace: &ModelTrace) {
        for (b, c) in self.blocks.iter().zip(&trace.blocks) {
            b.ffn.update_running_stats(&mut self.params, &c.ffn);
        }
    }

    /// Per memory layer, the selections of an evaluation-mode pass.
    pub fn sparse_routing(&self, trace: &ModelTrace) -> Vec<Vec<BlockSelection>> {
        self.blocks
            .iter()
            .zip(trace.sffn_traces())
            .filter(|(b, _)| b.sparse)
            .map(|(_, t)| t.routes.clone())
            .collect()
    }
}
