//! The memory layer inside the model: every selector variant, batched over
//! the tokens of a step, with its backward pass.

use super::loss::switch_aux_loss;
use super::params::{Grads, ParamId, ParamRole, ParamStore};
use crate::error::{shape, Error, Result};
use crate::memory::{BlockSelection, MemoryGeometry};
use crate::rng::RngStream;
use crate::selectors::{
    block_means, build_randhash, product_pre_scores, select_naive_ann, select_randhash,
    select_vanillam, BatchNorm, HashGateTable, ProductKeys, SelectorKind,
};
use crate::tensor::{
    argmax, axpy, dot, gelu, gelu_grad, matmul, matmul_at, matmul_bt, softmax_in_place,
    topk_indices, Matrix,
};

/// Batch statistics (training) or running statistics (evaluation) in the
/// optional batch norm after `x·D`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-call context for the forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ForwardCtx {
    pub mode: Mode,
    /// Keys the per-token streams of stochastic selectors.
    pub step: u64,
}

impl ForwardCtx {
    pub fn train(step: u64) -> Self {
        Self {
            mode: Mode::Train,
            step,
        }
    }

    pub fn eval() -> Self {
        Self {
            mode: Mode::Eval,
            step: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct BnIds {
    gamma: ParamId,
    beta: ParamId,
    mean: ParamId,
    var: ParamId,
}

#[derive(Clone, Debug, Default, PartialEq)]
struct LayerIds {
    keys: Option<ParamId>,
    values: Option<ParamId>,
    gate: Option<ParamId>,
    down: Option<ParamId>,
    low_keys: Option<ParamId>,
    c: Option<ParamId>,
    c_prime: Option<ParamId>,
    bn: Option<BnIds>,
}

/// A feed-forward memory layer, dense or sparse.
#[derive(Clone, Debug, PartialEq)]
pub struct SffnLayer {
    kind: SelectorKind,
    geometry: MemoryGeometry,
    ids: LayerIds,
    hash: Option<HashGateTable>,
    stream_tag: String,
    seed: u64,
}

#[derive(Clone, Debug)]
struct BnTrace {
    xhat: Matrix,
    inv_std: Vec<f64>,
    mean: Vec<f64>,
    var: Vec<f64>,
}

#[derive(Clone, Debug)]
struct LowTrace {
    /// Normalized projection `u`, `T × d_ℓ`.
    u: Matrix,
    bn: Option<BnTrace>,
    /// PKM: `[s | s′]` per token; otherwise the raw scores `u·K̃ᵀ`.
    scores: Matrix,
}

/// Everything the backward pass needs from one forward call.
#[derive(Clone, Debug)]
pub struct SffnTrace {
    /// Per-token selection; empty for the dense layer.
    pub routes: Vec<BlockSelection>,
    /// Balance loss of this layer (Switch only).
    pub aux_loss: Option<f64>,
    mode: Mode,
    x: Matrix,
    /// Key pre-activations of visited cells, in visiting order.
    pre: Vec<Vec<f64>>,
    dense_z: Option<Matrix>,
    probs: Option<Matrix>,
    low: Option<LowTrace>,
}

fn bn_forward(t: &Matrix, store: &ParamStore, ids: &BnIds, mode: Mode) -> (Matrix, BnTrace) {
    let (rows, cols) = t.shape();
    let (mean, var) = match mode {
        Mode::Train => {
            let mut mean = vec![0.0; cols];
            for r in 0..rows {
                axpy(1.0, t.row(r), &mut mean);
            }
            mean.iter_mut().for_each(|m| *m /= rows as f64);
            let mut var = vec![0.0; cols];
            for r in 0..rows {
                for c in 0..cols {
                    let dv = t.get(r, c) - mean[c];
                    var[c] += dv * dv;
                }
            }
            var.iter_mut().for_each(|v| *v /= rows as f64);
            (mean, var)
        }
        Mode::Eval => (
            store.get(ids.mean).data().to_vec(),
            store.get(ids.var).data().to_vec(),
        ),
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BatchNorm::EPS).sqrt()).collect();
    let gamma = store.get(ids.gamma).data();
    let beta = store.get(ids.beta).data();
    let mut xhat = Matrix::zeros(rows, cols);
    let mut u = Matrix::zeros(rows, cols);
    for r in 0..rows {
        for c in 0..cols {
            let h = (t.get(r, c) - mean[c]) * inv_std[c];
            xhat.set(r, c, h);
            u.set(r, c, gamma[c] * h + beta[c]);
        }
    }
    (
        u,
        BnTrace {
            xhat,
            inv_std,
            mean,
            var,
        },
    )
}

fn bn_backward(du: &Matrix, bn: &BnTrace, mode: Mode, store: &ParamStore, ids: &BnIds, grads: &mut Grads) -> Matrix {
    let (rows, cols) = du.shape();
    let gamma = store.get(ids.gamma).data().to_vec();
    let mut dgamma = vec![0.0; cols];
    let mut dbeta = vec![0.0; cols];
    for r in 0..rows {
        for c in 0..cols {
            dgamma[c] += du.get(r, c) * bn.xhat.get(r, c);
            dbeta[c] += du.get(r, c);
        }
    }
    let n = rows as f64;
    let dt = Matrix::from_fn(rows, cols, |r, c| {
        let scale = gamma[c] * bn.inv_std[c];
        match mode {
            Mode::Train => scale / n * (n * du.get(r, c) - dbeta[c] - bn.xhat.get(r, c) * dgamma[c]),
            Mode::Eval => scale * du.get(r, c),
        }
    });
    add_to(grads, ids.gamma, &dgamma);
    add_to(grads, ids.beta, &dbeta);
    dt
}

fn add_to(grads: &mut Grads, id: ParamId, delta: &[f64]) {
    axpy(1.0, delta, grads.get_mut(id).data_mut());
}

fn add_row(grads: &mut Grads, id: ParamId, row: usize, alpha: f64, x: &[f64]) {
    axpy(alpha, x, grads.get_mut(id).row_mut(row));
}

impl SffnLayer {
    /// Registers the layer's parameters under `prefix` and builds any static
    /// routing tables. `seed` keys the hash table and stochastic selection.
    pub fn new(
        prefix: &str,
        kind: SelectorKind,
        geometry: MemoryGeometry,
        vocab_size: usize,
        store: &mut ParamStore,
        rng: &mut RngStream,
        seed: u64,
        init_std: f64,
    ) -> Result<Self> {
        let (d, d_m, nb) = (geometry.d(), geometry.memory_size(), geometry.num_blocks());
        if kind.requires_unit_blocks() && geometry.block_size() != 1 {
            return Err(Error::Geometry(format!(
                "{} selects single cells; block size must be 1, got {}",
                kind.name(),
                geometry.block_size()
            )));
        }
        let mut ids = LayerIds::default();
        let p = |s: &str| format!("{prefix}.{s}");
        let expert_role = match kind {
            SelectorKind::Switch {
                scale_expert_grads: true,
                ..
            } => ParamRole::Expert { num_blocks: nb },
            _ => ParamRole::Weight,
        };
        let add_bn = |store: &mut ParamStore, on: bool, r: usize| {
            on.then(|| BnIds {
                gamma: store.add(p("bn.gamma"), ParamRole::Norm, Matrix::filled(1, r, 1.0)),
                beta: store.add(p("bn.beta"), ParamRole::Norm, Matrix::zeros(1, r)),
                mean: store.add(p("bn.running_mean"), ParamRole::Buffer, Matrix::zeros(1, r)),
                var: store.add(p("bn.running_var"), ParamRole::Buffer, Matrix::filled(1, r, 1.0)),
            })
        };
        let check_rank = |r: usize| {
            if r == 0 || r > d {
                Err(Error::Geometry(format!("rank {r} must be in 1..={d}")))
            } else {
                Ok(())
            }
        };
        let mut hash = None;
        match &kind {
            SelectorKind::Pkm { d_low, batch_norm } | SelectorKind::PkmFfn { d_low, batch_norm } => {
                let n = ProductKeys::side_for(d_m)?;
                check_rank(*d_low)?;
                if d_low % 2 != 0 {
                    return Err(Error::Geometry(format!("product keys need an even rank, got {d_low}")));
                }
                if matches!(kind, SelectorKind::PkmFfn { .. }) {
                    ids.keys = Some(store.add_normal(&p("keys"), ParamRole::Weight, d_m, d, init_std, rng));
                }
                ids.down = Some(store.add_normal(&p("down"), ParamRole::Weight, d, *d_low, init_std, rng));
                ids.c = Some(store.add_normal(&p("subkeys"), ParamRole::Weight, n, d_low / 2, init_std, rng));
                ids.c_prime = Some(store.add_normal(&p("subkeys_prime"), ParamRole::Weight, n, d_low / 2, init_std, rng));
                ids.bn = add_bn(store, *batch_norm, *d_low);
            }
            SelectorKind::LoRKM { d_low, batch_norm } => {
                check_rank(*d_low)?;
                ids.down = Some(store.add_normal(&p("down"), ParamRole::Weight, d, *d_low, init_std, rng));
                ids.low_keys = Some(store.add_normal(&p("low_keys"), ParamRole::Weight, d_m, *d_low, init_std, rng));
                ids.bn = add_bn(store, *batch_norm, *d_low);
            }
            _ => {
                ids.keys = Some(store.add_normal(&p("keys"), expert_role, d_m, d, init_std, rng));
            }
        }
        ids.values = Some(store.add_normal(&p("values"), expert_role, d_m, d, init_std, rng));
        match &kind {
            SelectorKind::Switch { .. } => {
                ids.gate = Some(store.add_normal(&p("gate"), ParamRole::Gate, nb, d, init_std, rng));
            }
            SelectorKind::Controller {
                controller_rank: Some(r),
            } => {
                check_rank(*r)?;
                ids.down = Some(store.add_normal(&p("controller.down"), ParamRole::Weight, d, *r, init_std, rng));
                ids.low_keys = Some(store.add_normal(&p("controller.keys"), ParamRole::Weight, d_m, *r, init_std, rng));
            }
            SelectorKind::RandHash {} => {
                hash = Some(build_randhash(vocab_size, &geometry, seed)?);
            }
            SelectorKind::NaiveAnn { sabotage_pct } if !(0.0..=100.0).contains(sabotage_pct) => {
                return Err(Error::InvalidArgument(format!(
                    "sabotage percentage {sabotage_pct} outside [0, 100]"
                )));
            }
            _ => {}
        }
        Ok(Self {
            kind,
            geometry,
            ids,
            hash,
            stream_tag: format!("{prefix}/naive-ann"),
            seed,
        })
    }

    pub fn kind(&self) -> &SelectorKind {
        &self.kind
    }

    pub fn geometry(&self) -> &MemoryGeometry {
        &self.geometry
    }

    pub fn hash_table(&self) -> Option<&HashGateTable> {
        self.hash.as_ref()
    }

    /// Whether route indices name single cells rather than blocks of `g`.
    pub fn routes_cells(&self) -> bool {
        matches!(
            self.kind,
            SelectorKind::Controller { .. }
                | SelectorKind::NaiveAnn { .. }
                | SelectorKind::Pkm { .. }
                | SelectorKind::LoRKM { .. }
                | SelectorKind::PkmFfn { .. }
        )
    }

    /// Cells covered by one route index.
    pub fn route_granularity(&self) -> usize {
        if self.routes_cells() {
            1
        } else {
            self.geometry.block_size()
        }
    }

    /// Number of distinct route indices.
    pub fn route_space(&self) -> usize {
        if self.routes_cells() {
            self.geometry.memory_size()
        } else {
            self.geometry.num_blocks()
        }
    }

    /// Gate parameter id, when the layer has a learned gate.
    pub fn gate_id(&self) -> Option<ParamId> {
        self.ids.gate
    }

    fn id(&self, id: Option<ParamId>, what: &str) -> ParamId {
        id.unwrap_or_else(|| panic!("{} layer has no {what} table", self.kind.name()))
    }

    fn rows_of(&self, index: usize) -> std::ops::Range<usize> {
        if self.routes_cells() {
            index..index + 1
        } else {
            self.geometry.block_rows(index)
        }
    }

    /// Forward pass over `T = x.rows()` tokens. `frozen` replays the indices
    /// of an earlier call; weights are always recomputed. Dense layers have
    /// nothing to replay and ignore it.
    pub fn forward(
        &self,
        store: &ParamStore,
        x: &Matrix,
        tokens: &[usize],
        ctx: ForwardCtx,
        frozen: Option<&[BlockSelection]>,
    ) -> Result<(Matrix, SffnTrace)> {
        let (rows, d) = x.shape();
        if d != self.geometry.d() || tokens.len() != rows {
            return Err(shape(
                "memory layer",
                format!(
                    "input {rows}x{d} with {} tokens, layer width {}",
                    tokens.len(),
                    self.geometry.d()
                ),
            ));
        }
        let frozen = frozen.filter(|_| !matches!(self.kind, SelectorKind::Dense {}));
        if let Some(f) = frozen {
            if f.len() != rows {
                return Err(shape(
                    "memory layer",
                    format!("{} frozen routes for {rows} tokens", f.len()),
                ));
            }
            for r in f {
                r.check(self.route_space())?;
            }
        }
        let mut trace = SffnTrace {
            routes: Vec::new(),
            aux_loss: None,
            mode: ctx.mode,
            x: x.clone(),
            pre: Vec::new(),
            dense_z: None,
            probs: None,
            low: None,
        };
        let frozen_idx = |t: usize| frozen.map(|f| f[t].indices().to_vec());
        let g_k = self.geometry.active_blocks();
        let y = match &self.kind {
            SelectorKind::Dense {} => {
                let keys = store.get(self.id(self.ids.keys, "key"));
                let values = store.get(self.id(self.ids.values, "value"));
                let z = matmul_bt(x, keys)?;
                let y = matmul(&z.map(gelu), values)?;
                trace.dense_z = Some(z);
                y
            }
            SelectorKind::VanillaM { aggregator } => {
                let keys = store.get(self.id(self.ids.keys, "key"));
                let mut routes = Vec::with_capacity(rows);
                for t in 0..rows {
                    routes.push(match frozen {
                        Some(f) => f[t].clone(),
                        None => select_vanillam(x.row(t), keys, &self.geometry, *aggregator)?,
                    });
                }
                trace.routes = routes;
                self.keyed_outputs(store, &mut trace)
            }
            SelectorKind::AvgK {} => {
                let keys = store.get(self.id(self.ids.keys, "key"));
                let means = block_means(keys, self.geometry.block_size())?;
                let scores = matmul_bt(x, &means)?;
                for t in 0..rows {
                    let idx = match frozen_idx(t) {
                        Some(i) => i,
                        None => topk_indices(scores.row(t), g_k)?,
                    };
                    trace.routes.push(BlockSelection::hard(idx)?);
                }
                self.keyed_outputs(store, &mut trace)
            }
            SelectorKind::RandHash {} => {
                let table = self.hash.as_ref().expect("hash table built with the layer");
                for &tok in tokens {
                    trace.routes.push(select_randhash(tok, table)?);
                }
                self.keyed_outputs(store, &mut trace)
            }
            SelectorKind::NaiveAnn { sabotage_pct } => {
                let keys = store.get(self.id(self.ids.keys, "key"));
                let z = matmul_bt(x, keys)?;
                for t in 0..rows {
                    let sel = match frozen {
                        Some(f) => f[t].clone(),
                        None => {
                            let m: Vec<f64> = z.row(t).iter().map(|&v| gelu(v)).collect();
                            let mut rng = RngStream::new(
                                self.seed,
                                &self.stream_tag,
                                (ctx.step << 32) | t as u64,
                            );
                            select_naive_ann(&m, self.geometry.active_cells(), *sabotage_pct, &mut rng)?
                        }
                    };
                    trace.routes.push(sel);
                }
                self.keyed_outputs(store, &mut trace)
            }
            SelectorKind::Switch { .. } => {
                let gate = store.get(self.id(self.ids.gate, "gate"));
                let mut probs = matmul_bt(x, gate)?;
                let mut dispatch = Matrix::zeros(rows, gate.rows());
                for t in 0..rows {
                    softmax_in_place(probs.row_mut(t));
                    let best = match frozen {
                        Some(f) => f[t].indices()[0],
                        None => argmax(probs.row(t)).expect("non-empty gate"),
                    };
                    dispatch.set(t, best, 1.0);
                    trace.routes.push(BlockSelection::soft(vec![best], vec![probs.get(t, best)])?);
                }
                trace.aux_loss = Some(switch_aux_loss(&probs, &dispatch)?);
                trace.probs = Some(probs);
                self.keyed_outputs(store, &mut trace)
            }
            SelectorKind::Controller { controller_rank } => {
                let keys = store.get(self.id(self.ids.keys, "key"));
                let g = self.geometry.block_size();
                let scores = match controller_rank {
                    None => matmul_bt(x, keys)?,
                    Some(_) => {
                        let u = matmul(x, store.get(self.id(self.ids.down, "controller")))?;
                        let s = matmul_bt(&u, store.get(self.id(self.ids.low_keys, "controller")))?;
                        trace.low = Some(LowTrace {
                            u,
                            bn: None,
                            scores: s.clone(),
                        });
                        s
                    }
                };
                for t in 0..rows {
                    let cells: Vec<usize> = match frozen_idx(t) {
                        Some(i) => i,
                        None => scores
                            .row(t)
                            .chunks_exact(g)
                            .enumerate()
                            .map(|(b, blk)| b * g + argmax(blk).expect("non-empty block"))
                            .collect(),
                    };
                    let sel = match controller_rank {
                        None => BlockSelection::hard(cells)?,
                        Some(_) => {
                            let w = cells.iter().map(|&c| scores.get(t, c)).collect();
                            BlockSelection::soft(cells, w)?
                        }
                    };
                    trace.routes.push(sel);
                }
                self.keyed_outputs(store, &mut trace)
            }
            SelectorKind::Pkm { .. } | SelectorKind::LoRKM { .. } | SelectorKind::PkmFfn { .. } => {
                self.low_forward(store, &mut trace, ctx.mode, frozen)?
            }
        };
        Ok((y, trace))
    }

    /// `y_t = Σ_(i,w) w · Σ_{j∈rows(i)} gelu(x_t·k_j)·v_j`, in the same order as
    /// `sparse_apply`.
    fn keyed_outputs(&self, store: &ParamStore, trace: &mut SffnTrace) -> Matrix {
        let keys = store.get(self.id(self.ids.keys, "key"));
        let values = store.get(self.id(self.ids.values, "value"));
        let (rows, d) = trace.x.shape();
        let mut y = Matrix::zeros(rows, d);
        trace.pre = Vec::with_capacity(rows);
        for t in 0..rows {
            let xt = trace.x.row(t);
            let yt = y.row_mut(t);
            let mut pre = Vec::new();
            for (i, w) in trace.routes[t].iter() {
                for j in self.rows_of(i) {
                    let z = dot(xt, keys.row(j));
                    pre.push(z);
                    axpy(w * gelu(z), values.row(j), yt);
                }
            }
            trace.pre.push(pre);
        }
        y
    }

    fn low_forward(
        &self,
        store: &ParamStore,
        trace: &mut SffnTrace,
        mode: Mode,
        frozen: Option<&[BlockSelection]>,
    ) -> Result<Matrix> {
        let x = &trace.x;
        let rows = x.rows();
        let k = self.geometry.active_cells();
        let raw = matmul(x, store.get(self.id(self.ids.down, "projection")))?;
        let (u, bn) = match &self.ids.bn {
            Some(ids) => {
                let (u, b) = bn_forward(&raw, store, ids, mode);
                (u, Some(b))
            }
            None => (raw, None),
        };
        let product = !matches!(self.kind, SelectorKind::LoRKM { .. });
        let scores = if product {
            let c = store.get(self.id(self.ids.c, "sub-key"));
            let cp = store.get(self.id(self.ids.c_prime, "sub-key"));
            let n = c.rows();
            let mut s = Matrix::zeros(rows, 2 * n);
            for t in 0..rows {
                let (a, b) = product_pre_scores(u.row(t), c, cp);
                s.row_mut(t)[..n].copy_from_slice(&a);
                s.row_mut(t)[n..].copy_from_slice(&b);
            }
            s
        } else {
            matmul_bt(&u, store.get(self.id(self.ids.low_keys, "low-rank key")))?
        };
        let values = store.get(self.id(self.ids.values, "value"));
        let (_, d) = x.shape();
        let mut y = Matrix::zeros(rows, d);
        for t in 0..rows {
            let m = self.low_coefficients(scores.row(t));
            let idx = match frozen {
                Some(f) => f[t].indices().to_vec(),
                None => topk_indices(&m, k)?,
            };
            let w: Vec<f64> = idx.iter().map(|&i| m[i]).collect();
            let sel = BlockSelection::soft(idx, w)?;
            let yt = y.row_mut(t);
            if let SelectorKind::PkmFfn { .. } = self.kind {
                let keys = store.get(self.id(self.ids.keys, "key"));
                let mut pre = Vec::with_capacity(sel.len());
                for (i, wi) in sel.iter() {
                    let z = dot(x.row(t), keys.row(i));
                    pre.push(z);
                    axpy(wi * gelu(z), values.row(i), yt);
                }
                trace.pre.push(pre);
            } else {
                for (i, wi) in sel.iter() {
                    axpy(wi, values.row(i), yt);
                }
            }
            trace.routes.push(sel);
        }
        trace.low = Some(LowTrace { u, bn, scores });
        Ok(y)
    }

    /// All `d_m` coefficients from one row of the low-rank trace scores.
    fn low_coefficients(&self, scores: &[f64]) -> Vec<f64> {
        match self.kind {
            SelectorKind::LoRKM { .. } => scores.iter().map(|&s| gelu(s)).collect(),
            _ => {
                let n = scores.len() / 2;
                let (s, s2) = scores.split_at(n);
                let mut m = Vec::with_capacity(n * n);
                for a in s {
                    for b in s2 {
                        m.push(gelu(a + b));
                    }
                }
                m
            }
        }
    }

    fn low_pre(&self, scores: &[f64], cell: usize) -> f64 {
        match self.kind {
            SelectorKind::LoRKM { .. } => scores[cell],
            _ => {
                let n = scores.len() / 2;
                scores[cell / n] + scores[n + cell % n]
            }
        }
    }

    /// Backward pass. `aux_grad` is the derivative of the total loss with
    /// respect to this layer's balance loss. Returns the input gradient.
    pub fn backward(
        &self,
        store: &ParamStore,
        trace: &SffnTrace,
        dy: &Matrix,
        aux_grad: f64,
        grads: &mut Grads,
    ) -> Result<Matrix> {
        let x = &trace.x;
        if dy.shape() != x.shape() {
            return Err(shape(
                "memory layer backward",
                format!("upstream {:?} vs input {:?}", dy.shape(), x.shape()),
            ));
        }
        let (rows, d) = x.shape();
        match &self.kind {
            SelectorKind::Dense {} => {
                let kid = self.id(self.ids.keys, "key");
                let vid = self.id(self.ids.values, "value");
                let z = trace
                    .dense_z
                    .as_ref()
                    .ok_or_else(|| Error::MissingTrace("dense pre-activations".into()))?;
                let m = z.map(gelu);
                let dm = matmul_bt(dy, store.get(vid))?;
                grads.get_mut(vid).add_assign(&matmul_at(&m, dy)?)?;
                let mut dz = dm;
                for (g, &zz) in dz.data_mut().iter_mut().zip(z.data()) {
                    *g *= gelu_grad(zz);
                }
                grads.get_mut(kid).add_assign(&matmul_at(&dz, x)?)?;
                Ok(matmul(&dz, store.get(kid))?)
            }
            SelectorKind::Pkm { .. } | SelectorKind::LoRKM { .. } | SelectorKind::PkmFfn { .. } => {
                self.low_backward(store, trace, dy, grads)
            }
            _ => {
                if trace.routes.len() != rows || trace.pre.len() != rows {
                    return Err(Error::MissingTrace("routes of a keyed layer".into()));
                }
                let kid = self.id(self.ids.keys, "key");
                let vid = self.id(self.ids.values, "value");
                let keys = store.get(kid);
                let values = store.get(vid);
                let mut dx = Matrix::zeros(rows, d);
                let mut dweights: Vec<Vec<f64>> = Vec::with_capacity(rows);
                for t in 0..rows {
                    let xt = x.row(t);
                    let gt = dy.row(t);
                    let mut pre = trace.pre[t].iter();
                    let mut dw_t = Vec::with_capacity(trace.routes[t].len());
                    for (i, w) in trace.routes[t].iter() {
                        let mut dw = 0.0;
                        for j in self.rows_of(i) {
                            let z = *pre.next().ok_or_else(|| Error::MissingTrace("cell pre-activation".into()))?;
                            let m = gelu(z);
                            let gv = dot(gt, values.row(j));
                            add_row(grads, vid, j, w * m, gt);
                            let dz = w * gv * gelu_grad(z);
                            add_row(grads, kid, j, dz, xt);
                            axpy(dz, keys.row(j), dx.row_mut(t));
                            dw += m * gv;
                        }
                        dw_t.push(dw);
                    }
                    dweights.push(dw_t);
                }
                match &self.kind {
                    SelectorKind::Switch { .. } => {
                        self.switch_backward(store, trace, &dweights, aux_grad, &mut dx, grads)?
                    }
                    SelectorKind::Controller {
                        controller_rank: Some(_),
                    } => {
                        let low = trace
                            .low
                            .as_ref()
                            .ok_or_else(|| Error::MissingTrace("controller projection".into()))?;
                        let did = self.id(self.ids.down, "controller");
                        let lid = self.id(self.ids.low_keys, "controller");
                        let ck = store.get(lid);
                        let r = ck.cols();
                        let mut du = Matrix::zeros(rows, r);
                        for t in 0..rows {
                            for ((cell, _), dw) in trace.routes[t].iter().zip(&dweights[t]) {
                                add_row(grads, lid, cell, *dw, low.u.row(t));
                                axpy(*dw, ck.row(cell), du.row_mut(t));
                            }
                        }
                        grads.get_mut(did).add_assign(&matmul_at(x, &du)?)?;
                        dx.add_assign(&matmul_bt(&du, store.get(did))?)?;
                    }
                    _ => {}
                }
                Ok(dx)
            }
        }
    }

    fn switch_backward(
        &self,
        store: &ParamStore,
        trace: &SffnTrace,
        dweights: &[Vec<f64>],
        aux_grad: f64,
        dx: &mut Matrix,
        grads: &mut Grads,
    ) -> Result<()> {
        let probs = trace
            .probs
            .as_ref()
            .ok_or_else(|| Error::MissingTrace("gate probabilities".into()))?;
        let (rows, nb) = probs.shape();
        let mut frac = vec![0.0; nb];
        for r in &trace.routes {
            frac[r.indices()[0]] += 1.0 / rows as f64;
        }
        let gid = self.id(self.ids.gate, "gate");
        let mut dlogits = Matrix::zeros(rows, nb);
        let mut dp = vec![0.0; nb];
        for t in 0..rows {
            for (i, f) in frac.iter().enumerate() {
                dp[i] = aux_grad * nb as f64 * f / rows as f64;
            }
            dp[trace.routes[t].indices()[0]] += dweights[t][0];
            let p = probs.row(t);
            let inner = dot(p, &dp);
            for l in 0..nb {
                dlogits.set(t, l, p[l] * (dp[l] - inner));
            }
        }
        grads.get_mut(gid).add_assign(&matmul_at(&dlogits, &trace.x)?)?;
        dx.add_assign(&matmul(&dlogits, store.get(gid))?)?;
        Ok(())
    }

    fn low_backward(&self, store: &ParamStore, trace: &SffnTrace, dy: &Matrix, grads: &mut Grads) -> Result<Matrix> {
        let low = trace
            .low
            .as_ref()
            .ok_or_else(|| Error::MissingTrace("key projection".into()))?;
        let x = &trace.x;
        let (rows, d) = x.shape();
        let vid = self.id(self.ids.values, "value");
        let values = store.get(vid);
        let r = low.u.cols();
        let mut du = Matrix::zeros(rows, r);
        let mut dx = Matrix::zeros(rows, d);
        let ffn = matches!(self.kind, SelectorKind::PkmFfn { .. });
        let product = !matches!(self.kind, SelectorKind::LoRKM { .. });
        let mut dscores = vec![0.0; low.scores.cols()];
        for t in 0..rows {
            let gt = dy.row(t);
            let xt = x.row(t);
            let scores = low.scores.row(t);
            dscores.iter_mut().for_each(|v| *v = 0.0);
            for (n, (i, m)) in trace.routes[t].iter().enumerate() {
                let gv = dot(gt, values.row(i));
                let dm = if ffn {
                    let kid = self.id(self.ids.keys, "key");
                    let z = trace.pre[t][n];
                    let mz = gelu(z);
                    add_row(grads, vid, i, m * mz, gt);
                    let dz = m * gv * gelu_grad(z);
                    add_row(grads, kid, i, dz, xt);
                    axpy(dz, store.get(kid).row(i), dx.row_mut(t));
                    mz * gv
                } else {
                    add_row(grads, vid, i, m, gt);
                    gv
                };
                let dpre = dm * gelu_grad(self.low_pre(scores, i));
                if product {
                    let half = scores.len() / 2;
                    dscores[i / half] += dpre;
                    dscores[half + i % half] += dpre;
                } else {
                    dscores[i] += dpre;
                }
            }
            let ut = low.u.row(t);
            if product {
                let cid = self.id(self.ids.c, "sub-key");
                let cpid = self.id(self.ids.c_prime, "sub-key");
                let n = store.get(cid).rows();
                let h = r / 2;
                for a in 0..n {
                    let (ds, ds2) = (dscores[a], dscores[n + a]);
                    if ds != 0.0 {
                        add_row(grads, cid, a, ds, &ut[..h]);
                        axpy(ds, store.get(cid).row(a), &mut du.row_mut(t)[..h]);
                    }
                    if ds2 != 0.0 {
                        add_row(grads, cpid, a, ds2, &ut[h..]);
                        axpy(ds2, store.get(cpid).row(a), &mut du.row_mut(t)[h..]);
                    }
                }
            } else {
                let lid = self.id(self.ids.low_keys, "low-rank key");
                for (i, _) in trace.routes[t].iter() {
                    let ds = dscores[i];
                    add_row(grads, lid, i, ds, ut);
                    axpy(ds, store.get(lid).row(i), du.row_mut(t));
                }
            }
        }
        let dt = match (&self.ids.bn, &low.bn) {
            (Some(ids), Some(bn)) => bn_backward(&du, bn, trace.mode, store, ids, grads),
            _ => du,
        };
        let did = self.id(self.ids.down, "projection");
        grads.get_mut(did).add_assign(&matmul_at(x, &dt)?)?;
        dx.add_assign(&matmul_bt(&dt, store.get(did))?)?;
        Ok(dx)
    }

    /// Folds the batch statistics of a training-mode trace into the running
    /// batch-norm statistics.
    pub fn update_running_stats(&self, store: &mut ParamStore, trace: &SffnTrace) {
        if trace.mode != Mode::Train {
            return;
        }
        if let (Some(ids), Some(bn)) = (&self.ids.bn, trace.low.as_ref().and_then(|l| l.bn.as_ref())) {
            let mut norm = BatchNorm::new(bn.mean.len());
            norm.running_mean = store.get(ids.mean).data().to_vec();
            norm.running_var = store.get(ids.var).data().to_vec();
            norm.update_running(&bn.mean, &bn.var, trace.x.rows());
            store.get_mut(ids.mean).data_mut().copy_from_slice(&norm.running_mean);
            store.get_mut(ids.var).data_mut().copy_from_slice(&norm.running_var);
        }
    }
}

/// Backward pass of a memory layer; a missing trace is an error.
pub fn memory_layer_backward(
    layer: &SffnLayer,
    store: &ParamStore,
    trace: Option<&SffnTrace>,
    dy: &Matrix,
    aux_grad: f64,
    grads: &mut Grads,
) -> Result<Matrix> {
    let trace = trace.ok_or_else(|| Error::MissingTrace("memory layer backward called before forward".into()))?;
    layer.backward(store, trace, dy, aux_grad, grads)
}
