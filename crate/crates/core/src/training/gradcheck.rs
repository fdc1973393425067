//! Finite-difference verification of the memory-layer gradients.

use serde::Serialize;

use super::params::{ParamRole, ParamStore};
use super::sffn::{ForwardCtx, SffnLayer};
use crate::error::Result;
use crate::memory::{BlockSelection, MemoryGeometry};
use crate::rng::RngStream;
use crate::selectors::{Aggregator, SelectorKind};
use crate::tensor::{finite_diff_grad, Matrix};

pub const GRAD_EPS: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;
/// Entries whose magnitudes are both below this are compared absolutely.
pub const GRAD_ABS_FLOOR: f64 = 1e-8;

/// One layer variant to check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckCase {
    pub name: String,
    pub kind: SelectorKind,
    pub geometry: MemoryGeometry,
}

impl GradCheckCase {
    pub fn new(name: &str, kind: SelectorKind, d: usize, d_m: usize, g: usize, k: usize) -> Self {
        Self {
            name: name.into(),
            kind,
            geometry: MemoryGeometry::new(d, d_m, g, k).expect("valid small geometry"),
        }
    }
}

/// Every layer variant at width 6 and 16 memory cells.
pub fn default_grad_cases() -> Vec<GradCheckCase> {
    let (d, dm) = (6, 16);
    let mut cases = vec![GradCheckCase::new("dense", SelectorKind::Dense {}, d, dm, dm, dm)];
    for agg in Aggregator::ALL {
        cases.push(GradCheckCase::new(
            &format!("vanillam-{}", agg.name()),
            SelectorKind::VanillaM { aggregator: agg },
            d,
            dm,
            4,
            8,
        ));
    }
    cases.extend([
        GradCheckCase::new("randhash", SelectorKind::RandHash {}, d, dm, 2, 6),
        GradCheckCase::new(
            "switch",
            SelectorKind::Switch {
                aux_loss_weight: 0.01,
                scale_expert_grads: true,
            },
            d,
            dm,
            4,
            4,
        ),
        GradCheckCase::new("avgk", SelectorKind::AvgK {}, d, dm, 4, 8),
        GradCheckCase::new(
            "pkm",
            SelectorKind::Pkm {
                d_low: 4,
                batch_norm: true,
            },
            d,
            dm,
            1,
            5,
        ),
        GradCheckCase::new(
            "lorkm",
            SelectorKind::LoRKM {
                d_low: 4,
                batch_norm: false,
            },
            d,
            dm,
            1,
            5,
        ),
        GradCheckCase::new(
            "pkm-ffn",
            SelectorKind::PkmFfn {
                d_low: 4,
                batch_norm: true,
            },
            d,
            dm,
            1,
            5,
        ),
        GradCheckCase::new(
            "controller",
            SelectorKind::Controller { controller_rank: None },
            d,
            dm,
            4,
            4,
        ),
        GradCheckCase::new(
            "controller-lowrank",
            SelectorKind::Controller { controller_rank: Some(3) },
            d,
            dm,
            4,
            4,
        ),
        GradCheckCase::new("naive-ann", SelectorKind::NaiveAnn { sabotage_pct: 40.0 }, d, dm, 1, 5),
    ]);
    cases
}

/// Worst deviation of one parameter tensor.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParamCheck {
    pub case: String,
    pub param: String,
    pub entries: usize,
    pub max_err: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub eps: f64,
    pub tolerance: f64,
    pub abs_floor: f64,
    pub checks: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &ParamCheck> {
        self.checks.iter().filter(|c| !c.passed)
    }

    /// Largest error per case, in case order.
    pub fn per_case(&self) -> Vec<(String, f64, bool)> {
        let mut out: Vec<(String, f64, bool)> = Vec::new();
        for c in &self.checks {
            match out.last_mut() {
                Some(last) if last.0 == c.case => {
                    last.1 = last.1.max(c.max_err);
                    last.2 &= c.passed;
                }
                _ => out.push((c.case.clone(), c.max_err, c.passed)),
            }
        }
        out
    }
}

/// Relative error per entry, absolute where both magnitudes are under
/// `floor`; returns the maximum.
pub fn grad_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| {
            let scale = a.abs().max(n.abs());
            if scale < floor {
                (a - n).abs()
            } else {
                (a - n).abs() / scale
            }
        })
        .fold(0.0, f64::max)
}

struct Harness<'a> {
    layer: &'a SffnLayer,
    tokens: Vec<usize>,
    weights: Matrix,
    routes: Vec<BlockSelection>,
}

impl Harness<'_> {
    /// `Σ w ⊙ y + aux` with the recorded selection replayed.
    fn loss(&self, store: &ParamStore, x: &Matrix) -> f64 {
        let (y, trace) = self
            .layer
            .forward(store, x, &self.tokens, ForwardCtx::train(0), Some(&self.routes))
            .expect("replayed forward");
        let fit: f64 = y.data().iter().zip(self.weights.data()).map(|(a, b)| a * b).sum();
        fit + trace.aux_loss.unwrap_or(0.0)
    }
}

/// Checks every parameter of a layer (and its input) against central
/// differences with the selection frozen to the first forward pass.
pub fn check_case(case: &GradCheckCase, seed: u64) -> Result<Vec<ParamCheck>> {
    let tokens_n = 5;
    let vocab = 7;
    let d = case.geometry.d();
    let mut rng = RngStream::new(seed, &format!("gradcheck/{}", case.name), 0);
    let mut store = ParamStore::new();
    let layer = SffnLayer::new("ffn", case.kind.clone(), case.geometry, vocab, &mut store, &mut rng, seed, 0.5)?;
    let ids: Vec<_> = store.ids().collect();
    for &id in &ids {
        if store.role(id) == ParamRole::Norm {
            let (r, c) = store.get(id).shape();
            store.set(id, Matrix::from_fn(r, c, |_, _| rng.uniform(0.5, 1.5)))?;
        }
    }
    let x = Matrix::from_fn(tokens_n, d, |_, _| rng.normal(0.0, 1.0));
    let tokens: Vec<usize> = (0..tokens_n).map(|_| rng.below(vocab)).collect();
    let weights = Matrix::from_fn(tokens_n, d, |_, _| rng.normal(0.0, 1.0));
    let (_, trace) = layer.forward(&store, &x, &tokens, ForwardCtx::train(0), None)?;
    let harness = Harness {
        layer: &layer,
        tokens,
        weights: weights.clone(),
        routes: trace.routes.clone(),
    };
    let mut grads = store.zero_grads();
    let dx = layer.backward(&store, &trace, &weights, 1.0, &mut grads)?;

    let mut checks = Vec::new();
    let mut record = |param: String, analytic: &Matrix, numeric: &Matrix| {
        let err = grad_error(analytic.data(), numeric.data(), GRAD_ABS_FLOOR);
        checks.push(ParamCheck {
            case: case.name.clone(),
            param,
            entries: analytic.data().len(),
            max_err: err,
            passed: err <= GRAD_TOL,
        });
    };
    let fx = finite_diff_grad(|xx| harness.loss(&store, xx), &x, GRAD_EPS)?;
    record("input".into(), &dx, &fx);
    for &id in &ids {
        if store.role(id) == ParamRole::Buffer {
            continue;
        }
        let numeric = finite_diff_grad(
            |m| {
                let mut probe = store.clone();
                probe.set(id, m.clone()).expect("same shape");
                harness.loss(&probe, &x)
            },
            store.get(id),
            GRAD_EPS,
        )?;
        record(store.name(id).to_string(), grads.get(id), &numeric);
    }
    Ok(checks)
}

/// Runs [`check_case`] for every case.
pub fn grad_check_suite(cases: &[GradCheckCase], seed: u64) -> Result<GradCheckReport> {
    let mut checks = Vec::new();
    for case in cases {
        checks.extend(check_case(case, seed)?);
    }
    Ok(GradCheckReport {
        eps: GRAD_EPS,
        tolerance: GRAD_TOL,
        abs_floor: GRAD_ABS_FLOOR,
        checks,
    })
}
