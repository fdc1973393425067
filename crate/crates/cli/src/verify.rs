//! Verification suites run by `sffn verify` and by the acceptance tests.
//!
//! Every check records the observed quantity next to the threshold it is held
//! to, so a JSON report says how much slack each property had.

use std::time::Instant;

use anyhow::Result;
use clap::ValueEnum;
use serde::Serialize;
use sffn_core::analysis::{
    expected_overlap_analytical, expected_overlap_closed_form, expected_overlap_empirical, gate_flops,
    load_balance_histogram, model_flops, RoutingEvent, RoutingTrace, CONVENTION_FACTOR, GATE_TFLOPS_TABLE,
    REFERENCE_BATCH_TOKENS, REFERENCE_TRAIN_TOKENS,
};
use sffn_core::analysis::reference_tables;
use sffn_core::memory::{dense_ffn, moe_as_memory, moe_standard, sparse_apply, BlockSelection, Expert, MemoryGeometry, ValueTable};
use sffn_core::rng::RngStream;
use sffn_core::selectors::{
    build_randhash, lorkm_scores, pkm_scores, score_avgk, select_naive_ann, select_randhash, select_vanillam,
    Aggregator, LowRankKeys, ProductKeys, SelectorKind,
};
use sffn_core::tensor::{dot, gelu, max_rel_err, Matrix};
use sffn_core::training::{default_grad_cases, grad_check_suite, scale_expert_grad, switch_aux_loss, ModelConfig};

/// Relative errors are taken against `max(|a|, |b|, REL_FLOOR)`.
pub const REL_FLOOR: f64 = 1e-12;
pub const EQUIVALENCE_TOL: f64 = 1e-10;
pub const AVGK_TOL: f64 = 1e-12;
pub const FACTORIZED_TOL: f64 = 1e-10;
pub const EQUIVALENCE_SECONDS: f64 = 5.0;
pub const GRADCHECK_SECONDS: f64 = 60.0;
pub const GATE_TABLE_TOL: f64 = 0.01;
pub const ZFLOPS_TOL: f64 = 0.05;
pub const OVERLAP_IDENTITY_TOL: f64 = 1e-9;
pub const OVERLAP_SIGMAS: f64 = 3.0;
pub const BALANCE_RATIO_MAX: f64 = 1.2;
pub const HISTOGRAM_SUM_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    /// MoE/memory views, Avg-K linearity, factorized keys, degenerate selections, balance loss.
    Equivalence,
    /// Finite-difference gradients of every layer variant.
    Gradcheck,
    /// Gate-FLOPs table and whole-model training FLOPs.
    Flops,
    /// Shared-cell overlap and hash-routing balance.
    Overlap,
    All,
}

impl Suite {
    pub fn name(self) -> &'static str {
        match self {
            Suite::Equivalence => "equivalence",
            Suite::Gradcheck => "gradcheck",
            Suite::Flops => "flops",
            Suite::Overlap => "overlap",
            Suite::All => "all",
        }
    }
}

/// One verified property.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub observed: f64,
    /// `observed <relation> threshold` must hold.
    pub relation: &'static str,
    pub threshold: f64,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    pub fn at_most(name: impl Into<String>, observed: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            observed,
            relation: "<=",
            threshold,
            passed: observed <= threshold,
            detail: String::new(),
        }
    }

    pub fn below(name: impl Into<String>, observed: f64, threshold: f64) -> Self {
        Self {
            relation: "<",
            passed: observed < threshold,
            ..Self::at_most(name, observed, threshold)
        }
    }

    /// Exact equality, e.g. bitwise comparisons counted as mismatches.
    pub fn equals(name: impl Into<String>, observed: f64, expected: f64) -> Self {
        Self {
            relation: "==",
            passed: observed == expected,
            ..Self::at_most(name, observed, expected)
        }
    }

    pub fn with_detail(mut self, detail: impl Into<String>) -> Self {
        self.detail = detail.into();
        self
    }

    pub fn line(&self) -> String {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        let mut s = format!("{tag} {}: {:.6e} {} {:.6e}", self.name, self.observed, self.relation, self.threshold);
        if !self.detail.is_empty() {
            s.push_str(&format!(" ({})", self.detail));
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteReport {
    pub suite: Suite,
    pub seed: u64,
    pub passed: bool,
    pub checks: Vec<Check>,
}

pub fn run_suite(suite: Suite, seed: u64) -> Result<SuiteReport> {
    let mut checks = Vec::new();
    let all = suite == Suite::All;
    if all || suite == Suite::Equivalence {
        checks.extend(moe_memory_equivalence(seed, 200)?);
        checks.push(avgk_linearity(seed, 100)?);
        checks.extend(factorized_scoring(seed, 100)?);
        checks.extend(selection_degeneracy(seed, 100)?);
        checks.extend(switch_balance_loss()?);
    }
    if all || suite == Suite::Gradcheck {
        checks.extend(gradient_checks(seed)?);
    }
    if all || suite == Suite::Flops {
        checks.extend(flops_checks()?);
    }
    if all || suite == Suite::Overlap {
        checks.push(overlap_identity(64)?);
        checks.push(overlap_monte_carlo(seed, 100_000)?);
        checks.extend(randhash_balance(seed, 1_000_000)?);
    }
    Ok(SuiteReport {
        suite,
        seed,
        passed: checks.iter().all(|c| c.passed),
        checks,
    })
}

fn randm(rng: &mut RngStream, r: usize, c: usize) -> Matrix {
    Matrix::from_fn(r, c, |_, _| rng.normal(0.0, 1.0))
}

fn randv(rng: &mut RngStream, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.normal(0.0, 1.0)).collect()
}

/// Random `(d, B, g)`, each in `1..=8`.
fn small_dims(rng: &mut RngStream) -> (usize, usize, usize) {
    (1 + rng.below(8), 1 + rng.below(8), 1 + rng.below(8))
}

/// Standard MoE output against the same experts read as one blocked memory.
pub fn moe_memory_equivalence(seed: u64, instances: usize) -> Result<Vec<Check>> {
    let start = Instant::now();
    let mut rng = RngStream::new(seed, "verify/moe", 0);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let (d, nb, g) = small_dims(&mut rng);
        let experts: Vec<Expert> = (0..nb)
            .map(|_| Expert {
                keys: randm(&mut rng, g, d),
                values: randm(&mut rng, g, d),
            })
            .collect();
        let gates: Vec<f64> = (0..nb).map(|_| rng.uniform(0.0, 1.0)).collect();
        let x = randv(&mut rng, d);
        let a = moe_standard(&x, &experts, &gates)?;
        let b = moe_as_memory(&x, &experts, &gates)?;
        worst = worst.max(max_rel_err(&a, &b, REL_FLOOR));
    }
    let secs = start.elapsed().as_secs_f64();
    Ok(vec![
        Check::at_most("moe-memory-equivalence", worst, EQUIVALENCE_TOL)
            .with_detail(format!("{instances} instances, B, g, d <= 8")),
        Check::below("moe-memory-runtime-seconds", secs, EQUIVALENCE_SECONDS),
    ])
}

/// Block-mean key scores against the mean of per-cell dot products. The
/// error is relative to the mean absolute dot product of the block, since
/// the signed mean can cancel to near zero.
pub fn avgk_linearity(seed: u64, instances: usize) -> Result<Check> {
    let mut rng = RngStream::new(seed, "verify/avgk", 0);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let (d, nb, g) = small_dims(&mut rng);
        let b = 1 + rng.below(nb);
        let geo = MemoryGeometry::new(d, nb * g, g, b * g)?;
        let keys = randm(&mut rng, nb * g, d);
        let x = randv(&mut rng, d);
        let scores = score_avgk(&x, &keys, &geo)?;
        for (i, s) in scores.iter().enumerate() {
            let dots: Vec<f64> = (0..g).map(|j| dot(&x, keys.row(i * g + j))).collect();
            let mean = dots.iter().sum::<f64>() / g as f64;
            let scale = dots.iter().map(|v| v.abs()).sum::<f64>() / g as f64;
            worst = worst.max((s - mean).abs() / scale.max(REL_FLOOR));
        }
    }
    Ok(Check::at_most("avgk-linearity", worst, AVGK_TOL).with_detail(format!("{instances} instances")))
}

/// Factorized PKM and LoRKM scores against scoring with the materialized
/// `d_m × d` key table, batch norm off, plus the product index map.
pub fn factorized_scoring(seed: u64, instances: usize) -> Result<Vec<Check>> {
    let mut rng = RngStream::new(seed, "verify/factorized", 0);
    let (mut pkm_worst, mut lorkm_worst): (f64, f64) = (0.0, 0.0);
    for _ in 0..instances {
        let d = 2 + rng.below(7);
        let d_low = 2 * (1 + rng.below(d / 2));
        let side = 1 + rng.below(5);
        let half = d_low / 2;
        let pk = ProductKeys::new(randm(&mut rng, d, d_low), randm(&mut rng, side, half), randm(&mut rng, side, half), None)?;
        let x = randv(&mut rng, d);
        let oracle: Vec<f64> = pk.materialize().row_iter().map(|k| gelu(dot(&x, k))).collect();
        pkm_worst = pkm_worst.max(max_rel_err(&pkm_scores(&x, &pk)?, &oracle, REL_FLOOR));

        let lr = LowRankKeys::new(randm(&mut rng, d, d_low), randm(&mut rng, side * side, d_low), None)?;
        let oracle: Vec<f64> = lr.materialize().row_iter().map(|k| gelu(dot(&x, k))).collect();
        lorkm_worst = lorkm_worst.max(max_rel_err(&lorkm_scores(&x, &lr)?, &oracle, REL_FLOOR));
    }

    // with n = 2, cell 3 pairs c_1 with c'_1
    let pk = ProductKeys::new(randm(&mut rng, 4, 4), randm(&mut rng, 2, 2), randm(&mut rng, 2, 2), None)?;
    let low = pk.materialize_low();
    let mut index_mismatches = usize::from(pk.index_pair(3) != (1, 1));
    for i in 0..4 {
        let (a, b) = pk.index_pair(i);
        let want: Vec<f64> = pk.c.row(a).iter().chain(pk.c_prime.row(b)).copied().collect();
        index_mismatches += usize::from(low.row(i) != &want[..] || (a, b) != (i / 2, i % 2));
    }
    Ok(vec![
        Check::at_most("pkm-factorized-scores", pkm_worst, FACTORIZED_TOL).with_detail(format!("{instances} instances")),
        Check::at_most("lorkm-factorized-scores", lorkm_worst, FACTORIZED_TOL)
            .with_detail(format!("{instances} instances")),
        Check::equals("pkm-index-map-mismatches", index_mismatches as f64, 0.0).with_detail("cell 3 -> (c_1, c'_1)"),
    ])
}

/// Selecting every block with unit weight reproduces the dense FFN bit for
/// bit, and Naive-ANN without swaps reproduces exact cell-level top-k.
pub fn selection_degeneracy(seed: u64, instances: usize) -> Result<Vec<Check>> {
    let mut rng = RngStream::new(seed, "verify/degenerate", 0);
    let (mut full_bad, mut ann_bad) = (0usize, 0usize);
    for _ in 0..instances {
        let (d, nb, g) = small_dims(&mut rng);
        let geo = MemoryGeometry::new(d, nb * g, g, nb * g)?;
        let keys = randm(&mut rng, nb * g, d);
        let values = ValueTable::new(randm(&mut rng, nb * g, d));
        let x = randv(&mut rng, d);
        let sel = BlockSelection::hard((0..nb).collect())?;
        if sparse_apply(&x, &keys, &values, &sel, &geo)? != dense_ffn(&x, &keys, &values)? {
            full_bad += 1;
        }

        let dm = nb * g;
        let k = 1 + rng.below(dm);
        let cells = MemoryGeometry::new(d, dm, 1, k)?;
        let coeffs: Vec<f64> = keys.row_iter().map(|kr| gelu(dot(&x, kr))).collect();
        let ann = select_naive_ann(&coeffs, k, 0.0, &mut rng)?;
        let vanilla = select_vanillam(&x, &keys, &cells, Aggregator::Avg)?;
        let same_out = sparse_apply(&x, &keys, &values, &ann, &cells)? == sparse_apply(&x, &keys, &values, &vanilla, &cells)?;
        if ann != vanilla || !same_out {
            ann_bad += 1;
        }
    }
    Ok(vec![
        Check::equals("full-selection-bitwise-mismatches", full_bad as f64, 0.0)
            .with_detail(format!("{instances} instances")),
        Check::equals("naive-ann-zero-bitwise-mismatches", ann_bad as f64, 0.0)
            .with_detail(format!("{instances} instances, against VanillaM g = 1")),
    ])
}

fn one_hot(rows: &[usize], blocks: usize) -> Matrix {
    Matrix::from_fn(rows.len(), blocks, |t, i| if rows[t] == i { 1.0 } else { 0.0 })
}

/// Balance loss at exact balance and at total collapse, and the `√B`
/// expert-gradient scaling.
pub fn switch_balance_loss() -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    for nb in [2usize, 4, 16, 64] {
        let tokens: Vec<usize> = (0..4 * nb).map(|t| t % nb).collect();
        let probs = Matrix::from_fn(tokens.len(), nb, |_, _| 1.0 / nb as f64);
        let aux = switch_aux_loss(&probs, &one_hot(&tokens, nb))?;
        checks.push(Check::at_most(format!("switch-aux-balanced-B{nb}"), (aux - 1.0).abs(), 1e-12));

        let tokens = vec![0; 7];
        let probs = Matrix::from_fn(7, nb, |_, i| if i == 0 { 1.0 } else { 0.0 });
        let aux = switch_aux_loss(&probs, &one_hot(&tokens, nb))?;
        checks.push(Check::equals(format!("switch-aux-collapsed-B{nb}"), aux, nb as f64));
    }
    let mut rng = RngStream::new(0, "verify/expert-grad", 0);
    let mut bad = 0usize;
    for nb in [1usize, 2, 3, 4, 16, 64, 100] {
        let g = randm(&mut rng, 3, 5);
        let mut scaled = g.clone();
        scale_expert_grad(&mut scaled, nb);
        let root = (nb as f64).sqrt();
        bad += g.data().iter().zip(scaled.data()).filter(|(a, b)| **a / root != **b).count();
    }
    checks.push(Check::equals("expert-grad-scaling-mismatches", bad as f64, 0.0).with_detail("grad / sqrt(B), exact"));
    Ok(checks)
}

/// Central differences for every layer variant, one check per variant.
pub fn gradient_checks(seed: u64) -> Result<Vec<Check>> {
    let start = Instant::now();
    let report = grad_check_suite(&default_grad_cases(), seed)?;
    let secs = start.elapsed().as_secs_f64();
    let mut checks: Vec<Check> = report
        .per_case()
        .into_iter()
        .map(|(case, err, _)| {
            let worst = report
                .checks
                .iter()
                .filter(|c| c.case == case)
                .max_by(|a, b| a.max_err.total_cmp(&b.max_err))
                .map(|c| c.param.clone())
                .unwrap_or_default();
            Check::at_most(format!("gradcheck-{case}"), err, report.tolerance)
                .with_detail(format!("eps {}, abs floor {}, worst param {worst}", report.eps, report.abs_floor))
        })
        .collect();
    checks.push(Check::below("gradcheck-runtime-seconds", secs, GRADCHECK_SECONDS));
    Ok(checks)
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

/// Training ZFLOPs of the 24-layer reference model.
pub fn reference_zflops(selector: SelectorKind, multiplier: usize, g: usize, k: usize) -> Result<f64> {
    let cfg = ModelConfig::paper(selector, multiplier, g, k);
    Ok(model_flops(&cfg, REFERENCE_TRAIN_TOKENS, CONVENTION_FACTOR)?.train_total / 1e21)
}

pub fn flops_checks() -> Result<Vec<Check>> {
    let (d, multiplier, n_gates) = (1024usize, 16usize, 4usize);
    let mut checks = Vec::new();
    for (g, tflops) in GATE_TFLOPS_TABLE {
        let nb = multiplier * 4 * d / g;
        let got = gate_flops(d, nb, n_gates, REFERENCE_BATCH_TOKENS, CONVENTION_FACTOR) / 1e12;
        checks.push(
            Check::at_most(format!("gate-tflops-g{g}"), rel(got, tflops), GATE_TABLE_TOL)
                .with_detail(format!("computed {got:.4} vs {tflops}")),
        );
    }
    let dense = reference_zflops(SelectorKind::Dense {}, 1, 4096, 4096)?;
    let vanilla = reference_zflops(SelectorKind::VanillaM { aggregator: Aggregator::Avg }, multiplier, 1, 4096)?;
    let pkm_kind = SelectorKind::Pkm {
        d_low: 128,
        batch_norm: true,
    };
    let pkm = reference_zflops(pkm_kind, multiplier, 1, 4096)?;
    let reference = |method: &str, g: usize| {
        reference_tables()
            .iter()
            .find(|r| r.method == method && r.block_size == g)
            .map_or(f64::NAN, |r| r.train_zflops)
    };
    let (dense_ref, vanilla_ref, pkm_ref) = (reference("dense", 4096), reference("vanillam", 1), reference("pkm", 1));
    checks.push(
        Check::at_most("train-zflops-dense", rel(dense, dense_ref), ZFLOPS_TOL)
            .with_detail(format!("computed {dense:.4} vs {dense_ref}")),
    );
    checks.push(
        Check::at_most("train-zflops-vanillam", rel(vanilla, vanilla_ref), ZFLOPS_TOL)
            .with_detail(format!("computed {vanilla:.4} vs {vanilla_ref}")),
    );
    checks.push(
        Check::below("train-zflops-pkm-below-dense", pkm, dense)
            .with_detail(format!("computed pkm {pkm:.4}; reference {pkm_ref} < {dense_ref}")),
    );
    Ok(checks)
}

/// The overlap series against `g·b²/B` for every `b ≤ B ≤ max_blocks` at a
/// few granularities.
pub fn overlap_identity(max_blocks: usize) -> Result<Check> {
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for nb in 1..=max_blocks {
        for b in 0..=nb {
            for g in [1usize, 7, 64, 4096] {
                let s = expected_overlap_analytical(nb, b, g)?;
                let c = expected_overlap_closed_form(nb, b, g);
                worst = worst.max((s - c).abs() / c.max(1.0));
                cases += 1;
            }
        }
    }
    Ok(Check::at_most("overlap-series-identity", worst, OVERLAP_IDENTITY_TOL)
        .with_detail(format!("{cases} (B, b, g) cases, B <= {max_blocks}")))
}

/// Hash-routing trace over uniformly drawn tokens from a large vocabulary.
pub fn uniform_randhash_trace(
    seed: u64,
    geo: &MemoryGeometry,
    vocab: usize,
    sequences: usize,
    seq_len: usize,
) -> Result<RoutingTrace> {
    let table = build_randhash(vocab, geo, seed)?;
    let mut rng = RngStream::new(seed, "verify/uniform-tokens", 0);
    let mut events = Vec::with_capacity(sequences * seq_len);
    for seq in 0..sequences {
        for pos in 0..seq_len {
            let token_id = rng.below(vocab);
            events.push(RoutingEvent {
                layer: 0,
                seq,
                pos,
                token_id,
                blocks: select_randhash(token_id, &table)?.indices().to_vec(),
            });
        }
    }
    Ok(RoutingTrace::new(geo.num_blocks(), geo.block_size(), events)?)
}

/// Monte-Carlo overlap of hash routing at `B = 16`, `b = 1`, `g = 4096`
/// against the closed form, within three standard errors.
pub fn overlap_monte_carlo(seed: u64, pairs: usize) -> Result<Check> {
    let (g, nb, b) = (4096, 16, 1);
    let geo = MemoryGeometry::new(1024, nb * g, g, b * g)?;
    let sequences = 50;
    let trace = uniform_randhash_trace(seed, &geo, 50257, sequences, 2048)?;
    let mut rng = RngStream::new(seed, "verify/overlap-pairs", 0);
    let est = expected_overlap_empirical(&trace, pairs.div_ceil(sequences), &mut rng)?;
    let want = expected_overlap_closed_form(nb, b, g);
    let z = (est.mean - want).abs() / est.std_error;
    Ok(Check::at_most("overlap-monte-carlo-sigmas", z, OVERLAP_SIGMAS).with_detail(format!(
        "estimate {:.3} +- {:.3} over {} pairs, closed form {want}",
        est.mean, est.std_error, est.pairs
    )))
}

/// Usage histogram of hash routing over uniform tokens at `B = 16`.
pub fn randhash_balance(seed: u64, events: usize) -> Result<Vec<Check>> {
    let geo = MemoryGeometry::new(64, 16 * 4, 4, 4)?;
    let seq_len = 1000;
    let trace = uniform_randhash_trace(seed, &geo, 50257, events.div_ceil(seq_len), seq_len)?;
    let h = load_balance_histogram(&trace)?;
    let ratio = h[0] / h[h.len() - 1];
    let sum: f64 = h.iter().sum();
    Ok(vec![
        Check::at_most("randhash-balance-max-over-min", ratio, BALANCE_RATIO_MAX)
            .with_detail(format!("{} events, B = 16", trace.events.len())),
        Check::at_most("histogram-sum-deviation", (sum - 1.0).abs(), HISTOGRAM_SUM_TOL),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn check_relations() {
        assert!(Check::at_most("a", 1.0, 1.0).passed);
        assert!(!Check::below("a", 1.0, 1.0).passed);
        assert!(Check::equals("a", 0.0, 0.0).passed);
        assert!(!Check::at_most("a", f64::NAN, 1.0).passed);
        assert!(Check::at_most("x", 0.5, 1.0).line().starts_with("PASS x"));
    }

    #[test]
    fn flops_suite_passes() {
        let checks = flops_checks().unwrap();
        assert_eq!(checks.iter().filter(|c| c.name.starts_with("gate-tflops")).count(), 9);
        for c in &checks {
            assert!(c.passed, "{}", c.line());
        }
    }

    #[test]
    fn equivalence_checks_pass_on_small_runs() {
        for c in moe_memory_equivalence(3, 20).unwrap() {
            assert!(c.passed, "{}", c.line());
        }
        assert!(avgk_linearity(3, 20).unwrap().passed);
        for c in factorized_scoring(3, 20).unwrap().into_iter().chain(selection_degeneracy(3, 20).unwrap()) {
            assert!(c.passed, "{}", c.line());
        }
        for c in switch_balance_loss().unwrap() {
            assert!(c.passed, "{}", c.line());
        }
    }
}
