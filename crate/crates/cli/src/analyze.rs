//! `analyze`: FLOPs and closed-form overlap for a config, load balance and
//! sampled overlap for a routing trace, next to the published numbers.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::Serialize;
use sffn_core::analysis::{
    expected_overlap_analytical, expected_overlap_closed_form, expected_overlap_empirical, load_balance_histogram,
    model_flops, reference_tables, FlopsReport, OverlapEstimate, ReferenceRecord, RoutingTrace, CONVENTION_FACTOR,
};
use sffn_core::rng::RngStream;
use sffn_core::selectors::SelectorKind;

use crate::config::ExperimentConfig;
use crate::io::{write_atomic, write_json};
use crate::version_string;

pub const ANALYSIS_CSV: &str = "analysis.csv";
pub const REPORT_JSON: &str = "report.json";
pub const ANALYSIS_HEADER: &str = "method,g,k,E,metric,value";
pub const REFERENCE_LABEL: &str = "paper-scale reference, not reproduced";

/// One `analysis.csv` line. Unknown coordinates are left empty.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AnalysisRow {
    pub method: String,
    pub g: Option<usize>,
    pub k: Option<usize>,
    pub e: Option<usize>,
    pub metric: String,
    pub value: f64,
}

impl AnalysisRow {
    fn to_csv(&self) -> String {
        let opt = |v: Option<usize>| v.map(|x| x.to_string()).unwrap_or_default();
        format!("{},{},{},{},{},{}", self.method, opt(self.g), opt(self.k), opt(self.e), self.metric, self.value)
    }
}

pub fn analysis_csv(rows: &[AnalysisRow]) -> String {
    let mut out = format!("{ANALYSIS_HEADER}\n");
    for r in rows {
        out.push_str(&r.to_csv());
        out.push('\n');
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OverlapSection {
    pub num_blocks: usize,
    pub active_blocks: usize,
    pub granularity: usize,
    pub closed_form: f64,
    pub series: f64,
    pub empirical: Option<OverlapEstimate>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HistogramSection {
    /// Pooled over layers, sorted descending.
    pub fractions: Vec<f64>,
    pub max_over_min: f64,
    pub sum: f64,
    pub per_layer: Vec<(usize, Vec<f64>)>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReferenceSection {
    pub label: &'static str,
    pub records: Vec<ReferenceRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AnalysisReport {
    pub version: String,
    pub method: String,
    pub flops: Option<FlopsReport>,
    pub overlap: Option<OverlapSection>,
    pub histogram: Option<HistogramSection>,
    pub reference: ReferenceSection,
}

/// Method name used by the reference table: VanillaM blocks of more than
/// one cell carry their aggregator.
pub fn method_name(kind: &SelectorKind, g: usize) -> String {
    match kind {
        SelectorKind::VanillaM { aggregator } if g > 1 => format!("vanillam-{}", aggregator.name()),
        k => k.name().to_string(),
    }
}

pub struct AnalyzeRequest<'a> {
    pub config: Option<&'a ExperimentConfig>,
    pub trace: Option<&'a RoutingTrace>,
    /// Token budget for FLOPs totals; defaults to `steps · batch · seq_len`.
    pub tokens: Option<f64>,
    pub pairs_per_sequence: usize,
    pub seed: u64,
}

pub fn analyze(req: &AnalyzeRequest) -> Result<(AnalysisReport, Vec<AnalysisRow>)> {
    if req.config.is_none() && req.trace.is_none() {
        bail!("analyze needs a config, a trace, or both");
    }
    let (method, g, k, e) = match req.config {
        Some(cfg) => {
            let m = &cfg.model;
            let geo = m.sffn_geometry()?;
            let e = match m.selector {
                SelectorKind::Dense {} => 1,
                _ => m.memory.multiplier,
            };
            (method_name(&m.selector, geo.block_size()), Some(geo.block_size()), Some(geo.active_cells()), Some(e))
        }
        None => {
            let t = req.trace.expect("checked above");
            let blocks = t.events.first().map_or(0, |ev| ev.blocks.len());
            ("trace".to_string(), Some(t.granularity), Some(blocks * t.granularity), None)
        }
    };
    let mut rows = Vec::new();
    let mut push = |metric: String, value: f64| {
        rows.push(AnalysisRow {
            method: method.clone(),
            g,
            k,
            e,
            metric,
            value,
        })
    };

    let mut flops = None;
    let mut overlap = None;
    if let Some(cfg) = req.config {
        let m = &cfg.model;
        let tokens = req
            .tokens
            .unwrap_or((cfg.train.steps * cfg.train.batch_size * m.seq_len) as f64);
        let f = model_flops(m, tokens, CONVENTION_FACTOR)?;
        push("gate_flops_per_token".into(), f.gate_flops);
        push("memory_flops_per_token".into(), f.memory_flops);
        push("model_flops_per_token".into(), f.model_flops_per_token);
        push("train_tokens".into(), f.tokens);
        push("train_flops".into(), f.train_total);
        flops = Some(f);
        if !matches!(m.selector, SelectorKind::Dense {}) {
            let geo = m.sffn_geometry()?;
            let (nb, b, gg) = (geo.num_blocks(), geo.active_blocks(), geo.block_size());
            let closed = expected_overlap_closed_form(nb, b, gg);
            let series = expected_overlap_analytical(nb, b, gg)?;
            push("expected_overlap_closed_form".into(), closed);
            push("expected_overlap_series".into(), series);
            overlap = Some(OverlapSection {
                num_blocks: nb,
                active_blocks: b,
                granularity: gg,
                closed_form: closed,
                series,
                empirical: None,
            });
        }
    }

    let mut histogram = None;
    if let Some(trace) = req.trace {
        let fractions = load_balance_histogram(trace)?;
        let sum: f64 = fractions.iter().sum();
        let max_over_min = fractions[0] / fractions[fractions.len() - 1];
        for (i, f) in fractions.iter().enumerate() {
            push(format!("usage_fraction_rank_{i}"), *f);
        }
        push("usage_max_over_min".into(), max_over_min);
        push("usage_fraction_sum".into(), sum);
        let mut per_layer = Vec::new();
        for l in trace.layers() {
            per_layer.push((l, load_balance_histogram(&trace.layer(l))?));
        }
        histogram = Some(HistogramSection {
            fractions,
            max_over_min,
            sum,
            per_layer,
        });

        let mut rng = RngStream::new(req.seed, "analyze/overlap", 0);
        let est = expected_overlap_empirical(trace, req.pairs_per_sequence, &mut rng)?;
        push("overlap_empirical_mean".into(), est.mean);
        push("overlap_empirical_std_error".into(), est.std_error);
        for (l, v) in &est.per_layer {
            push(format!("overlap_empirical_layer_{l}"), *v);
        }
        let b = trace.events.first().map_or(0, |ev| ev.blocks.len());
        let section = overlap.get_or_insert_with(|| OverlapSection {
            num_blocks: trace.route_space,
            active_blocks: b,
            granularity: trace.granularity,
            closed_form: expected_overlap_closed_form(trace.route_space, b, trace.granularity),
            series: expected_overlap_analytical(trace.route_space, b, trace.granularity).unwrap_or(f64::NAN),
            empirical: None,
        });
        section.empirical = Some(est);
    }

    let base = method.split('-').next().unwrap_or("");
    let records: Vec<ReferenceRecord> = reference_tables()
        .iter()
        .filter(|r| r.method == method || (base == "vanillam" && r.method.starts_with("vanillam")))
        .copied()
        .collect();
    for r in &records {
        let tag = format!("{REFERENCE_LABEL}: {} E{} g{} k{}", r.method, r.multiplier, r.block_size, r.active_cells);
        push(format!("{tag}: train_zflops"), r.train_zflops);
        push(format!("{tag}: out_of_domain_ppl"), r.out_of_domain_ppl);
    }

    let report = AnalysisReport {
        version: version_string().to_string(),
        method: method.clone(),
        flops,
        overlap,
        histogram,
        reference: ReferenceSection {
            label: REFERENCE_LABEL,
            records,
        },
    };
    Ok((report, rows))
}

pub fn load_trace(path: &Path) -> Result<RoutingTrace> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read trace {}", path.display()))?;
    RoutingTrace::from_csv(&text).with_context(|| format!("malformed trace {}", path.display()))
}

/// Runs [`analyze`] and writes `analysis.csv` and `report.json` to `out_dir`.
pub fn cmd_analyze(req: &AnalyzeRequest, out_dir: &Path) -> Result<AnalysisReport> {
    let (report, rows) = analyze(req)?;
    write_atomic(&out_dir.join(ANALYSIS_CSV), analysis_csv(&rows).as_bytes())?;
    write_json(&out_dir.join(REPORT_JSON), &report)?;
    Ok(report)
}
