use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::memory::BlockSelection;
use crate::training::{Batch, Model};

pub const TRACE_HEADER: &str = "layer,seq,pos,token_id,block_ids";

/// One token's selection in one memory layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RoutingEvent {
    pub layer: usize,
    pub seq: usize,
    pub pos: usize,
    pub token_id: usize,
    /// Ascending, distinct route ids.
    pub blocks: Vec<usize>,
}

/// Routing decisions of an evaluation pass. Route ids range over
/// `0..route_space` and each covers `granularity` memory cells.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RoutingTrace {
    pub route_space: usize,
    pub granularity: usize,
    pub events: Vec<RoutingEvent>,
}

impl RoutingTrace {
    /// Validates and normalizes each selection to ascending order.
    pub fn new(route_space: usize, granularity: usize, mut events: Vec<RoutingEvent>) -> Result<Self> {
        if route_space == 0 || granularity == 0 {
            return Err(Error::Trace("route space and granularity must be positive".into()));
        }
        for (i, e) in events.iter_mut().enumerate() {
            e.blocks.sort_unstable();
            check_blocks(&e.blocks, route_space).map_err(|m| Error::Trace(format!("event {i}: {m}")))?;
        }
        Ok(Self {
            route_space,
            granularity,
            events,
        })
    }

    /// Builds events from per-layer, per-token selections over windows of
    /// `seq_len` tokens. `layers[i]` is the layer index of `routes[i]`.
    pub fn from_selections(
        route_space: usize,
        granularity: usize,
        layers: &[usize],
        routes: &[Vec<BlockSelection>],
        tokens: &[usize],
        seq_len: usize,
    ) -> Result<Self> {
        if layers.len() != routes.len() || seq_len == 0 {
            return Err(Error::Trace(format!(
                "{} layer ids for {} route lists",
                layers.len(),
                routes.len()
            )));
        }
        let mut events = Vec::new();
        for (&layer, sel) in layers.iter().zip(routes) {
            if sel.len() != tokens.len() {
                return Err(Error::Trace(format!(
                    "layer {layer}: {} selections for {} tokens",
                    sel.len(),
                    tokens.len()
                )));
            }
            for (t, s) in sel.iter().enumerate() {
                events.push(RoutingEvent {
                    layer,
                    seq: t / seq_len,
                    pos: t % seq_len,
                    token_id: tokens[t],
                    blocks: s.indices().to_vec(),
                });
            }
        }
        Self::new(route_space, granularity, events)
    }

    /// Trace of [`Model::sparse_routing`] output for `batch`.
    pub fn from_model(model: &Model, batch: &Batch, routes: &[Vec<BlockSelection>]) -> Result<Self> {
        let layer = model
            .sffn_layers()
            .next()
            .ok_or_else(|| Error::Trace("model has no sparse memory layer".into()))?;
        Self::from_selections(
            layer.route_space(),
            layer.route_granularity(),
            &model.sparse_layer_indices(),
            routes,
            &batch.inputs,
            batch.seq_len,
        )
    }

    /// Events grouped by layer, then sequence, each in position order.
    pub fn by_layer_and_sequence(&self) -> BTreeMap<usize, BTreeMap<usize, Vec<&RoutingEvent>>> {
        let mut out: BTreeMap<usize, BTreeMap<usize, Vec<&RoutingEvent>>> = BTreeMap::new();
        for e in &self.events {
            out.entry(e.layer).or_default().entry(e.seq).or_default().push(e);
        }
        for seqs in out.values_mut() {
            for evs in seqs.values_mut() {
                evs.sort_by_key(|e| e.pos);
            }
        }
        out
    }

    pub fn layers(&self) -> Vec<usize> {
        self.by_layer_and_sequence().into_keys().collect()
    }

    /// Events of one layer only.
    pub fn layer(&self, layer: usize) -> RoutingTrace {
        RoutingTrace {
            route_space: self.route_space,
            granularity: self.granularity,
            events: self.events.iter().filter(|e| e.layer == layer).cloned().collect(),
        }
    }

    /// Two metadata comment lines, the header, then one row per event.
    pub fn to_csv(&self) -> String {
        let mut out = format!(
            "# route_space={}\n# granularity={}\n{TRACE_HEADER}\n",
            self.route_space, self.granularity
        );
        for e in &self.events {
            let ids: Vec<String> = e.blocks.iter().map(usize::to_string).collect();
            writeln!(out, "{},{},{},{},{}", e.layer, e.seq, e.pos, e.token_id, ids.join("|")).expect("string write");
        }
        out
    }

    /// Parses [`RoutingTrace::to_csv`] output. Errors carry 1-based line numbers.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut route_space = None;
        let mut granularity = None;
        let mut header_seen = false;
        let mut events = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let lineno = n + 1;
            let bad = |m: String| Error::Trace(format!("line {lineno}: {m}"));
            if line.trim().is_empty() {
                continue;
            }
            if let Some(meta) = line.strip_prefix('#') {
                let (key, value) = meta
                    .trim()
                    .split_once('=')
                    .ok_or_else(|| bad(format!("malformed metadata '{line}'")))?;
                let v: usize = value
                    .trim()
                    .parse()
                    .map_err(|_| bad(format!("'{value}' is not a count")))?;
                match key.trim() {
                    "route_space" => route_space = Some(v),
                    "granularity" => granularity = Some(v),
                    other => return Err(bad(format!("unknown metadata key '{other}'"))),
                }
                continue;
            }
            if !header_seen {
                if line.trim() != TRACE_HEADER {
                    return Err(bad(format!("expected header '{TRACE_HEADER}'")));
                }
                header_seen = true;
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 5 {
                return Err(bad(format!("expected 5 fields, found {}", fields.len())));
            }
            let num = |i: usize, name: &str| -> Result<usize> {
                fields[i]
                    .trim()
                    .parse()
                    .map_err(|_| bad(format!("{name} '{}' is not a non-negative integer", fields[i])))
            };
            let blocks = if fields[4].trim().is_empty() {
                Vec::new()
            } else {
                fields[4]
                    .split('|')
                    .map(|b| b.trim().parse().map_err(|_| bad(format!("block id '{b}' is not an integer"))))
                    .collect::<Result<Vec<usize>>>()?
            };
            let mut sorted = blocks.clone();
            sorted.sort_unstable();
            let space = route_space.ok_or_else(|| bad("route_space metadata must precede rows".into()))?;
            check_blocks(&sorted, space).map_err(bad)?;
            events.push(RoutingEvent {
                layer: num(0, "layer")?,
                seq: num(1, "seq")?,
                pos: num(2, "pos")?,
                token_id: num(3, "token_id")?,
                blocks: sorted,
            });
        }
        if !header_seen {
            return Err(Error::Trace("missing header".into()));
        }
        let route_space = route_space.ok_or_else(|| Error::Trace("missing route_space metadata".into()))?;
        let granularity = granularity.ok_or_else(|| Error::Trace("missing granularity metadata".into()))?;
        Self::new(route_space, granularity, events)
    }
}

fn check_blocks(sorted: &[usize], route_space: usize) -> std::result::Result<(), String> {
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err("duplicate block id".into());
    }
    match sorted.last() {
        Some(&b) if b >= route_space => Err(format!("block id {b} outside 0..{route_space}")),
        _ => Ok(()),
    }
}

/// Fraction of routing events landing on each block, sorted descending.
pub fn load_balance_histogram(trace: &RoutingTrace) -> Result<Vec<f64>> {
    let counts = block_usage_counts(trace);
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(Error::Trace("trace routes no tokens".into()));
    }
    let mut fractions: Vec<f64> = counts.iter().map(|&c| c as f64 / total as f64).collect();
    fractions.sort_by(|a, b| b.total_cmp(a));
    Ok(fractions)
}

/// Number of events selecting each block, in block order.
pub fn block_usage_counts(trace: &RoutingTrace) -> Vec<u64> {
    let mut counts = vec![0u64; trace.route_space];
    for e in &trace.events {
        for &b in &e.blocks {
            counts[b] += 1;
        }
    }
    counts
}
