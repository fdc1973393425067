use super::{Aggregator, LowRankKeys};
use crate::error::{shape, Error, Result};
use crate::memory::{BlockSelection, MemoryGeometry};
use crate::rng::RngStream;
use crate::tensor::{argmax, dot, gelu, topk_indices, Matrix};

fn check_inputs(x: &[f64], keys: &Matrix, geometry: &MemoryGeometry) -> Result<()> {
    geometry.check_table("key", keys)?;
    if x.len() != geometry.d() {
        return Err(shape(
            "selector",
            format!("input has {} entries, expected {}", x.len(), geometry.d()),
        ));
    }
    Ok(())
}

/// Aggregates per-cell coefficients into one score per block of `g` cells.
pub(crate) fn aggregate_blocks(coefficients: &[f64], g: usize, agg: Aggregator) -> Vec<f64> {
    coefficients.chunks_exact(g).map(|c| agg.apply(c)).collect()
}

/// Block scores `agg { gelu(x·k_j^{(i)}) : j < g }`.
pub fn score_vanilla(
    x: &[f64],
    keys: &Matrix,
    geometry: &MemoryGeometry,
    agg: Aggregator,
) -> Result<Vec<f64>> {
    check_inputs(x, keys, geometry)?;
    let coefficients: Vec<f64> = keys.row_iter().map(|k| gelu(dot(x, k))).collect();
    Ok(aggregate_blocks(&coefficients, geometry.block_size(), agg))
}

/// Exact top-`b` blocks by [`score_vanilla`], unit weights.
pub fn select_vanillam(
    x: &[f64],
    keys: &Matrix,
    geometry: &MemoryGeometry,
    agg: Aggregator,
) -> Result<BlockSelection> {
    let scores = score_vanilla(x, keys, geometry, agg)?;
    BlockSelection::hard(topk_indices(&scores, geometry.active_blocks())?)
}

/// Mean key of every block, `e_i = (1/g) Σ_j k_j^{(i)}`, as a `B × d` matrix.
pub fn block_means(keys: &Matrix, g: usize) -> Result<Matrix> {
    if g == 0 || keys.rows() % g != 0 {
        return Err(Error::Geometry(format!(
            "block size {g} does not divide {} rows",
            keys.rows()
        )));
    }
    let blocks = keys.rows() / g;
    let mut means = Matrix::zeros(blocks, keys.cols());
    for i in 0..blocks {
        let out = means.row_mut(i);
        for j in 0..g {
            for (o, k) in out.iter_mut().zip(keys.row(i * g + j)) {
                *o += k;
            }
        }
        out.iter_mut().for_each(|o| *o /= g as f64);
    }
    Ok(means)
}

/// Avg-K block scores `e_i · x`.
pub fn score_avgk(x: &[f64], keys: &Matrix, geometry: &MemoryGeometry) -> Result<Vec<f64>> {
    check_inputs(x, keys, geometry)?;
    let means = block_means(keys, geometry.block_size())?;
    Ok(means.row_iter().map(|e| dot(e, x)).collect())
}

/// Top-`b` blocks by [`score_avgk`], unit weights.
pub fn select_avgk(x: &[f64], keys: &Matrix, geometry: &MemoryGeometry) -> Result<BlockSelection> {
    let scores = score_avgk(x, keys, geometry)?;
    BlockSelection::hard(topk_indices(&scores, geometry.active_blocks())?)
}

/// One cell per block: `j* = argmax_j` of the block's scores.
///
/// Without a controller the scores are `x·k_j^{(i)}` and weights are 1. With a
/// low-rank controller the scores are `(x·D)·k'_j` and the chosen score is the
/// weight. Returned indices are cell indices `i·g + j*`.
pub fn select_controller(
    x: &[f64],
    keys: &Matrix,
    geometry: &MemoryGeometry,
    controller: Option<&LowRankKeys>,
) -> Result<BlockSelection> {
    check_inputs(x, keys, geometry)?;
    let g = geometry.block_size();
    match controller {
        None => {
            let scores: Vec<f64> = keys.row_iter().map(|k| dot(x, k)).collect();
            let cells = scores
                .chunks_exact(g)
                .enumerate()
                .map(|(i, block)| i * g + argmax(block).unwrap_or(0))
                .collect();
            BlockSelection::hard(cells)
        }
        Some(lr) => {
            if lr.memory_size() != geometry.memory_size() {
                return Err(shape(
                    "select_controller",
                    format!(
                        "controller scores {} cells, memory has {}",
                        lr.memory_size(),
                        geometry.memory_size()
                    ),
                ));
            }
            let scores = lr.raw_scores(x)?;
            let (cells, weights) = scores
                .chunks_exact(g)
                .enumerate()
                .map(|(i, block)| {
                    let j = argmax(block).unwrap_or(0);
                    (i * g + j, block[j])
                })
                .unzip();
            BlockSelection::soft(cells, weights)
        }
    }
}

/// Exact top-`k` cells of `scores`, then `⌊n·k/100⌋` uniformly chosen members
/// swapped for uniformly chosen non-members. Swapped-in cells keep their own
/// coefficients downstream, so the selection stays unit-weight.
pub fn select_naive_ann(
    scores: &[f64],
    k: usize,
    sabotage_pct: f64,
    rng: &mut RngStream,
) -> Result<BlockSelection> {
    if !(0.0..=100.0).contains(&sabotage_pct) {
        return Err(Error::InvalidArgument(format!(
            "sabotage percentage {sabotage_pct} outside [0, 100]"
        )));
    }
    let top = topk_indices(scores, k)?;
    let non_members = scores.len() - k;
    let swaps = ((sabotage_pct * k as f64 / 100.0).floor() as usize).min(non_members);
    if swaps == 0 {
        return BlockSelection::hard(top);
    }
    let mut in_top = vec![false; scores.len()];
    for &i in &top {
        in_top[i] = true;
    }
    let outside: Vec<usize> = (0..scores.len()).filter(|&i| !in_top[i]).collect();
    let evict = rng.sample_distinct(k, swaps);
    let admit = rng.sample_distinct(non_members, swaps);
    let mut chosen = top;
    for (e, a) in evict.into_iter().zip(admit) {
        chosen[e] = outside[a];
    }
    BlockSelection::hard(chosen)
}
