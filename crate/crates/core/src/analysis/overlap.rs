use serde::Serialize;

use super::trace::RoutingTrace;
use crate::error::{Error, Result};
use crate::rng::RngStream;

fn binomial(n: usize, r: usize) -> f64 {
    (0..r).fold(1.0, |acc, j| acc * (n - j) as f64 / (j + 1) as f64)
}

/// Expected shared cells between two tokens that each pick `b` of `B`
/// blocks uniformly without replacement, summed over the overlap size `i`:
/// `C(b,i) · Π_{j<i} (b−j)/(B−j) · Π_{m<b−i} (B−b−m)/(B−i−m) · i·g`.
///
/// The second product conditions on the `i` blocks already drawn, so its
/// denominators start at `B − i`. With that, the sum is the hypergeometric
/// mean `g·b²/B`.
pub fn expected_overlap_analytical(num_blocks: usize, active_blocks: usize, g: usize) -> Result<f64> {
    let (nb, b) = (num_blocks, active_blocks);
    if b > nb || nb == 0 {
        return Err(Error::InvalidArgument(format!("{b} active blocks out of {nb}")));
    }
    let mut total = 0.0;
    for i in 1..=b {
        let hit: f64 = (0..i).map(|j| (b - j) as f64 / (nb - j) as f64).product();
        // numerators reach zero before going negative when 2b > B
        let miss: f64 = (0..b - i)
            .map(|m| (nb as f64 - (b + m) as f64) / (nb - i - m) as f64)
            .product();
        total += binomial(b, i) * hit * miss * (i * g) as f64;
    }
    Ok(total)
}

/// `g·b²/B`.
pub fn expected_overlap_closed_form(num_blocks: usize, active_blocks: usize, g: usize) -> f64 {
    g as f64 * (active_blocks * active_blocks) as f64 / num_blocks as f64
}

/// Monte-Carlo estimate of shared activated cells.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OverlapEstimate {
    /// Mean over memory layers.
    pub mean: f64,
    pub std_error: f64,
    /// Pairs drawn per layer.
    pub pairs: usize,
    /// `(layer, mean shared cells)`.
    pub per_layer: Vec<(usize, f64)>,
}

/// Draws `pairs_per_sequence` position pairs `x ≠ y` uniformly from every
/// sequence and averages `|I_x ∩ I_y| · g`, first per layer, then over layers.
pub fn expected_overlap_empirical(
    trace: &RoutingTrace,
    pairs_per_sequence: usize,
    rng: &mut RngStream,
) -> Result<OverlapEstimate> {
    if trace.events.is_empty() {
        return Err(Error::Trace("empty routing trace".into()));
    }
    if pairs_per_sequence == 0 {
        return Err(Error::InvalidArgument("no pairs requested".into()));
    }
    let g = trace.granularity as f64;
    let mut per_layer = Vec::new();
    let mut var_sum = 0.0;
    let mut pairs = 0;
    for (layer, seqs) in trace.by_layer_and_sequence() {
        let (mut sum, mut sq, mut n) = (0.0, 0.0, 0usize);
        for (seq, events) in seqs {
            if events.len() < 2 {
                return Err(Error::Trace(format!(
                    "layer {layer} sequence {seq} has {} positions; pairs need 2",
                    events.len()
                )));
            }
            for _ in 0..pairs_per_sequence {
                let pick = rng.sample_distinct(events.len(), 2);
                let shared = shared_count(&events[pick[0]].blocks, &events[pick[1]].blocks);
                let r = shared as f64 * g;
                sum += r;
                sq += r * r;
                n += 1;
            }
        }
        let mean = sum / n as f64;
        let var = if n > 1 { (sq - n as f64 * mean * mean).max(0.0) / (n - 1) as f64 } else { 0.0 };
        var_sum += var / n as f64;
        pairs = n;
        per_layer.push((layer, mean));
    }
    let layers = per_layer.len() as f64;
    Ok(OverlapEstimate {
        mean: per_layer.iter().map(|(_, m)| m).sum::<f64>() / layers,
        std_error: var_sum.sqrt() / layers,
        pairs,
        per_layer,
    })
}

/// Size of the intersection of two ascending index lists.
fn shared_count(a: &[usize], b: &[usize]) -> usize {
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::trace::RoutingEvent;

    fn exhaustive(nb: usize, b: usize, g: usize) -> f64 {
        // all ordered pairs of b-subsets
        let subsets: Vec<Vec<usize>> = (0u32..1 << nb)
            .filter(|m| m.count_ones() as usize == b)
            .map(|m| (0..nb).filter(|i| m >> i & 1 == 1).collect())
            .collect();
        let mut total = 0.0;
        for x in &subsets {
            for y in &subsets {
                total += (shared_count(x, y) * g) as f64;
            }
        }
        total / (subsets.len() * subsets.len()) as f64
    }

    #[test]
    fn series_matches_enumeration() {
        for nb in 1..=8 {
            for b in 0..=nb {
                let s = expected_overlap_analytical(nb, b, 3).unwrap();
                assert!((s - exhaustive(nb, b, 3)).abs() < 1e-12, "B={nb} b={b}");
            }
        }
    }

    #[test]
    fn small_cases() {
        assert_eq!(expected_overlap_analytical(16, 1, 4096).unwrap(), 256.0);
        assert_eq!(expected_overlap_analytical(2, 1, 1).unwrap(), 0.5);
        assert!((expected_overlap_analytical(12, 12, 5).unwrap() - 60.0).abs() < 1e-12);
        assert!(expected_overlap_analytical(4, 5, 1).is_err());
    }

    fn trace_of(blocks: Vec<Vec<usize>>, g: usize) -> RoutingTrace {
        let events = blocks
            .into_iter()
            .enumerate()
            .map(|(pos, blocks)| RoutingEvent {
                layer: 0,
                seq: 0,
                pos,
                token_id: pos,
                blocks,
            })
            .collect();
        RoutingTrace::new(8, g, events).unwrap()
    }

    #[test]
    fn fixed_and_disjoint_selections() {
        let mut rng = RngStream::new(0, "t", 0);
        let same = trace_of(vec![vec![1, 4]; 6], 3);
        let e = expected_overlap_empirical(&same, 50, &mut rng).unwrap();
        assert_eq!(e.mean, 6.0);
        let disjoint = trace_of((0..4).map(|i| vec![2 * i, 2 * i + 1]).collect(), 3);
        assert_eq!(expected_overlap_empirical(&disjoint, 50, &mut rng).unwrap().mean, 0.0);
        let short = trace_of(vec![vec![0]], 3);
        assert!(matches!(
            expected_overlap_empirical(&short, 5, &mut rng),
            Err(Error::Trace(_))
        ));
    }

    #[test]
    fn intersection_count() {
        assert_eq!(shared_count(&[1, 3, 5, 7], &[0, 3, 4, 7, 9]), 2);
        assert_eq!(shared_count(&[], &[1]), 0);
    }
}
