use crate::error::{shape, Error, Result};
use crate::memory::{BlockSelection, MemoryGeometry};
use crate::rng::RngStream;
use crate::tensor::{argmax, dot, softmax, Matrix};

/// Static token-type to block assignment.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HashGateTable {
    num_blocks: usize,
    seed: u64,
    rows: Vec<Vec<usize>>,
}

impl HashGateTable {
    pub fn vocab_size(&self) -> usize {
        self.rows.len()
    }

    pub fn num_blocks(&self) -> usize {
        self.num_blocks
    }

    /// Blocks per token.
    pub fn blocks_per_token(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Block ids of `token`, ascending.
    pub fn row(&self, token: usize) -> Option<&[usize]> {
        self.rows.get(token).map(Vec::as_slice)
    }
}

/// Assigns each token id `b` distinct blocks drawn uniformly from its own
/// stream `(seed, "randhash", token)`.
pub fn build_randhash(vocab_size: usize, geometry: &MemoryGeometry, seed: u64) -> Result<HashGateTable> {
    let (nb, b) = (geometry.num_blocks(), geometry.active_blocks());
    if b > nb {
        return Err(Error::Geometry(format!("{b} blocks per token exceeds {nb} blocks")));
    }
    if vocab_size == 0 {
        return Err(Error::InvalidArgument("empty vocabulary".into()));
    }
    let rows = (0..vocab_size)
        .map(|token| {
            let mut rng = RngStream::new(seed, "randhash", token as u64);
            let mut row = rng.sample_distinct(nb, b);
            row.sort_unstable();
            row
        })
        .collect();
    Ok(HashGateTable {
        num_blocks: nb,
        seed,
        rows,
    })
}

/// The token's table row with unit weights.
pub fn select_randhash(token_id: usize, table: &HashGateTable) -> Result<BlockSelection> {
    match table.row(token_id) {
        Some(row) => BlockSelection::hard(row.to_vec()),
        None => Err(Error::TokenOutOfVocab {
            token: token_id,
            vocab: table.vocab_size(),
        }),
    }
}

/// Expert embeddings `θ = [e_0; …; e_{B−1}]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertEmbeddings {
    pub theta: Matrix,
    pub learned: bool,
}

impl ExpertEmbeddings {
    pub fn new(theta: Matrix, learned: bool) -> Result<Self> {
        if theta.rows() == 0 {
            return Err(Error::InvalidArgument("gate needs at least one expert".into()));
        }
        Ok(Self { theta, learned })
    }

    pub fn num_blocks(&self) -> usize {
        self.theta.rows()
    }
}

/// `g_i(x) = softmax_i(e_i·x)`.
pub fn gate_softmax(x: &[f64], emb: &ExpertEmbeddings) -> Result<Vec<f64>> {
    if x.len() != emb.theta.cols() {
        return Err(shape(
            "gate_softmax",
            format!("input has {} entries, embeddings are {} wide", x.len(), emb.theta.cols()),
        ));
    }
    let logits: Vec<f64> = emb.theta.row_iter().map(|e| dot(e, x)).collect();
    softmax(&logits)
}

/// Top-1 block of the gate, weighted by its probability.
pub fn select_switch(x: &[f64], emb: &ExpertEmbeddings) -> Result<BlockSelection> {
    let p = gate_softmax(x, emb)?;
    let best = argmax(&p).expect("gate has at least one expert");
    BlockSelection::soft(vec![best], vec![p[best]])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn randhash_full_rows_and_determinism() {
        let geo = MemoryGeometry::new(4, 16, 4, 16).unwrap();
        let t = build_randhash(50, &geo, 9).unwrap();
        for tok in 0..50 {
            assert_eq!(t.row(tok).unwrap(), &[0, 1, 2, 3]);
        }
        let geo = MemoryGeometry::new(4, 64, 4, 8).unwrap();
        let a = build_randhash(200, &geo, 1).unwrap();
        assert_eq!(a, build_randhash(200, &geo, 1).unwrap());
        assert_ne!(a, build_randhash(200, &geo, 2).unwrap());
        for tok in 0..200 {
            let r = a.row(tok).unwrap();
            assert_eq!(r.len(), 2);
            assert!(r[0] < r[1] && r[1] < 16);
        }
    }

    #[test]
    fn randhash_counts_near_uniform() {
        let geo = MemoryGeometry::new(4, 16, 1, 1).unwrap();
        let vocab = 100_000;
        let t = build_randhash(vocab, &geo, 3).unwrap();
        let mut counts = [0usize; 16];
        for tok in 0..vocab {
            counts[t.row(tok).unwrap()[0]] += 1;
        }
        let p = 1.0 / 16.0;
        let mean = vocab as f64 * p;
        let sigma = (vocab as f64 * p * (1.0 - p)).sqrt();
        let mut chi2 = 0.0;
        for c in counts {
            assert!((c as f64 - mean).abs() < 4.0 * sigma, "count {c}");
            chi2 += (c as f64 - mean).powi(2) / mean;
        }
        // 15 degrees of freedom; 0.9999 quantile is about 44.3
        assert!(chi2 < 44.3, "chi2 {chi2}");
    }

    #[test]
    fn randhash_selection() {
        let geo = MemoryGeometry::new(4, 32, 4, 8).unwrap();
        let t = build_randhash(10, &geo, 4).unwrap();
        let s = select_randhash(7, &t).unwrap();
        assert_eq!(s, select_randhash(7, &t).unwrap());
        assert!(s.is_hard());
        assert_eq!(s.indices(), t.row(7).unwrap());
        assert!(matches!(
            select_randhash(10, &t),
            Err(Error::TokenOutOfVocab { token: 10, vocab: 10 })
        ));
    }

    #[test]
    fn gate_cases() {
        let same = ExpertEmbeddings::new(Matrix::filled(4, 3, 0.3), true).unwrap();
        for p in gate_softmax(&[1.0, -2.0, 0.5], &same).unwrap() {
            assert!((p - 0.25).abs() < 1e-15);
        }
        let sel = select_switch(&[1.0, -2.0, 0.5], &same).unwrap();
        assert_eq!(sel.indices(), &[0]);
        assert!((sel.weights()[0] - 0.25).abs() < 1e-15);

        let two = ExpertEmbeddings::new(
            Matrix::new(2, 1, vec![0.0, 3f64.ln()]).unwrap(),
            true,
        )
        .unwrap();
        let p = gate_softmax(&[1.0], &two).unwrap();
        assert!((p[0] - 0.25).abs() < 1e-12 && (p[1] - 0.75).abs() < 1e-12);

        let dom = ExpertEmbeddings::new(
            Matrix::new(3, 2, vec![0.0, 0.0, 100.0, 0.0, 0.0, 0.0]).unwrap(),
            true,
        )
        .unwrap();
        let sel = select_switch(&[1.0, 1.0], &dom).unwrap();
        assert_eq!(sel.indices(), &[1]);
        assert!((sel.weights()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn switch_vs_softmax_argmax_oracle() {
        let mut rng = RngStream::new(11, "switch", 0);
        for _ in 0..50 {
            let theta = Matrix::from_fn(6, 5, |_, _| rng.normal(0.0, 1.0));
            let x: Vec<f64> = (0..5).map(|_| rng.normal(0.0, 1.0)).collect();
            let logits: Vec<f64> = (0..6)
                .map(|i| (0..5).map(|c| theta.get(i, c) * x[c]).sum())
                .collect();
            let mx = logits.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
            let best = (0..6).fold(0, |b, i| if logits[i] > logits[b] { i } else { b });
            let emb = ExpertEmbeddings::new(theta, true).unwrap();
            let sel = select_switch(&x, &emb).unwrap();
            assert_eq!(sel.indices(), &[best]);
            assert!((sel.weights()[0] - (logits[best] - mx).exp() / z).abs() < 1e-12);
            let scaled: Vec<f64> = x.iter().map(|v| v * 3.5).collect();
            assert_eq!(select_switch(&scaled, &emb).unwrap().indices(), &[best]);
        }
    }
}
