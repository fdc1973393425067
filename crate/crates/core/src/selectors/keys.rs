use crate::error::{shape, Error, Result};
use crate::memory::BlockSelection;
use crate::tensor::{dot, gelu, matmul_bt, topk_indices, Matrix};

/// Feature-wise normalization of the projected query `t = x·D`.
///
/// Holds the learned affine and the running statistics used outside
/// training.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm {
    pub const EPS: f64 = 1e-5;
    pub const MOMENTUM: f64 = 0.1;

    /// Identity affine, zero mean and unit variance.
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: vec![1.0; dim],
            beta: vec![0.0; dim],
            running_mean: vec![0.0; dim],
            running_var: vec![1.0; dim],
            eps: Self::EPS,
            momentum: Self::MOMENTUM,
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }

    /// Normalizes with the running statistics.
    pub fn apply_eval(&self, t: &[f64]) -> Vec<f64> {
        t.iter()
            .enumerate()
            .map(|(j, &v)| {
                self.gamma[j] * (v - self.running_mean[j]) / (self.running_var[j] + self.eps).sqrt()
                    + self.beta[j]
            })
            .collect()
    }

    /// Folds one batch's mean and biased variance into the running stats.
    /// The stored variance uses the unbiased estimate.
    pub fn update_running(&mut self, mean: &[f64], biased_var: &[f64], count: usize) {
        let correction = if count > 1 {
            count as f64 / (count - 1) as f64
        } else {
            1.0
        };
        let m = self.momentum;
        for j in 0..self.dim() {
            self.running_mean[j] = (1.0 - m) * self.running_mean[j] + m * mean[j];
            self.running_var[j] = (1.0 - m) * self.running_var[j] + m * biased_var[j] * correction;
        }
    }
}

fn project(x: &[f64], down: &Matrix, bn: Option<&BatchNorm>) -> Result<Vec<f64>> {
    if x.len() != down.rows() {
        return Err(shape(
            "key projection",
            format!("input has {} entries, projection expects {}", x.len(), down.rows()),
        ));
    }
    let mut t = vec![0.0; down.cols()];
    for (xi, row) in x.iter().zip(down.row_iter()) {
        crate::tensor::axpy(*xi, row, &mut t);
    }
    Ok(match bn {
        Some(bn) => bn.apply_eval(&t),
        None => t,
    })
}

fn check_bn(bn: &Option<BatchNorm>, d_low: usize) -> Result<()> {
    match bn {
        Some(bn) if bn.dim() != d_low => Err(shape(
            "batch norm",
            format!("normalizes {} features, rank is {d_low}", bn.dim()),
        )),
        _ => Ok(()),
    }
}

/// Low-rank key table `Kᵀ ≈ D·K̃ᵀ`.
#[derive(Clone, Debug, PartialEq)]
pub struct LowRankKeys {
    /// `D`, `d × d_ℓ`.
    pub down: Matrix,
    /// `K̃`, `d_m × d_ℓ`.
    pub keys: Matrix,
    pub batch_norm: Option<BatchNorm>,
}

impl LowRankKeys {
    pub fn new(down: Matrix, keys: Matrix, batch_norm: Option<BatchNorm>) -> Result<Self> {
        if down.cols() != keys.cols() {
            return Err(shape(
                "LowRankKeys",
                format!("D has rank {}, K~ has rank {}", down.cols(), keys.cols()),
            ));
        }
        if down.cols() > down.rows() {
            return Err(Error::Geometry(format!(
                "rank {} exceeds model width {}",
                down.cols(),
                down.rows()
            )));
        }
        check_bn(&batch_norm, down.cols())?;
        Ok(Self { down, keys, batch_norm })
    }

    pub fn d_low(&self) -> usize {
        self.down.cols()
    }

    pub fn memory_size(&self) -> usize {
        self.keys.rows()
    }

    /// `t = x·D`, normalized when batch norm is on.
    pub fn project(&self, x: &[f64]) -> Result<Vec<f64>> {
        project(x, &self.down, self.batch_norm.as_ref())
    }

    /// Pre-activation scores `t·K̃ᵀ`.
    pub fn raw_scores(&self, x: &[f64]) -> Result<Vec<f64>> {
        let t = self.project(x)?;
        Ok(self.keys.row_iter().map(|k| dot(&t, k)).collect())
    }

    /// The implied full key table `(D·K̃ᵀ)ᵀ`, `d_m × d`. Ignores batch norm.
    pub fn materialize(&self) -> Matrix {
        matmul_bt(&self.keys, &self.down).expect("ranks checked at construction")
    }
}

/// Product-key table: key `i` is `[c_{⌊i/n⌋}, c′_{i mod n}]`, `n = √d_m`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProductKeys {
    /// `D`, `d × d_ℓ`.
    pub down: Matrix,
    /// `C`, `n × d_ℓ/2`.
    pub c: Matrix,
    /// `C′`, `n × d_ℓ/2`.
    pub c_prime: Matrix,
    pub batch_norm: Option<BatchNorm>,
}

impl ProductKeys {
    pub fn new(down: Matrix, c: Matrix, c_prime: Matrix, batch_norm: Option<BatchNorm>) -> Result<Self> {
        let d_low = down.cols();
        if d_low % 2 != 0 {
            return Err(Error::Geometry(format!("product keys need an even rank, got {d_low}")));
        }
        if c.shape() != c_prime.shape() {
            return Err(shape(
                "ProductKeys",
                format!("C is {:?}, C' is {:?}", c.shape(), c_prime.shape()),
            ));
        }
        if c.cols() != d_low / 2 {
            return Err(shape(
                "ProductKeys",
                format!("sub-keys are {} wide, half rank is {}", c.cols(), d_low / 2),
            ));
        }
        check_bn(&batch_norm, d_low)?;
        Ok(Self {
            down,
            c,
            c_prime,
            batch_norm,
        })
    }

    /// Checks that `d_m` is a perfect square and returns `√d_m`.
    pub fn side_for(d_m: usize) -> Result<usize> {
        let n = (d_m as f64).sqrt().round() as usize;
        if n * n != d_m {
            return Err(Error::Geometry(format!(
                "product keys need a square memory size, got {d_m}"
            )));
        }
        Ok(n)
    }

    /// `√d_m`.
    pub fn side(&self) -> usize {
        self.c.rows()
    }

    pub fn memory_size(&self) -> usize {
        self.side() * self.side()
    }

    pub fn d_low(&self) -> usize {
        self.down.cols()
    }

    pub fn project(&self, x: &[f64]) -> Result<Vec<f64>> {
        project(x, &self.down, self.batch_norm.as_ref())
    }

    /// Sub-key indices `(⌊i/n⌋, i mod n)` of cell `i`.
    pub fn index_pair(&self, cell: usize) -> (usize, usize) {
        (cell / self.side(), cell % self.side())
    }

    /// The `d_m × d_ℓ` table of concatenated sub-keys.
    pub fn materialize_low(&self) -> Matrix {
        let n = self.side();
        Matrix::from_fn(n * n, self.d_low(), |i, c| {
            let half = self.c.cols();
            if c < half {
                self.c.get(i / n, c)
            } else {
                self.c_prime.get(i % n, c - half)
            }
        })
    }

    /// The implied full key table, `d_m × d`. Ignores batch norm.
    pub fn materialize(&self) -> Matrix {
        matmul_bt(&self.materialize_low(), &self.down).expect("ranks checked at construction")
    }
}

/// Sub-key scores `s = t[..h]·Cᵀ`, `s′ = t[h..]·C′ᵀ`.
pub(crate) fn product_pre_scores(t: &[f64], c: &Matrix, c_prime: &Matrix) -> (Vec<f64>, Vec<f64>) {
    let h = c.cols();
    let s = c.row_iter().map(|r| dot(&t[..h], r)).collect();
    let s2 = c_prime.row_iter().map(|r| dot(&t[h..], r)).collect();
    (s, s2)
}

/// `m = gelu((x·D)·K̃ᵀ)`.
pub fn lorkm_scores(x: &[f64], lr: &LowRankKeys) -> Result<Vec<f64>> {
    Ok(lr.raw_scores(x)?.into_iter().map(gelu).collect())
}

/// `m_i = gelu(s_{⌊i/n⌋} + s′_{i mod n})`.
pub fn pkm_scores(x: &[f64], pk: &ProductKeys) -> Result<Vec<f64>> {
    let t = pk.project(x)?;
    let (s, s2) = product_pre_scores(&t, &pk.c, &pk.c_prime);
    let mut m = Vec::with_capacity(pk.memory_size());
    for a in &s {
        for b in &s2 {
            m.push(gelu(a + b));
        }
    }
    Ok(m)
}

/// Top-`k` cells by product-key coefficient, weighted by that coefficient.
pub fn select_pkm_ffn(x: &[f64], pk: &ProductKeys, k: usize) -> Result<BlockSelection> {
    let m = pkm_scores(x, pk)?;
    let top = topk_indices(&m, k)?;
    let weights = top.iter().map(|&i| m[i]).collect();
    BlockSelection::soft(top, weights)
}

/// Parameterizations of the key table.
#[derive(Clone, Debug, PartialEq)]
pub enum KeyTable {
    Full(Matrix),
    LowRank(LowRankKeys),
    Product(ProductKeys),
}

impl KeyTable {
    pub fn memory_size(&self) -> usize {
        match self {
            KeyTable::Full(k) => k.rows(),
            KeyTable::LowRank(lr) => lr.memory_size(),
            KeyTable::Product(pk) => pk.memory_size(),
        }
    }

    /// Memory coefficients `m` for one query.
    pub fn coefficients(&self, x: &[f64]) -> Result<Vec<f64>> {
        match self {
            KeyTable::Full(k) => {
                if x.len() != k.cols() {
                    return Err(shape(
                        "KeyTable",
                        format!("input has {} entries, keys are {} wide", x.len(), k.cols()),
                    ));
                }
                Ok(k.row_iter().map(|r| gelu(dot(x, r))).collect())
            }
            KeyTable::LowRank(lr) => lorkm_scores(x, lr),
            KeyTable::Product(pk) => pkm_scores(x, pk),
        }
    }

    /// Full `d_m × d` key matrix implied by the parameterization.
    pub fn materialize(&self) -> Matrix {
        match self {
            KeyTable::Full(k) => k.clone(),
            KeyTable::LowRank(lr) => lr.materialize(),
            KeyTable::Product(pk) => pk.materialize(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memory::{sparse_apply, MemoryGeometry, ValueTable};
    use crate::rng::RngStream;
    use crate::tensor::max_rel_err;

    fn randm(rng: &mut RngStream, r: usize, c: usize) -> Matrix {
        Matrix::from_fn(r, c, |_, _| rng.normal(0.0, 1.0))
    }

    fn randv(rng: &mut RngStream, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.normal(0.0, 1.0)).collect()
    }

    // coefficients from the materialized d_m × d table, summed cell by cell
    fn materialized_oracle(x: &[f64], full: &Matrix) -> Vec<f64> {
        (0..full.rows())
            .map(|i| {
                let mut z = 0.0;
                for (c, xc) in x.iter().enumerate() {
                    z += xc * full.get(i, c);
                }
                gelu(z)
            })
            .collect()
    }

    #[test]
    fn lorkm_cases() {
        let mut rng = RngStream::new(1, "lorkm", 0);
        let lr = LowRankKeys::new(randm(&mut rng, 6, 3), Matrix::zeros(10, 3), None).unwrap();
        assert!(lorkm_scores(&randv(&mut rng, 6), &lr).unwrap().iter().all(|&m| m == 0.0));

        let keys = randm(&mut rng, 10, 4);
        let x = randv(&mut rng, 4);
        let lr = LowRankKeys::new(Matrix::identity(4), keys.clone(), None).unwrap();
        let full = KeyTable::Full(keys).coefficients(&x).unwrap();
        assert!(max_rel_err(&lorkm_scores(&x, &lr).unwrap(), &full, 1e-300) <= 1e-12);
    }

    #[test]
    fn lorkm_matches_materialized_keys() {
        let mut rng = RngStream::new(2, "lorkm", 0);
        for _ in 0..100 {
            let lr = LowRankKeys::new(randm(&mut rng, 8, 3), randm(&mut rng, 20, 3), None).unwrap();
            let x = randv(&mut rng, 8);
            let got = lorkm_scores(&x, &lr).unwrap();
            let want = materialized_oracle(&x, &lr.materialize());
            assert!(max_rel_err(&got, &want, 1e-12) <= 1e-10);
        }
    }

    #[test]
    fn product_index_map() {
        let mut rng = RngStream::new(3, "pk", 0);
        let pk = ProductKeys::new(randm(&mut rng, 4, 2), randm(&mut rng, 2, 1), randm(&mut rng, 2, 1), None).unwrap();
        assert_eq!(pk.index_pair(3), (1, 1));
        assert_eq!(pk.index_pair(2), (1, 0));
        let low = pk.materialize_low();
        assert_eq!(low.row(3), &[pk.c.get(1, 0), pk.c_prime.get(1, 0)]);
        assert_eq!(low.row(2), &[pk.c.get(1, 0), pk.c_prime.get(0, 0)]);
        assert!(pkm_scores(&[0.0; 4], &pk).unwrap().iter().all(|&m| m == 0.0));
    }

    #[test]
    fn pkm_matches_materialized_keys() {
        let mut rng = RngStream::new(4, "pk", 0);
        for _ in 0..100 {
            let pk = ProductKeys::new(randm(&mut rng, 6, 4), randm(&mut rng, 4, 2), randm(&mut rng, 4, 2), None).unwrap();
            let x = randv(&mut rng, 6);
            let got = pkm_scores(&x, &pk).unwrap();
            let want = materialized_oracle(&x, &pk.materialize());
            assert!(max_rel_err(&got, &want, 1e-12) <= 1e-10);
        }
    }

    #[test]
    fn product_keys_validation() {
        assert!(ProductKeys::side_for(16).is_ok());
        assert!(ProductKeys::side_for(8).is_err());
        let m = |r, c| Matrix::zeros(r, c);
        assert!(ProductKeys::new(m(4, 3), m(2, 1), m(2, 1), None).is_err());
        assert!(ProductKeys::new(m(4, 2), m(2, 2), m(2, 2), None).is_err());
        assert!(ProductKeys::new(m(4, 2), m(2, 1), m(2, 1), Some(BatchNorm::new(3))).is_err());
    }

    #[test]
    fn pkm_ffn_weights_and_output() {
        let mut rng = RngStream::new(5, "pkmffn", 0);
        let pk = ProductKeys::new(randm(&mut rng, 4, 2), randm(&mut rng, 4, 1), randm(&mut rng, 4, 1), None).unwrap();
        let x = randv(&mut rng, 4);
        let m = pkm_scores(&x, &pk).unwrap();
        let all = select_pkm_ffn(&x, &pk, 16).unwrap();
        assert_eq!(all.weights(), m.as_slice());

        let keys = randm(&mut rng, 16, 4);
        let values = randm(&mut rng, 16, 4);
        let sel = select_pkm_ffn(&x, &pk, 5).unwrap();
        let geo = MemoryGeometry::new(4, 16, 1, 5).unwrap();
        let y = sparse_apply(&x, &keys, &ValueTable::new(values.clone()), &sel, &geo).unwrap();
        let mut want = vec![0.0; 4];
        for &i in sel.indices() {
            let z: f64 = (0..4).map(|c| x[c] * keys.get(i, c)).sum();
            for (c, w) in want.iter_mut().enumerate() {
                *w += m[i] * gelu(z) * values.get(i, c);
            }
        }
        assert!(max_rel_err(&y, &want, 1e-12) <= 1e-12);
    }

    #[test]
    fn batch_norm_eval_and_running_update() {
        let mut bn = BatchNorm::new(2);
        assert_eq!(bn.apply_eval(&[0.5, -1.0]).iter().map(|v| (v * 1e6).round()).collect::<Vec<_>>(),
            vec![(0.5 / (1.0 + 1e-5f64).sqrt() * 1e6).round(), (-1.0 / (1.0 + 1e-5f64).sqrt() * 1e6).round()]);
        bn.update_running(&[1.0, 2.0], &[3.0, 4.0], 4);
        assert!((bn.running_mean[0] - 0.1).abs() < 1e-15);
        assert!((bn.running_var[1] - (0.9 + 0.1 * 4.0 * 4.0 / 3.0)).abs() < 1e-15);
    }
}
