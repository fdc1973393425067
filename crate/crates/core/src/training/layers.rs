//! Transformer building blocks with explicit backward passes.

use crate::tensor::{axpy, dot, Matrix};

pub(crate) const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub(crate) struct LnCache {
    xhat: Matrix,
    inv_std: Vec<f64>,
}

/// Row-wise layer norm with affine `gamma`, `beta` (both `1 × d`).
pub(crate) fn layer_norm(x: &Matrix, gamma: &Matrix, beta: &Matrix) -> (Matrix, LnCache) {
    let d = x.cols();
    let mut xhat = Matrix::zeros(x.rows(), d);
    let mut out = Matrix::zeros(x.rows(), d);
    let mut inv_std = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv_std.push(is);
        let h = xhat.row_mut(r);
        for (hc, v) in h.iter_mut().zip(row) {
            *hc = (v - mean) * is;
        }
        let o = out.row_mut(r);
        for c in 0..d {
            o[c] = gamma.data()[c] * xhat.get(r, c) + beta.data()[c];
        }
    }
    (out, LnCache { xhat, inv_std })
}

pub(crate) fn layer_norm_backward(
    dy: &Matrix,
    cache: &LnCache,
    gamma: &Matrix,
    dgamma: &mut Matrix,
    dbeta: &mut Matrix,
) -> Matrix {
    let d = dy.cols();
    let n = d as f64;
    let mut dx = Matrix::zeros(dy.rows(), d);
    let mut dxhat = vec![0.0; d];
    for r in 0..dy.rows() {
        let g = dy.row(r);
        let xh = cache.xhat.row(r);
        for c in 0..d {
            dgamma.data_mut()[c] += g[c] * xh[c];
            dbeta.data_mut()[c] += g[c];
            dxhat[c] = g[c] * gamma.data()[c];
        }
        let sum: f64 = dxhat.iter().sum();
        let sum_xh: f64 = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum();
        let is = cache.inv_std[r];
        let out = dx.row_mut(r);
        for c in 0..d {
            out[c] = is / n * (n * dxhat[c] - sum - xh[c] * sum_xh);
        }
    }
    dx
}

#[derive(Clone, Debug)]
pub(crate) struct AttnCache {
    q: Matrix,
    k: Matrix,
    v: Matrix,
    /// Causal attention rows, one matrix per (sequence, head).
    probs: Vec<Matrix>,
    pub(crate) ctx: Matrix,
}

/// Causal multi-head self-attention over `x.rows() / seq_len` independent
/// sequences. Projections are `x·W` with no bias.
pub(crate) fn attention(
    x: &Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    heads: usize,
    seq_len: usize,
) -> AttnCache {
    let d = x.cols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let n_seq = x.rows() / seq_len;
    let mut ctx = Matrix::zeros(x.rows(), d);
    let mut probs = Vec::with_capacity(n_seq * heads);
    let mut scores = vec![0.0; seq_len];
    for s in 0..n_seq {
        let base = s * seq_len;
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            let mut p = Matrix::zeros(seq_len, seq_len);
            for i in 0..seq_len {
                let qi = &q.row(base + i)[cols.clone()];
                let mut max = f64::NEG_INFINITY;
                for j in 0..=i {
                    scores[j] = dot(qi, &k.row(base + j)[cols.clone()]) * scale;
                    max = max.max(scores[j]);
                }
                let mut total = 0.0;
                for sj in scores.iter_mut().take(i + 1) {
                    *sj = (*sj - max).exp();
                    total += *sj;
                }
                let prow = p.row_mut(i);
                for j in 0..=i {
                    prow[j] = scores[j] / total;
                }
                let out = &mut ctx.row_mut(base + i)[cols.clone()];
                for j in 0..=i {
                    axpy(p.get(i, j), &v.row(base + j)[cols.clone()], out);
                }
            }
            probs.push(p);
        }
    }
    AttnCache { q, k, v, probs, ctx }
}

/// Returns `(dq, dk, dv)` given the gradient of the context.
pub(crate) fn attention_backward(
    dctx: &Matrix,
    cache: &AttnCache,
    heads: usize,
    seq_len: usize,
) -> (Matrix, Matrix, Matrix) {
    let (rows, d) = dctx.shape();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let n_seq = rows / seq_len;
    let mut dq = Matrix::zeros(rows, d);
    let mut dk = Matrix::zeros(rows, d);
    let mut dv = Matrix::zeros(rows, d);
    let mut dp = vec![0.0; seq_len];
    for s in 0..n_seq {
        let base = s * seq_len;
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            let p = &cache.probs[s * heads + h];
            for i in 0..seq_len {
                let gi = &dctx.row(base + i)[cols.clone()];
                let mut weighted = 0.0;
                for j in 0..=i {
                    dp[j] = dot(gi, &cache.v.row(base + j)[cols.clone()]);
                    weighted += p.get(i, j) * dp[j];
                    axpy(p.get(i, j), gi, &mut dv.row_mut(base + j)[cols.clone()]);
                }
                for j in 0..=i {
                    let ds = p.get(i, j) * (dp[j] - weighted) * scale;
                    axpy(ds, &cache.k.row(base + j)[cols.clone()], &mut dq.row_mut(base + i)[cols.clone()]);
                    axpy(ds, &cache.q.row(base + i)[cols.clone()], &mut dk.row_mut(base + j)[cols.clone()]);
                }
            }
        }
    }
    (dq, dk, dv)
}

/// Mean next-token cross-entropy and its gradient with respect to logits.
pub(crate) fn cross_entropy(logits: &Matrix, targets: &[usize]) -> (f64, Matrix) {
    let n = targets.len() as f64;
    let mut grad = logits.clone();
    let mut loss = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        let row = grad.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        loss += total.ln() + max - logits.get(r, t);
        for v in row.iter_mut() {
            *v /= total * n;
        }
        row[t] -= 1.0 / n;
    }
    (loss / n, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;
    use crate::tensor::{finite_diff_grad, matmul, max_rel_err};

    fn randm(rng: &mut RngStream, r: usize, c: usize) -> Matrix {
        Matrix::from_fn(r, c, |_, _| rng.normal(0.0, 1.0))
    }

    fn weighted_sum(m: &Matrix, w: &Matrix) -> f64 {
        m.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let mut rng = RngStream::new(1, "ln", 0);
        let x = randm(&mut rng, 3, 6);
        let (y, _) = layer_norm(&x, &Matrix::filled(1, 6, 1.0), &Matrix::zeros(1, 6));
        for r in 0..3 {
            let mean: f64 = y.row(r).iter().sum::<f64>() / 6.0;
            let var: f64 = y.row(r).iter().map(|v| v * v).sum::<f64>() / 6.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn layer_norm_gradients() {
        let mut rng = RngStream::new(2, "ln", 0);
        let x = randm(&mut rng, 4, 5);
        let gamma = randm(&mut rng, 1, 5);
        let beta = randm(&mut rng, 1, 5);
        let w = randm(&mut rng, 4, 5);
        let (_, cache) = layer_norm(&x, &gamma, &beta);
        let mut dg = Matrix::zeros(1, 5);
        let mut db = Matrix::zeros(1, 5);
        let dx = layer_norm_backward(&w, &cache, &gamma, &mut dg, &mut db);
        let fx = finite_diff_grad(|xx| weighted_sum(&layer_norm(xx, &gamma, &beta).0, &w), &x, 1e-5).unwrap();
        let fg = finite_diff_grad(|gg| weighted_sum(&layer_norm(&x, gg, &beta).0, &w), &gamma, 1e-5).unwrap();
        let fb = finite_diff_grad(|bb| weighted_sum(&layer_norm(&x, &gamma, bb).0, &w), &beta, 1e-5).unwrap();
        assert!(max_rel_err(dx.data(), fx.data(), 1e-8) < 1e-6);
        assert!(max_rel_err(dg.data(), fg.data(), 1e-8) < 1e-6);
        assert!(max_rel_err(db.data(), fb.data(), 1e-8) < 1e-6);
    }

    fn attn_out(x: &Matrix, wq: &Matrix, wk: &Matrix, wv: &Matrix, heads: usize, s: usize) -> Matrix {
        let c = attention(
            x,
            matmul(x, wq).unwrap(),
            matmul(x, wk).unwrap(),
            matmul(x, wv).unwrap(),
            heads,
            s,
        );
        c.ctx
    }

    #[test]
    fn attention_is_causal() {
        let mut rng = RngStream::new(3, "attn", 0);
        let x = randm(&mut rng, 5, 4);
        let (wq, wk, wv) = (randm(&mut rng, 4, 4), randm(&mut rng, 4, 4), randm(&mut rng, 4, 4));
        let base = attn_out(&x, &wq, &wk, &wv, 2, 5);
        let mut x2 = x.clone();
        x2.row_mut(4).iter_mut().for_each(|v| *v += 1.0);
        let moved = attn_out(&x2, &wq, &wk, &wv, 2, 5);
        for r in 0..4 {
            assert_eq!(base.row(r), moved.row(r));
        }
        // the first position attends only to itself
        let v0 = matmul(&x, &wv).unwrap();
        assert!(max_rel_err(base.row(0), v0.row(0), 1e-12) < 1e-12);
    }

    #[test]
    fn attention_gradients() {
        let mut rng = RngStream::new(4, "attn", 0);
        let (heads, s) = (2, 3);
        let x = randm(&mut rng, 2 * s, 4);
        let (wq, wk, wv) = (randm(&mut rng, 4, 4), randm(&mut rng, 4, 4), randm(&mut rng, 4, 4));
        let w = randm(&mut rng, 2 * s, 4);
        let cache = attention(
            &x,
            matmul(&x, &wq).unwrap(),
            matmul(&x, &wk).unwrap(),
            matmul(&x, &wv).unwrap(),
            heads,
            s,
        );
        let (dq, dk, dv) = attention_backward(&w, &cache, heads, s);
        let fq = finite_diff_grad(
            |q| weighted_sum(&attention(&x, q.clone(), cache.k.clone(), cache.v.clone(), heads, s).ctx, &w),
            &cache.q,
            1e-5,
        )
        .unwrap();
        let fk = finite_diff_grad(
            |k| weighted_sum(&attention(&x, cache.q.clone(), k.clone(), cache.v.clone(), heads, s).ctx, &w),
            &cache.k,
            1e-5,
        )
        .unwrap();
        let fv = finite_diff_grad(
            |v| weighted_sum(&attention(&x, cache.q.clone(), cache.k.clone(), v.clone(), heads, s).ctx, &w),
            &cache.v,
            1e-5,
        )
        .unwrap();
        assert!(max_rel_err(dq.data(), fq.data(), 1e-3) < 1e-6);
        // entries near 1e-8 are dominated by difference noise
        assert!(max_rel_err(dk.data(), fk.data(), 1e-3) < 1e-6);
        assert!(max_rel_err(dv.data(), fv.data(), 1e-3) < 1e-6);
    }

    #[test]
    fn cross_entropy_values_and_gradient() {
        let logits = Matrix::zeros(2, 4);
        let (loss, _) = cross_entropy(&logits, &[0, 3]);
        assert!((loss - 4f64.ln()).abs() < 1e-15);
        let mut rng = RngStream::new(5, "ce", 0);
        let logits = randm(&mut rng, 3, 5);
        let targets = [4, 0, 2];
        let (_, g) = cross_entropy(&logits, &targets);
        let fd = finite_diff_grad(|l| cross_entropy(l, &targets).0, &logits, 1e-5).unwrap();
        assert!(max_rel_err(g.data(), fd.data(), 1e-8) < 1e-6);
    }
}
