use super::params::{Grads, ParamRole, ParamStore};
use crate::error::{shape, Error, Result};
use crate::tensor::Matrix;

/// Losses of one step or evaluation pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossReport {
    /// Mean next-token cross-entropy in nats.
    pub clm_loss: f64,
    /// Balance loss averaged over gated layers; zero without a learned gate.
    pub aux_loss: f64,
    /// `clm_loss + aux_weight · aux_loss`.
    pub total: f64,
    pub tokens: usize,
}

/// Load-balancing loss `B · Σ_i f_i · P_i`.
///
/// `f_i` is the fraction of tokens dispatched to block `i` (rows of
/// `dispatch` are one-hot) and `P_i` the mean router probability of block `i`.
pub fn switch_aux_loss(router_probs: &Matrix, dispatch: &Matrix) -> Result<f64> {
    if router_probs.shape() != dispatch.shape() {
        return Err(shape(
            "switch_aux_loss",
            format!("probabilities {:?} vs dispatch {:?}", router_probs.shape(), dispatch.shape()),
        ));
    }
    let (tokens, blocks) = router_probs.shape();
    if tokens == 0 || blocks == 0 {
        return Err(Error::InvalidArgument("balance loss of an empty batch".into()));
    }
    let mut f = vec![0.0; blocks];
    let mut p = vec![0.0; blocks];
    for t in 0..tokens {
        for i in 0..blocks {
            f[i] += dispatch.get(t, i);
            p[i] += router_probs.get(t, i);
        }
    }
    let n = tokens as f64;
    Ok(blocks as f64 * f.iter().zip(&p).map(|(fi, pi)| (fi / n) * (pi / n)).sum::<f64>())
}

/// Divides one expert gradient by `√B`.
pub fn scale_expert_grad(grad: &mut Matrix, num_blocks: usize) {
    let root = (num_blocks as f64).sqrt();
    grad.data_mut().iter_mut().for_each(|g| *g /= root);
}

/// Divides every expert-role gradient by the square root of its expert count.
/// Gate and other gradients are left alone.
pub fn scale_expert_grads(grads: &mut Grads, store: &ParamStore) {
    for id in store.ids() {
        if let ParamRole::Expert { num_blocks } = store.role(id) {
            scale_expert_grad(grads.get_mut(id), num_blocks);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    fn one_hot(rows: &[usize], blocks: usize) -> Matrix {
        let mut m = Matrix::zeros(rows.len(), blocks);
        for (t, &i) in rows.iter().enumerate() {
            m.set(t, i, 1.0);
        }
        m
    }

    #[test]
    fn aux_loss_cases() {
        let probs = Matrix::filled(8, 4, 0.25);
        let dispatch = one_hot(&[0, 1, 2, 3, 0, 1, 2, 3], 4);
        assert!((switch_aux_loss(&probs, &dispatch).unwrap() - 1.0).abs() < 1e-15);

        let mut collapsed = Matrix::zeros(5, 4);
        for t in 0..5 {
            collapsed.set(t, 0, 1.0);
        }
        assert_eq!(switch_aux_loss(&collapsed, &one_hot(&[0; 5], 4)).unwrap(), 4.0);

        let probs = Matrix::new(2, 2, vec![0.5, 0.5, 0.5, 0.5]).unwrap();
        assert_eq!(switch_aux_loss(&probs, &one_hot(&[0, 1], 2)).unwrap(), 1.0);

        assert!(switch_aux_loss(&Matrix::zeros(0, 4), &Matrix::zeros(0, 4)).is_err());
    }

    #[test]
    fn expert_scaling() {
        let mut rng = RngStream::new(1, "scale", 0);
        let g = Matrix::from_fn(3, 3, |_, _| rng.normal(0.0, 1.0));
        let mut one = g.clone();
        scale_expert_grad(&mut one, 1);
        assert_eq!(one, g);
        let mut four = g.clone();
        scale_expert_grad(&mut four, 4);
        for (a, b) in four.data().iter().zip(g.data()) {
            assert_eq!(*a, b / 2.0);
        }
        let mut eight = g.clone();
        scale_expert_grad(&mut eight, 8);
        for (a, b) in eight.data().iter().zip(g.data()) {
            assert_eq!(*a, b / 8f64.sqrt());
        }

        let mut store = ParamStore::new();
        let e = store.add("keys", ParamRole::Expert { num_blocks: 16 }, g.clone());
        let gate = store.add("gate", ParamRole::Gate, g.clone());
        let mut grads = store.zero_grads();
        grads.get_mut(e).add_assign(&g).unwrap();
        grads.get_mut(gate).add_assign(&g).unwrap();
        scale_expert_grads(&mut grads, &store);
        assert_eq!(grads.get(gate), &g);
        for (a, b) in grads.get(e).data().iter().zip(g.data()) {
            assert_eq!(*a, b / 4.0);
        }
    }
}
