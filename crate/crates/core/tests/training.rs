use sffn_core::corpus::seed_text;
use sffn_core::selectors::{Aggregator, SelectorKind};
use sffn_core::tensor::Matrix;
use sffn_core::training::{
    byte_tokens, encode_checkpoint, metrics_csv, scale_expert_grad, switch_aux_loss, train_lm, ModelConfig,
    TrainConfig,
};

fn one_hot(rows: &[usize], blocks: usize) -> Matrix {
    Matrix::from_fn(rows.len(), blocks, |t, i| if rows[t] == i { 1.0 } else { 0.0 })
}

#[test]
fn switch_aux_is_one_at_exact_balance() {
    for nb in [1usize, 2, 4, 16] {
        // each block receives the same share of tokens and of probability mass
        let tokens: Vec<usize> = (0..3 * nb).map(|t| t % nb).collect();
        let probs = Matrix::from_fn(tokens.len(), nb, |_, _| 1.0 / nb as f64);
        let aux = switch_aux_loss(&probs, &one_hot(&tokens, nb)).unwrap();
        assert!((aux - 1.0).abs() < 1e-12, "B={nb}: {aux}");
    }
}

#[test]
fn switch_aux_is_num_blocks_at_collapse() {
    for nb in [2usize, 4, 16] {
        let tokens = vec![nb - 1; 5];
        let probs = Matrix::from_fn(5, nb, |_, i| if i == nb - 1 { 1.0 } else { 0.0 });
        let aux = switch_aux_loss(&probs, &one_hot(&tokens, nb)).unwrap();
        assert_eq!(aux, nb as f64);
    }
}

#[test]
fn switch_aux_half_half_dispatch() {
    let probs = Matrix::from_fn(2, 2, |_, _| 0.5);
    assert_eq!(switch_aux_loss(&probs, &one_hot(&[0, 1], 2)).unwrap(), 1.0);
}

#[test]
fn switch_aux_can_drop_below_one() {
    // top-1 dispatch with probabilities that favour the less used block
    let probs = Matrix::from_rows(&[vec![0.51, 0.49], vec![0.51, 0.49], vec![0.0, 1.0]]).unwrap();
    let aux = switch_aux_loss(&probs, &one_hot(&[0, 0, 1], 2)).unwrap();
    let want = 2.0 * ((2.0 / 3.0) * (1.02 / 3.0) + (1.0 / 3.0) * (1.98 / 3.0));
    assert!((aux - want).abs() < 1e-12);
    assert!(aux < 1.0);
}

#[test]
fn expert_grad_scaling_divides_by_root_b() {
    let base = Matrix::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0]]).unwrap();
    let mut g = base.clone();
    scale_expert_grad(&mut g, 1);
    assert_eq!(g, base);
    scale_expert_grad(&mut g, 4);
    assert_eq!(g.data(), &[0.5, -1.0, 0.25, 1.5]);
    let mut h = base.clone();
    scale_expert_grad(&mut h, 7);
    let want: Vec<f64> = base.data().iter().map(|v| v / 7f64.sqrt()).collect();
    assert_eq!(h.data(), &want[..]);
}

fn small(selector: SelectorKind, g: usize) -> ModelConfig {
    let mut c = ModelConfig::desk(selector, g);
    c.d = 16;
    c.seq_len = 32;
    c.memory.active_cells = 64;
    c
}

fn short() -> TrainConfig {
    TrainConfig {
        steps: 12,
        eval_interval: 5,
        val_seqs: 2,
        ..TrainConfig::default()
    }
}

#[test]
fn identical_seeds_give_identical_parameters() {
    let tokens = byte_tokens(seed_text().as_bytes());
    for (sel, g) in [
        (SelectorKind::Dense {}, 1),
        (SelectorKind::VanillaM { aggregator: Aggregator::Avg }, 4),
        (
            SelectorKind::Switch {
                aux_loss_weight: 0.01,
                scale_expert_grads: true,
            },
            16,
        ),
        (
            SelectorKind::Pkm {
                d_low: 8,
                batch_norm: true,
            },
            1,
        ),
    ] {
        let a = train_lm(small(sel.clone(), g), short(), tokens.clone(), 7).unwrap();
        let b = train_lm(small(sel.clone(), g), short(), tokens.clone(), 7).unwrap();
        assert_eq!(metrics_csv(&a.metrics), metrics_csv(&b.metrics), "{sel:?}");
        assert_eq!(encode_checkpoint(&a.model.params), encode_checkpoint(&b.model.params), "{sel:?}");
        let c = train_lm(small(sel.clone(), g), short(), tokens.clone(), 8).unwrap();
        assert_ne!(encode_checkpoint(&a.model.params), encode_checkpoint(&c.model.params), "{sel:?}");
    }
}

#[test]
fn zero_steps_is_initial_eval_near_vocab_size() {
    let tokens = byte_tokens(seed_text().as_bytes());
    let cfg = TrainConfig {
        steps: 0,
        ..short()
    };
    let run = train_lm(small(SelectorKind::AvgK {}, 16), cfg, tokens, 1).unwrap();
    assert_eq!(run.metrics.len(), 1);
    let ppl = run.initial_val_ppl().unwrap();
    assert!((ppl / 256.0 - 1.0).abs() < 0.05, "{ppl}");
}
