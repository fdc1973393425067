use sffn_core::training::{default_grad_cases, grad_check_suite};

#[test]
fn memory_layer_gradients_match_central_differences() {
    let report = grad_check_suite(&default_grad_cases(), 11).unwrap();
    for (case, err, ok) in report.per_case() {
        eprintln!("{case:<16} max_err {err:.3e} {}", if ok { "ok" } else { "FAIL" });
    }
    let bad: Vec<_> = report.failures().map(|c| format!("{}:{} {:.3e}", c.case, c.param, c.max_err)).collect();
    assert!(bad.is_empty(), "{bad:?}");
}

mod whole_model {
    use sffn_core::selectors::{Aggregator, SelectorKind};
    use sffn_core::tensor::finite_diff_grad;
    use sffn_core::training::{
        grad_error, Batch, ForwardCtx, MemoryConfig, Model, ModelConfig, ParamRole, GRAD_ABS_FLOOR,
        GRAD_EPS, GRAD_TOL,
    };

    fn tiny(d: usize, selector: SelectorKind, block_size: usize, active: usize) -> ModelConfig {
        ModelConfig {
            layers: 2,
            d,
            heads: 2,
            seq_len: 4,
            vocab_size: 11,
            sffn_layers: vec![1],
            memory: MemoryConfig {
                multiplier: 1,
                block_size,
                active_cells: active,
            },
            selector,
            init_std: 0.3,
        }
    }

    fn check(config: ModelConfig) {
        let name = config.selector.name();
        let model = Model::new(config, 3).unwrap();
        let batch = Batch::from_windows(&[&[1, 5, 2, 9, 3], &[0, 10, 4, 4, 7]]).unwrap();
        let ctx = ForwardCtx::train(1);
        let trace = model.forward(&batch, ctx, None).unwrap();
        let routes = trace.routing();
        let grads = model.backward(&trace).unwrap();
        for id in model.params.ids() {
            if model.params.role(id) == ParamRole::Buffer {
                continue;
            }
            let numeric = finite_diff_grad(
                |m| {
                    let mut probe = model.clone();
                    probe.params.set(id, m.clone()).unwrap();
                    probe.forward(&batch, ctx, Some(&routes)).unwrap().loss.total
                },
                model.params.get(id),
                GRAD_EPS,
            )
            .unwrap();
            let err = grad_error(grads.get(id).data(), numeric.data(), GRAD_ABS_FLOOR);
            assert!(err <= GRAD_TOL, "{name} {}: {err:e}", model.params.name(id));
        }
    }

    #[test]
    fn dense_model() {
        check(tiny(8, SelectorKind::Dense {}, 32, 32));
    }

    #[test]
    fn vanillam_model() {
        check(tiny(8, SelectorKind::VanillaM { aggregator: Aggregator::Max }, 4, 8));
    }

    #[test]
    fn switch_model() {
        check(tiny(
            8,
            SelectorKind::Switch {
                aux_loss_weight: 0.5,
                scale_expert_grads: true,
            },
            8,
            8,
        ));
    }

    #[test]
    fn pkm_model() {
        // 64 cells, a square product-key grid
        check(tiny(
            16,
            SelectorKind::Pkm {
                d_low: 4,
                batch_norm: true,
            },
            1,
            4,
        ));
    }
}
