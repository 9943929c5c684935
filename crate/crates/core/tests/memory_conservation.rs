use velora_core::autograd::{
    AttentionPolicies, BackwardCache, CharTransformer, DenseLayer, Input, Network, SavePolicy, Sequential, StackLayer,
    TransformerPolicies, VeloraConfig,
};
use velora_core::compression::InitStrategy;
use velora_core::memledger::{MemoryLedger, PolicyTag};
use velora_core::tensor::Distribution;
use velora_core::{DType, Tensor};

fn velora(m: usize) -> SavePolicy {
    SavePolicy::Velora(VeloraConfig::new(m, InitStrategy::Random))
}

fn check_conservation(net: &mut Network, input: Input<'_>, leading: &[usize]) -> MemoryLedger {
    let mut cache = BackwardCache::new();
    net.forward(input, Some(&mut cache)).unwrap();
    let ledger = net.memory_ledger(leading).unwrap();
    let report = ledger.report();
    assert_eq!(report.activation_scalars, cache.stored_scalars());
    assert_eq!(report.activation_bytes, cache.stored_bytes());
    for (id, saved) in cache.saved() {
        let entry = ledger.entries().iter().find(|e| e.layer_id == id && e.policy != PolicyTag::Projection).unwrap();
        assert_eq!(entry.scalars_stored, saved.stored_scalars(), "layer {id}");
    }
    ledger
}

#[test]
fn regression_stack_over_the_preset_grid() {
    let (d, hidden, b) = (256, 256, 4);
    for m in [d / 64, d / 32, d / 16, d / 8] {
        for dtype in [DType::F64, DType::F32] {
            let mut net = Network::Sequential(
                Sequential::new(vec![
                    StackLayer::Dense(DenseLayer::new("l0", d, hidden, true, velora(m), dtype, 1).unwrap()),
                    StackLayer::Dense(DenseLayer::new("l1", hidden, 1, true, velora(m), dtype, 2).unwrap()),
                ])
                .unwrap(),
            );
            let x = Tensor::seeded_fill(&[b, d], Distribution::Normal { mean: 0.0, std: 1.0 }, 3).unwrap().to_dtype(dtype);
            let ledger = check_conservation(&mut net, Input::Dense(&x), &[b]);
            for e in ledger.entries().iter().filter(|e| e.policy == PolicyTag::Velora) {
                assert_eq!(e.scalars_stored, b * d / m);
                assert_eq!(e.scalars_full_equivalent, m * e.scalars_stored);
            }
            assert_eq!(ledger.report().compression_ratio(), Some(m as f64));
        }
    }
}

#[test]
fn transformer_mixed_policies() {
    let (d, ctx, b, vocab) = (64, 8, 2, 11);
    for m in [d / 64, d / 32, d / 16, d / 8] {
        let policies = TransformerPolicies {
            attention: AttentionPolicies {
                value: velora(m),
                ..AttentionPolicies::default()
            },
            down: velora(4 * m),
            ..TransformerPolicies::default()
        };
        let model = CharTransformer::new(vocab, ctx, d, 4 * d, 2, policies, DType::F64, 5).unwrap();
        let mut net = Network::Transformer(model);
        let ids: Vec<usize> = (0..b * ctx).map(|i| (i * 7) % vocab).collect();
        let ledger = check_conservation(&mut net, Input::Tokens { ids: &ids, batch: b, len: ctx }, &[b, ctx]);
        let value: Vec<_> = ledger.entries().iter().filter(|e| e.layer_id.ends_with("attn.value") && e.policy == PolicyTag::Velora).collect();
        assert_eq!(value.len(), 2);
        for e in value {
            assert_eq!(e.scalars_stored, b * ctx * d / m);
        }
        let down: Vec<_> = ledger.entries().iter().filter(|e| e.layer_id.ends_with("mlp.down") && e.policy == PolicyTag::Velora).collect();
        for e in down {
            assert_eq!(e.scalars_stored, b * ctx * 4 * d / (4 * m));
        }
    }
}

#[test]
fn bytes_strictly_decrease_with_m() {
    let shape = [4, 16, 64];
    let mut last = usize::MAX;
    for m in [1, 2, 4, 8, 16, 32, 64] {
        let mut ledger = MemoryLedger::new();
        ledger.record("l", PolicyTag::Velora, &shape, m, DType::F32).unwrap();
        let bytes = ledger.report().activation_bytes;
        assert!(bytes < last);
        last = bytes;
    }
}

#[test]
fn mixed_policy_totals_match_entry_sums() {
    let mut ledger = MemoryLedger::new();
    ledger.record("a", PolicyTag::Full, &[2, 4, 8], 1, DType::F32).unwrap();
    ledger.record("b", PolicyTag::Velora, &[2, 4, 8], 4, DType::F64).unwrap();
    ledger.record("c", PolicyTag::None, &[2, 4, 8], 1, DType::F32).unwrap();
    ledger.record_projection("b", 4, DType::F64);
    let report = ledger.report();
    let bytes: usize = ledger.entries().iter().map(|e| e.bytes_stored).sum();
    assert_eq!(report.total_bytes, bytes);
    assert_eq!(report.activation_bytes, 64 * 4 + 16 * 8);
    assert_eq!(report.projection_bytes, 32);
    assert_eq!(report.full_equivalent_bytes, 64 * 4 + 64 * 8);
}
