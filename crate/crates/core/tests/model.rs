use proptest::prelude::*;
use sentinel_core::model::{AttentionPattern, ClassifierModel, ModelConfig};
use sentinel_core::tokenizer::{TokenWindow, PAD};

fn config(context: usize, pattern: AttentionPattern, seed: u64) -> ModelConfig {
    ModelConfig {
        d_model: 16,
        heads: 2,
        layers: 2,
        dropout: 0.0,
        seed,
        ..ModelConfig::desk_default(context, 24, pattern)
    }
}

fn model_with(cfg: ModelConfig) -> ClassifierModel<f64> {
    ClassifierModel::new(cfg).unwrap()
}

/// Same parameters, different attention pattern.
fn with_pattern(m: &ClassifierModel<f64>, pattern: AttentionPattern) -> ClassifierModel<f64> {
    let mut other = model_with(ModelConfig { pattern, ..m.config().clone() });
    other.params_mut().copy_from_slice(m.params());
    other
}

fn payload(len: usize, salt: u64) -> Vec<u32> {
    (0..len as u64).map(|i| 3 + ((i * 7 + salt * 13) % 21) as u32).collect()
}

fn max_logit_gap(a: &ClassifierModel<f64>, b: &ClassifierModel<f64>, w: &TokenWindow) -> f64 {
    let (la, lb) = (a.logits(w).unwrap(), b.logits(w).unwrap());
    la.iter().zip(&lb).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn full_coverage_sparse_equals_dense(
        context in 2usize..=64,
        fill in 0.05f64..=1.0,
        extra in 0usize..8,
        global in 1usize..3,
        seed in any::<u64>(),
    ) {
        let dense = model_with(config(context, AttentionPattern::Dense, seed));
        let len = ((context - 1) as f64 * fill).ceil() as usize;
        let w = TokenWindow::from_payload(&payload(len, seed % 97), context, None);

        let sliding = with_pattern(&dense, AttentionPattern::SlidingWindow { window: context + extra, global: global.min(context) });
        prop_assert!(max_logit_gap(&dense, &sliding, &w) < 1e-6);

        let block = 1 + extra % context;
        let blocks = context.div_ceil(block);
        let full = AttentionPattern::BlockSparse { block, window_blocks: blocks, random_blocks: 0, global_blocks: 1, seed };
        prop_assert!(max_logit_gap(&dense, &with_pattern(&dense, full), &w) < 1e-6);
    }

    #[test]
    fn padding_beyond_valid_len_is_ignored(
        context in 3usize..=48,
        len in 1usize..40,
        junk in proptest::collection::vec(3u32..24, 48),
        seed in any::<u64>(),
    ) {
        let len = len.min(context - 1);
        let m = model_with(config(context, AttentionPattern::SlidingWindow { window: 3, global: 1 }, seed));
        let w = TokenWindow::from_payload(&payload(len, seed % 31), context, None);
        let mut dirty = w.clone();
        for (slot, &j) in dirty.ids[w.valid_len..].iter_mut().zip(&junk) {
            *slot = j;
        }
        let (clean, noisy) = (m.logits(&w).unwrap(), m.logits(&dirty).unwrap());
        for (a, b) in clean.iter().zip(&noisy) {
            prop_assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn outputs_sum_to_one(context in 2usize..=40, len_frac in 0.0f64..=1.0, seed in any::<u64>(), f32_model in any::<bool>()) {
        let len = (((context - 1) as f64 * len_frac).round() as usize).max(1);
        let cfg = config(context, AttentionPattern::Dense, seed);
        let w = TokenWindow::from_payload(&payload(len, seed % 11), context, None);
        let p = if f32_model {
            ClassifierModel::<f32>::new(cfg).unwrap().forward(&w).unwrap()
        } else {
            model_with(cfg).forward(&w).unwrap()
        };
        prop_assert!((p.0.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        prop_assert!(p.0.iter().all(|&x| (0.0..=1.0).contains(&x)));
    }
}

#[test]
fn zero_head_gives_exactly_uniform_output() {
    for (context, pattern) in [(16, AttentionPattern::Dense), (40, AttentionPattern::SlidingWindow { window: 4, global: 1 })] {
        let mut m = ClassifierModel::<f32>::new(config(context, pattern, 3)).unwrap();
        m.zero_head();
        let w = TokenWindow::from_payload(&payload(context / 2, 1), context, None);
        assert_eq!(m.forward(&w).unwrap().0, [0.2; 5]);
    }
}

#[test]
fn pad_ids_inside_payload_are_not_masked() {
    // Only positions past valid_len are padding; a PAD id inside the payload
    // is an ordinary (if odd) token.
    let m = model_with(config(16, AttentionPattern::Dense, 1));
    let mut ids = payload(8, 2);
    let base = TokenWindow::from_payload(&ids, 16, None);
    ids[3] = PAD;
    let odd = TokenWindow::from_payload(&ids, 16, None);
    assert!(m.logits(&base).unwrap() != m.logits(&odd).unwrap());
}

#[test]
fn narrow_window_differs_from_dense() {
    let dense = model_with(config(48, AttentionPattern::Dense, 4));
    let narrow = with_pattern(&dense, AttentionPattern::SlidingWindow { window: 2, global: 1 });
    let w = TokenWindow::from_payload(&payload(47, 3), 48, None);
    assert!(max_logit_gap(&dense, &narrow, &w) > 1e-6);
}
