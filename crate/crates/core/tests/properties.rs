use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use desklm_core::data::filters::RuleRegistry;
use desklm_core::data::{
    code_filter, pack_sequences, split_long_samples, CodeFilterConfig, CodeSample, ConversationTree, Document, Message,
};
use desklm_core::model::{layer_norm, lm_forward, rope_apply, LayerNormWeights, Model, ModelConfig, TensorArchive};
use desklm_core::optim::{BatchSchedule, LrSchedule, GT};
use desklm_core::tensor::Tensor;

fn tiny(vocab: usize, kv: usize) -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        d_model: 16,
        n_heads: 4,
        head_dim: 4,
        n_kv: kv,
        context_length: 32,
        rope_base: 10_000.0,
        tied_embeddings: true,
        vocab_size: vocab,
        mlp_hidden: Some(24),
        ln_eps: 1e-5,
        ln_bias: true,
        linear_bias: false,
    }
}

fn tree_strategy() -> impl Strategy<Value = ConversationTree> {
    (1usize..=12).prop_flat_map(|n| {
        (
            proptest::collection::vec(0usize..1000, n),
            proptest::collection::vec(proptest::collection::vec(0u32..50, 0..6), n),
        )
            .prop_map(move |(parents, tokens)| ConversationTree {
                nodes: (0..n)
                    .map(|i| Message {
                        id: 100 + i as u64,
                        role: String::new(),
                        tokens: tokens[i].clone(),
                        parent: (i > 0).then(|| 100 + (parents[i] % i) as u64),
                    })
                    .collect(),
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn causal_logits_do_not_see_the_future(seed in 0u64..1000, tokens in proptest::collection::vec(0usize..23, 2..20), cut in 1usize..19) {
        let cut = cut.min(tokens.len() - 1);
        let m = Model::<f64>::init(tiny(23, 2), seed, 0.3).unwrap();
        let full = lm_forward(&tokens, &m).unwrap();
        let prefix = lm_forward(&tokens[..cut], &m).unwrap();
        for i in 0..cut {
            let d = full.row(i).iter().zip(prefix.row(i)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            prop_assert!(d < 1e-12, "row {} differs by {}", i, d);
        }
    }

    #[test]
    fn untie_keeps_logits(seed in 0u64..1000, tokens in proptest::collection::vec(0usize..19, 1..16)) {
        let mut m = Model::<f32>::init(tiny(19, 1), seed, 0.1).unwrap();
        let before = lm_forward(&tokens, &m).unwrap();
        let added = m.untie();
        prop_assert_eq!(added, 19 * 16);
        prop_assert!(lm_forward(&tokens, &m).unwrap().bit_eq(&before));
        prop_assert_eq!(m.untie(), 0);
    }

    #[test]
    fn rope_preserves_pair_norms(seed in 0u64..1000, pos in 0usize..100_000, base in 100.0f64..1e7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (heads, hd) = (2, 8);
        let x = Tensor::<f64>::randn([1, heads, hd], 1.0, &mut rng);
        let y = rope_apply(&x, &[pos], base).unwrap();
        for h in 0..heads {
            for i in 0..hd / 2 {
                let n = |t: &Tensor<f64>| t.data()[h * hd + i].hypot(t.data()[h * hd + i + hd / 2]);
                prop_assert!((n(&x) - n(&y)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn layer_norm_rows_are_standardized(data in proptest::collection::vec(-50.0f64..50.0, 24)) {
        prop_assume!(data[..8].iter().any(|&v| (v - data[0]).abs() > 1e-3));
        prop_assume!(data[8..16].iter().any(|&v| (v - data[8]).abs() > 1e-3));
        prop_assume!(data[16..].iter().any(|&v| (v - data[16]).abs() > 1e-3));
        let x = Tensor::new([3, 8], data).unwrap();
        let w = LayerNormWeights { gain: Tensor::ones([8]), bias: Some(Tensor::zeros([8])) };
        let y = layer_norm(&x, &w, 1e-12).unwrap();
        for r in 0..3 {
            let row = y.row(r);
            let mean = row.iter().sum::<f64>() / 8.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            prop_assert!(mean.abs() < 1e-9 && (var - 1.0).abs() < 1e-6, "mean {} var {}", mean, var);
        }
    }

    #[test]
    fn every_message_is_trained_exactly_once(tree in tree_strategy()) {
        let threads = tree.flatten().unwrap();
        let trained: usize = threads.iter().map(|t| t.loss_mask.iter().filter(|&&m| m).count()).sum();
        let unique: usize = tree.nodes.iter().map(|m| m.tokens.len()).sum();
        prop_assert_eq!(trained, unique);
        let leaves = tree.nodes.iter().filter(|n| !tree.nodes.iter().any(|c| c.parent == Some(n.id))).count();
        prop_assert_eq!(threads.len(), leaves);
    }

    #[test]
    fn truncated_threads_fit(tree in tree_strategy(), max_len in 1usize..20) {
        let full = tree.flatten().unwrap();
        let cut = tree.flatten_limited(max_len).unwrap();
        for (f, c) in full.iter().zip(&cut) {
            prop_assert!(c.tokens.len() <= max_len);
            prop_assert_eq!(c.tokens.len() + c.truncated_tokens, f.tokens.len());
            prop_assert_eq!(&f.tokens[..c.tokens.len()], &c.tokens[..]);
        }
    }

    #[test]
    fn packing_keeps_every_token_in_order(lens in proptest::collection::vec(0usize..40, 0..30), ctx in 2usize..32) {
        let mut next = 1u32;
        let mut docs = Vec::new();
        for (i, &l) in lens.iter().enumerate() {
            let d = Document::new((0..l).map(|_| { next += 1; next }).collect(), (i % 3) as u16);
            docs.extend(split_long_samples(&d, ctx).unwrap());
        }
        let packed = pack_sequences(&docs, ctx, 0).unwrap();
        let mut seen = Vec::new();
        for p in &packed {
            prop_assert_eq!(p.tokens.len(), ctx);
            prop_assert!(p.used() <= ctx);
            for i in 0..ctx {
                prop_assert_eq!(p.mask[i], i < p.used());
            }
            seen.extend_from_slice(&p.tokens[..p.used()]);
        }
        let want: Vec<u32> = docs.iter().flat_map(|d| d.tokens.clone()).collect();
        prop_assert_eq!(seen, want);
    }

    #[test]
    fn lr_rises_then_falls(a in 0.0f64..6000.0, b in 0.0f64..6000.0) {
        let lr = LrSchedule::reference();
        let (lo, hi) = (a.min(b) * GT, a.max(b) * GT);
        if hi <= lr.warmup_tokens {
            prop_assert!(lr.lr_at(lo) <= lr.lr_at(hi));
        } else if lo >= lr.warmup_tokens {
            prop_assert!(lr.lr_at(lo) >= lr.lr_at(hi));
        }
        prop_assert!(lr.lr_at(lo) >= 0.0 && lr.lr_at(lo) <= lr.eta_max);
    }

    #[test]
    fn scaled_batch_schedules_still_double(factor in 1e-9f64..1.0, shift in 0u32..11) {
        let b = BatchSchedule::reference().scaled(factor, 1 << shift);
        prop_assert!(b.validate().is_ok());
        let s = b.sizes();
        prop_assert!(s.windows(2).all(|w| w[1] == 2 * w[0]));
    }

    #[test]
    fn code_scores_at_or_below_threshold_are_rejected(score in 0.0f64..=0.15, words in 50usize..80) {
        let s = CodeSample {
            text: vec!["token"; words].join(" "),
            programming_language: "Rust".into(),
            nl_language: "de".into(),
            nl_score: score,
        };
        prop_assert!(code_filter(&s, &CodeFilterConfig::default()).is_err());
    }

    #[test]
    fn stop_word_count_is_case_and_punctuation_blind(n in 0usize..6) {
        let reg = RuleRegistry::builtin();
        let de = reg.get("de").unwrap();
        let text = ["Und,", "UND", "und.", "(und)", "und!", "Und?"][..n].join(" ");
        prop_assert_eq!(de.stop_word_count(&text), n);
    }

    #[test]
    fn archives_round_trip_bitwise(data in proptest::collection::vec(any::<f32>(), 1..64)) {
        let n = data.len();
        let t = Tensor::new([n], data).unwrap();
        let arch = TensorArchive::new([("t".to_string(), t.clone())].into(), serde_json::json!({"k": 1}));
        let (m, p) = arch.encode().unwrap();
        let back = TensorArchive::<f32>::decode(&m, &p).unwrap();
        prop_assert!(back.tensors["t"].bit_eq(&t));
    }
}
