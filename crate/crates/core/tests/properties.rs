mod common;

use ndarray::{Array2, Axis};
use proptest::prelude::*;
use rand::Rng;
use topicattn::analytic::{check_family_membership, optimal_embedding, optimal_wv_l2, wv_constants, Family};
use topicattn::corpus::{
    decode, enumerate_topic_subsets, nth_document, one_hot_encode, Layout, LengthPolicy, TopicModelConfig, TopicPolicy,
    DEFAULT_SUBSET_CAP,
};
use topicattn::landscape::{exact_loss_block, AttentionLevels};
use topicattn::loss::{LossConfig, LossKind};
use topicattn::masking::{mask_document, masked_distribution, MaskedDocument, MaskingConfig, MASK};
use topicattn::model::{AttentionMode, EmbeddingMode, ModelParams, ModelSpec, TensorId};
use topicattn::optim::{document_loss, population_objective};
use topicattn::oracle::NormalEquations;
use topicattn::rng::{stream, Domain};

use common::*;

fn masking() -> impl Strategy<Value = MaskingConfig> {
    (0.05f64..0.6, 0.0f64..0.45, 0.0f64..0.45).prop_map(|(m, k, r)| MaskingConfig::new(m, k, r).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn analytic_gradients_match_finite_differences(k in 0u64..10_000) {
        let inst = small_instance(k);
        let (_, g) = document_loss(&inst.params, &inst.doc, &inst.loss).unwrap();
        let (_, pen) = topicattn::loss::l2_penalty(&inst.params, &inst.loss);
        for id in TensorId::ALL {
            if inst.params.is_pinned(id) {
                continue;
            }
            let mut a = g.get(id).unwrap().clone();
            if let Some(r) = pen.get(id) {
                a += r;
            }
            let fd = numeric_gradient(&inst.params, id, &inst.doc, &inst.loss, 1e-6);
            prop_assert!(relative_error(&a, &fd, 1e-7) < 1e-5, "{:?}", id);
        }
    }

    #[test]
    fn loss_is_invariant_to_key_bias(k in 0u64..10_000, shift in -3.0f64..3.0) {
        let inst = small_instance(k & !6);
        let base = document_loss(&inst.params, &inst.doc, &inst.loss).unwrap().0;
        let mut p = inst.params.clone();
        let b = p.get(TensorId::KeyBias).mapv(|x| x + shift);
        p.set(TensorId::KeyBias, b).unwrap();
        let moved = document_loss(&p, &inst.doc, &inst.loss).unwrap().0;
        prop_assert!((base - moved).abs() <= 1e-10 * base.abs().max(1.0));
    }

    #[test]
    fn loss_is_invariant_to_position_permutation(k in 0u64..10_000, seed in 0u64..1000) {
        let inst = small_instance(k);
        let n = inst.doc.masked.len();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut r = stream(seed, Domain::Oracle, 3);
        for i in (1..n).rev() {
            perm.swap(i, r.random_range(0..=i));
        }
        let mut doc = inst.doc.clone();
        doc.original.tokens = perm.iter().map(|&j| inst.doc.original.tokens[j]).collect();
        doc.masked = perm.iter().map(|&j| inst.doc.masked[j]).collect();
        let mut inv = vec![0; n];
        for (i, &j) in perm.iter().enumerate() {
            inv[j] = i;
        }
        doc.mask_set = inst.doc.mask_set.iter().map(|&j| inv[j]).collect();
        doc.mask_set.sort_unstable();
        let a = document_loss(&inst.params, &inst.doc, &inst.loss).unwrap().0;
        let b = document_loss(&inst.params, &doc, &inst.loss).unwrap().0;
        prop_assert!((a - b).abs() <= 1e-10 * a.abs().max(1.0));
    }

    #[test]
    fn one_hot_round_trips(tokens in proptest::collection::vec(0usize..=12, 1..40)) {
        let x = one_hot_encode(&tokens, Layout::new(3, 4).unwrap()).unwrap();
        prop_assert_eq!(decode(&x).unwrap(), tokens);
    }

    #[test]
    fn fixed_tau_documents_stay_in_their_topics(seed in 0u64..10_000, t in 1usize..8, v in 1usize..6, tau_pick in 0usize..8, n in 1usize..60) {
        let tau = 1 + tau_pick % t;
        let layout = Layout::new(t, v).unwrap();
        let cfg = TopicModelConfig::new(layout, TopicPolicy::FixedTau(tau), LengthPolicy::Fixed(n), seed).unwrap();
        let d = nth_document(&cfg, 0);
        prop_assert_eq!(d.len(), n);
        prop_assert_eq!(d.topic_set.len(), tau);
        for &w in &d.tokens {
            prop_assert!(d.topic_set.contains(&layout.topic_of(w).unwrap()));
        }
    }

    #[test]
    fn masking_touches_only_the_mask_set(seed in 0u64..10_000, m in masking()) {
        let layout = Layout::new(4, 3).unwrap();
        let cfg = TopicModelConfig::new(layout, TopicPolicy::Dirichlet(0.5), LengthPolicy::Fixed(30), seed).unwrap();
        let d = nth_document(&cfg, 0);
        let md: MaskedDocument = mask_document(&d, &m, layout, &mut stream(seed, Domain::Masking, 0));
        prop_assert!(!md.mask_set.is_empty());
        for j in 0..d.len() {
            if md.mask_set.binary_search(&j).is_err() {
                prop_assert_eq!(md.masked[j], d.tokens[j]);
            }
            prop_assert!(md.masked[j] == MASK || (1..=layout.num_words()).contains(&md.masked[j]));
        }
    }

    #[test]
    fn masked_distribution_sums_to_one(m in masking(), t in 1usize..20, v in 1usize..20, tau_pick in 0usize..20) {
        let tau = 1 + tau_pick % t;
        let s = masked_distribution(&m, Layout::new(t, v).unwrap(), tau).unwrap();
        let total = (tau * v) as f64 * s.p_in + ((t - tau) * v) as f64 * s.p_out + s.p_mask;
        prop_assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn block_loss_depends_only_on_gamma(m in masking(), tau in 1usize..6, gamma in 1e-2f64..1e4, s1 in 0.0f64..1.0, s2 in 0.0f64..1.0) {
        let layout = Layout::new(6, 5).unwrap();
        let v = 5.0;
        let pair = |s: f64| {
            let alpha = s * v * gamma / (v - 1.0);
            AttentionLevels::new(alpha.max(1e-300), (v * gamma - (v - 1.0) * alpha).max(1e-300)).unwrap()
        };
        let a = exact_loss_block(pair(s1), &m, layout, tau).unwrap();
        let b = exact_loss_block(pair(s2), &m, layout, tau).unwrap();
        prop_assert!((a - b).abs() <= 1e-10 * a.abs().max(1.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn closed_form_value_matrix_matches_normal_equations(m in masking(), t in 2usize..5, v in 2usize..5, tau_pick in 0usize..5) {
        let tau = 1 + tau_pick % (t - 1);
        let layout = Layout::new(t, v).unwrap();
        let star = optimal_wv_l2(&m, layout).unwrap();
        let subsets = enumerate_topic_subsets(t, tau, DEFAULT_SUBSET_CAP).unwrap();
        let ne = NormalEquations::build(&m, layout, &subsets).unwrap();
        prop_assert!(max_abs_diff(&star, &ne.ridge_limit(1e-12)) < 1e-9);
        let unit = wv_constants(&m, layout).unwrap().k3 / v as f64;
        prop_assert!(check_family_membership(&star, &m, layout, Family::Value, 1e-9 * unit.max(1.0)).unwrap().member);
    }

    #[test]
    fn embedding_optimum_is_stationary(m in masking(), t in 2usize..5, v in 2usize..5, tau_pick in 0usize..5) {
        let tau = 1 + tau_pick % t;
        let layout = Layout::new(t, v).unwrap();
        let opt = optimal_embedding(&m, layout).unwrap();
        let mut spec = ModelSpec::new(layout);
        spec.embedding = EmbeddingMode::Trained;
        spec.attention = AttentionMode::Uniform;
        spec.biases = false;
        let mut p = ModelParams::init(&spec, 0).unwrap();
        let n = layout.vocab_size();
        p.set(TensorId::Embedding, opt.embedding.clone()).unwrap();
        p.set(TensorId::Value, Array2::eye(n)).unwrap();
        p.set(TensorId::PredBias, opt.b_pred.clone().insert_axis(Axis(1))).unwrap();
        let subsets = enumerate_topic_subsets(t, tau, DEFAULT_SUBSET_CAP).unwrap();
        let (_, g) = population_objective(&p, &subsets, &m, LossKind::Squared).unwrap();
        prop_assert!(max_abs(g.get(TensorId::Embedding).unwrap()) < 1e-10);
        prop_assert!(max_abs(g.get(TensorId::PredBias).unwrap()) < 1e-10);
    }
}

#[test]
fn fully_frozen_model_has_no_gradients() {
    let mut inst = small_instance(0);
    for id in TensorId::ALL {
        if !inst.params.is_pinned(id) {
            inst.params.set_frozen(id, true).unwrap();
        }
    }
    for kind in [LossKind::Squared, LossKind::CrossEntropy] {
        let (_, g) = document_loss(&inst.params, &inst.doc, &LossConfig::new(kind)).unwrap();
        assert!(TensorId::ALL.iter().all(|&id| g.get(id).is_none()));
    }
}
