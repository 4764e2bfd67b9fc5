mod support;

use std::collections::BTreeSet;

use igt_core::corpus::{self, StopwordList};
use igt_core::decode::{self, DomainLexicons};
use igt_core::experiment;
use igt_core::gate::{self, GateConfig};
use igt_core::model::Trainable;
use igt_core::objective::{self, LossWeights};
use igt_core::tensor::{log_sum_exp, softmax, Tape, Tensor};
use igt_core::xray;
use proptest::prelude::*;

fn specials_only() -> StopwordList {
    StopwordList {
        ids: BTreeSet::from([0, 1, 2]),
        n: 0,
    }
}

fn idea_loss(z_idea: &[f32], tokens: &[u32], v: usize, window: usize) -> f32 {
    let targets = objective::build_targets(tokens, window, v).unwrap();
    let mut tape = Tape::new();
    let zt = tape.constant(Tensor::zeros(&[1, v]));
    let zi = tape.constant(Tensor::matrix(1, v, z_idea.to_vec()).unwrap());
    let l = objective::total_loss(&mut tape, zt, Some(zi), &tokens[1..2], &targets[..1], &specials_only(), LossWeights::default())
        .unwrap();
    tape.value(l.idea.unwrap()).item()
}

fn token_loss(z_token: &[f32], z_idea: &[f32], alpha: f32, target: u32) -> f32 {
    let v = z_token.len();
    let mut tape = Tape::new();
    let zt = tape.constant(Tensor::matrix(1, v, z_token.to_vec()).unwrap());
    let zi = tape.constant(Tensor::matrix(1, v, z_idea.to_vec()).unwrap());
    let g = gate::compute_gate(&mut tape, zi, alpha, &GateConfig::default()).unwrap();
    let zf = gate::fuse(&mut tape, zt, g).unwrap();
    let l = objective::total_loss(&mut tape, zf, None, &[target], &[], &specials_only(), LossWeights { lambda: 0.0 }).unwrap();
    tape.value(l.token).item()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn softmax_normalizes_and_lse_is_finite(z in prop::collection::vec(-1e4f32..1e4, 1..64)) {
        let p = softmax(&z);
        let total: f64 = p.iter().map(|&x| x as f64).sum();
        prop_assert!((total - 1.0).abs() < 1e-5);
        prop_assert!(log_sum_exp(&z).is_finite());
    }

    #[test]
    fn fused_minus_token_stays_in_band(
        zt in prop::collection::vec(-20.0f32..20.0, 16),
        zi in prop::collection::vec(-30.0f32..30.0, 16),
        alpha in 0.0f32..2.0,
    ) {
        let cfg = GateConfig::default();
        let fused = gate::fused_logits(&zt, &zi, alpha, &cfg).unwrap();
        let hi = alpha * (1.0 + cfg.epsilon).ln();
        for (f, t) in fused.iter().zip(&zt) {
            let d = f - t;
            prop_assert!(d >= cfg.beta - 1e-5 && d <= hi + 1e-5, "{d}");
        }
    }

    #[test]
    fn repetition_penalty_keeps_signs(
        z in prop::collection::vec(-50.0f32..50.0, 1..40),
        seen in prop::collection::btree_set(0u32..40, 0..20),
        rho in 1.0f32..5.0,
    ) {
        let mut out = z.clone();
        decode::apply_repetition_penalty(&mut out, &seen, rho);
        for (i, (a, b)) in z.iter().zip(&out).enumerate() {
            prop_assert_eq!(a.signum(), b.signum());
            if !seen.contains(&(i as u32)) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            } else {
                prop_assert!(b.abs() <= a.abs() || *a <= 0.0);
            }
        }
    }

    #[test]
    fn idea_loss_ignores_order_within_window(
        z in prop::collection::vec(-5.0f32..5.0, 12),
        mut window in prop::collection::vec(3u32..12, 4),
        seed in any::<u64>(),
    ) {
        let head = 1u32;
        let original: Vec<u32> = std::iter::once(head).chain(window.iter().copied()).collect();
        let a = idea_loss(&z, &original, 12, 4);
        use rand::{seq::SliceRandom, SeedableRng};
        window.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let permuted: Vec<u32> = std::iter::once(head).chain(window.iter().copied()).collect();
        prop_assert_eq!(a.to_bits(), idea_loss(&z, &permuted, 12, 4).to_bits());
    }

    #[test]
    fn losses_are_finite(
        zt in prop::collection::vec(-1e4f32..1e4, 24),
        zi in prop::collection::vec(-1e4f32..1e4, 24),
        tokens in prop::collection::vec(0u32..8, 4),
        lambda in 0.0f32..4.0,
    ) {
        let targets = objective::build_targets(&tokens, 2, 8).unwrap();
        let mut tape = Tape::new();
        let t = tape.constant(Tensor::matrix(3, 8, zt).unwrap());
        let i = tape.constant(Tensor::matrix(3, 8, zi).unwrap());
        let l = objective::total_loss(&mut tape, t, Some(i), &tokens[1..], &targets, &specials_only(), LossWeights { lambda })
            .unwrap();
        for v in [l.total, l.token, l.idea.unwrap()] {
            prop_assert!(tape.value(v).item().is_finite());
        }
    }

    #[test]
    fn xray_distributions_normalize_and_floor_is_never_boosted(
        zt in prop::collection::vec(-8.0f32..8.0, 24),
        zi in prop::collection::vec(-15.0f32..15.0, 24),
        alpha in 0.05f32..1.0,
    ) {
        let cfg = GateConfig::default();
        let g = gate::gate_values(&zi, alpha, &cfg).unwrap();
        let rows = xray::compare(&zt, &g);
        let (sb, sg) = rows.iter().fold((0.0, 0.0), |(a, b), r| (a + r.0, b + r.1));
        prop_assert!((sb - 1.0).abs() < 1e-5 && (sg - 1.0).abs() < 1e-5);
        let open = g.iter().any(|&x| x > cfg.beta + 0.1);
        for (r, &gv) in rows.iter().zip(&g) {
            if gv == cfg.beta && open {
                prop_assert!(r.2 < 0.0, "clamped token boosted: {:?}", r);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn logits_never_see_the_future(
        prefix in prop::collection::vec(0u32..16, 1..5),
        a in prop::collection::vec(0u32..16, 1..4),
        b in prop::collection::vec(0u32..16, 1..4),
    ) {
        let m = support::tiny_model().0;
        let x: Vec<u32> = prefix.iter().chain(&a).copied().collect();
        let y: Vec<u32> = prefix.iter().chain(&b).copied().collect();
        let (tx, ix) = m.logits(&x).unwrap();
        let (ty, iy) = m.logits(&y).unwrap();
        let (ix, iy) = (ix.unwrap(), iy.unwrap());
        for t in 0..prefix.len() {
            prop_assert_eq!(tx.row(t), ty.row(t));
            prop_assert_eq!(ix.row(t), iy.row(t));
        }
    }

    #[test]
    fn tape_is_deterministic(seed in 0u64..1000) {
        let (model, windows) = support::tiny_model_with_seed(seed);
        let refs: Vec<&[u32]> = windows.iter().map(Vec::as_slice).collect();
        let stop = specials_only();
        let cfg = GateConfig::default();
        let spec = igt_core::train::StepSpec {
            trainable: Trainable { backbone: true, token_head: true, lora: true, idea: true },
            gate: Some((0.5, &cfg)),
            lambda: 1.0,
            window: 3,
            stopwords: &stop,
            detach_idea: false,
        };
        let a = igt_core::train::compute_step(&model, &refs, &spec).unwrap();
        let b = igt_core::train::compute_step(&model, &refs, &spec).unwrap();
        prop_assert_eq!(a.l_total.to_bits(), b.l_total.to_bits());
        for ((na, ga), (nb, gb)) in a.grads.iter().zip(&b.grads) {
            prop_assert_eq!(na, nb);
            prop_assert!(ga.iter().zip(gb).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn classification_is_pure(
        ids in prop::collection::vec(0u32..40, 0..60),
        m in 1usize..30,
        domain in 0usize..2,
    ) {
        let spec = experiment::bridge_corpus_spec();
        let vocab = igt_core::corpus::Vocab::from_words(spec.all_words(), 512).unwrap();
        let ids: Vec<u32> = ids.into_iter().map(|i| i % vocab.len() as u32).collect();
        let lex = DomainLexicons::new(&spec, &vocab);
        let lex2 = DomainLexicons::new(&spec, &vocab);
        let a = decode::classify(&ids, domain, &lex, m);
        prop_assert_eq!(&a, &decode::classify(&ids, domain, &lex2, m));
        prop_assert!(a.counts.iter().sum::<usize>() <= m);
    }

    #[test]
    fn corpus_is_a_pure_function_of_spec(seed in any::<u64>(), n in 1usize..40) {
        let mut spec = experiment::bridge_corpus_spec();
        spec.seed = seed;
        spec.doc_count = n;
        let a = corpus::generate_corpus(&spec).unwrap();
        prop_assert_eq!(&a, &corpus::generate_corpus(&spec).unwrap());
        for d in &a {
            prop_assert_eq!(d.words.len(), spec.doc_length - 1);
            let lex = &spec.domains[d.domain].lexicon;
            for w in &d.words {
                prop_assert!(lex.contains(w) || spec.glue_words.contains(w), "{w} outside domain {}", d.domain);
            }
        }
    }
}

#[test]
fn idea_logits_reach_token_loss_only_when_gated() {
    let zt: Vec<f32> = (0..6).map(|i| 0.3 * i as f32 - 0.7).collect();
    let zi = vec![-4.0, 1.0, -0.5, 2.0, -6.0, 0.0];
    let mut bumped = zi.clone();
    bumped[3] -= 3.0;
    assert_eq!(token_loss(&zt, &zi, 0.0, 3).to_bits(), token_loss(&zt, &bumped, 0.0, 3).to_bits());
    assert!((token_loss(&zt, &zi, 0.5, 3) - token_loss(&zt, &bumped, 0.5, 3)).abs() > 1e-3);
}
