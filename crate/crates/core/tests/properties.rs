//! Property tests for the invariants that hold for any input.

mod common;

use ndarray::Array1;
use proptest::collection::{btree_set, vec};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::OneHot;
use spm_core::concept::{anchor_weight, WordTokenizer};
use spm_core::diffusion::standard_normal;
use spm_core::gating::{gate, token_similarity};
use spm_core::toy::denoiser::{DenoiserConfig, ToyDenoiser};
use spm_core::trainer::anchoring_loss;
use spm_core::{
    compose, TextEncoder, inject, permeability, AnchorPool, Applied, ConceptEncoding, GateConfig, LayerShape, Membrane, ModelSignature, NoisePredictor,
    NoiseSchedule,
};

const WORDS: [&str; 12] = ["w0", "w1", "w2", "w3", "w4", "w5", "w6", "w7", "w8", "w9", "w10", "w11"];

fn words(ix: &[usize]) -> String {
    ix.iter().map(|&i| WORDS[i]).collect::<Vec<_>>().join(" ")
}

fn with_targets(targets: &[String]) -> Membrane {
    let mut m = inject(&ModelSignature::new(vec![LayerShape::new("l", 2, 2, 1)]), 1, 0).unwrap();
    m.name = "m".into();
    m.targets = targets.to_vec();
    m
}

fn small_denoiser(seed: u64, cond_dim: usize) -> ToyDenoiser {
    ToyDenoiser::new(DenoiserConfig { channels: 3, hidden: 10, cond_dim }, NoiseSchedule::linear(20, 1e-2, 0.3), seed)
}

fn perturbed(model: &ToyDenoiser, d: usize, seed: u64, scale: f64) -> Membrane {
    let mut m = inject(&model.signature(), d, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(7));
    let p: Vec<f64> = m.parameters().iter().map(|v| v + scale * rng.random_range(-1.0..1.0)).collect();
    m.set_parameters(&p).unwrap();
    m
}

fn unit_vec(dim: usize) -> impl Strategy<Value = Array1<f64>> {
    vec(-1.0f64..1.0, dim)
        .prop_filter("non-degenerate", |v| v.iter().map(|x| x * x).sum::<f64>() > 1e-3)
        .prop_map(Array1::from)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fresh_membranes_leave_outputs_unchanged(seed in any::<u64>(), d in 1usize..5, batch in 1usize..4, gamma in 0.0f64..4.0) {
        let model = small_denoiser(seed % 97, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = standard_normal(batch, model.sample_width(), &mut rng);
        let cond = standard_normal(batch, 5, &mut rng);
        let t: Vec<usize> = (0..batch).map(|_| rng.random_range(1..=20)).collect();
        let m = inject(&model.signature(), d, seed).unwrap();
        let frozen = model.predict(&x, &cond, &t, &[]).unwrap();
        let with = model.predict(&x, &cond, &t, &[Applied::new(&m, gamma)]).unwrap();
        prop_assert_eq!(frozen, with);
    }

    #[test]
    fn permeability_is_a_unit_interval_score(concept in btree_set(0usize..12, 1..4), prompt in vec(0usize..12, 0..8)) {
        let enc = OneHot::new(WORDS);
        let c: Vec<usize> = concept.into_iter().collect();
        let r = permeability(&with_targets(&[words(&c)]), &words(&prompt), &WordTokenizer, &enc);
        // an empty prompt has no encoding in this space
        if prompt.is_empty() {
            prop_assert!(r.is_err());
        } else {
            let r = r.unwrap();
            prop_assert!((0.0..=1.0).contains(&r.gamma));
            let g = &r.targets[0];
            prop_assert_eq!(r.gamma, g.s_f.max(g.s_t));
        }
    }

    #[test]
    fn containing_every_concept_token_opens_fully(
        concept in btree_set(0usize..12, 1..4),
        extra in vec(0usize..12, 0..6),
        seed in any::<u64>(),
    ) {
        let enc = OneHot::new(WORDS);
        let c: Vec<usize> = concept.into_iter().collect();
        let mut prompt: Vec<usize> = extra.iter().chain(c.iter()).copied().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in (1..prompt.len()).rev() {
            prompt.swap(i, rng.random_range(0..=i));
        }
        let r = permeability(&with_targets(&[words(&c)]), &words(&prompt), &WordTokenizer, &enc).unwrap();
        prop_assert_eq!(r.targets[0].s_t, 1.0);
        prop_assert_eq!(r.gamma, 1.0);
    }

    #[test]
    fn token_score_grows_with_overlap(concept in btree_set(0usize..12, 2..6), filler in vec(0usize..12, 0..4)) {
        let c: Vec<usize> = concept.iter().copied().collect();
        let filler: Vec<usize> = filler.into_iter().filter(|w| !concept.contains(w)).collect();
        let mut last = -1.0;
        for k in 0..=c.len() {
            let prompt: Vec<usize> = filler.iter().chain(c[..k].iter()).copied().collect();
            let s = token_similarity(&words(&c), &words(&prompt), &WordTokenizer).unwrap();
            prop_assert_eq!(s, k as f64 / c.len() as f64);
            prop_assert!(s > last);
            last = s;
        }
    }

    #[test]
    fn closed_gate_contributes_nothing(seed in any::<u64>(), batch in 1usize..4) {
        // four words on four axes: the membrane targets two, the prompt uses the others
        let enc = OneHot::new(["w0 w1 w2 w3"]);
        let model = small_denoiser(seed % 31, 4);
        let mut m = perturbed(&model, 2, seed, 0.5);
        m.targets = vec!["w0 w1".into()];
        let h = compose(vec![m], &model, &enc, GateConfig::default()).unwrap();
        prop_assert_eq!(h.gates("w2 w3").unwrap()[0].gamma, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = standard_normal(batch, model.sample_width(), &mut rng);
        let t: Vec<usize> = (0..batch).map(|_| rng.random_range(1..=20)).collect();
        let prompts = vec!["w2 w3"; batch];
        let row = enc.encode("w2 w3").unwrap().vector;
        let cond = ndarray::Array2::from_shape_fn((batch, 4), |(_, j)| row[j]);
        let frozen = model.predict(&x, &cond, &t, &[]).unwrap();
        prop_assert_eq!(h.predict(&x, &prompts, &t).unwrap(), frozen);
    }

    #[test]
    fn bypassed_gating_uses_the_scale_exactly(prompt in vec(0usize..12, 1..6), scale in 0.0f64..4.0) {
        let enc = OneHot::new(WORDS);
        let cfg = GateConfig { gamma_scale: scale, facilitated_transport: false, ..GateConfig::default() };
        let r = gate(&with_targets(&["w0 w1".into()]), &words(&prompt), &WordTokenizer, &enc, &cfg).unwrap();
        prop_assert_eq!(r.gamma_scaled, scale);
    }

    #[test]
    fn anchor_weight_ignores_encoding_sign(c in unit_vec(6), t in unit_vec(6), alpha in 0.0f64..4.0) {
        let ce = ConceptEncoding::new("c", c.clone());
        let neg = ConceptEncoding::new("-c", -c);
        let te = ConceptEncoding::new("t", t.clone());
        let a = anchor_weight(&ce, &te, alpha).unwrap();
        prop_assert_eq!(a, anchor_weight(&neg, &te, alpha).unwrap());
        prop_assert_eq!(a, anchor_weight(&ce, &ConceptEncoding::new("-t", -t), alpha).unwrap());
    }

    #[test]
    fn zero_alpha_is_uniform_over_non_parallel(cands in vec(unit_vec(4), 1..8), t in unit_vec(4)) {
        let target = ConceptEncoding::new("t", t);
        let mut encs: Vec<ConceptEncoding> = cands.into_iter().map(|v| ConceptEncoding::new("c", v)).collect();
        encs.push(ConceptEncoding::new("t2", target.vector.clone() * 2.0));
        let pool = AnchorPool::from_encodings(encs, &target, 0.0).unwrap();
        let w = pool.weights();
        prop_assert_eq!(*w.last().unwrap(), 0.0);
        for &wi in &w[..w.len() - 1] {
            // only exact parallels drop out
            prop_assert!(wi == 1.0 || wi == 0.0);
        }
    }

    #[test]
    fn larger_alpha_favours_orthogonal_candidates(x in 0.05f64..0.95, a1 in 0.0f64..3.0, step in 0.1f64..2.0) {
        // target on the first axis, one orthogonal candidate, one at cosine x
        let target = ConceptEncoding::new("t", Array1::from(vec![1.0, 0.0, 0.0]));
        let ortho = ConceptEncoding::new("o", Array1::from(vec![0.0, 0.0, 1.0]));
        let near = ConceptEncoding::new("n", Array1::from(vec![x, (1.0 - x * x).sqrt(), 0.0]));
        let rel = |alpha: f64| anchor_weight(&near, &target, alpha).unwrap() / anchor_weight(&ortho, &target, alpha).unwrap();
        prop_assert!(rel(a1 + step) < rel(a1));
    }

    #[test]
    fn anchoring_loss_is_non_negative(seed in any::<u64>(), scale in 0.0f64..1.0, n in 1usize..4) {
        let model = small_denoiser(seed % 13, 3);
        let m = perturbed(&model, 1, seed, scale);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = standard_normal(2, model.sample_width(), &mut rng);
        let anchors: Vec<ConceptEncoding> = (0..n)
            .map(|i| ConceptEncoding::new(format!("a{i}"), standard_normal(1, 3, &mut rng).row(0).to_owned()))
            .collect();
        let loss = anchoring_loss(&model, &m, &x, &[3, 17], &anchors).unwrap().value;
        prop_assert!(loss >= 0.0);
        let fresh = inject(&model.signature(), 1, seed).unwrap();
        prop_assert_eq!(anchoring_loss(&model, &fresh, &x, &[3, 17], &anchors).unwrap().value, 0.0);
    }
}
