use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use visprompt_core::pipeline::*;
use visprompt_core::tensor::Mat;
use visprompt_core::Error;

fn dims() -> ModelDims {
    ModelDims {
        d: 8,
        d_v: 6,
        d_s: 5,
        n_ctx: 3,
        heads: 2,
        d_ff: 16,
        classes: 4,
    }
}

fn visual(seed: u64) -> Mat {
    Mat::randn(5, 6, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn setup(seed: u64, mode: ContextMode) -> (Trainable, FrozenEncoders) {
    let model = Trainable::random(&dims(), mode, seed).unwrap();
    let enc = FrozenEncoders::random(&dims(), 0.5, seed + 100).unwrap();
    (model, enc)
}

#[test]
fn no_vision_ignores_visual_tokens_in_text_features() {
    let (model, enc) = setup(1, ContextMode::ClassShared);
    let a = model.forward(&visual(1), &enc, Variant::NoVision).unwrap();
    let b = model.forward(&visual(2), &enc, Variant::NoVision).unwrap();
    assert_eq!(a.text_feats, b.text_feats);
    assert_eq!(a.primary().c_hat, b.primary().c_hat);
    assert_eq!(&a.primary().c_hat, &model.context.tokens[0]);
    assert!(a.primary().a.is_none());
}

#[test]
fn closed_injections_reduce_full_to_no_vision() {
    for mode in [ContextMode::ClassShared, ContextMode::ClassSpecific] {
        let (mut model, enc) = setup(3, mode);
        let film = &mut model.params.film;
        film.w_gamma = Mat::zeros(8, 8);
        film.b_gamma = Mat::zeros(1, 8);
        film.w_beta = Mat::zeros(8, 8);
        film.b_beta = Mat::zeros(1, 8);
        film.b_gate = Mat::filled(1, 8, -1e4);
        model.params.ffn.w2 = Mat::zeros(16, 8);
        model.params.ffn.b2 = Mat::zeros(1, 8);
        let v = visual(3);
        let full = model.forward(&v, &enc, Variant::Full).unwrap();
        let base = model.forward(&v, &enc, Variant::NoVision).unwrap();
        for (p, q) in full.probs.iter().zip(&base.probs) {
            assert!((p - q).abs() < 1e-12);
        }
    }
}

#[test]
fn probabilities_sum_to_one_for_every_variant() {
    let (model, enc) = setup(4, ContextMode::ClassShared);
    for variant in Variant::ALL {
        let out = model.forward(&visual(4), &enc, variant).unwrap();
        let total: f64 = out.probs.iter().sum();
        assert!((total - 1.0).abs() < 1e-10);
        assert!(out.probs.iter().all(|&p| p > 0.0));
        let n: f64 = out.image_feat.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-12);
    }
}

#[test]
fn forward_is_deterministic() {
    for variant in Variant::ALL {
        let (m1, e1) = setup(5, ContextMode::ClassSpecific);
        let (m2, e2) = setup(5, ContextMode::ClassSpecific);
        let a = m1.forward(&visual(5), &e1, variant).unwrap();
        let b = m2.forward(&visual(5), &e2, variant).unwrap();
        assert_eq!(a.probs, b.probs);
        assert_eq!(a.branches, b.branches);
    }
}

#[test]
fn zero_upstream_gives_zero_gradients() {
    let (model, enc) = setup(6, ContextMode::ClassShared);
    let out = model.forward(&visual(6), &enc, Variant::Full).unwrap();
    let g = model.backward(&enc, &out, &[0.0; 4]).unwrap();
    assert!(g.tensors().iter().all(|(_, _, t)| t.max_abs() == 0.0));
}

#[test]
fn backward_needs_cache() {
    let (model, enc) = setup(7, ContextMode::ClassShared);
    let out = model.forward(&visual(7), &enc, Variant::Full).unwrap().without_cache();
    assert!(matches!(model.backward(&enc, &out, &[0.0; 4]), Err(Error::MissingCache)));
}

#[test]
fn training_init_keeps_gate_nearly_closed() {
    let model = Trainable::init(&dims(), ContextMode::ClassShared, 0).unwrap();
    let enc = FrozenEncoders::random(&dims(), 0.5, 0).unwrap();
    let out = model.forward(&visual(8), &enc, Variant::Full).unwrap();
    let gate = out.primary().gate.as_ref().unwrap();
    assert!(gate.as_slice().iter().all(|&g| g > 0.0 && g < 0.05));
}

#[test]
fn group_inventory_matches_named_modules() {
    let model = Trainable::init(&dims(), ContextMode::ClassShared, 0).unwrap();
    let groups: Vec<&str> = model.group_counts().iter().map(|g| g.0).collect();
    assert_eq!(groups, TRAINABLE_GROUPS);
    let total: usize = model.group_counts().iter().map(|g| g.1).sum();
    assert_eq!(total, model.parameter_count());
    let (d, d_v, d_ff) = (8, 6, 16);
    let expected = 3 * d + d_v * d + 4 * d * d + 2 * (d * d + d) + (d * d + d) + (d * d_ff + d_ff + d_ff * d + d);
    assert_eq!(model.parameter_count(), expected);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn gate_entries_stay_inside_unit_interval(seed in 0u64..1000, scale in 0.1f64..50.0) {
        let (model, enc) = setup(seed, ContextMode::ClassShared);
        let v = visual(seed).scale(scale);
        let out = model.forward(&v, &enc, Variant::Full).unwrap();
        let gate = out.primary().gate.as_ref().unwrap();
        prop_assert!(gate.as_slice().iter().all(|&g| (0.0..=1.0).contains(&g)));
    }

    #[test]
    fn shifting_logits_leaves_probabilities_unchanged(seed in 0u64..1000, shift in -50.0f64..50.0) {
        let (model, enc) = setup(seed, ContextMode::ClassShared);
        let out = model.forward(&visual(seed), &enc, Variant::Full).unwrap();
        let shifted: Vec<f64> = out.logits.iter().map(|l| l + shift).collect();
        let p = visprompt_core::tensor::softmax(&shifted);
        for (a, b) in p.iter().zip(&out.probs) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
