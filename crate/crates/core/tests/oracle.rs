use proptest::prelude::*;
use steerlab::nn::Tensor;
use steerlab::oracle::{
    critical_gamma, flip_instance, linear_score, random_instance, snr, steered_action, verify_decoupling,
    LinearScorer, DOMINANCE_RATIO, TOLERANCE,
};

fn t(rows: usize, cols: usize, v: &[f64]) -> Tensor {
    Tensor::from_vec(&[rows, cols], v.to_vec()).unwrap()
}

#[test]
fn scalar_score_by_hand() {
    let s = LinearScorer::new(t(1, 1, &[5.0]), t(1, 1, &[0.5])).unwrap();
    assert_eq!(linear_score(&s, &[1.0], Some(&[1.0])).unwrap(), vec![5.5]);
    assert_eq!(linear_score(&s, &[1.0], Some(&[0.0])).unwrap(), vec![5.0]);
    assert_eq!(linear_score(&s, &[1.0], None).unwrap(), vec![5.0]);
}

#[test]
fn zero_matrices_give_zero_logits() {
    let s = LinearScorer::new(Tensor::zeros(&[3, 4]), Tensor::zeros(&[3, 4])).unwrap();
    assert_eq!(linear_score(&s, &[1.0; 4], Some(&[2.0; 4])).unwrap(), vec![0.0; 3]);
}

#[test]
fn mismatched_shapes_are_rejected() {
    assert!(LinearScorer::new(Tensor::zeros(&[3, 4]), Tensor::zeros(&[3, 5])).is_err());
    let s = LinearScorer::new(Tensor::zeros(&[3, 4]), Tensor::zeros(&[3, 4])).unwrap();
    assert!(linear_score(&s, &[1.0; 3], None).is_err());
}

#[test]
fn snr_by_hand() {
    let s = LinearScorer::new(t(1, 1, &[5.0]), t(1, 1, &[0.5])).unwrap();
    let base = snr(&s, &[1.0], &[1.0], 1.0).unwrap();
    assert!((base.snr_std[0].unwrap() - 0.1).abs() <= TOLERANCE);
    assert_eq!(base.snr_steered, base.snr_std);
    let steered = snr(&s, &[1.0], &[1.0], 3.0).unwrap();
    assert!((steered.snr_steered[0].unwrap() - 0.3).abs() <= TOLERANCE);
    let silent = snr(&s, &[1.0], &[0.0], 3.0).unwrap();
    assert_eq!(silent.snr_std[0], Some(0.0));
    assert_eq!(silent.snr_steered[0], Some(0.0));
}

#[test]
fn critical_gamma_by_hand() {
    // Two actions, d = 2. Visual margin of action 0 is 1.0, linguistic margin
    // of action 1 is 0.4, so the flip happens at 2.5.
    let s = LinearScorer::new(t(2, 2, &[1.0, 0.0, 0.0, 0.0]), t(2, 2, &[0.0, 0.0, 0.0, 0.4])).unwrap();
    let (phi, psi) = ([1.0, 0.0], [0.0, 1.0]);
    let g = critical_gamma(&s, &phi, &psi, 0, 1).unwrap().unwrap();
    assert!((g - 2.5).abs() <= TOLERANCE);
    for gamma in [0.0, 1.0, 2.0, 2.49] {
        assert_eq!(steered_action(&s, &phi, &psi, gamma).unwrap(), 0, "gamma {gamma}");
    }
    for gamma in [2.51, 3.0, 10.0] {
        assert_eq!(steered_action(&s, &phi, &psi, gamma).unwrap(), 1, "gamma {gamma}");
    }
}

#[test]
fn no_flip_when_language_agrees_with_vision() {
    let s = LinearScorer::new(t(2, 1, &[1.0, 0.0]), t(2, 1, &[0.4, 0.0])).unwrap();
    assert_eq!(critical_gamma(&s, &[1.0], &[1.0], 0, 1).unwrap(), None);
}

#[test]
fn zero_visual_margin_flips_immediately() {
    // Both actions tie visually; the tie-break picks action 0 as the
    // unconditional argmax.
    let s = LinearScorer::new(t(2, 1, &[1.0, 1.0]), t(2, 1, &[0.0, 0.4])).unwrap();
    assert_eq!(critical_gamma(&s, &[1.0], &[1.0], 0, 1).unwrap(), Some(0.0));
}

#[test]
fn critical_gamma_checks_its_preconditions() {
    let s = LinearScorer::new(t(2, 1, &[1.0, 0.0]), t(2, 1, &[0.0, 0.4])).unwrap();
    assert!(critical_gamma(&s, &[1.0], &[1.0], 1, 0).is_err());
    assert!(critical_gamma(&s, &[1.0], &[1.0], 0, 0).is_err());
    assert!(critical_gamma(&s, &[1.0], &[1.0], 0, 5).is_err());
}

#[test]
fn interaction_term_is_refused_by_decoupling() {
    let s = LinearScorer::with_interaction(t(1, 1, &[1.0]), t(1, 1, &[1.0]), t(1, 1, &[1.0])).unwrap();
    assert!(verify_decoupling(&s, &[1.0], &[1.0], 2.0).is_err());
}

#[test]
fn constructed_flip_instances_respect_the_ratio() {
    for seed in 0..20 {
        let inst = flip_instance(7, 8, DOMINANCE_RATIO, seed).unwrap();
        let g = critical_gamma(&inst.scorer, &inst.phi, &inst.psi, inst.action_visual, inst.action_lang)
            .unwrap()
            .unwrap();
        assert_eq!(steered_action(&inst.scorer, &inst.phi, &inst.psi, g - 0.01).unwrap(), inst.action_visual);
        assert_eq!(steered_action(&inst.scorer, &inst.phi, &inst.psi, g + 0.01).unwrap(), inst.action_lang);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn decoupling_holds_for_any_instance(seed in any::<u64>(), gamma in 0.0f64..8.0) {
        let (s, phi, psi) = random_instance(7, 8, DOMINANCE_RATIO, seed).unwrap();
        let d = verify_decoupling(&s, &phi, &psi, gamma).unwrap();
        prop_assert!(d.max_error() <= TOLERANCE);
    }

    #[test]
    fn zero_language_leaves_the_prior(seed in any::<u64>(), gamma in 0.0f64..8.0) {
        let (s, phi, _) = random_instance(7, 8, DOMINANCE_RATIO, seed).unwrap();
        let zero = vec![0.0; 8];
        prop_assert_eq!(
            steered_action(&s, &phi, &zero, gamma).unwrap(),
            steered_action(&s, &phi, &zero, 1.0).unwrap()
        );
        prop_assert_eq!(linear_score(&s, &phi, Some(&zero)).unwrap(), linear_score(&s, &phi, None).unwrap());
    }

    #[test]
    fn snr_scales_with_gamma(seed in any::<u64>(), gamma in 0.0f64..8.0) {
        let (s, phi, psi) = random_instance(7, 8, DOMINANCE_RATIO, seed).unwrap();
        prop_assert!(snr(&s, &phi, &psi, gamma).unwrap().scaling_error <= TOLERANCE);
    }
}
