mod common;

use common::{grad_check_seed, mask_trial};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn backprop_matches_finite_differences() {
    for seed in 0..20 {
        let r = grad_check_seed(seed);
        assert!(r.failures.is_empty(), "seed {seed}: {:?}", r.failures);
        let share = r.checked as f64 / (r.checked + r.skipped) as f64;
        assert!(share >= 0.95, "seed {seed}: only {share:.3} of coordinates checked");
    }
}

#[test]
fn masked_forward_matches_zeroing_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for trial in 0..50 {
        if let Err(e) = mask_trial(&mut rng) {
            panic!("trial {trial}: {e}");
        }
    }
}

#[test]
fn empty_mask_equals_plain_forward() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..10 {
        let cfg = common::random_tiny_config(&mut rng);
        let model = dscore::Model::build(&cfg, 3).unwrap();
        let x = common::random_tensor(&mut rng, &cfg.input.with_batch(2).dims(), 0.0, 1.0);
        let empty = dscore::RegionMaskSet::empty(&model).unwrap();
        assert_eq!(model.logits(&x, Some(&empty)).unwrap(), model.logits(&x, None).unwrap());
    }
}

#[test]
fn gradient_check_coverage_report() {
    let (mut checked, mut skipped, mut worst) = (0, 0, 0.0f64);
    for seed in 0..20 {
        let r = grad_check_seed(seed);
        checked += r.checked;
        skipped += r.skipped;
        worst = worst.max(r.worst);
    }
    println!("checked {checked}, skipped {skipped}, worst relative error {worst:.2e}");
    assert!(worst < common::GRAD_REL_TOL);
}
