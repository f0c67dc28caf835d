mod common;

use common::op_cases::all_cases;
use hetgnn_pretrain::numerics::{grad_check, GradCheckOptions};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn check_all(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for case in all_cases(&mut rng) {
        let report = grad_check(&case.params, &case.f, GradCheckOptions::default());
        if !report.passed() {
            return Err(format!("{}: max rel err {:.3e}", case.name, report.max_rel_err()));
        }
    }
    Ok(())
}

#[test]
fn every_op_passes_at_fixed_seed() {
    check_all(7).unwrap();
}

#[test]
fn case_table_covers_every_op() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let names: Vec<_> = all_cases(&mut rng).iter().map(|c| c.name).collect();
    assert_eq!(names.len(), 23);
    let mut dedup = names.clone();
    dedup.sort();
    dedup.dedup();
    assert_eq!(dedup.len(), names.len());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn every_op_passes_at_random_inputs(seed in any::<u64>()) {
        prop_assert!(check_all(seed).is_ok(), "{:?}", check_all(seed));
    }
}
