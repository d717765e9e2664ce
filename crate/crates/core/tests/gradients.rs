use visprompt_core::gradcheck::{gradient_check, GradCheckConfig};
use visprompt_core::pipeline::{ContextMode, Variant};

const TOL: f64 = 1e-5;

fn check(variant: Variant, mode: ContextMode, seed: u64) {
    let report = gradient_check(&GradCheckConfig::small(variant, mode, seed)).unwrap();
    for t in &report.tensors {
        assert!(
            t.relative_error < TOL,
            "{variant} {mode:?} seed {seed}: {} relative error {:e}",
            t.name,
            t.relative_error
        );
    }
    assert!(report.loss.is_finite());
}

#[test]
fn shared_context_all_variants() {
    for variant in Variant::ALL {
        for seed in 0..5 {
            check(variant, ContextMode::ClassShared, seed);
        }
    }
}

#[test]
fn class_specific_context_all_variants() {
    for variant in Variant::ALL {
        check(variant, ContextMode::ClassSpecific, 11);
    }
}

#[test]
fn vision_tensors_carry_gradient_only_when_used() {
    let report =
        gradient_check(&GradCheckConfig::small(Variant::NoVision, ContextMode::ClassShared, 3))
            .unwrap();
    for t in &report.tensors {
        if t.group == "context" {
            assert!(t.analytic_norm > 0.0);
        } else {
            assert_eq!(t.analytic_norm, 0.0, "{}", t.name);
        }
    }
    let report =
        gradient_check(&GradCheckConfig::small(Variant::Full, ContextMode::ClassShared, 3))
            .unwrap();
    assert!(report.tensors.iter().all(|t| t.analytic_norm > 0.0));
}
