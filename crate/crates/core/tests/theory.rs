use visprompt_core::theory::{run_theory_suite, TheorySuiteConfig};

#[test]
fn default_suite_passes() {
    let report = run_theory_suite(&TheorySuiteConfig::default()).unwrap();
    for p in report.delta_trend.iter().chain(&report.eps_trend) {
        println!("{:>5} dev {:.6} delta {:.3}", p.value, p.mean_deviation, p.mean_measured_delta);
    }
    println!(
        "mass {}/{} margin {}/{} of {} draws, L_mod {:.3} L_h {:.3}",
        report.mass_bound_violations,
        report.mass_bound_vectors,
        report.margin_preserved,
        report.margin_premise_held,
        report.margin_draws,
        report.mean_l_mod_hat,
        report.mean_l_h_hat
    );
    assert!(report.mass_bound_pass);
    assert!(report.delta_trend_pass);
    assert!(report.eps_trend_pass);
    assert_eq!(report.margin_premise_held, 200);
    assert!(report.margin_pass);
    assert!(report.pass);
}
