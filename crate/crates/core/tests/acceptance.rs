//! Acceptance suite: one test per criterion, each printing a PASS/FAIL
//! line. Tolerances live with the criterion implementations in
//! `hybridlm_core::verify`.

use hybridlm_core::verify::*;

fn check(report: CriterionReport) {
    println!("{}", report.line());
    assert!(report.pass, "{}", report.details);
}

#[test]
fn acceptance_01_ssm_oracle_equivalence() {
    check(criterion_1_ssm_oracle());
}

#[test]
fn acceptance_02_reset_isolation() {
    check(criterion_2_reset_isolation());
}

#[test]
fn acceptance_03_gradient_suite() {
    check(criterion_3_gradient_suite());
}

#[test]
fn acceptance_04_mup_symmetry() {
    check(criterion_4_symmetry());
}

#[test]
fn acceptance_05_mup_coordinate_check() {
    check(criterion_5_coordinate_check());
}

#[test]
fn acceptance_06_toy_model() {
    check(criterion_6_toy_model());
}

#[test]
fn acceptance_07_schedules() {
    check(criterion_7_schedules());
}

#[test]
fn acceptance_08_tuner() {
    check(criterion_8_tuner());
}

#[test]
fn acceptance_09_stability_lab() {
    check(criterion_9_stability());
}

#[test]
fn acceptance_10_harness_determinism() {
    check(criterion_10_harness());
}
