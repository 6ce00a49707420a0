use odeslab::verify::{run_criterion, CRITERIA};

fn check(name: &'static str) {
    let outcome = run_criterion(name, 0);
    println!("{}", outcome.line());
    assert!(outcome.passed, "{}", outcome.line());
}

#[test]
fn theorem1_orders() {
    check("theorem1_orders");
}

#[test]
fn theorem2_lower_bound() {
    check("theorem2_lower_bound");
}

#[test]
fn theorem3_cancellation() {
    check("theorem3_cancellation");
}

#[test]
fn theorem4_tracking() {
    check("theorem4_tracking");
}

#[test]
fn oracle_equivalence() {
    check("oracle_equivalence");
}

#[test]
fn structural_identities() {
    check("structural_identities");
}

#[test]
fn grid_subsample_rule() {
    check("grid_subsample_rule");
}

#[test]
fn determinism() {
    check("determinism");
}

#[test]
fn suite_names_are_covered_once() {
    let mut names = CRITERIA.to_vec();
    names.sort();
    names.dedup();
    assert_eq!(names.len(), CRITERIA.len());
}
