use std::sync::atomic::Ordering;

use odeslab::solvers::phi::FAULT_NEGATE_FOLDED_PHI1;
use odeslab::verify::run_criterion;

#[test]
fn negated_phi1_fails_orders_with_named_culprit() {
    FAULT_NEGATE_FOLDED_PHI1.store(true, Ordering::SeqCst);
    let outcome = run_criterion("theorem1_orders", 0);
    FAULT_NEGATE_FOLDED_PHI1.store(false, Ordering::SeqCst);
    println!("{}", outcome.line());
    assert!(!outcome.passed);
    let culprit = outcome.culprit.expect("culprit named");
    assert!(culprit.starts_with("ode-solver-2"), "{culprit}");
    let clean = run_criterion("theorem1_orders", 0);
    assert!(clean.passed, "{}", clean.line());
}
