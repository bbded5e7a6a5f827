use rtta_core::audit::{audit_composite_losses, audit_primitives, AUDIT_TOLERANCE, PRIMITIVES};

#[test]
fn every_primitive_matches_central_differences() {
    let lines = audit_primitives(100, 2024).unwrap();
    assert_eq!(lines.len(), PRIMITIVES.len());
    for l in &lines {
        assert_eq!(l.cases, 100);
        assert!(l.max_rel_error < AUDIT_TOLERANCE, "{} rel err {:e}", l.name, l.max_rel_error);
    }
}

#[test]
fn every_composite_loss_matches_central_differences() {
    let lines = audit_composite_losses(100, 2025).unwrap();
    assert_eq!(lines.len(), 4);
    for l in &lines {
        assert!(l.max_rel_error < AUDIT_TOLERANCE, "{} rel err {:e}", l.name, l.max_rel_error);
    }
}
