mod common;

use std::time::Instant;

#[test]
fn every_layer_matches_finite_differences() {
    let t = Instant::now();
    for (name, r) in common::layer_checks() {
        assert!(r.checked > 0, "{name}");
        assert!(r.max_rel_error < 1e-4, "{name}: {} at {}", r.max_rel_error, r.worst);
    }
    eprintln!("layer checks: {:?}", t.elapsed());
}

#[test]
fn fusion_stack_matches_finite_differences() {
    for (name, r) in common::fusion_stack_checks() {
        assert!(r.max_rel_error < 1e-4, "{name}: {} at {}", r.max_rel_error, r.worst);
    }
}

#[test]
fn kl_loss_matches_finite_differences() {
    let r = common::kl_check();
    assert!(r.max_rel_error < 1e-4, "{} at {}", r.max_rel_error, r.worst);
}

#[test]
fn mini_model_matches_finite_differences() {
    let t = Instant::now();
    let r = common::mini_model_check();
    assert!(r.max_rel_error < 1e-3, "{} at {}", r.max_rel_error, r.worst);
    eprintln!("model check: {} probes, {:?}", r.checked, t.elapsed());
}
