use lava_core::autograd::inject_backward_fault;
use lava_core::gradcheck::{case_for, run, run_cases, TOLERANCE};
use lava_core::OpKind;

#[test]
fn every_case_passes_at_two_seeds() {
    for seed in [0, 17] {
        let r = run(seed).unwrap();
        assert!(r.passed, "seed {seed}: {:?}", r.failures());
        assert!(r.ops.iter().all(|o| o.worst_rel_err < TOLERANCE && o.instances == 20));
    }
}

#[test]
fn an_injected_fault_is_caught_and_named() {
    for kind in OpKind::ALL {
        let Some(case) = case_for(kind) else { continue };
        inject_backward_fault(Some(kind));
        let r = run_cases(0, 3, &[case]);
        inject_backward_fault(None);
        let r = r.unwrap();
        assert!(!r.passed, "fault in {} went unnoticed", kind.name());
        assert_eq!(r.failures(), vec![case]);
    }
}

#[test]
fn a_fault_in_a_primitive_shows_up_in_composite_cases() {
    inject_backward_fault(Some(OpKind::SoftmaxRows));
    let r = run_cases(0, 3, &["multi_head_attention", "linear"]);
    inject_backward_fault(None);
    assert_eq!(r.unwrap().failures(), vec!["multi_head_attention"]);
}

#[test]
fn unknown_case_is_rejected() {
    let e = run_cases(0, 1, &["no_such_op"]).unwrap_err();
    assert_eq!(e.exit_code(), 2, "{e}");
}

#[test]
fn selection_does_not_change_results() {
    let all = run_cases(3, 4, &[]).unwrap();
    let one = run_cases(3, 4, &["layer_norm"]).unwrap();
    let from_all = all.ops.iter().find(|o| o.op == "layer_norm").unwrap();
    assert_eq!(from_all, &one.ops[0]);
}
