//! Run with `--features f64` for the tight tolerance.

mod common;

use common::gradcheck::{op, training_loss, Outcome, OPS, TOL};

fn assert_passed(name: &str, o: Outcome) {
    eprintln!("{name}: worst {:e}, {} checked, {} skipped", o.worst, o.checked, o.skipped);
    assert!(o.passed(), "{name}: {o:?} against tolerance {TOL:e}");
}

const ELEMENTWISE: [&str; 6] = ["add", "sub", "mul", "scale", "relu", "dropout"];
const REDUCTIONS: [&str; 7] = ["sum", "mean", "reshape", "gather", "center_on_anchors", "avg_pool2", "global_avg_pool"];
const LAYERS: [&str; 4] = ["sigmoid", "affine", "conv2d", "bce_with_logits"];

#[test]
fn elementwise_ops() {
    for name in ELEMENTWISE {
        let o = op(name);
        assert_eq!(o.skipped, 0, "{name}");
        assert_passed(name, o);
    }
}

#[test]
fn reductions_and_reshapes() {
    for name in REDUCTIONS {
        assert_passed(name, op(name));
    }
}

#[test]
fn layers_and_loss() {
    for name in LAYERS {
        assert_passed(name, op(name));
    }
}

#[test]
fn every_op_is_covered() {
    let mut tested: Vec<&str> = ELEMENTWISE.iter().chain(&REDUCTIONS).chain(&LAYERS).copied().collect();
    let mut all: Vec<&str> = OPS.iter().map(|(name, _)| *name).collect();
    tested.sort_unstable();
    all.sort_unstable();
    assert_eq!(tested, all);
}

#[test]
fn end_to_end_training_loss() {
    assert_passed("training loss", training_loss());
}
