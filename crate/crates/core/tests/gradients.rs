//! Finite-difference gradient checks at 64-bit for the network ops and
//! every loss.

mod common;

use common::gradcases::{CASES, TOL, TRIALS};

fn check(name: &str) {
    let (_, case) = CASES.iter().find(|(n, _)| *n == name).expect("known case");
    for t in 0..TRIALS {
        let err = case(t);
        assert!(err < TOL, "{name} trial {t}: relative error {err:e}");
    }
}

#[test]
fn stm_gradients() {
    check("stm");
}

#[test]
fn soft_argmax_gradients() {
    check("soft_argmax");
}

#[test]
fn topology_gradients() {
    check("topology");
}

#[test]
fn ncc_gradients() {
    check("ncc");
}

#[test]
fn smooth_align_gradients() {
    check("smooth_align");
}

#[test]
fn surface_ce_gradients() {
    check("surface_ce");
}

#[test]
fn smooth_l1_gradients() {
    check("smooth_l1");
}

#[test]
fn smooth_surface_gradients() {
    check("smooth_surface");
}

#[test]
fn dice_ce_gradients() {
    check("dice_ce");
}
