//! Reverse-mode gradients against central finite differences.

mod common;

use common::{gradcheck, rng, GradProblem};
use fcdd::loss::LossMode;

const TOL32: f64 = 1e-3;
const TOL64: f64 = 1e-6;
const FLOOR: f64 = 1e-3;

fn check(mode: LossMode, cases: u64) {
    for case in 0..cases {
        let mut r = rng(1000 + case);
        let p = GradProblem::random(&mut r);
        let (s32, s64) = gradcheck(&p, case, mode, TOL32, TOL64, FLOOR);
        eprintln!("{mode:?} case {case}: f32 {s32:?} f64 {s64:?}");
        assert!(s32.checked > 0);
        assert_eq!(s64.failed, 0, "f64 gradient mismatch in case {case}: {s64:?}\n{}", p.spec.to_text());
        assert_eq!(s32.failed, 0, "f32 gradient mismatch in case {case}: {s32:?}\n{}", p.spec.to_text());
    }
}

#[test]
fn hsc_gradients() {
    check(LossMode::Hsc, 24);
}

#[test]
fn fcdd_gradients() {
    check(LossMode::Fcdd, 24);
}

#[test]
fn pixel_gradients() {
    check(LossMode::FcddPixel, 24);
}
