//! Loss identities and monotonicity.

use fcdd::loss::{fcdd_loss, heatmap_a, hsc_loss, one_class_term, pixel_loss, pseudo_huber};
use fcdd::numerics::Tensor;
use proptest::prelude::*;

fn t(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data).unwrap()
}

#[test]
fn anchors() {
    let zeros = Tensor::<f64>::zeros(&[1, 1, 4, 4]);
    assert_eq!(fcdd_loss(&zeros, &[false]).unwrap(), 0.0);
    let ln2 = std::f64::consts::LN_2;
    let a = Tensor::full(&[1, 1, 3, 3], ln2);
    assert!((fcdd_loss(&a, &[true]).unwrap() - ln2).abs() < 1e-7);
    assert!((one_class_term(ln2, true) - ln2).abs() < 1e-12);
}

proptest! {
    #[test]
    fn single_pixel_fcdd_equals_hsc(phi in prop::collection::vec(-20.0f64..20.0, 1..8), seed in any::<u64>()) {
        let b = phi.len();
        let labels: Vec<bool> = (0..b).map(|i| (seed >> i) & 1 == 1).collect();
        let a = heatmap_a(&t(&[b, 1, 1, 1], phi.clone())).unwrap();
        let lhs = fcdd_loss(&a, &labels).unwrap();
        let rhs = hsc_loss(&t(&[b, 1], phi), &labels).unwrap();
        prop_assert_eq!(lhs, rhs);
    }

    #[test]
    fn nominal_increases_anomalous_decreases(d in 1e-5f64..50.0, step in 1e-3f64..5.0) {
        prop_assert!(one_class_term(d + step, false) > one_class_term(d, false));
        prop_assert!(one_class_term(d + step, true) < one_class_term(d, true));
        prop_assert!(one_class_term(d, true) >= 0.0);
    }

    #[test]
    fn pseudo_huber_is_nonnegative_and_below_the_norm(a in prop::collection::vec(-1e3f64..1e3, 1..16)) {
        let h = pseudo_huber(&a).unwrap();
        let norm = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assert!(h >= 0.0);
        prop_assert!(h <= norm + 1e-12);
        prop_assert!(h >= norm - 1.0 - 1e-12);
    }

    #[test]
    fn losses_are_nonnegative(a in prop::collection::vec(0.0f64..10.0, 16), mask in prop::collection::vec(any::<bool>(), 16)) {
        let heat = t(&[1, 1, 4, 4], a);
        let y = t(&[1, 1, 4, 4], mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect());
        prop_assert!(pixel_loss(&heat, &y).unwrap() >= 0.0);
        prop_assert!(fcdd_loss(&heat, &[true]).unwrap() >= 0.0);
        prop_assert!(fcdd_loss(&heat, &[false]).unwrap() >= 0.0);
    }

    #[test]
    fn nominal_pixel_loss_is_the_mean(a in prop::collection::vec(0.0f64..10.0, 16)) {
        let heat = t(&[1, 1, 4, 4], a.clone());
        let mean = a.iter().sum::<f64>() / 16.0;
        prop_assert!((pixel_loss(&heat, &Tensor::zeros(&[1, 1, 4, 4])).unwrap() - mean).abs() < 1e-12);
    }
}

proptest! {
    #[test]
    fn shrinking_one_entry_moves_the_loss_by_label(a in prop::collection::vec(0.01f64..5.0, 9), idx in 0usize..9, frac in 0.05f64..0.95) {
        let heat = t(&[1, 1, 3, 3], a.clone());
        let mut smaller = a;
        smaller[idx] *= frac;
        let smaller = t(&[1, 1, 3, 3], smaller);
        prop_assert!(fcdd_loss(&smaller, &[false]).unwrap() < fcdd_loss(&heat, &[false]).unwrap());
        prop_assert!(fcdd_loss(&smaller, &[true]).unwrap() > fcdd_loss(&heat, &[true]).unwrap());
    }
}
