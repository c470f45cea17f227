//! Small hand-computed cases; the full suites run in `acceptance`.

use sstm_core::autodiff::{ConvAxis, Tape};
use sstm_core::gradcheck::grad_check;
use sstm_core::Tensor;

#[test]
fn box_filter_on_ones() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::ones(&[1, 1, 5]));
    let k = t.constant(Tensor::ones(&[1, 1, 3]));
    let y = t.conv_axis(x, k, ConvAxis::X, 1, 1).unwrap();
    assert_eq!(t.value(y).data(), &[2.0, 3.0, 3.0, 3.0, 2.0]);
}

#[test]
fn square_sum_gradient_is_twice_input() {
    let x0 = Tensor::<f64>::from_fn(&[6], |i| i as f64 - 2.5);
    let mut t = Tape::<f64>::new();
    let x = t.param(x0.clone());
    let sq = t.mul(x, x).unwrap();
    let s = t.sum(sq).unwrap();
    t.backward(s).unwrap();
    assert_eq!(t.grad(x).unwrap(), &x0.map(|v| 2.0 * v));
}

#[test]
fn mul_gradient_matches_finite_differences() {
    let a = Tensor::<f64>::from_fn(&[3, 4], |i| (i as f64 * 0.9).sin());
    let b = Tensor::<f64>::from_fn(&[3, 4], |i| (i as f64 * 0.4).cos());
    let rep = grad_check(
        |t, v| {
            let m = t.mul(v[0], v[1])?;
            t.sum(m)
        },
        &[a, b],
        1e-5,
        1e-4,
    )
    .unwrap();
    assert!(rep.passed, "{rep:?}");
}
