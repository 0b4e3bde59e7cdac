use super::*;
use approx::assert_abs_diff_eq;

fn t(shape: &[usize], data: &[Real]) -> Tensor {
    Tensor::new(shape, data.to_vec()).unwrap()
}

fn seq(shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    t(shape, &(1..=n).map(|x| x as Real).collect::<Vec<_>>())
}

#[test]
fn tensor_rejects_wrong_length() {
    assert!(Tensor::new(&[2, 3], vec![0.0; 5]).is_err());
}

#[test]
fn conv2d_identity_kernel() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[1, 1, 2, 2], &[1., 2., 3., 4.]));
    let w = tape.constant(t(&[1, 1, 1, 1], &[1.]));
    let y = tape.conv2d(x, w, 1, 0).unwrap();
    assert_eq!(tape.value(y).data(), &[1., 2., 3., 4.]);
}

#[test]
fn conv2d_zero_weight_gives_zero() {
    let mut tape = Tape::new();
    let x = tape.constant(seq(&[2, 3, 5, 5]));
    let w = tape.constant(Tensor::zeros(&[4, 3, 3, 3]));
    let y = tape.conv2d(x, w, 2, 1).unwrap();
    assert_eq!(tape.shape(y), &[2, 4, 3, 3]);
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn conv2d_all_ones_3x3_on_4x4() {
    let mut tape = Tape::new();
    let x = tape.constant(seq(&[1, 1, 4, 4]));
    let w = tape.constant(Tensor::ones(&[1, 1, 3, 3]));
    let y = tape.conv2d(x, w, 1, 0).unwrap();
    assert_eq!(tape.value(y).data(), &[54., 63., 90., 99.]);
}

#[test]
fn conv2d_channel_mismatch_names_both_shapes() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 2, 4, 4]));
    let w = tape.constant(Tensor::zeros(&[1, 3, 3, 3]));
    let err = tape.conv2d(x, w, 1, 0).unwrap_err().to_string();
    assert!(err.contains("[1, 2, 4, 4]") && err.contains("[1, 3, 3, 3]"), "{err}");
}

#[test]
fn conv2d_kernel_larger_than_padded_input() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 1, 2, 2]));
    let w = tape.constant(Tensor::zeros(&[1, 1, 5, 5]));
    assert!(tape.conv2d(x, w, 1, 1).is_err());
    assert!(tape.conv2d(x, w, 0, 2).is_err());
}

#[test]
fn maxpool_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[1, 1, 2, 2], &[1., 2., 3., 4.]));
    let y = tape.maxpool2d(x, 2, 2).unwrap();
    assert_eq!(tape.value(y).data(), &[4.]);

    let x = tape.constant(seq(&[1, 1, 4, 4]));
    let y = tape.maxpool2d(x, 2, 2).unwrap();
    assert_eq!(tape.value(y).data(), &[6., 8., 14., 16.]);

    let x = tape.leaf(Tensor::full(&[1, 1, 2, 2], 3.0), true);
    assert!(tape.maxpool2d(x, 3, 1).is_err());
}

#[test]
fn maxpool_tie_routes_to_first_element() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::full(&[1, 1, 4, 4], 7.0));
    let y = tape.maxpool2d(x, 2, 2).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 7.0));
    let s = tape.sum(y);
    tape.backward(s).unwrap();
    let g = tape.grad(x).unwrap().data();
    let expected: Vec<Real> = (0..16)
        .map(|i| if (i / 4) % 2 == 0 && i % 2 == 0 { 1.0 } else { 0.0 })
        .collect();
    assert_eq!(g, expected.as_slice());
}

#[test]
fn affine_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[1, 2], &[1., 2.]));
    let w = tape.constant(t(&[2, 2], &[1., 0., 0., 1.]));
    let b = tape.constant(t(&[2], &[3., 3.]));
    let y = tape.affine(x, w, Some(b)).unwrap();
    assert_eq!(tape.value(y).data(), &[4., 5.]);

    let z = tape.constant(Tensor::zeros(&[3, 2]));
    let y = tape.affine(z, w, Some(b)).unwrap();
    assert_eq!(tape.value(y).data(), &[3.; 6]);

    let y = tape.affine(x, w, None).unwrap();
    assert_eq!(tape.value(y).data(), &[1., 2.]);

    let bad = tape.constant(Tensor::zeros(&[3, 2]));
    assert!(tape.affine(x, bad, None).is_err());
}

#[test]
fn softplus_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[3], &[0., 50., -50.]));
    let y = tape.softplus(x, 1.0).unwrap();
    let v = tape.value(y).data();
    assert_abs_diff_eq!(v[0], std::f64::consts::LN_2, epsilon = 1e-15);
    assert_abs_diff_eq!(v[1], 50.0, epsilon = 1e-12);
    assert!(v[2] > 0.0 && v[2] < 1e-20);
    assert!(tape.softplus(x, 0.0).is_err());
}

#[test]
fn backward_of_sum_is_ones() {
    let mut tape = Tape::new();
    let x = tape.param(seq(&[2, 3, 4]));
    let s = tape.sum(x);
    tape.backward(s).unwrap();
    assert!(tape.grad(x).unwrap().data().iter().all(|&g| g == 1.0));
}

#[test]
fn backward_of_sum_of_squares() {
    let mut tape = Tape::new();
    let x = tape.param(t(&[3], &[1., 2., 3.]));
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum(sq);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[2., 4., 6.]);
}

#[test]
fn backward_accumulates_until_zeroed() {
    let mut tape = Tape::new();
    let x = tape.param(t(&[2], &[1., -1.]));
    let s = tape.sum(x);
    tape.backward(s).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[2., 2.]);
    tape.zero_grad();
    assert!(tape.grad(x).is_none());
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[1., 1.]);
}

#[test]
fn backward_rejects_non_scalar_root() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::zeros(&[2]));
    assert!(matches!(tape.backward(x), Err(crate::Error::Contract(_))));
}

#[test]
fn constants_receive_no_gradient() {
    let mut tape = Tape::new();
    let x = tape.param(t(&[2], &[1., 2.]));
    let c = tape.constant(t(&[2], &[3., 4.]));
    let y = tape.mul(x, c).unwrap();
    let s = tape.sum(y);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[3., 4.]);
    assert!(tape.grad(c).is_none());
}

#[test]
fn nll_rejects_out_of_range_label() {
    let mut tape = Tape::new();
    let p = tape.constant(t(&[1, 2], &[0.5, 0.5]));
    assert!(matches!(tape.nll(p, &[2], 1e-12), Err(crate::Error::Contract(_))));
}

#[test]
fn sqrt_rejects_negative() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[2], &[1., -1e-3]));
    assert!(tape.sqrt(x).is_err());
}
