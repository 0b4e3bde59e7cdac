//! Independent oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use bcnn::{Tape, Tensor, Var};
use rand::Rng;

pub const FD_STEP: f64 = 1e-5;
/// Gradient magnitudes below this are compared on an absolute scale.
pub const FD_SCALE_FLOOR: f64 = 1e-3;

/// Nested-loop cross-correlation with zero padding.
pub fn brute_conv2d(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, k) = (w.shape()[0], w.shape()[2]);
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; n * co * ho * wo];
    for b in 0..n {
        for o in 0..co {
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = 0.0;
                    for ch in 0..c {
                        for ki in 0..k {
                            for kj in 0..k {
                                let r = (i * stride + ki) as isize - pad as isize;
                                let s = (j * stride + kj) as isize - pad as isize;
                                if r < 0 || s < 0 || r >= h as isize || s >= wd as isize {
                                    continue;
                                }
                                let xv = x.data()[((b * c + ch) * h + r as usize) * wd + s as usize];
                                let wv = w.data()[((o * c + ch) * k + ki) * k + kj];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((b * co + o) * ho + i) * wo + j] = acc;
                }
            }
        }
    }
    Tensor::new(&[n, co, ho, wo], out).unwrap()
}

/// Scalar probe `Σ out ⊙ r` with a fixed random cotangent `r`.
pub fn probe(tape: &mut Tape, out: Var, cotangent: &Tensor) -> Var {
    let r = tape.constant(cotangent.clone());
    let prod = tape.mul(out, r).unwrap();
    tape.sum(prod)
}

/// Largest gradient discrepancy between backward and central differences.
///
/// `f` builds a scalar from leaves holding `inputs` (all trainable). The
/// discrepancy of each entry is `|a - n| / max(|a|, |n|, FD_SCALE_FLOOR)`.
pub fn fd_max_rel_err<F>(inputs: &[Tensor], f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let eval = |vals: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.param(t.clone())).collect();
        let root = f(&mut tape, &vars);
        tape.value(root).item()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let root = f(&mut tape, &vars);
    tape.backward(root).unwrap();

    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let analytic = tape
            .grad(*v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        for e in 0..inputs[k].len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[e] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[e] -= FD_STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            let a = analytic.data()[e];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FD_SCALE_FLOOR);
            worst = worst.max(err);
        }
    }
    worst
}

pub fn uniform<R: Rng>(rng: &mut R, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values with pairwise gaps far larger than the FD step, in random order.
pub fn distinct<R: Rng>(rng: &mut R, shape: &[usize]) -> Tensor {
    use rand::seq::SliceRandom;
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n)
        .map(|i| i as f64 * 0.05 - n as f64 * 0.025 + rng.random_range(0.0..0.01))
        .collect();
    vals.shuffle(rng);
    Tensor::new(shape, vals).unwrap()
}

/// Dataset root: `$BCNN_DATA_DIR`, else `<workspace>/data`.
pub fn data_dir() -> std::path::PathBuf {
    std::env::var_os("BCNN_DATA_DIR")
        .map(Into::into)
        .unwrap_or_else(|| std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data"))
}

pub fn idx_images(count: u32, pixels: &[u8]) -> Vec<u8> {
    let mut v = Vec::new();
    for x in [0x0803u32, count, 28, 28] {
        v.extend_from_slice(&x.to_be_bytes());
    }
    v.extend_from_slice(pixels);
    v
}

pub fn idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut v = Vec::new();
    v.extend_from_slice(&0x0801u32.to_be_bytes());
    v.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    v.extend_from_slice(labels);
    v
}
