mod common;

use bcnn::layers::{bayes_conv2d, bayes_linear, BoundParams, NoiseStream};
use bcnn::{Tape, Tensor};
use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const TOL: f64 = 1e-6;

#[test]
fn bayes_conv2d_gradients_match_finite_differences_with_fixed_noise() {
    let mut r = ChaCha8Rng::seed_from_u64(31);
    let mut worst: f64 = 0.0;
    for case in 0..40u64 {
        let (n, c, co) = (r.random_range(1..3), r.random_range(1..3), r.random_range(1..3));
        let k = r.random_range(1..4);
        let (stride, pad) = (r.random_range(1..3), r.random_range(0..2));
        let h = r.random_range(k.max(2)..6);
        let x = uniform(&mut r, &[n, c, h, h], -1.0, 1.0);
        let mu = uniform(&mut r, &[co, c, k, k], -1.0, 1.0);
        let la = uniform(&mut r, &[co, c, k, k], -2.0, 1.0);
        let shape = brute_conv2d(&x, &mu, stride, pad).shape().to_vec();
        let cot = uniform(&mut r, &shape, -1.0, 1.0);
        worst = worst.max(fd_max_rel_err(&[x, mu, la], |t, v| {
            // a fresh stream per evaluation replays the same eps
            let noise = NoiseStream::new(case, 0);
            let p = BoundParams { mu: v[1], log_alpha: v[2] };
            let y = bayes_conv2d(t, v[0], p, None, stride, pad, &noise, true).unwrap();
            probe(t, y, &cot)
        }));
    }
    assert!(worst <= TOL, "bayes_conv2d worst relative error {worst:e}");
}

#[test]
fn bayes_linear_gradients_match_finite_differences_with_fixed_noise() {
    let mut r = ChaCha8Rng::seed_from_u64(32);
    let mut worst: f64 = 0.0;
    for case in 0..40u64 {
        let (n, din, dout) = (r.random_range(1..4), r.random_range(1..5), r.random_range(1..5));
        let x = uniform(&mut r, &[n, din], -1.0, 1.0);
        let mu = uniform(&mut r, &[din, dout], -1.0, 1.0);
        let la = uniform(&mut r, &[din, dout], -2.0, 1.0);
        let b = uniform(&mut r, &[dout], -1.0, 1.0);
        let cot = uniform(&mut r, &[n, dout], -1.0, 1.0);
        worst = worst.max(fd_max_rel_err(&[x, mu, la, b], |t, v| {
            let noise = NoiseStream::new(case, 5);
            let p = BoundParams { mu: v[1], log_alpha: v[2] };
            let y = bayes_linear(t, v[0], p, Some(v[3]), &noise, true).unwrap();
            probe(t, y, &cot)
        }));
    }
    assert!(worst <= TOL, "bayes_linear worst relative error {worst:e}");
}

struct Moments {
    mean: Vec<f64>,
    var: Vec<f64>,
}

impl Moments {
    fn of(samples: &[Vec<f64>]) -> Self {
        let n = samples.len() as f64;
        let d = samples[0].len();
        let mut mean = vec![0.0; d];
        for s in samples {
            for (m, x) in mean.iter_mut().zip(s) {
                *m += x / n;
            }
        }
        let mut var = vec![0.0; d];
        for s in samples {
            for ((v, x), m) in var.iter_mut().zip(s).zip(&mean) {
                *v += (x - m).powi(2) / (n - 1.0);
            }
        }
        Moments { mean, var }
    }
}

/// Activation sampling and explicit weight sampling give the same
/// per-activation mean and variance.
#[test]
fn local_reparameterization_matches_weight_sampling() {
    const DRAWS: usize = 1_000_000;
    let mut r = ChaCha8Rng::seed_from_u64(33);
    for case in 0..3u64 {
        let x = uniform(&mut r, &[1, 1, 3, 3], -1.0, 1.0);
        let mu = uniform(&mut r, &[1, 1, 2, 2], -1.0, 1.0);
        let la = uniform(&mut r, &[1, 1, 2, 2], -1.0, 0.5);

        // weight-space oracle
        let mut wr = ChaCha8Rng::seed_from_u64(1000 + case);
        let weight_draws: Vec<Vec<f64>> = (0..DRAWS)
            .map(|_| {
                let w: Vec<f64> = mu
                    .data()
                    .iter()
                    .zip(la.data())
                    .map(|(m, a)| {
                        let eps: f64 = wr.sample(StandardNormal);
                        m + eps * (a.exp() * m * m).sqrt()
                    })
                    .collect();
                let w = Tensor::new(&[1, 1, 2, 2], w).unwrap();
                brute_conv2d(&x, &w, 1, 0).into_data()
            })
            .collect();

        // activation sampling: the batch dimension carries the draws
        let mut tiled = Vec::with_capacity(DRAWS * 9);
        for _ in 0..DRAWS {
            tiled.extend_from_slice(x.data());
        }
        let mut tape = Tape::new();
        let xv = tape.constant(Tensor::new(&[DRAWS, 1, 3, 3], tiled).unwrap());
        let p = BoundParams { mu: tape.param(mu.clone()), log_alpha: tape.param(la.clone()) };
        let y = bayes_conv2d(&mut tape, xv, p, None, 1, 0, &NoiseStream::new(case, 0), true).unwrap();
        let act_draws: Vec<Vec<f64>> = tape.value(y).data().chunks(4).map(|c| c.to_vec()).collect();

        let (a, b) = (Moments::of(&act_draws), Moments::of(&weight_draws));
        let n = DRAWS as f64;
        for j in 0..4 {
            let var = 0.5 * (a.var[j] + b.var[j]);
            let se_mean = (2.0 * var / n).sqrt();
            assert!(
                (a.mean[j] - b.mean[j]).abs() <= 3.0 * se_mean,
                "case {case} unit {j}: means {} vs {}",
                a.mean[j],
                b.mean[j]
            );
            // sampling variance of a Gaussian sample variance is 2 var^2 / (n - 1)
            let se_var = var * (4.0 / (n - 1.0)).sqrt();
            assert!(
                (a.var[j] - b.var[j]).abs() <= 3.0 * se_var,
                "case {case} unit {j}: variances {} vs {}",
                a.var[j],
                b.var[j]
            );
        }
    }
}

/// Second moment of the output grows with every log_alpha entry, measured
/// over many draws with the noise budget held fixed.
#[test]
fn output_variance_nondecreasing_in_log_alpha() {
    let mut r = ChaCha8Rng::seed_from_u64(34);
    let x = uniform(&mut r, &[2000, 2, 4, 4], -1.0, 1.0);
    let mu = uniform(&mut r, &[2, 2, 3, 3], -1.0, 1.0);
    let base = uniform(&mut r, &[2, 2, 3, 3], -3.0, 0.0);
    let second_moment = |la: &Tensor| -> Vec<f64> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let p = BoundParams { mu: tape.param(mu.clone()), log_alpha: tape.param(la.clone()) };
        let y = bayes_conv2d(&mut tape, xv, p, None, 1, 0, &NoiseStream::new(8, 0), true).unwrap();
        let m = tape.conv2d(xv, p.mu, 1, 0).unwrap();
        let per_unit = 2 * 2 * 2;
        let mut acc = vec![0.0; per_unit];
        for (i, (b, m)) in tape.value(y).data().iter().zip(tape.value(m).data()).enumerate() {
            acc[i % per_unit] += (b - m).powi(2);
        }
        acc
    };
    let before = second_moment(&base);
    for e in 0..base.len() {
        let mut la = base.clone();
        la.data_mut()[e] += 0.25;
        let after = second_moment(&la);
        for (a, b) in after.iter().zip(&before) {
            assert!(a >= b, "entry {e}: {a} < {b}");
        }
    }
}
