mod common;

use bcnn::layers::{GaussianVariationalParams, MuInit, NoiseStream, PriorSpec};
use bcnn::objective::{free_energy, kl_gaussian, kl_on_tape, nll_categorical, softplus_head, KlWeightSchedule};
use bcnn::zoo::{build, Arch, Mode, ParamKind};
use bcnn::{Tape, Tensor};
use common::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn single(mu: f64, la: f64) -> GaussianVariationalParams {
    GaussianVariationalParams::new(Tensor::scalar(mu), Tensor::scalar(la)).unwrap()
}

/// KL[N(m, v) || N(0, 1)] by trapezoid integration of q ln(q/p) over ±12 sd.
fn kl_by_quadrature(m: f64, v: f64) -> f64 {
    let sd = v.sqrt();
    let steps = 400_000;
    let (lo, hi) = (m - 12.0 * sd, m + 12.0 * sd);
    let h = (hi - lo) / steps as f64;
    let ln_q = |w: f64| -0.5 * (2.0 * std::f64::consts::PI * v).ln() - (w - m).powi(2) / (2.0 * v);
    let ln_p = |w: f64| -0.5 * (2.0 * std::f64::consts::PI).ln() - w * w / 2.0;
    let f = |w: f64| ln_q(w).exp() * (ln_q(w) - ln_p(w));
    let inner: f64 = (1..steps).map(|k| f(lo + k as f64 * h)).sum();
    h * (inner + 0.5 * (f(lo) + f(hi)))
}

#[test]
fn kl_examples_match_quadrature() {
    let prior = PriorSpec::default();
    let one = kl_gaussian(&single(1.0, 0.0), prior);
    assert!((one - kl_by_quadrature(1.0, 1.0)).abs() < 1e-9, "{one}");
    let tight = kl_gaussian(&single(1.0, -10.0), prior);
    let quad = kl_by_quadrature(1.0, (-10.0f64).exp());
    assert!((tight - quad).abs() < 1e-7, "{tight} vs {quad}");
    assert!((tight - 5.0000227).abs() < 1e-7);
}

/// Sampled cost `(1/K) Σ [ln q(w_k) - ln p(w_k)]`, `w_k ~ q`, against the
/// closed form.
#[test]
fn kl_matches_monte_carlo_estimate() {
    const K: usize = 1_000_000;
    let prior = PriorSpec::default();
    let mut r = ChaCha8Rng::seed_from_u64(41);
    for _ in 0..20 {
        let mu: f64 = r.random_range(-2.0..2.0);
        let la: f64 = r.random_range(-4.0..1.5);
        let var = la.exp() * mu * mu;
        let sd = var.sqrt();
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..K {
            let eps: f64 = r.sample(StandardNormal);
            let w = mu + sd * eps;
            // ln q - ln p with the 1/sqrt(2 pi) factors cancelled
            let d = -0.5 * var.ln() - 0.5 * eps * eps + 0.5 * w * w;
            sum += d;
            sum_sq += d * d;
        }
        let mean = sum / K as f64;
        let se = ((sum_sq / K as f64 - mean * mean) / (K as f64 - 1.0)).sqrt();
        let closed = kl_gaussian(&single(mu, la), prior);
        assert!(
            (closed - mean).abs() <= 3.0 * se,
            "mu {mu} log_alpha {la}: closed {closed} vs sampled {mean} ± {se}"
        );
    }
}

#[test]
fn kl_tape_gradients_match_finite_differences() {
    let mut r = ChaCha8Rng::seed_from_u64(42);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let n = r.random_range(1..6);
        let mu = uniform(&mut r, &[n], 0.2, 2.0).map(|x| if x > 1.1 { -x } else { x });
        let la = uniform(&mut r, &[n], -3.0, 1.0);
        let prior = PriorSpec::new(r.random_range(-0.5..0.5), r.random_range(0.5..2.0)).unwrap();
        worst = worst.max(fd_max_rel_err(&[mu, la], |t, v| kl_on_tape(t, v[0], v[1], prior).unwrap()));
    }
    assert!(worst <= 1e-6, "KL worst relative error {worst:e}");
}

#[test]
fn beta_schedule_sums_to_one() {
    for m in [1usize, 3, 10, 60, 61, 469, 1024] {
        let s = KlWeightSchedule::new(m).unwrap();
        let betas: Vec<f64> = (1..=m).map(|i| s.beta(i).unwrap()).collect();
        let total: f64 = betas.iter().sum();
        assert!((total - 1.0).abs() <= 1e-12, "M = {m}: {total}");
        assert!(betas.windows(2).all(|w| w[1] < w[0] || w[1] == 0.0 && w[0] == 0.0));
        assert!(betas.iter().all(|&b| (0.0..=1.0).contains(&b)));
    }
}

#[test]
fn softplus_head_then_nll_gradients_match_finite_differences() {
    let mut r = ChaCha8Rng::seed_from_u64(43);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let (n, c) = (r.random_range(1..5), r.random_range(2..6));
        let logits = uniform(&mut r, &[n, c], -3.0, 3.0);
        let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..c)).collect();
        worst = worst.max(fd_max_rel_err(&[logits], |t, v| {
            let p = softplus_head(t, v[0]).unwrap();
            t.nll(p, &labels, 1e-12).unwrap()
        }));
    }
    assert!(worst <= 1e-6, "head+nll worst relative error {worst:e}");
}

#[test]
fn variance_free_single_pass_equals_deterministic_nll() {
    let mut model = build(Arch::Lenet5, 1, 10, Mode::Bayesian, MuInit::FanIn, 3).unwrap();
    for p in model.params_mut() {
        if p.kind == ParamKind::LogAlpha {
            p.value = p.value.map(|_| f64::NEG_INFINITY);
        }
    }
    let mut r = ChaCha8Rng::seed_from_u64(44);
    let x = uniform(&mut r, &[4, 1, 32, 32], 0.0, 1.0);
    let labels = [1, 3, 5, 7];
    let sched = KlWeightSchedule::new(2).unwrap();
    let fe = free_energy(&model, &x, &labels, sched, 1, 1, PriorSpec::default(), |s| {
        NoiseStream::new(s as u64, 0)
    })
    .unwrap();

    let logits = model.forward(&x, &NoiseStream::new(0, 0), false).unwrap();
    let mut tape = Tape::new();
    let l = tape.constant(logits);
    let p = softplus_head(&mut tape, l).unwrap();
    let det = nll_categorical(tape.value(p), &labels).unwrap();
    assert_eq!(fe.loss.nll, det);
    assert!(fe.loss.kl.is_finite() && fe.loss.kl > 0.0);
    assert_eq!(fe.loss.total, fe.loss.beta_i * fe.loss.kl + fe.loss.nll);
    assert_eq!(fe.loss.beta_i, 2.0 / 3.0);
}

/// Central differences on sampled coordinates of every parameter block,
/// with the noise replayed per pass.
#[test]
fn free_energy_gradients_match_finite_differences() {
    let model = build(Arch::Lenet5, 1, 10, Mode::Bayesian, MuInit::FanIn, 5).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(45);
    let x = uniform(&mut r, &[3, 1, 32, 32], 0.0, 1.0);
    let labels = [0, 4, 9];
    let sched = KlWeightSchedule::new(5).unwrap();
    let eval = |m: &bcnn::zoo::Model| {
        free_energy(m, &x, &labels, sched, 2, 3, PriorSpec::default(), |s| NoiseStream::new(100 + s as u64, 0)).unwrap()
    };
    let base = eval(&model);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    while checked < 60 {
        let k = r.random_range(0..model.params().len());
        let p = &model.params()[k];
        let e = r.random_range(0..p.value.len());
        // ln(mu^2) in the KL has large higher derivatives near mu = 0
        if p.kind == ParamKind::Mu && p.value.data()[e].abs() < 0.05 {
            continue;
        }
        // total = nll + beta * Σ per-weight KL; only one KL term moves, so
        // it is differenced alone to keep the large KL sum out of the rounding
        let (mu_k, la_k) = match p.kind {
            ParamKind::Mu => (Some(k), k + 1),
            ParamKind::LogAlpha => (Some(k - 1), k),
            ParamKind::Bias => (None, k),
        };
        let at = |delta: f64| {
            let mut m = model.clone();
            m.params_mut()[k].value.data_mut()[e] += delta;
            let fe = eval(&m);
            let kl_term = mu_k.map_or(0.0, |mk| {
                let (mu, la) = (m.params()[mk].value.data()[e], m.params()[la_k].value.data()[e]);
                kl_gaussian(&single(mu, la), PriorSpec::default())
            });
            fe.loss.nll + fe.loss.beta_i * kl_term
        };
        let numeric = (at(FD_STEP) - at(-FD_STEP)) / (2.0 * FD_STEP);
        let analytic = base.grads[k].as_ref().unwrap().data()[e];
        let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_SCALE_FLOOR);
        worst = worst.max(err);
        checked += 1;
    }
    assert!(worst <= 1e-6, "free energy worst relative error {worst:e}");
}

proptest! {
    #[test]
    fn kl_is_nonnegative(mu in -50.0f64..50.0, la in -30.0f64..5.0) {
        prop_assert!(kl_gaussian(&single(mu, la), PriorSpec::default()) >= 0.0);
    }

    #[test]
    fn beta_is_strictly_decreasing(m in 2usize..1024, i in 1usize..1023) {
        prop_assume!(i < m);
        let s = KlWeightSchedule::new(m).unwrap();
        let (a, b) = (s.beta(i).unwrap(), s.beta(i + 1).unwrap());
        prop_assert!(b < a || (a == 0.0 && b == 0.0));
    }
}
