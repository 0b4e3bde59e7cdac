//! Variational free energy: categorical likelihood cost under the
//! Softplus-normalized head plus the β-weighted KL complexity cost.

use crate::error::{Error, Result};
use crate::layers::{GaussianVariationalParams, NoiseStream, PriorSpec};
use crate::tensor::CustomBackward;
use crate::zoo::{Mode, Model};
use crate::{Real, Tape, Tensor, Var};

/// Floor on the posterior variance inside the KL logarithm.
pub const KL_VARIANCE_FLOOR: Real = 1e-30;

/// Floor on probabilities inside the likelihood logarithm.
pub const PROB_FLOOR: Real = 1e-12;

/// Per-minibatch KL weights `β_i = 2^(M-i) / (2^M - 1)`, `i = 1..=M`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct KlWeightSchedule {
    batches: usize,
}

impl KlWeightSchedule {
    pub fn new(batches: usize) -> Result<Self> {
        if batches == 0 {
            return Err(Error::Contract("KL schedule needs at least one minibatch".into()));
        }
        Ok(KlWeightSchedule { batches })
    }

    pub fn batches(&self) -> usize {
        self.batches
    }

    /// Weight of the 1-based batch index `i`.
    pub fn beta(&self, i: usize) -> Result<Real> {
        let m = self.batches;
        if i == 0 || i > m {
            return Err(Error::Contract(format!("batch index {i} outside 1..={m}")));
        }
        if m <= 60 {
            return Ok((1u64 << (m - i)) as Real / ((1u64 << m) - 1) as Real);
        }
        // 2^(M-i) / (2^M - 1) = 2^-i / (1 - 2^-M)
        let ln2 = std::f64::consts::LN_2;
        Ok((-(i as Real) * ln2 - (-(2.0 as Real).powi(-(m as i32))).ln_1p()).exp())
    }
}

fn kl_terms(mu: Real, log_alpha: Real, prior: PriorSpec) -> (Real, Real, Real) {
    let s2 = prior.std * prior.std;
    let alpha = log_alpha.exp();
    let var = alpha * mu * mu;
    let above_floor = var > KL_VARIANCE_FLOOR;
    let d = mu - prior.mean;
    let value = 0.5 * ((var + d * d) / s2 - 1.0 - var.max(KL_VARIANCE_FLOOR).ln() + s2.ln());
    let (dmu, dla) = if above_floor {
        ((alpha * mu + d) / s2 - 1.0 / mu, 0.5 * var / s2 - 0.5)
    } else {
        ((alpha * mu + d) / s2, 0.5 * var / s2)
    };
    (value, dmu, dla)
}

/// Closed-form `KL[N(mu, alpha mu^2) || prior]` summed over all weights.
pub fn kl_gaussian(params: &GaussianVariationalParams, prior: PriorSpec) -> Real {
    params
        .mu
        .data()
        .iter()
        .zip(params.log_alpha.data())
        .map(|(&m, &a)| kl_terms(m, a, prior).0)
        .sum()
}

struct KlRule {
    prior: PriorSpec,
}

impl CustomBackward for KlRule {
    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let g = grad.item();
        let (mu, la) = (inputs[0], inputs[1]);
        let mut gmu = Vec::with_capacity(mu.len());
        let mut gla = Vec::with_capacity(mu.len());
        for (&m, &a) in mu.data().iter().zip(la.data()) {
            let (_, dm, da) = kl_terms(m, a, self.prior);
            gmu.push(g * dm);
            gla.push(g * da);
        }
        vec![
            Some(Tensor::new(mu.shape(), gmu).expect("shape of mu")),
            Some(Tensor::new(la.shape(), gla).expect("shape of log_alpha")),
        ]
    }
}

/// [`kl_gaussian`] as a scalar tape node with closed-form gradients.
pub fn kl_on_tape(tape: &mut Tape, mu: Var, log_alpha: Var, prior: PriorSpec) -> Result<Var> {
    let params = GaussianVariationalParams::new(tape.value(mu).clone(), tape.value(log_alpha).clone())?;
    let value = Tensor::scalar(kl_gaussian(&params, prior));
    Ok(tape.custom(&[mu, log_alpha], value, Box::new(KlRule { prior })))
}

/// Mean of `-ln max(p[n, label_n], 1e-12)` over rows.
pub fn nll_categorical(probs: &Tensor, labels: &[usize]) -> Result<Real> {
    if probs.ndim() != 2 || probs.shape()[0] != labels.len() {
        return Err(Error::shape(
            "nll",
            format!("probs {:?} vs {} labels", probs.shape(), labels.len()),
        ));
    }
    let c = probs.shape()[1];
    let mut total = 0.0;
    for (row, &label) in probs.data().chunks(c).zip(labels) {
        if label >= c {
            return Err(Error::Contract(format!("label {label} out of range for {c} classes")));
        }
        total -= row[label].max(PROB_FLOOR).ln();
    }
    Ok(total / labels.len() as Real)
}

/// `softplus(x) / Σ softplus(x)` along each row, on the tape.
pub fn softplus_head(tape: &mut Tape, logits: Var) -> Result<Var> {
    let sp = tape.softplus(logits, 1.0)?;
    tape.row_normalize(sp)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub nll: Real,
    pub kl: Real,
    pub beta_i: Real,
    pub total: Real,
}

/// Loss value together with the gradient of `total` for every model
/// parameter (`None` for parameters the loss does not touch).
pub struct FreeEnergy {
    pub loss: LossBreakdown,
    pub grads: Vec<Option<Tensor>>,
}

fn accumulate(grads: &mut [Option<Tensor>], tape: &mut Tape, vars: &[Var]) {
    for (slot, &v) in grads.iter_mut().zip(vars) {
        if let Some(g) = tape.take_grad(v) {
            match slot {
                Some(acc) => acc.add_assign(&g),
                None => *slot = Some(g),
            }
        }
    }
}

/// Free energy of one minibatch and its gradients.
///
/// Runs `passes` stochastic forward passes (pass `s` draws its noise from
/// `noise(s)`), averages their likelihood costs and adds `β_i · KL`. Each
/// pass is differentiated on its own tape so memory stays at one pass.
/// Point-estimate models use one deterministic pass and no KL.
#[allow(clippy::too_many_arguments)]
pub fn free_energy(
    model: &Model,
    images: &Tensor,
    labels: &[usize],
    schedule: KlWeightSchedule,
    i: usize,
    passes: usize,
    prior: PriorSpec,
    noise: impl Fn(usize) -> NoiseStream,
) -> Result<FreeEnergy> {
    if passes == 0 {
        return Err(Error::Contract("need at least one forward pass".into()));
    }
    let beta_i = schedule.beta(i)?;
    let bayesian = model.mode == Mode::Bayesian;
    let passes = if bayesian { passes } else { 1 };
    let mut grads: Vec<Option<Tensor>> = vec![None; model.params().len()];

    let mut nll = 0.0;
    for s in 0..passes {
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape, true);
        let x = tape.constant(images.clone());
        let logits = model.forward_on(&mut tape, &vars, x, &noise(s), true)?;
        let probs = softplus_head(&mut tape, logits)?;
        let pass_nll = tape.nll(probs, labels, PROB_FLOOR)?;
        nll += tape.value(pass_nll).item();
        let scaled = tape.scale(pass_nll, 1.0 / passes as Real);
        tape.backward(scaled)?;
        accumulate(&mut grads, &mut tape, &vars);
    }
    let nll = nll / passes as Real;

    let mut kl = 0.0;
    if bayesian {
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape, true);
        let mut terms = Vec::new();
        for (mu, la) in model.posterior_slots() {
            terms.push(kl_on_tape(&mut tape, vars[mu], vars[la], prior)?);
        }
        let mut sum = terms[0];
        for &t in &terms[1..] {
            sum = tape.add(sum, t)?;
        }
        kl = tape.value(sum).item();
        let weighted = tape.scale(sum, beta_i);
        tape.backward(weighted)?;
        accumulate(&mut grads, &mut tape, &vars);
    }

    let total = if bayesian { beta_i * kl + nll } else { nll };
    if !total.is_finite() {
        return Err(Error::NonFinite(format!("free energy {total} (nll {nll}, kl {kl})")));
    }
    Ok(FreeEnergy {
        loss: LossBreakdown { nll, kl, beta_i, total },
        grads,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn single(mu: Real, la: Real) -> GaussianVariationalParams {
        GaussianVariationalParams::new(Tensor::scalar(mu), Tensor::scalar(la)).unwrap()
    }

    #[test]
    fn kl_examples() {
        let prior = PriorSpec::default();
        let floor_case = 0.5 * (1e-30 - (1e-30 as Real).ln() - 1.0);
        assert_relative_eq!(kl_gaussian(&single(0.0, 0.0), prior), floor_case, max_relative = 1e-15);
        assert!((floor_case - 34.04).abs() < 0.01);
        assert_relative_eq!(kl_gaussian(&single(1.0, 0.0), prior), 0.5, max_relative = 1e-15);
        let expect = 0.5 * ((-10.0 as Real).exp() + 10.0);
        assert_relative_eq!(kl_gaussian(&single(1.0, -10.0), prior), expect, max_relative = 1e-15);
        assert!((expect - 5.0000227).abs() < 1e-7);
        // near the optimum mu = 0, sigma^2 = 1
        let tiny = 1e-15;
        let la = -2.0 * (tiny as Real).ln();
        assert!(kl_gaussian(&single(tiny, la), prior).abs() < 1e-12);
    }

    #[test]
    fn nll_examples() {
        let p = Tensor::new(&[1, 2], vec![0.7, 0.3]).unwrap();
        assert_relative_eq!(nll_categorical(&p, &[0]).unwrap(), -(0.7 as Real).ln(), max_relative = 1e-15);
        let u = Tensor::full(&[3, 10], 0.1);
        assert_relative_eq!(nll_categorical(&u, &[0, 4, 9]).unwrap(), (10.0 as Real).ln(), max_relative = 1e-14);
        let onehot = Tensor::new(&[1, 3], vec![0.0, 1.0, 0.0]).unwrap();
        assert_eq!(nll_categorical(&onehot, &[1]).unwrap(), 0.0);
        assert!(matches!(nll_categorical(&onehot, &[3]), Err(Error::Contract(_))));
    }

    #[test]
    fn beta_examples() {
        let s = KlWeightSchedule::new(469).unwrap();
        assert!((s.beta(1).unwrap() - 0.5).abs() < 1e-15);
        assert!(s.beta(0).is_err() && s.beta(470).is_err());
        assert!(KlWeightSchedule::new(0).is_err());
        assert_eq!(KlWeightSchedule::new(1).unwrap().beta(1).unwrap(), 1.0);
        let three = KlWeightSchedule::new(3).unwrap();
        let b: Vec<Real> = (1..=3).map(|i| three.beta(i).unwrap()).collect();
        assert_eq!(b, vec![4.0 / 7.0, 2.0 / 7.0, 1.0 / 7.0]);
    }

    #[test]
    fn beta_formulas_agree_at_switchover() {
        // both branches evaluated at M = 60 must match
        let m = 60;
        for i in [1, 2, 30, 59, 60] {
            let direct = KlWeightSchedule::new(m).unwrap().beta(i).unwrap();
            let logspace = (-(i as Real) * std::f64::consts::LN_2 - (-(2.0 as Real).powi(-(m as i32))).ln_1p()).exp();
            assert_relative_eq!(direct, logspace, max_relative = 1e-14);
        }
    }
}
