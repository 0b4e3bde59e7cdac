//! Monte-Carlo predictive distribution and its split into aleatoric and
//! epistemic covariance.
//!
//! For `T` stochastic passes with normalized outputs `p_t` and mean `p̄`:
//!
//! ```text
//! aleatoric = (1/T) Σ_t diag(p_t) - p_t p_tᵀ
//! epistemic = (1/T) Σ_t (p_t - p̄)(p_t - p̄)ᵀ
//! ```
//!
//! Scalar summaries are the trace divided by the class count.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{derive_seed, NoiseStream};
use crate::tensor::softplus_scalar;
use crate::zoo::Model;
use crate::{Real, Tensor};

/// Rows fed to [`decompose`] must sum to 1 within this tolerance.
pub const SIMPLEX_TOLERANCE: Real = 1e-6;

/// Default number of stochastic passes at evaluation.
pub const DEFAULT_EVAL_SAMPLES: usize = 25;

/// Images per forward pass during evaluation.
const EVAL_CHUNK: usize = 128;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormalizerKind {
    #[default]
    #[serde(rename = "softplus_n")]
    SoftplusN,
    #[serde(rename = "softmax")]
    Softmax,
}

impl NormalizerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            NormalizerKind::SoftplusN => "softplus_n",
            NormalizerKind::Softmax => "softmax",
        }
    }

    pub fn apply(self, logits: &[Real]) -> Result<Vec<Real>> {
        match self {
            NormalizerKind::SoftplusN => softplus_normalize(logits, 1.0),
            NormalizerKind::Softmax => softmax(logits),
        }
    }
}

impl fmt::Display for NormalizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NormalizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softplus_n" => Ok(NormalizerKind::SoftplusN),
            "softmax" => Ok(NormalizerKind::Softmax),
            other => Err(Error::Contract(format!(
                "unknown normalizer {other:?} (expected softplus_n or softmax)"
            ))),
        }
    }
}

fn check_classes(logits: &[Real]) -> Result<()> {
    if logits.len() < 2 {
        return Err(Error::Contract(format!("need at least 2 classes, got {}", logits.len())));
    }
    Ok(())
}

/// `softplus(x_c) / Σ_k softplus(x_k)`.
pub fn softplus_normalize(logits: &[Real], beta: Real) -> Result<Vec<Real>> {
    check_classes(logits)?;
    if !(beta > 0.0) {
        return Err(Error::Contract(format!("softplus beta must be > 0, got {beta}")));
    }
    let sp: Vec<Real> = logits.iter().map(|&x| softplus_scalar(x, beta)).collect();
    let total: Real = sp.iter().sum();
    Ok(sp.into_iter().map(|v| v / total).collect())
}

/// `exp(x_c - max) / Σ_k exp(x_k - max)`.
pub fn softmax(logits: &[Real]) -> Result<Vec<Real>> {
    check_classes(logits)?;
    let max = logits.iter().copied().fold(Real::NEG_INFINITY, Real::max);
    let e: Vec<Real> = logits.iter().map(|&x| (x - max).exp()).collect();
    let total: Real = e.iter().sum();
    Ok(e.into_iter().map(|v| v / total).collect())
}

/// `T × C` matrix whose row `t` is the normalized output of pass `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictiveSamples {
    probs: DMatrix<Real>,
}

impl PredictiveSamples {
    /// Validates that every row lies on the probability simplex.
    pub fn new(probs: DMatrix<Real>) -> Result<Self> {
        if probs.nrows() == 0 {
            return Err(Error::Contract("need at least one sample".into()));
        }
        if probs.ncols() < 2 {
            return Err(Error::Contract(format!("need at least 2 classes, got {}", probs.ncols())));
        }
        for (t, row) in probs.row_iter().enumerate() {
            let sum: Real = row.iter().sum();
            if (sum - 1.0).abs() > SIMPLEX_TOLERANCE || row.iter().any(|&p| !(p >= 0.0)) {
                return Err(Error::Contract(format!(
                    "sample {t} is not a probability vector (sum {sum})"
                )));
            }
        }
        Ok(PredictiveSamples { probs })
    }

    pub fn from_rows(rows: &[Vec<Real>]) -> Result<Self> {
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != c) {
            return Err(Error::shape("predictive samples", "rows of unequal length"));
        }
        Self::new(DMatrix::from_fn(rows.len(), c, |t, k| rows[t][k]))
    }

    pub fn probs(&self) -> &DMatrix<Real> {
        &self.probs
    }

    pub fn num_samples(&self) -> usize {
        self.probs.nrows()
    }

    pub fn num_classes(&self) -> usize {
        self.probs.ncols()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UncertaintyReport {
    pub aleatoric: DMatrix<Real>,
    pub epistemic: DMatrix<Real>,
    pub mean_probs: DVector<Real>,
    pub scalar_aleatoric: Real,
    pub scalar_epistemic: Real,
    pub predicted_class: usize,
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(v: &[Real]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn decompose(samples: &PredictiveSamples) -> UncertaintyReport {
    let p = &samples.probs;
    let (t, c) = (p.nrows(), p.ncols());
    let inv_t = 1.0 / t as Real;
    let mean: DVector<Real> = p.row_sum().transpose() * inv_t;
    let mut aleatoric = DMatrix::zeros(c, c);
    let mut epistemic = DMatrix::zeros(c, c);
    for row in p.row_iter() {
        let pt: DVector<Real> = row.transpose();
        let mut a = -(&pt * pt.transpose());
        for k in 0..c {
            a[(k, k)] += pt[k];
        }
        aleatoric += a;
        let d = &pt - &mean;
        epistemic += &d * d.transpose();
    }
    aleatoric *= inv_t;
    epistemic *= inv_t;
    let scalar_aleatoric = aleatoric.trace() / c as Real;
    let scalar_epistemic = epistemic.trace() / c as Real;
    let predicted_class = argmax(mean.as_slice());
    UncertaintyReport {
        aleatoric,
        epistemic,
        mean_probs: mean,
        scalar_aleatoric,
        scalar_epistemic,
        predicted_class,
    }
}

/// `T` forward passes over `images` (`[N, C, H, W]`), one
/// [`PredictiveSamples`] per image.
///
/// Pass `t` keys an image's noise by `(seed, t)` and a hash of its pixels,
/// so an image's samples do not depend on which other images share the
/// call (equal images get equal samples) while distinct images draw
/// independent noise. With `stochastic = false` every pass uses the
/// posterior means.
pub fn mc_predict(
    model: &Model,
    images: &Tensor,
    samples: usize,
    normalizer: NormalizerKind,
    seed: u64,
    stochastic: bool,
) -> Result<Vec<PredictiveSamples>> {
    if samples == 0 {
        return Err(Error::Contract("need at least one predictive sample".into()));
    }
    let n = images.shape().first().copied().unwrap_or(0);
    let c = model.spec.num_classes;
    let mut rows: Vec<Vec<Vec<Real>>> = vec![Vec::with_capacity(samples); n];
    let per_image = images.len().checked_div(n).unwrap_or(0);
    let content: Vec<u64> = images
        .data()
        .chunks(per_image.max(1))
        .map(|px| derive_seed(px.len() as u64, &px.iter().map(|v| v.to_bits()).collect::<Vec<_>>()))
        .collect();
    for t in 0..samples {
        let seeds = content.iter().map(|&h| derive_seed(seed, &[t as u64, h])).collect();
        let noise = NoiseStream::per_sample(seeds, 0);
        let logits = model.forward(images, &noise, stochastic)?;
        for (img, l) in logits.data().chunks(c).enumerate() {
            rows[img].push(normalizer.apply(l)?);
        }
    }
    rows.iter().map(|r| PredictiveSamples::from_rows(r)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImageUncertainty {
    pub scalar_aleatoric: Real,
    pub scalar_epistemic: Real,
    pub predicted: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchUncertainty {
    pub aleatoric: Real,
    pub epistemic: Real,
    /// Fraction of correct predictions when labels were given.
    pub accuracy: Option<Real>,
    pub per_image: Vec<ImageUncertainty>,
}

/// Per-image decomposition over `images`, then the arithmetic mean of the
/// scalar summaries. Processes images in fixed-size chunks.
pub fn batch_uncertainty(
    model: &Model,
    images: &Tensor,
    labels: Option<&[usize]>,
    samples: usize,
    normalizer: NormalizerKind,
    seed: u64,
    stochastic: bool,
) -> Result<BatchUncertainty> {
    let n = images.shape().first().copied().unwrap_or(0);
    if n == 0 {
        return Err(Error::Contract("no images to evaluate".into()));
    }
    if let Some(l) = labels {
        if l.len() != n {
            return Err(Error::shape("batch_uncertainty", format!("{n} images vs {} labels", l.len())));
        }
    }
    let mut per_image = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let end = (start + EVAL_CHUNK).min(n);
        let chunk = images.slice_outer(start, end);
        for s in mc_predict(model, &chunk, samples, normalizer, seed, stochastic)? {
            let r = decompose(&s);
            per_image.push(ImageUncertainty {
                scalar_aleatoric: r.scalar_aleatoric,
                scalar_epistemic: r.scalar_epistemic,
                predicted: r.predicted_class,
            });
        }
        start = end;
    }
    let mean = |f: fn(&ImageUncertainty) -> Real| per_image.iter().map(f).sum::<Real>() / n as Real;
    let accuracy = labels.map(|l| {
        let hits = per_image.iter().zip(l).filter(|(u, &y)| u.predicted == y).count();
        hits as Real / n as Real
    });
    Ok(BatchUncertainty {
        aleatoric: mean(|u| u.scalar_aleatoric),
        epistemic: mean(|u| u.scalar_epistemic),
        accuracy,
        per_image,
    })
}
