//! Gaussian variational layers with local reparameterization.
//!
//! Each weight carries `q(w) = N(mu, alpha * mu^2)` with `log alpha` learned.
//! Instead of sampling weights, a forward pass samples pre-activations:
//!
//! ```text
//! m = A * mu                       (mean path)
//! v = A^2 * (exp(log_alpha) mu^2)  (variance path)
//! b = m + eps ⊙ sqrt(v),   eps ~ N(0, 1) per output element
//! ```
//!
//! where `*` is convolution (or a matrix product for fully-connected layers).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{Real, Tape, Tensor, Var};

/// Initial value of every `log alpha` entry (variance `e^-10 mu^2`).
pub const LOG_ALPHA_INIT: Real = -10.0;

/// Added under the square root of the variance path when differentiating.
pub const VARIANCE_STABILIZER: Real = 1e-16;

/// Variational posterior parameters of one weight tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianVariationalParams {
    pub mu: Tensor,
    pub log_alpha: Tensor,
}

impl GaussianVariationalParams {
    pub fn new(mu: Tensor, log_alpha: Tensor) -> Result<Self> {
        if mu.shape() != log_alpha.shape() {
            return Err(Error::shape(
                "variational params",
                format!("mu {:?} vs log_alpha {:?}", mu.shape(), log_alpha.shape()),
            ));
        }
        Ok(GaussianVariationalParams { mu, log_alpha })
    }

    /// Per-weight posterior variance `exp(log_alpha) * mu^2`.
    pub fn variance(&self) -> Tensor {
        let data = self
            .mu
            .data()
            .iter()
            .zip(self.log_alpha.data())
            .map(|(m, a)| a.exp() * m * m)
            .collect();
        Tensor::new(self.mu.shape(), data).expect("same shape")
    }
}

/// Gaussian prior `N(mean, std^2)` over every weight.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    pub mean: Real,
    pub std: Real,
}

impl Default for PriorSpec {
    fn default() -> Self {
        PriorSpec { mean: 0.0, std: 1.0 }
    }
}

impl PriorSpec {
    pub fn new(mean: Real, std: Real) -> Result<Self> {
        if !(std > 0.0) {
            return Err(Error::Contract(format!("prior std must be > 0, got {std}")));
        }
        Ok(PriorSpec { mean, std })
    }
}

/// Mixes `parts` into `base` (splitmix64 finalizer per part) to derive
/// independent seeds from structured keys such as `(epoch, batch, pass)`.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    parts.iter().fold(mix(base), |acc, &p| {
        mix(acc.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(mix(p)))
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum Keys {
    Sequential(u64),
    PerSample(Vec<u64>),
}

/// Seeded source of standard-normal variates for one layer.
///
/// A stream is keyed either by one seed (the whole tensor is filled from
/// a single generator) or by one seed per sample along the leading axis,
/// so a sample's noise does not depend on its batch neighbours. `stream`
/// selects an independent substream, one per layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NoiseStream {
    keys: Keys,
    stream: u64,
}

impl NoiseStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        NoiseStream {
            keys: Keys::Sequential(seed),
            stream,
        }
    }

    pub fn per_sample(seeds: Vec<u64>, stream: u64) -> Self {
        NoiseStream {
            keys: Keys::PerSample(seeds),
            stream,
        }
    }

    /// Same keys, different substream.
    pub fn substream(&self, stream: u64) -> Self {
        NoiseStream {
            keys: self.keys.clone(),
            stream,
        }
    }

    fn rng(&self, seed: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(self.stream);
        rng
    }

    /// Standard-normal tensor of `shape`. Deterministic: calling twice
    /// yields the same values.
    pub fn tensor(&self, shape: &[usize]) -> Result<Tensor> {
        match &self.keys {
            Keys::Sequential(seed) => Ok(Tensor::randn(shape, &mut self.rng(*seed))),
            Keys::PerSample(seeds) => {
                let n = shape.first().copied().unwrap_or(0);
                if seeds.len() != n {
                    return Err(Error::shape(
                        "noise",
                        format!("{} sample seeds for shape {shape:?}", seeds.len()),
                    ));
                }
                let per: usize = shape[1..].iter().product();
                let mut data = Vec::with_capacity(n * per);
                for &seed in seeds {
                    let mut rng = self.rng(seed);
                    data.extend((0..per).map(|_| rng.sample::<Real, _>(StandardNormal)));
                }
                Tensor::new(shape, data)
            }
        }
    }
}

/// How the posterior means are drawn at initialization.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MuInit {
    /// `N(0, 1/fan_in)`.
    #[default]
    FanIn,
    /// Plain `N(0, 1)`.
    StandardNormal,
}

/// Fresh posterior for a weight of `shape` with the given fan-in:
/// `mu` drawn per `init`, `log_alpha` set to [`LOG_ALPHA_INIT`].
pub fn init_params(shape: &[usize], fan_in: usize, seed: u64, init: MuInit) -> GaussianVariationalParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = match init {
        MuInit::FanIn => 1.0 / (fan_in.max(1) as Real).sqrt(),
        MuInit::StandardNormal => 1.0,
    };
    let mu = Tensor::randn(shape, &mut rng).map(|x| x * scale);
    GaussianVariationalParams {
        mu,
        log_alpha: Tensor::full(shape, LOG_ALPHA_INIT),
    }
}

/// Tape handles of one layer's variational parameters.
#[derive(Clone, Copy, Debug)]
pub struct BoundParams {
    pub mu: Var,
    pub log_alpha: Var,
}

/// `exp(log_alpha) ⊙ mu ⊙ mu` on the tape.
fn weight_variance(tape: &mut Tape, p: BoundParams) -> Result<Var> {
    let alpha = tape.exp(p.log_alpha);
    let mu_sq = tape.square(p.mu);
    tape.mul(alpha, mu_sq)
}

/// `mean + eps ⊙ sqrt(var)` with fresh `eps` for every element.
fn sample_activation(tape: &mut Tape, mean: Var, var: Var, noise: &NoiseStream) -> Result<Var> {
    let sd = tape.sqrt_stabilized(var, VARIANCE_STABILIZER)?;
    let eps = noise.tensor(tape.shape(mean))?;
    let eps = tape.constant(eps);
    let spread = tape.mul(eps, sd)?;
    tape.add(mean, spread)
}

/// Variational convolution. With `stochastic = false` this is exactly the
/// mean path `conv2d(input, mu) + bias`.
#[allow(clippy::too_many_arguments)]
pub fn bayes_conv2d(
    tape: &mut Tape,
    input: Var,
    params: BoundParams,
    bias: Option<Var>,
    stride: usize,
    padding: usize,
    noise: &NoiseStream,
    stochastic: bool,
) -> Result<Var> {
    let mut mean = tape.conv2d(input, params.mu, stride, padding)?;
    if let Some(b) = bias {
        mean = tape.add_channel_bias(mean, b)?;
    }
    if !stochastic {
        return Ok(mean);
    }
    let input_sq = tape.square(input);
    let w_var = weight_variance(tape, params)?;
    let var = tape.conv2d(input_sq, w_var, stride, padding)?;
    sample_activation(tape, mean, var, noise)
}

/// Variational fully-connected layer over `[N, D_in]` with `mu` of shape
/// `[D_in, D_out]`.
pub fn bayes_linear(
    tape: &mut Tape,
    input: Var,
    params: BoundParams,
    bias: Option<Var>,
    noise: &NoiseStream,
    stochastic: bool,
) -> Result<Var> {
    let mean = tape.affine(input, params.mu, bias)?;
    if !stochastic {
        return Ok(mean);
    }
    let input_sq = tape.square(input);
    let w_var = weight_variance(tape, params)?;
    let var = tape.affine(input_sq, w_var, None)?;
    sample_activation(tape, mean, var, noise)
}
