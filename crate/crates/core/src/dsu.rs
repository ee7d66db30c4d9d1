//! Feature-statistics perturbation with batch-estimated uncertainty.
//!
//! Per-instance channel means and standard deviations are treated as the
//! centres of Gaussians whose scales are the spread of those statistics
//! across the batch. A sampled mean and standard deviation then replace the
//! originals on the instance-normalised features.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

pub const SIGMA_FLOOR: f64 = 1e-8;

/// Seeded standard-normal generator that counts its draws.
#[derive(Clone, Debug)]
pub struct RandomSource {
    rng: ChaCha8Rng,
    draws: u64,
}

impl RandomSource {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            draws: 0,
        }
    }

    pub fn normal(&mut self) -> f64 {
        self.draws += 1;
        StandardNormal.sample(&mut self.rng)
    }

    pub fn draws(&self) -> u64 {
        self.draws
    }
}

/// How the batch spread of a statistic becomes a sampling scale.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum UncertaintyScope {
    /// Standard deviation over the batch.
    #[default]
    Std,
    /// Variance over the batch.
    Var,
}

impl std::str::FromStr for UncertaintyScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "std" => Ok(Self::Std),
            "var" => Ok(Self::Var),
            other => Err(Error::Config(format!("dsu_scope must be std|var, got {other}"))),
        }
    }
}

impl std::fmt::Display for UncertaintyScope {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Std => "std",
            Self::Var => "var",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats {
    pub batch: usize,
    pub channels: usize,
    /// `batch x channels`
    pub mu: Vec<f64>,
    /// `batch x channels`, floored at [`SIGMA_FLOOR`]
    pub sigma: Vec<f64>,
    pub sigma_mu: Vec<f64>,
    pub sigma_sigma: Vec<f64>,
}

/// Sampled replacement statistics, `batch x channels` each.
#[derive(Clone, Debug, PartialEq)]
pub struct Perturbation {
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
}

fn feature_dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape {
        [b, c, h, w] => Ok((*b, *c, h * w)),
        _ => Err(Error::InvalidShape(format!(
            "feature batch must be B x C x H x W, got {shape:?}"
        ))),
    }
}

/// Spread over the batch axis of a `batch x channels` table (1/B estimator).
fn batch_spread(values: &[f64], batch: usize, channels: usize, scope: UncertaintyScope) -> Vec<f64> {
    (0..channels)
        .map(|c| {
            let mean = (0..batch).map(|b| values[b * channels + c]).sum::<f64>() / batch as f64;
            let var = (0..batch)
                .map(|b| {
                    let d = values[b * channels + c] - mean;
                    d * d
                })
                .sum::<f64>()
                / batch as f64;
            match scope {
                UncertaintyScope::Std => var.sqrt(),
                UncertaintyScope::Var => var,
            }
        })
        .collect()
}

fn stats_from_moments(
    batch: usize,
    channels: usize,
    mu: Vec<f64>,
    var: &[f64],
    scope: UncertaintyScope,
) -> ChannelStats {
    let sigma: Vec<f64> = var
        .iter()
        .map(|v| v.max(SIGMA_FLOOR * SIGMA_FLOOR).sqrt())
        .collect();
    ChannelStats {
        sigma_mu: batch_spread(&mu, batch, channels, scope),
        sigma_sigma: batch_spread(&sigma, batch, channels, scope),
        batch,
        channels,
        mu,
        sigma,
    }
}

pub fn channel_stats(x: &Tensor, scope: UncertaintyScope) -> Result<ChannelStats> {
    let (batch, channels, hw) = feature_dims(x.shape())?;
    let data = x.data();
    let mut mu = Vec::with_capacity(batch * channels);
    let mut var = Vec::with_capacity(batch * channels);
    for plane in data.chunks(hw) {
        let m = plane.iter().sum::<f64>() / hw as f64;
        let v = plane.iter().map(|p| (p - m) * (p - m)).sum::<f64>() / hw as f64;
        mu.push(m);
        var.push(v);
    }
    Ok(stats_from_moments(batch, channels, mu, &var, scope))
}

/// Draws `epsilon_mu` then `epsilon_sigma` for each (instance, channel) in row-major order.
fn draw_noise(stats: &ChannelStats, rng: &mut RandomSource) -> (Vec<f64>, Vec<f64>) {
    let n = stats.batch * stats.channels;
    let mut e_mu = Vec::with_capacity(n);
    let mut e_sigma = Vec::with_capacity(n);
    for _ in 0..n {
        e_mu.push(rng.normal());
        e_sigma.push(rng.normal());
    }
    (e_mu, e_sigma)
}

pub fn sample_perturbation(stats: &ChannelStats, rng: &mut RandomSource) -> Perturbation {
    let (e_mu, e_sigma) = draw_noise(stats, rng);
    let c = stats.channels;
    let beta = (0..stats.mu.len())
        .map(|i| stats.mu[i] + e_mu[i] * stats.sigma_mu[i % c])
        .collect();
    let gamma = (0..stats.sigma.len())
        .map(|i| stats.sigma[i] + e_sigma[i] * stats.sigma_sigma[i % c])
        .collect();
    Perturbation { beta, gamma }
}

/// Offsets the sampled statistics add on top of the originals:
/// `(gamma - sigma, beta - mu)` per (instance, channel).
fn perturbation_offsets(stats: &ChannelStats, rng: &mut RandomSource) -> (Vec<f64>, Vec<f64>) {
    let (e_mu, e_sigma) = draw_noise(stats, rng);
    let c = stats.channels;
    let scale = e_sigma
        .iter()
        .enumerate()
        .map(|(i, e)| e * stats.sigma_sigma[i % c])
        .collect();
    let shift = e_mu
        .iter()
        .enumerate()
        .map(|(i, e)| e * stats.sigma_mu[i % c])
        .collect();
    (scale, shift)
}

/// `gamma * (x - mu) / sigma + beta`, evaluated as
/// `x + (gamma - sigma) * (x - mu) / sigma + (beta - mu)` so zero uncertainty
/// returns `x` exactly.
pub fn dsu_forward(
    x: &Tensor,
    stats: &ChannelStats,
    rng: &mut RandomSource,
    active: bool,
) -> Result<Tensor> {
    if !active {
        return Ok(x.clone());
    }
    let (batch, channels, hw) = feature_dims(x.shape())?;
    if batch != stats.batch || channels != stats.channels {
        return Err(Error::ShapeMismatch {
            op: "dsu_forward",
            lhs: x.shape().to_vec(),
            rhs: vec![stats.batch, stats.channels],
        });
    }
    let (scale, shift) = perturbation_offsets(stats, rng);
    if scale.iter().chain(&shift).all(|v| *v == 0.0) {
        return Ok(x.clone());
    }
    let mut out = x.data().to_vec();
    for (i, plane) in out.chunks_mut(hw).enumerate() {
        for v in plane.iter_mut() {
            let normed = (*v - stats.mu[i]) / stats.sigma[i];
            *v += scale[i] * normed + shift[i];
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Differentiable form used inside the model.
///
/// Gradient flows through the instance normalisation of `x`; the sampled
/// offsets are constants routed through the graph's freeze channel.
pub fn dsu_forward_graph(
    g: &mut Graph,
    x: Var,
    rng: &mut RandomSource,
    active: bool,
    scope: UncertaintyScope,
) -> Result<Var> {
    if !active {
        return Ok(x);
    }
    let (batch, channels, _) = feature_dims(g.shape(x))?;
    let mu = g.mean(x, &[2, 3], true)?;
    let var = g.variance(x, &[2, 3], true)?;
    let stats = stats_from_moments(batch, channels, g.data(mu).to_vec(), g.data(var), scope);
    let (scale, shift) = perturbation_offsets(&stats, rng);
    let frozen = g.freeze([scale, shift].concat())?;
    if frozen.iter().all(|v| *v == 0.0) {
        return Ok(x);
    }
    let n = batch * channels;
    let scale = g.constant(Tensor::new(vec![batch, channels, 1, 1], frozen[..n].to_vec())?);
    let shift = g.constant(Tensor::new(vec![batch, channels, 1, 1], frozen[n..].to_vec())?);
    let var = g.clamp(var, SIGMA_FLOOR * SIGMA_FLOOR, f64::INFINITY)?;
    let sigma = g.sqrt(var)?;
    let centred = g.sub(x, mu)?;
    let normed = g.div(centred, sigma)?;
    let delta = g.mul(normed, scale)?;
    let out = g.add(x, delta)?;
    g.add(out, shift)
}
