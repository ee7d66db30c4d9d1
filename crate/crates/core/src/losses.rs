//! Supervised, distillation and pseudo-label losses plus the epoch-scheduled total.
//!
//! Every loss reduces per sample first and then averages over the samples
//! that contribute. The deterministic stream acts as teacher: its features
//! and predictions enter the distillation and consistency terms through
//! [`Graph::stop_gradient`] unless `bidirectional` is set.

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Probabilities are clamped into `[PROB_CLAMP, 1 - PROB_CLAMP]` before any log.
pub const PROB_CLAMP: f64 = 1e-7;

/// Labels over `T` classes: `1` positive, `-1` negative, `0` unknown.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct PartialLabelVector(Vec<i8>);

impl PartialLabelVector {
    pub fn new(values: Vec<i8>) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !matches!(v, -1..=1)) {
            return Err(Error::Config(format!("label value {v} outside {{1, 0, -1}}")));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[i8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_known(&self, t: usize) -> bool {
        self.0[t] != 0
    }

    /// Known-label indicator, one entry per class.
    pub fn delta(&self) -> Vec<bool> {
        self.0.iter().map(|&v| v != 0).collect()
    }

    pub fn known_count(&self) -> usize {
        self.0.iter().filter(|&&v| v != 0).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub tau: f64,
    /// `lambda3` is zero for epochs `1..=warmup_epochs`.
    pub warmup_epochs: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 0.05,
            lambda2: 1.0,
            lambda3: 0.6,
            tau: 0.95,
            warmup_epochs: 5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.5 && self.tau < 1.0) {
            return Err(Error::Config(format!("tau must lie in (0.5, 1), got {}", self.tau)));
        }
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be nonnegative, got {v}")));
            }
        }
        Ok(())
    }

    /// Pseudo-label weight in effect at a 1-based epoch.
    pub fn lambda3_at(&self, epoch: usize) -> f64 {
        if epoch <= self.warmup_epochs {
            0.0
        } else {
            self.lambda3
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Bandwidth {
    /// `{0.5 m, m, 2 m}` with `m` the median pairwise distance of the pooled samples.
    Median,
    Fixed(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct MmdConfig {
    pub bandwidth: Bandwidth,
    /// Per-sample kernel distance instead of the batch estimator.
    pub pointwise: bool,
}

impl Default for MmdConfig {
    fn default() -> Self {
        Self {
            bandwidth: Bandwidth::Median,
            pointwise: false,
        }
    }
}

impl MmdConfig {
    pub fn validate(&self) -> Result<()> {
        if let Bandwidth::Fixed(list) = &self.bandwidth {
            if list.is_empty() {
                return Err(Error::Config("at least one kernel bandwidth required".into()));
            }
            if let Some(&h) = list.iter().find(|h| !(**h > 0.0 && h.is_finite())) {
                return Err(Error::InvalidBandwidth(h));
            }
        }
        Ok(())
    }
}

fn batch_dims(g: &Graph, probs: Var, labels: &[PartialLabelVector]) -> Result<(usize, usize)> {
    let shape = g.shape(probs);
    let [b, t] = shape[..] else {
        return Err(Error::InvalidShape(format!(
            "predictions must be B x T, got {shape:?}"
        )));
    };
    if labels.len() != b || labels.iter().any(|l| l.len() != t) {
        return Err(Error::ShapeMismatch {
            op: "labels",
            lhs: shape.to_vec(),
            rhs: vec![labels.len(), labels.first().map_or(0, PartialLabelVector::len)],
        });
    }
    Ok((b, t))
}

fn clamp_probs(g: &mut Graph, p: Var) -> Result<Var> {
    g.clamp(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
}

fn weighted_sum(g: &mut Graph, x: Var, weights: Vec<f64>, shape: &[usize]) -> Result<Var> {
    let w = g.constant(Tensor::new(shape.to_vec(), weights)?);
    let p = g.mul(x, w)?;
    g.sum_all(p)
}

fn teacher(g: &mut Graph, x: Var, bidirectional: bool) -> Result<Var> {
    if bidirectional {
        Ok(x)
    } else {
        g.stop_gradient(x)
    }
}

/// Partial binary cross-entropy over known labels of the deterministic predictions.
pub fn partial_bce(g: &mut Graph, y_hat: Var, labels: &[PartialLabelVector]) -> Result<Var> {
    let (b, t) = batch_dims(g, y_hat, labels)?;
    let contributing = labels.iter().filter(|l| l.known_count() > 0).count();
    if contributing == 0 {
        return Err(Error::NoSupervision);
    }
    let mut pos = vec![0.0; b * t];
    let mut neg = vec![0.0; b * t];
    for (i, l) in labels.iter().enumerate() {
        let k = l.known_count();
        if k == 0 {
            continue;
        }
        let scale = 1.0 / (k as f64 * contributing as f64);
        for (j, &v) in l.values().iter().enumerate() {
            match v {
                1 => pos[i * t + j] = scale,
                -1 => neg[i * t + j] = scale,
                _ => {}
            }
        }
    }
    let p = clamp_probs(g, y_hat)?;
    let log_p = g.log(p)?;
    let q = g.one_minus(p)?;
    let log_q = g.log(q)?;
    let a = weighted_sum(g, log_p, pos, &[b, t])?;
    let c = weighted_sum(g, log_q, neg, &[b, t])?;
    let s = g.add(a, c)?;
    g.neg(s)
}

/// KL self-distillation from deterministic to probabilistic predictions on known classes.
///
/// The default keeps only the positive-probability term,
/// `y_hat * log(y_hat / y_bar)`; `full_bernoulli` adds the complementary term.
pub fn kl_self_distill(
    g: &mut Graph,
    y_hat: Var,
    y_bar: Var,
    labels: &[PartialLabelVector],
    full_bernoulli: bool,
    bidirectional: bool,
) -> Result<Var> {
    let (b, t) = batch_dims(g, y_hat, labels)?;
    if g.shape(y_bar) != g.shape(y_hat) {
        return Err(Error::ShapeMismatch {
            op: "kl_self_distill",
            lhs: g.shape(y_hat).to_vec(),
            rhs: g.shape(y_bar).to_vec(),
        });
    }
    let contributing = labels.iter().filter(|l| l.known_count() > 0).count();
    if contributing == 0 {
        return Err(Error::NoSupervision);
    }
    let mut w = vec![0.0; b * t];
    for (i, l) in labels.iter().enumerate() {
        let k = l.known_count();
        for (j, known) in l.delta().into_iter().enumerate() {
            if known {
                w[i * t + j] = 1.0 / (k as f64 * contributing as f64);
            }
        }
    }
    let th = teacher(g, y_hat, bidirectional)?;
    let p = clamp_probs(g, th)?;
    let q = clamp_probs(g, y_bar)?;
    let log_p = g.log(p)?;
    let log_q = g.log(q)?;
    let diff = g.sub(log_p, log_q)?;
    let mut term = g.mul(p, diff)?;
    if full_bernoulli {
        let p1 = g.one_minus(p)?;
        let q1 = g.one_minus(q)?;
        let lp1 = g.log(p1)?;
        let lq1 = g.log(q1)?;
        let d1 = g.sub(lp1, lq1)?;
        let t1 = g.mul(p1, d1)?;
        term = g.add(term, t1)?;
    }
    weighted_sum(g, term, w, &[b, t])
}

/// Hard pseudo-label cross-entropy on unknown classes.
///
/// Unknown classes whose clamped teacher probability exceeds `tau` (or falls
/// below `1 - tau`) supervise the probabilistic prediction as positive (or
/// negative). Fully labelled samples contribute nothing; with no confident
/// pseudo label anywhere the loss is exactly zero.
pub fn pseudo_label_consistency(
    g: &mut Graph,
    y_hat: Var,
    y_bar: Var,
    labels: &[PartialLabelVector],
    tau: f64,
    bidirectional: bool,
) -> Result<Var> {
    let (b, t) = batch_dims(g, y_hat, labels)?;
    if g.shape(y_bar) != g.shape(y_hat) {
        return Err(Error::ShapeMismatch {
            op: "pseudo_label_consistency",
            lhs: g.shape(y_hat).to_vec(),
            rhs: g.shape(y_bar).to_vec(),
        });
    }
    let th = teacher(g, y_hat, bidirectional)?;
    let p = clamp_probs(g, th)?;
    let probs = g.data(p).to_vec();
    let contributing = labels.iter().filter(|l| l.known_count() < t).count();
    let mut pos = vec![0.0; b * t];
    let mut neg = vec![0.0; b * t];
    let mut any = false;
    for (i, l) in labels.iter().enumerate() {
        let unknown = t - l.known_count();
        if unknown == 0 {
            continue;
        }
        let scale = 1.0 / (unknown as f64 * contributing as f64);
        for j in 0..t {
            if l.is_known(j) {
                continue;
            }
            let pr = probs[i * t + j];
            if pr > tau {
                pos[i * t + j] = scale;
                any = true;
            } else if pr < 1.0 - tau {
                neg[i * t + j] = scale;
                any = true;
            }
        }
    }
    if !any {
        return g.scalar(0.0);
    }
    let q = clamp_probs(g, y_bar)?;
    let log_q = g.log(q)?;
    let q1 = g.one_minus(q)?;
    let log_q1 = g.log(q1)?;
    let a = weighted_sum(g, log_q, pos, &[b, t])?;
    let c = weighted_sum(g, log_q1, neg, &[b, t])?;
    let s = g.add(a, c)?;
    g.neg(s)
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Median pairwise distance among the `2B` pooled samples of each class.
fn median_distances(x: &[f64], y: &[f64], b: usize, t: usize, c: usize) -> Vec<f64> {
    (0..t)
        .map(|tt| {
            let point = |i: usize| -> &[f64] {
                let (src, bi) = if i < b { (x, i) } else { (y, i - b) };
                &src[(bi * t + tt) * c..(bi * t + tt + 1) * c]
            };
            let mut d = Vec::with_capacity(b * (2 * b - 1));
            for i in 0..2 * b {
                for j in i + 1..2 * b {
                    let s: f64 = point(i)
                        .iter()
                        .zip(point(j))
                        .map(|(p, q)| (p - q) * (p - q))
                        .sum();
                    d.push(s.sqrt());
                }
            }
            let m = median(d);
            if m > 1e-12 {
                m
            } else {
                1.0
            }
        })
        .collect()
}

/// Squared distances `T x B x B` between rows of two `T x B x C` tensors.
fn pairwise_sq(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let [t, n, c] = g.shape(a)[..] else { unreachable!() };
    let a4 = g.reshape(a, &[t, n, 1, c])?;
    let b4 = g.reshape(b, &[t, 1, n, c])?;
    let d = g.sub(a4, b4)?;
    let d2 = g.square(d)?;
    g.sum(d2, &[3], false)
}

/// Sum over bandwidths of `exp(-d2 / (2 h^2))`, bandwidths given per class.
fn kernel_sum(g: &mut Graph, d2: Var, bandwidths: &[Vec<f64>]) -> Result<Var> {
    let t = bandwidths.len();
    let rank = g.shape(d2).len();
    let mut shape = vec![1; rank];
    shape[0] = t;
    let mut acc: Option<Var> = None;
    for h in 0..bandwidths[0].len() {
        let coef: Vec<f64> = bandwidths.iter().map(|hs| -0.5 / (hs[h] * hs[h])).collect();
        let c = g.constant(Tensor::new(shape.clone(), coef)?);
        let z = g.mul(d2, c)?;
        let k = g.exp(z)?;
        acc = Some(match acc {
            Some(a) => g.add(a, k)?,
            None => k,
        });
    }
    acc.ok_or_else(|| Error::Config("empty bandwidth set".into()))
}

/// Gaussian-kernel MMD between deterministic and probabilistic class features,
/// averaged over classes. Inputs are `B x T x C`.
pub fn mmd_loss(
    g: &mut Graph,
    f: Var,
    f_dot: Var,
    cfg: &MmdConfig,
    bidirectional: bool,
) -> Result<Var> {
    cfg.validate()?;
    let shape = g.shape(f).to_vec();
    let [b, t, c] = shape[..] else {
        return Err(Error::InvalidShape(format!(
            "class features must be B x T x C, got {shape:?}"
        )));
    };
    if g.shape(f_dot) != shape.as_slice() {
        return Err(Error::ShapeMismatch {
            op: "mmd_loss",
            lhs: shape,
            rhs: g.shape(f_dot).to_vec(),
        });
    }
    let x = teacher(g, f, bidirectional)?;
    let raw: Vec<Vec<f64>> = match &cfg.bandwidth {
        Bandwidth::Median => median_distances(g.data(x), g.data(f_dot), b, t, c)
            .into_iter()
            .map(|m| vec![0.5 * m, m, 2.0 * m])
            .collect(),
        Bandwidth::Fixed(list) => vec![list.clone(); t],
    };
    let per_class = raw[0].len();
    let flat = g.freeze(raw.concat())?;
    let bandwidths: Vec<Vec<f64>> = flat.chunks(per_class).map(<[f64]>::to_vec).collect();

    let xt = g.permute(x, &[1, 0, 2])?;
    let yt = g.permute(f_dot, &[1, 0, 2])?;
    if cfg.pointwise {
        // T x B: 2 * n_bandwidths - 2 * sum_h k(f, f_dot)
        let d = g.sub(xt, yt)?;
        let d2 = g.square(d)?;
        let d2 = g.sum(d2, &[2], false)?;
        let k = kernel_sum(g, d2, &bandwidths)?;
        let mk = g.mean_all(k)?;
        let s = g.mul_scalar(mk, -2.0)?;
        return g.add_scalar(s, 2.0 * per_class as f64);
    }
    let dxx = pairwise_sq(g, xt, xt)?;
    let dyy = pairwise_sq(g, yt, yt)?;
    let dxy = pairwise_sq(g, xt, yt)?;
    let kxx = kernel_sum(g, dxx, &bandwidths)?;
    let kyy = kernel_sum(g, dyy, &bandwidths)?;
    let kxy = kernel_sum(g, dxy, &bandwidths)?;
    let mxx = g.mean_all(kxx)?;
    let myy = g.mean_all(kyy)?;
    let mxy = g.mean_all(kxy)?;
    let within = g.add(mxx, myy)?;
    let cross = g.mul_scalar(mxy, 2.0)?;
    g.sub(within, cross)
}

/// Which auxiliary terms take part in training.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LossToggles {
    pub feature_distill: bool,
    pub self_distill: bool,
    pub consistency: bool,
}

impl Default for LossToggles {
    fn default() -> Self {
        Self::all()
    }
}

impl LossToggles {
    pub fn all() -> Self {
        Self {
            feature_distill: true,
            self_distill: true,
            consistency: true,
        }
    }

    pub fn none() -> Self {
        Self {
            feature_distill: false,
            self_distill: false,
            consistency: false,
        }
    }
}

/// Loss nodes of one forward pass; disabled terms are `None`.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub ce: Var,
    pub feature_distill: Option<Var>,
    pub self_distill: Option<Var>,
    pub consistency: Option<Var>,
}

/// `ce + l1 * f_dist + l2 * s_dist + l3(epoch) * con` at a 1-based epoch.
pub fn total_loss(g: &mut Graph, terms: &LossTerms, weights: &LossWeights, epoch: usize) -> Result<Var> {
    if epoch == 0 {
        return Err(Error::Config("epochs are numbered from 1".into()));
    }
    let mut total = terms.ce;
    for (term, coef) in [
        (terms.feature_distill, weights.lambda1),
        (terms.self_distill, weights.lambda2),
        (terms.consistency, weights.lambda3_at(epoch)),
    ] {
        if let Some(v) = term {
            if coef != 0.0 {
                let scaled = g.mul_scalar(v, coef)?;
                total = g.add(total, scaled)?;
            }
        }
    }
    Ok(total)
}
