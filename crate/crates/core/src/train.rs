//! Training loop, per-step objective and evaluation.

use std::fmt::Write as _;

use crate::autodiff::{AdamConfig, AdamState, Graph, Tensor, Var};
use crate::decoupling::TextEmbeddingMatrix;
use crate::dsu::RandomSource;
use crate::error::{Error, Result};
use crate::losses::{
    kl_self_distill, mmd_loss, partial_bce, pseudo_label_consistency, total_loss, LossTerms,
    LossToggles, LossWeights, MmdConfig, PartialLabelVector,
};
use crate::metrics::{aggregate, binarize, MetricsReport, TaskResult};
use crate::model::{ModelVars, TwoStreamModel};
use crate::synth::{batches, derive_seed, MetaDataset, Split};

/// Stream tags for [`derive_seed`].
const BATCH_STREAM: u64 = 1;
const DSU_STREAM: u64 = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct Objective {
    pub weights: LossWeights,
    pub mmd: MmdConfig,
    pub toggles: LossToggles,
    pub full_bernoulli_kl: bool,
    /// Let distillation gradients reach the deterministic stream too.
    pub bidirectional: bool,
}

impl Default for Objective {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            mmd: MmdConfig::default(),
            toggles: LossToggles::all(),
            full_bernoulli_kl: false,
            bidirectional: false,
        }
    }
}

impl Objective {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.mmd.validate()
    }

    fn needs_probabilistic_stream(&self) -> bool {
        let t = self.toggles;
        t.feature_distill || t.self_distill || t.consistency
    }
}

fn named<T>(component: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::NonFinite(op) => Error::NumericalFailure {
            component: format!("{component} ({op})"),
            value: f64::NAN,
        },
        other => other,
    })
}

/// Builds the total loss for one batch at a 1-based epoch. The
/// probabilistic stream (and its random draws) is skipped when no term needs it.
#[allow(clippy::too_many_arguments)]
pub fn batch_objective(
    g: &mut Graph,
    model: &TwoStreamModel,
    vars: &ModelVars,
    x: Var,
    text: Var,
    labels: &[PartialLabelVector],
    rng: &mut RandomSource,
    epoch: usize,
    obj: &Objective,
) -> Result<(Var, LossTerms)> {
    let t = obj.toggles;
    let terms = if obj.needs_probabilistic_stream() {
        let out = named("forward", model.forward_train(g, vars, x, text, rng, true))?;
        let ce = named("ce", partial_bce(g, out.y_hat, labels))?;
        let feature_distill = if t.feature_distill {
            Some(named(
                "feature_distill",
                mmd_loss(g, out.f, out.f_dot, &obj.mmd, obj.bidirectional),
            )?)
        } else {
            None
        };
        let self_distill = if t.self_distill {
            Some(named(
                "self_distill",
                kl_self_distill(g, out.y_hat, out.y_bar, labels, obj.full_bernoulli_kl, obj.bidirectional),
            )?)
        } else {
            None
        };
        let consistency = if t.consistency {
            Some(named(
                "consistency",
                pseudo_label_consistency(g, out.y_hat, out.y_bar, labels, obj.weights.tau, obj.bidirectional),
            )?)
        } else {
            None
        };
        LossTerms {
            ce,
            feature_distill,
            self_distill,
            consistency,
        }
    } else {
        let (y_hat, _) = named("forward", model.forward_deterministic(g, vars, x, text))?;
        LossTerms {
            ce: named("ce", partial_bce(g, y_hat, labels))?,
            feature_distill: None,
            self_distill: None,
            consistency: None,
        }
    };
    let total = named("total", total_loss(g, &terms, &obj.weights, epoch))?;
    Ok((total, terms))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: AdamConfig,
    /// The learning rate is multiplied by `decay_factor` every `decay_every` epochs.
    pub decay_every: usize,
    pub decay_factor: f64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 16,
            seed: 0,
            optimizer: AdamConfig {
                lr: 1e-5,
                weight_decay: 5e-4,
                ..AdamConfig::default()
            },
            decay_every: 10,
            decay_factor: 0.1,
        }
    }
}

impl TrainSettings {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.decay_every == 0 {
            return Err(Error::Config("epochs, batch_size and decay_every must be at least 1".into()));
        }
        if !(self.optimizer.lr > 0.0) || !(self.decay_factor > 0.0) {
            return Err(Error::Config("learning rate and decay factor must be positive".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let steps = (epoch.saturating_sub(1) / self.decay_every) as i32;
        self.optimizer.lr * self.decay_factor.powi(steps)
    }
}

/// Epoch means of every loss component.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub ce: f64,
    pub feature_distill: f64,
    pub self_distill: f64,
    pub consistency: f64,
    pub total: f64,
    pub lambda3: f64,
    pub lr: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    /// `key = value` lines of the run configuration.
    pub header: Vec<String>,
    pub rows: Vec<EpochRow>,
}

impl TrainLog {
    pub const COLUMNS: &'static str =
        "epoch,ce,feature_distill,self_distill,consistency,total,lambda3,lr,seed";

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for line in &self.header {
            let _ = writeln!(out, "# {line}");
        }
        let _ = writeln!(out, "{}", Self::COLUMNS);
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                r.epoch, r.ce, r.feature_distill, r.self_distill, r.consistency, r.total, r.lambda3, r.lr, r.seed
            );
        }
        out
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut log = TrainLog::default();
        let mut seen_columns = false;
        for (i, line) in text.lines().enumerate() {
            let bad = |msg: &str| Error::Parse {
                line: i + 1,
                msg: msg.to_string(),
            };
            if let Some(h) = line.strip_prefix("# ") {
                log.header.push(h.to_string());
                continue;
            }
            if !seen_columns {
                if line != Self::COLUMNS {
                    return Err(bad("unexpected column header"));
                }
                seen_columns = true;
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 9 {
                return Err(bad("expected 9 fields"));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(&format!("not a number: {s}")));
            log.rows.push(EpochRow {
                epoch: f[0].parse().map_err(|_| bad("bad epoch"))?,
                ce: num(f[1])?,
                feature_distill: num(f[2])?,
                self_distill: num(f[3])?,
                consistency: num(f[4])?,
                total: num(f[5])?,
                lambda3: num(f[6])?,
                lr: num(f[7])?,
                seed: f[8].parse().map_err(|_| bad("bad seed"))?,
            });
        }
        Ok(log)
    }
}

fn finite(component: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NumericalFailure {
            component: component.to_string(),
            value: v,
        })
    }
}

/// Trains `model` in place over the training split. `on_epoch` runs after
/// every epoch, e.g. to write a checkpoint.
pub fn train<F>(
    model: &mut TwoStreamModel,
    data: &MetaDataset,
    text: &TextEmbeddingMatrix,
    obj: &Objective,
    settings: &TrainSettings,
    mut on_epoch: F,
) -> Result<TrainLog>
where
    F: FnMut(&TwoStreamModel, &EpochRow) -> Result<()>,
{
    obj.validate()?;
    settings.validate()?;
    let train_idx = data.indices(Split::Train);
    let mut adam = AdamState::new(settings.optimizer.clone(), model.params.tensors());
    let mut rng = RandomSource::new(derive_seed(settings.seed, DSU_STREAM));
    let mut log = TrainLog::default();
    for epoch in 1..=settings.epochs {
        let lr = settings.lr_at(epoch);
        adam.set_lr(lr);
        let mut sums = [0.0; 5];
        let order = batches(&train_idx, settings.batch_size, derive_seed(settings.seed, BATCH_STREAM), epoch)?;
        for idx in &order {
            let mut g = Graph::new();
            let (vars, mv) = model.bind(&mut g)?;
            let x = g.constant(data.images(idx)?);
            let tv = g.constant(text.matrix.clone());
            let labels = data.labels(idx);
            let (total, terms) = batch_objective(&mut g, model, &mv, x, tv, &labels, &mut rng, epoch, obj)?;
            let value = |v: Option<Var>| v.map_or(Ok(0.0), |v| g.item(v));
            let parts = [
                ("ce", g.item(terms.ce)?),
                ("feature_distill", value(terms.feature_distill)?),
                ("self_distill", value(terms.self_distill)?),
                ("consistency", value(terms.consistency)?),
                ("total", g.item(total)?),
            ];
            for (k, (name, v)) in parts.iter().enumerate() {
                sums[k] += finite(name, *v)?;
            }
            g.backward(total)?;
            let grads: Vec<Vec<f64>> = vars.iter().map(|&v| g.grad_or_zero(v)).collect();
            adam.step(model.params.tensors_mut(), &grads)?;
        }
        let n = order.len() as f64;
        let row = EpochRow {
            epoch,
            ce: sums[0] / n,
            feature_distill: sums[1] / n,
            self_distill: sums[2] / n,
            consistency: sums[3] / n,
            total: sums[4] / n,
            lambda3: obj.weights.lambda3_at(epoch),
            lr,
            seed: settings.seed,
        };
        log::info!("epoch {epoch}: total {:.5} ce {:.5}", row.total, row.ce);
        on_epoch(model, &row)?;
        log.rows.push(row);
    }
    Ok(log)
}

const EVAL_CHUNK: usize = 64;

/// Deterministic-stream probabilities for the given samples, `N x T` row-major.
pub fn predict(model: &TwoStreamModel, data: &MetaDataset, text: &TextEmbeddingMatrix, idx: &[usize]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(idx.len() * data.classes);
    for chunk in idx.chunks(EVAL_CHUNK) {
        let y: Tensor = model.forward_eval(&data.images(chunk)?, text)?;
        out.extend_from_slice(y.data());
    }
    Ok(out)
}

/// One result per (class, domain) against the full ground truth, thresholded at 0.5.
pub fn evaluate(
    model: &TwoStreamModel,
    data: &MetaDataset,
    text: &TextEmbeddingMatrix,
    split: Split,
) -> Result<MetricsReport> {
    let mut domains: Vec<u32> = data.indices(split).iter().map(|&i| data.samples[i].domain).collect();
    domains.sort_unstable();
    domains.dedup();
    if domains.is_empty() {
        return Err(Error::Empty("evaluation split"));
    }
    let t = data.classes;
    let mut results = Vec::new();
    for &d in &domains {
        let idx = data.domain_indices(split, d);
        let probs = predict(model, data, text, &idx)?;
        let pred = binarize(&probs, 0.5);
        for task in 0..t {
            let p: Vec<u8> = (0..idx.len()).map(|i| pred[i * t + task]).collect();
            let y: Vec<u8> = idx.iter().map(|&i| data.samples[i].truth[task]).collect();
            results.push(TaskResult::binary(task, d, &p, &y)?);
        }
    }
    aggregate(&results)
}
