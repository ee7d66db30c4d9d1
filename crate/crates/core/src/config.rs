//! Flat `section.key = value` run configuration.

use std::collections::BTreeSet;
use std::fmt::Display;
use std::path::PathBuf;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::losses::Bandwidth;
use crate::model::ModelConfig;
use crate::synth::{DomainSpec, SynthConfig};
use crate::train::{Objective, TrainSettings};

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_pairs(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("expected `key = value`, got `{line}`"),
            });
        };
        let k = k.trim();
        if k.is_empty() || !k.contains('.') {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("key `{k}` must have the form section.key"),
            });
        }
        out.push((i + 1, k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Splits a `--set` argument `section.key=value`.
pub fn parse_override(arg: &str) -> Result<(String, String)> {
    let (k, v) = arg
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{arg}` must look like section.key=value")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

fn value<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse `{v}`")))
}

fn list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|x| value(key, x.trim())).collect()
}

fn join<T: Display>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn triple(key: &str, v: &str) -> Result<[usize; 3]> {
    let l: Vec<usize> = list(key, v)?;
    l.try_into()
        .map_err(|_| Error::Config(format!("{key}: expected three comma-separated values")))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Paths {
    pub dataset: PathBuf,
    /// Empty means pseudo embeddings from `text.seed`.
    pub embeddings: Option<PathBuf>,
    pub output: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            dataset: PathBuf::from("data/meta.psd"),
            embeddings: None,
            output: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum EvalSplit {
    Test,
    Unseen,
    All,
}

impl FromStr for EvalSplit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "test" => Ok(EvalSplit::Test),
            "unseen" => Ok(EvalSplit::Unseen),
            "all" => Ok(EvalSplit::All),
            _ => Err(Error::Config(format!("eval.split must be test, unseen or all, got `{s}`"))),
        }
    }
}

impl Display for EvalSplit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EvalSplit::Test => "test",
            EvalSplit::Unseen => "unseen",
            EvalSplit::All => "all",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblateConfig {
    pub seeds: Vec<u64>,
    /// Any of `flags`, `tau`, `lambda`.
    pub sweeps: Vec<String>,
    pub taus: Vec<f64>,
    pub lambda1: Vec<f64>,
    pub lambda2: Vec<f64>,
    pub lambda3: Vec<f64>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            sweeps: vec!["flags".into()],
            taus: vec![0.99, 0.95, 0.90, 0.85],
            lambda1: vec![0.1, 0.05, 0.025],
            lambda2: vec![0.5, 1.0, 2.0],
            lambda3: vec![0.4, 0.6, 0.8],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckConfig {
    pub batch: usize,
    pub classes: usize,
    pub input: [usize; 3],
    pub widths: Vec<usize>,
    pub downsample: Vec<usize>,
    pub text_dim: usize,
    /// Low enough that random predictions yield pseudo labels.
    pub tau: f64,
    pub tolerance: f64,
    pub seed: u64,
    /// Scales the backward pass through the first stage; the audit must then fail.
    pub corrupt_backward: bool,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            batch: 3,
            classes: 3,
            input: [2, 4, 4],
            widths: vec![3, 4],
            downsample: vec![1, 2],
            text_dim: 4,
            tau: 0.55,
            tolerance: 1e-3,
            seed: 0,
            corrupt_backward: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub paths: Paths,
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub objective: Objective,
    pub train: TrainSettings,
    pub text_seed: u64,
    pub eval_split: EvalSplit,
    pub ablate: AblateConfig,
    pub grad_check: GradCheckConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut train = TrainSettings::default();
        train.optimizer.lr = 3e-4;
        Self {
            paths: Paths::default(),
            synth: SynthConfig::default(),
            model: ModelConfig::default(),
            objective: Objective::default(),
            train,
            text_seed: 0,
            eval_split: EvalSplit::All,
            ablate: AblateConfig::default(),
            grad_check: GradCheckConfig::default(),
        }
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "on" => Ok(true),
        "false" | "0" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got `{v}`"))),
    }
}

fn domain_mut<'a>(synth: &'a mut SynthConfig, id: u32) -> Option<&'a mut DomainSpec> {
    synth
        .train_domains
        .iter_mut()
        .chain(synth.unseen_domains.iter_mut())
        .find(|d| d.id == id)
}

impl RunConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_text_with(text, &[])
    }

    /// Parses `text`, then applies `overrides` in order, then validates.
    pub fn from_text_with(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = BTreeSet::new();
        for (line, k, v) in parse_pairs(text)? {
            if !seen.insert(k.clone()) {
                return Err(Error::Parse {
                    line,
                    msg: format!("duplicate key `{k}`"),
                });
            }
            cfg.set(&k, &v).map_err(|e| Error::Parse {
                line,
                msg: e.to_string(),
            })?;
        }
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.model.validate()?;
        if self.model.classes != self.synth.classes || self.model.encoder.input != self.synth.input {
            return Err(Error::Config("model and data dimensions disagree".into()));
        }
        self.objective.validate()?;
        self.train.validate()?;
        if self.ablate.seeds.is_empty() {
            return Err(Error::Config("ablate.seeds must list at least one seed".into()));
        }
        for s in &self.ablate.sweeps {
            if !["flags", "tau", "lambda"].contains(&s.as_str()) {
                return Err(Error::Config(format!("ablate.sweeps: unknown sweep `{s}`")));
            }
        }
        Ok(())
    }

    /// Applies one key; unknown keys are errors.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let k = key;
        match k {
            "paths.dataset" => self.paths.dataset = v.into(),
            "paths.embeddings" => self.paths.embeddings = (!v.is_empty()).then(|| v.into()),
            "paths.output" => self.paths.output = v.into(),

            "data.classes" => {
                self.synth.classes = value(k, v)?;
                self.model.classes = self.synth.classes;
            }
            "data.input" => {
                self.synth.input = triple(k, v)?;
                self.model.encoder.input = self.synth.input;
            }
            "data.amplitude" => self.synth.amplitude = value(k, v)?,
            "data.background" => self.synth.background = value(k, v)?,
            "data.seed" => self.synth.seed = value(k, v)?,
            "data.prototype_seed" => self.synth.prototype_seed = value(k, v)?,
            "data.train_domains" | "data.unseen_domains" => {
                let ids: Vec<u32> = list(k, v)?;
                let mut all: Vec<DomainSpec> = self
                    .synth
                    .train_domains
                    .drain(..)
                    .chain(self.synth.unseen_domains.drain(..))
                    .collect();
                let mut pick = |id: u32| -> DomainSpec {
                    match all.iter().position(|d| d.id == id) {
                        Some(i) => all.remove(i),
                        None => DomainSpec {
                            id,
                            scale: vec![1.0; self.synth.input[0]],
                            offset: vec![0.0; self.synth.input[0]],
                            noise: 0.15,
                            labeled: (0..self.synth.classes).collect(),
                            samples: 400,
                            test_samples: 0,
                            prevalence: vec![0.3; self.synth.classes],
                        },
                    }
                };
                let chosen: Vec<DomainSpec> = ids.iter().map(|&id| pick(id)).collect();
                let (train, unseen) = if k == "data.train_domains" {
                    (chosen, std::mem::take(&mut all))
                } else {
                    (std::mem::take(&mut all), chosen)
                };
                self.synth.train_domains = train;
                self.synth.unseen_domains = unseen;
            }
            _ if k.starts_with("domain.") => self.set_domain(k, v)?,

            "model.widths" => self.model.encoder.widths = list(k, v)?,
            "model.downsample" => self.model.encoder.downsample = list(k, v)?,
            "model.text_dim" => self.model.text_dim = value(k, v)?,
            "model.attention_dim" => {
                self.model.attention_dim = if v == "auto" { None } else { Some(value(k, v)?) }
            }
            "model.tied_decoupling" => self.model.tied_decoupling = parse_bool(k, v)?,
            "model.dsu_scope" => self.model.dsu_scope = v.parse()?,
            "text.seed" => self.text_seed = value(k, v)?,

            "loss.lambda1" => self.objective.weights.lambda1 = value(k, v)?,
            "loss.lambda2" => self.objective.weights.lambda2 = value(k, v)?,
            "loss.lambda3" => self.objective.weights.lambda3 = value(k, v)?,
            "loss.tau" => self.objective.weights.tau = value(k, v)?,
            "loss.warmup_epochs" => self.objective.weights.warmup_epochs = value(k, v)?,
            "loss.feature_distill" => self.objective.toggles.feature_distill = parse_bool(k, v)?,
            "loss.self_distill" => self.objective.toggles.self_distill = parse_bool(k, v)?,
            "loss.consistency" => self.objective.toggles.consistency = parse_bool(k, v)?,
            "loss.full_bernoulli_kl" => self.objective.full_bernoulli_kl = parse_bool(k, v)?,
            "loss.bidirectional" => self.objective.bidirectional = parse_bool(k, v)?,
            "mmd.bandwidth" => {
                self.objective.mmd.bandwidth = if v == "median" {
                    Bandwidth::Median
                } else {
                    Bandwidth::Fixed(list(k, v)?)
                }
            }
            "mmd.pointwise" => self.objective.mmd.pointwise = parse_bool(k, v)?,

            "train.epochs" => self.train.epochs = value(k, v)?,
            "train.batch_size" => self.train.batch_size = value(k, v)?,
            "train.seed" => self.train.seed = value(k, v)?,
            "train.lr" => self.train.optimizer.lr = value(k, v)?,
            "train.beta1" => self.train.optimizer.beta1 = value(k, v)?,
            "train.beta2" => self.train.optimizer.beta2 = value(k, v)?,
            "train.eps" => self.train.optimizer.eps = value(k, v)?,
            "train.weight_decay" => self.train.optimizer.weight_decay = value(k, v)?,
            "train.decay_every" => self.train.decay_every = value(k, v)?,
            "train.decay_factor" => self.train.decay_factor = value(k, v)?,

            "eval.split" => self.eval_split = v.parse()?,

            "ablate.seeds" => self.ablate.seeds = list(k, v)?,
            "ablate.sweeps" => self.ablate.sweeps = list(k, v)?,
            "ablate.taus" => self.ablate.taus = list(k, v)?,
            "ablate.lambda1" => self.ablate.lambda1 = list(k, v)?,
            "ablate.lambda2" => self.ablate.lambda2 = list(k, v)?,
            "ablate.lambda3" => self.ablate.lambda3 = list(k, v)?,

            "gradcheck.batch" => self.grad_check.batch = value(k, v)?,
            "gradcheck.classes" => self.grad_check.classes = value(k, v)?,
            "gradcheck.input" => self.grad_check.input = triple(k, v)?,
            "gradcheck.widths" => self.grad_check.widths = list(k, v)?,
            "gradcheck.downsample" => self.grad_check.downsample = list(k, v)?,
            "gradcheck.text_dim" => self.grad_check.text_dim = value(k, v)?,
            "gradcheck.tau" => self.grad_check.tau = value(k, v)?,
            "gradcheck.tolerance" => self.grad_check.tolerance = value(k, v)?,
            "gradcheck.seed" => self.grad_check.seed = value(k, v)?,
            "gradcheck.corrupt_backward" => self.grad_check.corrupt_backward = parse_bool(k, v)?,
            _ => return Err(Error::Config(format!("unknown key `{k}`"))),
        }
        Ok(())
    }

    fn set_domain(&mut self, k: &str, v: &str) -> Result<()> {
        let mut parts = k.splitn(3, '.').skip(1);
        let (Some(id), Some(field)) = (parts.next(), parts.next()) else {
            return Err(Error::Config(format!("`{k}` must look like domain.<id>.<field>")));
        };
        let id: u32 = value(k, id)?;
        let d = domain_mut(&mut self.synth, id).ok_or_else(|| {
            Error::Config(format!("{k}: domain {id} is not listed in data.train_domains or data.unseen_domains"))
        })?;
        match field {
            "scale" => d.scale = list(k, v)?,
            "offset" => d.offset = list(k, v)?,
            "noise" => d.noise = value(k, v)?,
            "labeled" => d.labeled = list(k, v)?,
            "samples" => d.samples = value(k, v)?,
            "test_samples" => d.test_samples = value(k, v)?,
            "prevalence" => d.prevalence = list(k, v)?,
            _ => return Err(Error::Config(format!("unknown domain field `{field}` in `{k}`"))),
        }
        Ok(())
    }

    /// Every key with its current value, in a stable order; parses back to `self`.
    pub fn echo(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut put = |k: &str, v: String| out.push(format!("{k} = {v}"));
        put("paths.dataset", self.paths.dataset.display().to_string());
        put(
            "paths.embeddings",
            self.paths
                .embeddings
                .as_ref()
                .map_or(String::new(), |p| p.display().to_string()),
        );
        put("paths.output", self.paths.output.display().to_string());
        let s = &self.synth;
        put("data.classes", s.classes.to_string());
        put("data.input", join(&s.input));
        put("data.amplitude", s.amplitude.to_string());
        put("data.background", s.background.to_string());
        put("data.seed", s.seed.to_string());
        put("data.prototype_seed", s.prototype_seed.to_string());
        put("data.train_domains", join(&s.train_domains.iter().map(|d| d.id).collect::<Vec<_>>()));
        put("data.unseen_domains", join(&s.unseen_domains.iter().map(|d| d.id).collect::<Vec<_>>()));
        for d in s.domains() {
            let p = format!("domain.{}", d.id);
            put(&format!("{p}.scale"), join(&d.scale));
            put(&format!("{p}.offset"), join(&d.offset));
            put(&format!("{p}.noise"), d.noise.to_string());
            put(&format!("{p}.labeled"), join(&d.labeled));
            put(&format!("{p}.samples"), d.samples.to_string());
            put(&format!("{p}.test_samples"), d.test_samples.to_string());
            put(&format!("{p}.prevalence"), join(&d.prevalence));
        }
        let m = &self.model;
        put("model.widths", join(&m.encoder.widths));
        put("model.downsample", join(&m.encoder.downsample));
        put("model.text_dim", m.text_dim.to_string());
        put("model.attention_dim", m.attention_dim.map_or("auto".into(), |d| d.to_string()));
        put("model.tied_decoupling", m.tied_decoupling.to_string());
        put("model.dsu_scope", m.dsu_scope.to_string());
        put("text.seed", self.text_seed.to_string());
        let o = &self.objective;
        put("loss.lambda1", o.weights.lambda1.to_string());
        put("loss.lambda2", o.weights.lambda2.to_string());
        put("loss.lambda3", o.weights.lambda3.to_string());
        put("loss.tau", o.weights.tau.to_string());
        put("loss.warmup_epochs", o.weights.warmup_epochs.to_string());
        put("loss.feature_distill", o.toggles.feature_distill.to_string());
        put("loss.self_distill", o.toggles.self_distill.to_string());
        put("loss.consistency", o.toggles.consistency.to_string());
        put("loss.full_bernoulli_kl", o.full_bernoulli_kl.to_string());
        put("loss.bidirectional", o.bidirectional.to_string());
        put(
            "mmd.bandwidth",
            match &o.mmd.bandwidth {
                Bandwidth::Median => "median".into(),
                Bandwidth::Fixed(l) => join(l),
            },
        );
        put("mmd.pointwise", o.mmd.pointwise.to_string());
        let t = &self.train;
        put("train.epochs", t.epochs.to_string());
        put("train.batch_size", t.batch_size.to_string());
        put("train.seed", t.seed.to_string());
        put("train.lr", t.optimizer.lr.to_string());
        put("train.beta1", t.optimizer.beta1.to_string());
        put("train.beta2", t.optimizer.beta2.to_string());
        put("train.eps", t.optimizer.eps.to_string());
        put("train.weight_decay", t.optimizer.weight_decay.to_string());
        put("train.decay_every", t.decay_every.to_string());
        put("train.decay_factor", t.decay_factor.to_string());
        put("eval.split", self.eval_split.to_string());
        let a = &self.ablate;
        put("ablate.seeds", join(&a.seeds));
        put("ablate.sweeps", a.sweeps.join(","));
        put("ablate.taus", join(&a.taus));
        put("ablate.lambda1", join(&a.lambda1));
        put("ablate.lambda2", join(&a.lambda2));
        put("ablate.lambda3", join(&a.lambda3));
        let gc = &self.grad_check;
        put("gradcheck.batch", gc.batch.to_string());
        put("gradcheck.classes", gc.classes.to_string());
        put("gradcheck.input", join(&gc.input));
        put("gradcheck.widths", join(&gc.widths));
        put("gradcheck.downsample", join(&gc.downsample));
        put("gradcheck.text_dim", gc.text_dim.to_string());
        put("gradcheck.tau", gc.tau.to_string());
        put("gradcheck.tolerance", gc.tolerance.to_string());
        put("gradcheck.seed", gc.seed.to_string());
        put("gradcheck.corrupt_backward", gc.corrupt_backward.to_string());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn echo_roundtrips() {
        let cfg = RunConfig::default();
        let text = cfg.echo().join("\n");
        assert_eq!(RunConfig::from_text(&text).unwrap(), cfg);
    }

    #[test]
    fn overrides_apply_after_file() {
        let over = vec![("loss.tau".to_string(), "0.85".to_string())];
        let cfg = RunConfig::from_text_with("loss.tau = 0.9\ntrain.epochs = 3 # short\n", &over).unwrap();
        assert_eq!(cfg.objective.weights.tau, 0.85);
        assert_eq!(cfg.train.epochs, 3);
    }

    #[test]
    fn errors_name_the_line_and_key() {
        let e = RunConfig::from_text("train.epochs = 2\nloss.nope = 1\n").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 2, ref msg } if msg.contains("loss.nope")), "{e}");
        let e = RunConfig::from_text("train.epochs = x\n").unwrap_err();
        assert!(e.to_string().contains("train.epochs"));
        assert!(RunConfig::from_text("train.epochs = 0\n").is_err());
        assert!(RunConfig::from_text("loss.tau = 1.0\n").is_err());
        assert!(RunConfig::from_text("novalue\n").is_err());
        assert!(RunConfig::from_text("a.b = 1\na.b = 2\n").is_err());
    }

    #[test]
    fn domains_can_be_edited_and_moved() {
        let cfg = RunConfig::from_text(
            "data.unseen_domains = 5\ndomain.5.noise = 0.5\ndomain.4.labeled = 0\n",
        )
        .unwrap();
        assert_eq!(cfg.synth.unseen_domains.len(), 1);
        assert_eq!(cfg.synth.train_domains.len(), 5);
        assert_eq!(cfg.synth.unseen_domains[0].noise, 0.5);
        assert!(RunConfig::from_text("domain.42.noise = 0.1\n").is_err());
    }
}
