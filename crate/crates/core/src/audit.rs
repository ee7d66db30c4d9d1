//! Finite-difference audit of the whole training objective on a tiny model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad_check, GradCheckOptions, GradCheckReport, Tensor};
use crate::config::GradCheckConfig;
use crate::decoupling::pseudo_text_embeddings;
use crate::dsu::RandomSource;
use crate::error::{Error, Result};
use crate::losses::{LossToggles, LossWeights, PartialLabelVector};
use crate::model::{EncoderConfig, ModelConfig, ModelVars, TwoStreamModel};
use crate::train::{batch_objective, Objective};

/// Audits the gradient of the total loss (all terms on, after warm-up) with
/// respect to every parameter block.
pub fn pipeline_grad_check(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    if cfg.batch < 2 {
        return Err(Error::Config("gradcheck.batch must be at least 2".into()));
    }
    let model_cfg = ModelConfig {
        encoder: EncoderConfig {
            input: cfg.input,
            widths: cfg.widths.clone(),
            downsample: cfg.downsample.clone(),
        },
        classes: cfg.classes,
        text_dim: cfg.text_dim,
        ..ModelConfig::default()
    };
    let model = TwoStreamModel::init(model_cfg, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xA5A5);
    let [c, h, w] = cfg.input;
    let n = cfg.batch * c * h * w;
    let x = Tensor::new(
        vec![cfg.batch, c, h, w],
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )?;
    // first sample fully labelled, the rest partially
    let labels: Vec<PartialLabelVector> = (0..cfg.batch)
        .map(|b| {
            let v = (0..cfg.classes)
                .map(|t| {
                    if b == 0 || t % 2 == b % 2 {
                        if rng.random::<bool>() {
                            1
                        } else {
                            -1
                        }
                    } else {
                        0
                    }
                })
                .collect();
            PartialLabelVector::new(v)
        })
        .collect::<Result<_>>()?;
    let text = pseudo_text_embeddings(cfg.classes, cfg.text_dim, cfg.seed)?;
    let obj = Objective {
        weights: LossWeights {
            tau: cfg.tau,
            ..LossWeights::default()
        },
        toggles: LossToggles::all(),
        ..Objective::default()
    };
    let epoch = obj.weights.warmup_epochs + 1;
    let build = |g: &mut crate::Graph, vars: &[crate::Var]| {
        let mut vars = vars.to_vec();
        if cfg.corrupt_backward {
            // forward unchanged, backward through the first block scaled
            vars[0] = g.grad_scale(vars[0], 1.5)?;
        }
        let mv = ModelVars::from_ordered(&model.config, &vars)?;
        let xv = g.constant(x.clone());
        let tv = g.constant(text.matrix.clone());
        let mut dsu_rng = RandomSource::new(cfg.seed);
        let (total, _) = batch_objective(g, &model, &mv, xv, tv, &labels, &mut dsu_rng, epoch, &obj)?;
        Ok(total)
    };
    let names: Vec<&str> = model.params.names().iter().map(String::as_str).collect();
    let opts = GradCheckOptions {
        tolerance: cfg.tolerance,
        ..GradCheckOptions::default()
    };
    grad_check(build, model.params.tensors(), &names, &opts)
}
