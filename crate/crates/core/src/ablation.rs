//! Sweeps over loss-term toggles, the pseudo-label threshold and the loss
//! weights; each cell is trained once per seed and scored on unseen domains.

use rayon::prelude::*;

use crate::config::RunConfig;
use crate::decoupling::TextEmbeddingMatrix;
use crate::error::Result;
use crate::losses::LossToggles;
use crate::synth::{MetaDataset, Split};
use crate::train::{evaluate, Objective};

#[derive(Clone, Debug, PartialEq)]
pub struct AblationCell {
    pub sweep: String,
    pub label: String,
    pub objective: Objective,
}

/// The six toggle combinations: none, each term alone, distillation plus
/// consistency, and all three.
pub fn flag_combinations() -> Vec<(&'static str, LossToggles)> {
    let t = |f, s, c| LossToggles {
        feature_distill: f,
        self_distill: s,
        consistency: c,
    };
    vec![
        ("none", t(false, false, false)),
        ("f", t(true, false, false)),
        ("s", t(false, true, false)),
        ("c", t(false, false, true)),
        ("s+c", t(false, true, true)),
        ("f+s+c", t(true, true, true)),
    ]
}

pub fn sweep_cells(cfg: &RunConfig) -> Vec<AblationCell> {
    let base = &cfg.objective;
    let mut cells = Vec::new();
    for sweep in &cfg.ablate.sweeps {
        match sweep.as_str() {
            "flags" => {
                for (label, toggles) in flag_combinations() {
                    cells.push(AblationCell {
                        sweep: sweep.clone(),
                        label: label.to_string(),
                        objective: Objective {
                            toggles,
                            ..base.clone()
                        },
                    });
                }
            }
            "tau" => {
                for &tau in &cfg.ablate.taus {
                    let mut o = base.clone();
                    o.weights.tau = tau;
                    cells.push(AblationCell {
                        sweep: sweep.clone(),
                        label: format!("tau={tau}"),
                        objective: o,
                    });
                }
            }
            "lambda" => {
                for &l1 in &cfg.ablate.lambda1 {
                    for &l2 in &cfg.ablate.lambda2 {
                        for &l3 in &cfg.ablate.lambda3 {
                            let mut o = base.clone();
                            o.weights.lambda1 = l1;
                            o.weights.lambda2 = l2;
                            o.weights.lambda3 = l3;
                            cells.push(AblationCell {
                                sweep: sweep.clone(),
                                label: format!("l1={l1};l2={l2};l3={l3}"),
                                objective: o,
                            });
                        }
                    }
                }
            }
            _ => {}
        }
    }
    cells
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellSummary {
    pub sweep: String,
    pub label: String,
    pub completed: usize,
    /// `(seed, error)` for runs that aborted.
    pub failed: Vec<(u64, String)>,
    pub mf: (f64, f64),
    pub mqwk: (f64, f64),
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, var.sqrt())
}

/// Unseen-domain `(mF, mQWK)` of one trained cell.
pub fn run_cell(
    cfg: &RunConfig,
    data: &MetaDataset,
    text: &TextEmbeddingMatrix,
    objective: &Objective,
    seed: u64,
) -> Result<(f64, Option<f64>)> {
    let mut run = cfg.clone();
    run.objective = objective.clone();
    run.train.seed = seed;
    let (model, _) = crate::harness::train_in_memory(&run, data, text, |_, _| Ok(()))?;
    let report = evaluate(&model, data, text, Split::Unseen)?;
    Ok((report.mean_f, report.mean_qwk))
}

/// Runs every (cell, seed) pair in parallel; failures are recorded per cell.
pub fn run_ablation(cfg: &RunConfig, data: &MetaDataset, text: &TextEmbeddingMatrix) -> Vec<CellSummary> {
    let cells = sweep_cells(cfg);
    let jobs: Vec<(usize, u64)> = (0..cells.len())
        .flat_map(|c| cfg.ablate.seeds.iter().map(move |&s| (c, s)))
        .collect();
    let outcomes: Vec<(usize, u64, Result<(f64, Option<f64>)>)> = jobs
        .par_iter()
        .map(|&(c, s)| (c, s, run_cell(cfg, data, text, &cells[c].objective, s)))
        .collect();
    cells
        .iter()
        .enumerate()
        .map(|(ci, cell)| {
            let mut fs = Vec::new();
            let mut ks = Vec::new();
            let mut failed = Vec::new();
            for (_, seed, r) in outcomes.iter().filter(|(c, _, _)| *c == ci) {
                match r {
                    Ok((f, k)) => {
                        fs.push(*f);
                        ks.extend(k);
                    }
                    Err(e) => {
                        log::warn!("{}/{} seed {seed} failed: {e}", cell.sweep, cell.label);
                        failed.push((*seed, e.to_string()));
                    }
                }
            }
            CellSummary {
                sweep: cell.sweep.clone(),
                label: cell.label.clone(),
                completed: fs.len(),
                failed,
                mf: mean_std(&fs),
                mqwk: mean_std(&ks),
            }
        })
        .collect()
}

pub fn ablation_csv(rows: &[CellSummary]) -> String {
    let mut out = String::from("sweep,config,completed,failed,mF_mean,mF_std,mQWK_mean,mQWK_std\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{:.6},{:.6},{:.6},{:.6}\n",
            r.sweep,
            r.label,
            r.completed,
            r.failed.len(),
            r.mf.0,
            r.mf.1,
            r.mqwk.0,
            r.mqwk.1
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweeps_cover_the_expected_cells() {
        let mut cfg = RunConfig::default();
        cfg.ablate.sweeps = vec!["flags".into(), "tau".into(), "lambda".into()];
        let cells = sweep_cells(&cfg);
        assert_eq!(cells.iter().filter(|c| c.sweep == "flags").count(), 6);
        let taus: Vec<f64> = cells
            .iter()
            .filter(|c| c.sweep == "tau")
            .map(|c| c.objective.weights.tau)
            .collect();
        assert_eq!(taus, vec![0.99, 0.95, 0.90, 0.85]);
        assert_eq!(cells.iter().filter(|c| c.sweep == "lambda").count(), 27);
        let all = cells.iter().find(|c| c.label == "f+s+c").unwrap();
        assert_eq!(all.objective.toggles, LossToggles::all());
    }

    #[test]
    fn mean_and_sample_std() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert_eq!(s, 1.0);
        assert_eq!(mean_std(&[4.0]), (4.0, 0.0));
    }
}
