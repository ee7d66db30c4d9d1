//! File-producing commands behind the CLI.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::ablation::{ablation_csv, run_ablation, CellSummary};
use crate::autodiff::GradCheckReport;
use crate::config::{EvalSplit, RunConfig};
use crate::decoupling::{load_text_embeddings, pseudo_text_embeddings, TextEmbeddingMatrix};
use crate::error::{Error, Result};
use crate::metrics::{MetricsReport, CSV_HEADER};
use crate::model::{load_checkpoint, save_checkpoint, TwoStreamModel};
use crate::synth::{derive_seed, generate_meta_dataset, MetaDataset, Split};
use crate::train::{evaluate, train, EpochRow, TrainLog};

const MODEL_STREAM: u64 = 3;

pub fn text_embeddings(cfg: &RunConfig) -> Result<TextEmbeddingMatrix> {
    let m = match &cfg.paths.embeddings {
        Some(p) => load_text_embeddings(p)?,
        None => pseudo_text_embeddings(cfg.model.classes, cfg.model.text_dim, cfg.text_seed)?,
    };
    if m.classes() != cfg.model.classes || m.dim() != cfg.model.text_dim {
        return Err(Error::Config(format!(
            "embeddings are {}x{}, model expects {}x{}",
            m.classes(),
            m.dim(),
            cfg.model.classes,
            cfg.model.text_dim
        )));
    }
    Ok(m)
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(())
}

pub fn manifest_path(dataset: &Path) -> PathBuf {
    dataset.with_extension("manifest.txt")
}

pub fn manifest_text(cfg: &RunConfig, data: &MetaDataset) -> String {
    let s = &cfg.synth;
    let mut out = String::new();
    let _ = writeln!(out, "classes = {}", s.classes);
    let _ = writeln!(out, "input = {}x{}x{}", s.input[0], s.input[1], s.input[2]);
    let _ = writeln!(out, "seed = {}", s.seed);
    let _ = writeln!(out, "prototype_seed = {}", s.prototype_seed);
    for (kind, domains) in [("train", &s.train_domains), ("unseen", &s.unseen_domains)] {
        for d in domains {
            let _ = writeln!(
                out,
                "{kind} domain {}: labeled = {:?}, scale = {:?}, offset = {:?}, noise = {}, samples = {}, test_samples = {}, prevalence = {:?}",
                d.id, d.labeled, d.scale, d.offset, d.noise, d.samples, d.test_samples, d.prevalence
            );
        }
    }
    out.push_str(&data.summary());
    out
}

/// Writes the dataset file and its manifest; returns both paths.
pub fn generate_data(cfg: &RunConfig) -> Result<(PathBuf, PathBuf)> {
    let data = generate_meta_dataset(&cfg.synth)?;
    let path = cfg.paths.dataset.clone();
    ensure_parent(&path)?;
    data.save(&path)?;
    let manifest = manifest_path(&path);
    fs::write(&manifest, manifest_text(cfg, &data))?;
    Ok((path, manifest))
}

pub fn load_dataset(cfg: &RunConfig) -> Result<MetaDataset> {
    let data = MetaDataset::load(&cfg.paths.dataset)?;
    if data.classes != cfg.model.classes || data.input != cfg.model.encoder.input {
        return Err(Error::Config(format!(
            "dataset has {} classes of {:?}, config expects {} of {:?}",
            data.classes, data.input, cfg.model.classes, cfg.model.encoder.input
        )));
    }
    Ok(data)
}

/// Fresh model for the configured seed, trained without touching the filesystem.
pub fn train_in_memory<F>(
    cfg: &RunConfig,
    data: &MetaDataset,
    text: &TextEmbeddingMatrix,
    on_epoch: F,
) -> Result<(TwoStreamModel, TrainLog)>
where
    F: FnMut(&TwoStreamModel, &EpochRow) -> Result<()>,
{
    let mut model = TwoStreamModel::init(cfg.model.clone(), derive_seed(cfg.train.seed, MODEL_STREAM))?;
    let mut log = train(&mut model, data, text, &cfg.objective, &cfg.train, on_epoch)?;
    log.header = cfg.echo();
    Ok((model, log))
}

pub struct TrainOutcome {
    pub log: TrainLog,
    pub log_path: PathBuf,
    pub checkpoint: PathBuf,
}

pub fn checkpoint_dir(cfg: &RunConfig) -> PathBuf {
    cfg.paths.output.join("checkpoints")
}

pub fn final_checkpoint(cfg: &RunConfig) -> PathBuf {
    cfg.paths.output.join("model.ckpt")
}

/// Trains, writing a checkpoint per epoch, the final model, the log and
/// per-epoch wall times (kept apart so the log stays reproducible).
pub fn train_command(cfg: &RunConfig) -> Result<TrainOutcome> {
    let data = load_dataset(cfg)?;
    let text = text_embeddings(cfg)?;
    let ck_dir = checkpoint_dir(cfg);
    fs::create_dir_all(&ck_dir)?;
    let mut timing = String::from("epoch,seconds\n");
    let mut clock = Instant::now();
    let (model, log) = train_in_memory(cfg, &data, &text, |m, row| {
        save_checkpoint(&ck_dir.join(format!("epoch_{:03}.ckpt", row.epoch)), m, row.epoch as u32)?;
        let _ = writeln!(timing, "{},{:.3}", row.epoch, clock.elapsed().as_secs_f64());
        clock = Instant::now();
        Ok(())
    })?;
    let checkpoint = final_checkpoint(cfg);
    save_checkpoint(&checkpoint, &model, cfg.train.epochs as u32)?;
    let log_path = cfg.paths.output.join("train_log.csv");
    fs::write(&log_path, log.to_csv())?;
    fs::write(cfg.paths.output.join("timing.csv"), timing)?;
    Ok(TrainOutcome {
        log,
        log_path,
        checkpoint,
    })
}

/// `meta` groups held-out samples of training domains; `unseen` the unseen domains.
pub fn evaluate_groups(
    model: &TwoStreamModel,
    data: &MetaDataset,
    text: &TextEmbeddingMatrix,
    split: &EvalSplit,
) -> Result<Vec<(&'static str, MetricsReport)>> {
    let mut out = Vec::new();
    if matches!(split, EvalSplit::Test | EvalSplit::All) {
        out.push(("meta", evaluate(model, data, text, Split::Test)?));
    }
    if matches!(split, EvalSplit::Unseen | EvalSplit::All) {
        out.push(("unseen", evaluate(model, data, text, Split::Unseen)?));
    }
    Ok(out)
}

pub struct EvalOutcome {
    pub groups: Vec<(&'static str, MetricsReport)>,
    pub report_path: PathBuf,
    pub csv_path: PathBuf,
}

pub fn eval_command(cfg: &RunConfig, checkpoint: &Path) -> Result<EvalOutcome> {
    let (model, _) = load_checkpoint(checkpoint, &cfg.model)?;
    let data = load_dataset(cfg)?;
    let text = text_embeddings(cfg)?;
    let groups = evaluate_groups(&model, &data, &text, &cfg.eval_split)?;
    let mut text_out = String::new();
    let mut csv = String::from(CSV_HEADER);
    for (name, rep) in &groups {
        text_out.push_str(&rep.to_text(name));
        csv.push_str(&rep.csv_rows());
    }
    fs::create_dir_all(&cfg.paths.output)?;
    let report_path = cfg.paths.output.join("report.txt");
    let csv_path = cfg.paths.output.join("report.csv");
    fs::write(&report_path, text_out)?;
    fs::write(&csv_path, csv)?;
    Ok(EvalOutcome {
        groups,
        report_path,
        csv_path,
    })
}

pub fn ablate_command(cfg: &RunConfig) -> Result<(Vec<CellSummary>, PathBuf)> {
    let data = load_dataset(cfg)?;
    let text = text_embeddings(cfg)?;
    let rows = run_ablation(cfg, &data, &text);
    fs::create_dir_all(&cfg.paths.output)?;
    let path = cfg.paths.output.join("ablation.csv");
    fs::write(&path, ablation_csv(&rows))?;
    Ok((rows, path))
}

pub fn format_grad_report(r: &GradCheckReport) -> String {
    let mut out = String::from("block,elements,max_rel_error,max_abs_error\n");
    for b in &r.blocks {
        let _ = writeln!(out, "{},{},{:e},{:e}", b.name, b.len, b.max_rel_error, b.max_abs_error);
    }
    let _ = writeln!(out, "# tolerance {:e}, max relative error {:e}", r.tolerance, r.max_rel_error());
    if !r.passed() {
        if let Some(w) = r.worst() {
            let _ = writeln!(out, "# FAILED: worst block {} ({:e} at element {})", w.name, w.max_rel_error, w.worst_index);
        }
    }
    out
}
