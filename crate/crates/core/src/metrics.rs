//! Screening metrics: F1 of the positive class, quadratic weighted kappa,
//! and the per-task-then-over-tasks average.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// `p >= threshold` is positive, so ties count as positive.
pub fn binarize(probs: &[f64], threshold: f64) -> Vec<u8> {
    probs.iter().map(|&p| u8::from(p >= threshold)).collect()
}

fn check_lengths<A, B>(pred: &[A], truth: &[B]) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(Error::LengthMismatch(pred.len(), truth.len()));
    }
    if pred.is_empty() {
        return Err(Error::Empty("metric input"));
    }
    Ok(())
}

/// F1 of the positive class; 0 when there are no true or predicted positives.
pub fn f_score(pred: &[u8], truth: &[u8]) -> Result<f64> {
    check_lengths(pred, truth)?;
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.iter().zip(truth) {
        match (p != 0, t != 0) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    let denom = 2 * tp + fp + fn_;
    Ok(if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    })
}

/// Quadratic weighted kappa over ordinal levels `0..levels`.
pub fn qwk(pred: &[usize], truth: &[usize], levels: usize) -> Result<f64> {
    check_lengths(pred, truth)?;
    if levels < 2 {
        return Err(Error::Config(format!("kappa needs at least 2 levels, got {levels}")));
    }
    if let Some(&v) = pred.iter().chain(truth).find(|&&v| v >= levels) {
        return Err(Error::Config(format!("ordinal value {v} outside 0..{levels}")));
    }
    let mut observed = vec![0.0; levels * levels];
    let mut hist_t = vec![0.0; levels];
    let mut hist_p = vec![0.0; levels];
    for (&p, &t) in pred.iter().zip(truth) {
        observed[t * levels + p] += 1.0;
        hist_t[t] += 1.0;
        hist_p[p] += 1.0;
    }
    let n = pred.len() as f64;
    let scale = ((levels - 1) * (levels - 1)) as f64;
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..levels {
        for j in 0..levels {
            let w = ((i as f64 - j as f64).powi(2)) / scale;
            num += w * observed[i * levels + j];
            den += w * hist_t[i] * hist_p[j] / n;
        }
    }
    if den == 0.0 {
        return Err(Error::DegenerateMarginals);
    }
    Ok(1.0 - num / den)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskResult {
    pub task: usize,
    pub dataset: u32,
    pub f: f64,
    /// `None` when kappa is undefined (both label vectors constant).
    pub qwk: Option<f64>,
    pub samples: usize,
}

impl TaskResult {
    /// Binary task: F1 on `pred` and two-level kappa.
    pub fn binary(task: usize, dataset: u32, pred: &[u8], truth: &[u8]) -> Result<Self> {
        let f = f_score(pred, truth)?;
        let as_levels = |v: &[u8]| v.iter().map(|&x| usize::from(x != 0)).collect::<Vec<_>>();
        let qwk = match qwk(&as_levels(pred), &as_levels(truth), 2) {
            Ok(k) => Some(k),
            Err(Error::DegenerateMarginals) => None,
            Err(e) => return Err(e),
        };
        Ok(Self {
            task,
            dataset,
            f,
            qwk,
            samples: pred.len(),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub results: Vec<TaskResult>,
    pub mean_f: f64,
    /// `None` if no task has a defined kappa.
    pub mean_qwk: Option<f64>,
    /// Number of results left out of the kappa average.
    pub undefined_qwk: usize,
}

/// Averages each task over its datasets, then averages the tasks.
pub fn aggregate(results: &[TaskResult]) -> Result<MetricsReport> {
    if results.is_empty() {
        return Err(Error::Empty("task results"));
    }
    let mut tasks: Vec<usize> = results.iter().map(|r| r.task).collect();
    tasks.sort_unstable();
    tasks.dedup();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let mut f_per_task = Vec::with_capacity(tasks.len());
    let mut k_per_task = Vec::new();
    let mut undefined = 0;
    for &t in &tasks {
        let rows: Vec<&TaskResult> = results.iter().filter(|r| r.task == t).collect();
        f_per_task.push(mean(&rows.iter().map(|r| r.f).collect::<Vec<_>>()));
        let ks: Vec<f64> = rows.iter().filter_map(|r| r.qwk).collect();
        undefined += rows.len() - ks.len();
        if !ks.is_empty() {
            k_per_task.push(mean(&ks));
        }
    }
    if undefined > 0 {
        log::warn!("{undefined} task results have undefined kappa and are excluded from mQWK");
    }
    Ok(MetricsReport {
        results: results.to_vec(),
        mean_f: mean(&f_per_task),
        mean_qwk: (!k_per_task.is_empty()).then(|| mean(&k_per_task)),
        undefined_qwk: undefined,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |k| format!("{k:.6}"))
}

impl MetricsReport {
    /// `key = value` lines, prefixed by `group`.
    pub fn to_text(&self, group: &str) -> String {
        let mut out = String::new();
        for r in &self.results {
            let _ = writeln!(
                out,
                "{group}.task{}.domain{}: F = {:.6}, QWK = {}, n = {}",
                r.task,
                r.dataset,
                r.f,
                fmt_opt(r.qwk),
                r.samples
            );
        }
        let _ = writeln!(out, "{group}.mF = {:.6}", self.mean_f);
        let _ = writeln!(out, "{group}.mQWK = {}", fmt_opt(self.mean_qwk));
        if self.undefined_qwk > 0 {
            let _ = writeln!(out, "{group}.undefined_qwk = {}", self.undefined_qwk);
        }
        out
    }

    /// CSV rows `task,dataset,F,QWK` without a header.
    pub fn csv_rows(&self) -> String {
        self.results
            .iter()
            .map(|r| format!("{},{},{:.6},{}\n", r.task, r.dataset, r.f, fmt_opt(r.qwk)))
            .collect()
    }
}

pub const CSV_HEADER: &str = "task,dataset,F,QWK\n";

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binarize_ties_are_positive() {
        assert_eq!(binarize(&[0.49, 0.5, 0.51], 0.5), vec![0, 1, 1]);
        assert_eq!(binarize(&[0.0, 0.0], 0.5), vec![0, 0]);
        assert_eq!(binarize(&[0.0, 0.3], 0.0), vec![1, 1]);
    }

    #[test]
    fn f_score_cases() {
        assert_eq!(f_score(&[1, 0, 1], &[1, 0, 1]).unwrap(), 1.0);
        assert_eq!(f_score(&[0, 0], &[0, 0]).unwrap(), 0.0);
        assert!((f_score(&[1, 0, 0, 0], &[1, 1, 0, 0]).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        // all predicted positive: recall 1, precision 1/4
        assert!((f_score(&[1, 1, 1, 1], &[0, 1, 0, 0]).unwrap() - 0.4).abs() < 1e-15);
        assert!(f_score(&[1, 1], &[1]).is_err());
        assert!(f_score(&[], &[]).is_err());
    }

    #[test]
    fn qwk_cases() {
        assert_eq!(qwk(&[0, 1, 2, 1], &[0, 1, 2, 1], 3).unwrap(), 1.0);
        assert!((qwk(&[1, 0, 1, 0], &[0, 1, 0, 1], 2).unwrap() + 1.0).abs() < 1e-15);
        assert!(matches!(qwk(&[1, 1], &[1, 1], 2), Err(Error::DegenerateMarginals)));
        assert!(qwk(&[3], &[0], 3).is_err());
        assert!(qwk(&[0], &[0], 1).is_err());
    }

    #[test]
    fn aggregate_two_level_average() {
        let r = |task, dataset, f| TaskResult {
            task,
            dataset,
            f,
            qwk: Some(f),
            samples: 1,
        };
        let rep = aggregate(&[r(1, 0, 0.8), r(1, 1, 0.6), r(2, 0, 1.0)]).unwrap();
        assert!((rep.mean_f - 0.85).abs() < 1e-15);
        let single = aggregate(&[r(0, 0, 0.4)]).unwrap();
        assert_eq!(single.mean_f, 0.4);
        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn undefined_kappa_is_excluded() {
        let a = TaskResult::binary(0, 0, &[1, 1], &[1, 1]).unwrap();
        assert_eq!(a.qwk, None);
        let b = TaskResult::binary(0, 1, &[1, 0], &[1, 0]).unwrap();
        let rep = aggregate(&[a, b]).unwrap();
        assert_eq!(rep.mean_qwk, Some(1.0));
        assert_eq!(rep.undefined_qwk, 1);
        assert!(rep.to_text("unseen").contains("QWK = NA"));
    }
}
