//! Central finite-difference audit of reverse-mode gradients.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Lower bound on the relative-error denominator, so vanishing
    /// gradients are judged by absolute error.
    pub abs_floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            abs_floor: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockReport {
    pub name: String,
    pub len: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub worst_index: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub blocks: Vec<BlockReport>,
    pub tolerance: f64,
    pub value: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.blocks.iter().all(|b| b.max_rel_error <= self.tolerance)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&BlockReport> {
        self.blocks
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares reverse-mode gradients of `build` against central differences.
///
/// `build` receives a fresh graph and one parameter leaf per tensor and must
/// return a scalar. Frozen values recorded during the analytic pass are
/// replayed for every perturbed evaluation; any randomness inside `build`
/// must be reseeded per call. Two evaluations at the unperturbed point must
/// agree bitwise, otherwise the check fails with [`Error::NonDeterministic`].
pub fn grad_check<F>(
    mut build: F,
    params: &[Tensor],
    names: &[&str],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var>,
{
    if names.len() != params.len() {
        return Err(Error::LengthMismatch(names.len(), params.len()));
    }
    let mut g = Graph::recording();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let root = build(&mut g, &vars)?;
    let value = g.item(root)?;
    g.backward(root)?;
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| g.grad_or_zero(v)).collect();
    let frozen = g.take_frozen();

    let mut eval = |theta: &[Tensor]| -> Result<f64> {
        let mut g = Graph::replaying(frozen.clone());
        let vars: Vec<Var> = theta.iter().map(|p| g.param(p.clone())).collect();
        let root = build(&mut g, &vars)?;
        g.item(root)
    };

    let again = eval(params)?;
    let third = eval(params)?;
    if again.to_bits() != value.to_bits() || third.to_bits() != value.to_bits() {
        let diff = (again - value).abs().max((third - value).abs());
        return Err(Error::NonDeterministic(diff));
    }

    let mut theta = params.to_vec();
    let mut blocks = Vec::with_capacity(params.len());
    for (bi, name) in names.iter().enumerate() {
        let mut report = BlockReport {
            name: name.to_string(),
            len: params[bi].numel(),
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            worst_index: 0,
        };
        for j in 0..params[bi].numel() {
            let orig = params[bi].data()[j];
            theta[bi].data_mut()[j] = orig + opts.step;
            let up = eval(&theta)?;
            theta[bi].data_mut()[j] = orig - opts.step;
            let down = eval(&theta)?;
            theta[bi].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * opts.step);
            let a = analytic[bi][j];
            let rel = relative_error(a, numeric, opts.abs_floor);
            report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_index = j;
            }
        }
        blocks.push(report);
    }
    Ok(GradCheckReport {
        blocks,
        tolerance: opts.tolerance,
        value,
    })
}
