//! Text-conditioned attention pooling of spatial features into one feature
//! vector per class.
//!
//! For instance `b`, class `t` and spatial position `i`:
//!
//! ```text
//! score[b,t,i] = v . tanh((W_feat F[b,i]) * (W_text d[t]))
//! alpha[b,t,:] = softmax_i(score[b,t,:])
//! f[b,t]       = sum_i alpha[b,t,i] F[b,i]
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

const MAX_EMBEDDING_ATTEMPTS: usize = 1000;
const MAX_PAIRWISE_COSINE: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub enum EmbeddingSource {
    File(PathBuf),
    Pseudo { seed: u64 },
}

/// Frozen `classes x dim` text embeddings, one row per class.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbeddingMatrix {
    pub matrix: Tensor,
    pub source: EmbeddingSource,
}

impl TextEmbeddingMatrix {
    pub fn new(matrix: Tensor, source: EmbeddingSource) -> Result<Self> {
        if matrix.rank() != 2 {
            return Err(Error::InvalidShape(format!(
                "text embeddings must be T x d, got {:?}",
                matrix.shape()
            )));
        }
        Ok(Self { matrix, source })
    }

    pub fn classes(&self) -> usize {
        self.matrix.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.matrix.shape()[1]
    }

    pub fn row(&self, t: usize) -> &[f64] {
        let d = self.dim();
        &self.matrix.data()[t * d..(t + 1) * d]
    }

    pub fn max_abs_cosine(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.classes() {
            for j in i + 1..self.classes() {
                worst = worst.max(cosine(self.row(i), self.row(j)).abs());
            }
        }
        worst
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{} {}\n", self.classes(), self.dim());
        for t in 0..self.classes() {
            let row: Vec<String> = self.row(t).iter().map(|v| format!("{v:?}")).collect();
            let _ = writeln!(out, "{}", row.join(" "));
        }
        out
    }

    pub fn parse(text: &str, source: EmbeddingSource) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (hline, header) = lines.next().ok_or(Error::Parse {
            line: 1,
            msg: "missing `T d` header".into(),
        })?;
        let dims: Vec<usize> = header
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Parse {
                line: hline + 1,
                msg: format!("bad header: {e}"),
            })?;
        let [classes, dim] = dims[..] else {
            return Err(Error::Parse {
                line: hline + 1,
                msg: format!("header needs exactly two integers, got {}", dims.len()),
            });
        };
        if classes == 0 || dim == 0 {
            return Err(Error::Parse {
                line: hline + 1,
                msg: "T and d must be positive".into(),
            });
        }
        let mut data = Vec::with_capacity(classes * dim);
        let mut rows = 0;
        for (idx, line) in lines {
            rows += 1;
            if rows > classes {
                return Err(Error::Parse {
                    line: idx + 1,
                    msg: format!("header declares {classes} rows, found more"),
                });
            }
            let values: Vec<f64> = line
                .split_whitespace()
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Parse {
                    line: idx + 1,
                    msg: format!("row {}: {e}", rows - 1),
                })?;
            if values.len() != dim {
                return Err(Error::Parse {
                    line: idx + 1,
                    msg: format!("row {} has {} values, expected {dim}", rows - 1, values.len()),
                });
            }
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::Parse {
                    line: idx + 1,
                    msg: format!("row {} is not finite", rows - 1),
                });
            }
            data.extend(values);
        }
        if rows != classes {
            return Err(Error::Parse {
                line: text.lines().count(),
                msg: format!("header declares {classes} rows, found {rows}"),
            });
        }
        Self::new(Tensor::new(vec![classes, dim], data)?, source)
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Deterministic unit-norm rows with pairwise |cosine| below 0.5.
pub fn pseudo_text_embeddings(classes: usize, dim: usize, seed: u64) -> Result<TextEmbeddingMatrix> {
    if classes == 0 || dim == 0 {
        return Err(Error::InvalidShape(format!(
            "text embeddings need T, d >= 1, got {classes} x {dim}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..MAX_EMBEDDING_ATTEMPTS {
        let mut data: Vec<f64> = (0..classes * dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        for row in data.chunks_mut(dim) {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                continue;
            }
            row.iter_mut().for_each(|x| *x /= norm);
        }
        let m = TextEmbeddingMatrix::new(
            Tensor::new(vec![classes, dim], data)?,
            EmbeddingSource::Pseudo { seed },
        )?;
        let norms_ok = (0..classes).all(|t| {
            let n = m.row(t).iter().map(|x| x * x).sum::<f64>().sqrt();
            (n - 1.0).abs() < 1e-12
        });
        if norms_ok && m.max_abs_cosine() < MAX_PAIRWISE_COSINE {
            return Ok(m);
        }
    }
    Err(Error::RetryBudgetExhausted {
        attempts: MAX_EMBEDDING_ATTEMPTS,
        reason: format!("no {classes} x {dim} embedding with pairwise |cosine| < 0.5"),
    })
}

pub fn load_text_embeddings(path: &Path) -> Result<TextEmbeddingMatrix> {
    let text = std::fs::read_to_string(path)?;
    TextEmbeddingMatrix::parse(&text, EmbeddingSource::File(path.to_path_buf()))
}

pub fn write_text_embeddings(path: &Path, m: &TextEmbeddingMatrix) -> Result<()> {
    std::fs::write(path, m.to_text())?;
    Ok(())
}

/// Graph handles of the attention weights.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    /// `hidden x channels`
    pub w_feat: Var,
    /// `hidden x text_dim`
    pub w_text: Var,
    /// `hidden`
    pub v: Var,
}

/// `B x C x H x W` -> `B x HW x C`
pub fn spatial_tokens(g: &mut Graph, features: Var) -> Result<Var> {
    let shape = g.shape(features).to_vec();
    let [b, c, h, w] = shape[..] else {
        return Err(Error::InvalidShape(format!(
            "features must be B x C x H x W, got {shape:?}"
        )));
    };
    let p = g.permute(features, &[0, 2, 3, 1])?;
    g.reshape(p, &[b, h * w, c])
}

/// Attention weights `B x T x HW`; every `(b, t)` row sums to one.
pub fn attention_scores(
    g: &mut Graph,
    features: Var,
    text: Var,
    params: &AttentionVars,
) -> Result<Var> {
    let tokens = spatial_tokens(g, features)?;
    let [b, hw, c] = g.shape(tokens)[..] else { unreachable!() };
    let (wf, wt, v) = (
        g.shape(params.w_feat).to_vec(),
        g.shape(params.w_text).to_vec(),
        g.shape(params.v).to_vec(),
    );
    let ts = g.shape(text).to_vec();
    if wf.len() != 2 || wt.len() != 2 || ts.len() != 2 || wf[0] != wt[0] || v != [wf[0]] {
        return Err(Error::ShapeMismatch {
            op: "attention hidden size",
            lhs: wf,
            rhs: wt,
        });
    }
    if wf[1] != c {
        return Err(Error::ShapeMismatch {
            op: "attention feature map",
            lhs: wf,
            rhs: vec![c],
        });
    }
    if wt[1] != ts[1] {
        return Err(Error::ShapeMismatch {
            op: "attention text map",
            lhs: wt,
            rhs: ts,
        });
    }
    let hidden = wf[0];
    let classes = ts[0];

    let wf_t = g.permute(params.w_feat, &[1, 0])?;
    let proj_feat = g.matmul(tokens, wf_t)?;
    let proj_feat = g.reshape(proj_feat, &[b, 1, hw, hidden])?;
    let wt_t = g.permute(params.w_text, &[1, 0])?;
    let proj_text = g.matmul(text, wt_t)?;
    let proj_text = g.reshape(proj_text, &[classes, 1, hidden])?;
    let joint = g.mul(proj_feat, proj_text)?;
    let joint = g.tanh(joint)?;
    let v_col = g.reshape(params.v, &[hidden, 1])?;
    let logits = g.matmul(joint, v_col)?;
    let logits = g.reshape(logits, &[b, classes, hw])?;
    g.softmax(logits, 2)
}

/// Per-class features `B x T x C` pooled with the attention weights.
pub fn decouple(g: &mut Graph, features: Var, alpha: Var) -> Result<Var> {
    let tokens = spatial_tokens(g, features)?;
    let (ts, al) = (g.shape(tokens).to_vec(), g.shape(alpha).to_vec());
    if al.len() != 3 || al[0] != ts[0] || al[2] != ts[1] {
        return Err(Error::ShapeMismatch {
            op: "decouple",
            lhs: ts,
            rhs: al,
        });
    }
    g.matmul(alpha, tokens)
}
