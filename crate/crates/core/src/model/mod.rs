//! Two-stream network: a shared staged encoder, optional feature-statistics
//! perturbation after every stage, text-guided decoupling and per-class heads.

mod checkpoint;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, read_checkpoint, save_checkpoint,
    Checkpoint,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Tensor, Var};
use crate::decoupling::{attention_scores, decouple, AttentionVars, TextEmbeddingMatrix};
use crate::dsu::{dsu_forward_graph, RandomSource, UncertaintyScope};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    /// `[channels, height, width]` of one input.
    pub input: [usize; 3],
    /// Output channels of each stage.
    pub widths: Vec<usize>,
    /// Average-pooling factor applied at the start of each stage.
    pub downsample: Vec<usize>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input: [3, 12, 12],
            widths: vec![8, 16],
            downsample: vec![1, 2],
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(Error::Config(format!(
                "encoder needs at least 2 stages, got {}",
                self.widths.len()
            )));
        }
        if self.downsample.len() != self.widths.len() {
            return Err(Error::Config(format!(
                "{} stage widths but {} downsampling factors",
                self.widths.len(),
                self.downsample.len()
            )));
        }
        if self.input.iter().chain(&self.widths).chain(&self.downsample).any(|&d| d == 0) {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        let (mut h, mut w) = (self.input[1], self.input[2]);
        for (l, &s) in self.downsample.iter().enumerate() {
            if h % s != 0 || w % s != 0 {
                return Err(Error::Config(format!(
                    "stage {l}: {h}x{w} not divisible by factor {s}"
                )));
            }
            h /= s;
            w /= s;
        }
        Ok(())
    }

    /// `[channels, height, width]` leaving stage `l`.
    pub fn stage_output(&self, l: usize) -> [usize; 3] {
        let (mut h, mut w) = (self.input[1], self.input[2]);
        for &s in &self.downsample[..=l] {
            h /= s;
            w /= s;
        }
        [self.widths[l], h, w]
    }

    pub fn stages(&self) -> usize {
        self.widths.len()
    }

    pub fn final_channels(&self) -> usize {
        *self.widths.last().expect("validated encoder has stages")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub classes: usize,
    pub text_dim: usize,
    /// Attention hidden size; `None` uses the final channel count.
    pub attention_dim: Option<usize>,
    /// One set of decoupling weights for both streams.
    pub tied_decoupling: bool,
    pub dsu_scope: UncertaintyScope,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            classes: 5,
            text_dim: 32,
            attention_dim: None,
            tied_decoupling: true,
            dsu_scope: UncertaintyScope::Std,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.classes == 0 || self.text_dim == 0 || self.attention_dim == Some(0) {
            return Err(Error::Config("classes, text_dim and attention_dim must be positive".into()));
        }
        Ok(())
    }

    pub fn hidden(&self) -> usize {
        self.attention_dim.unwrap_or_else(|| self.encoder.final_channels())
    }

    /// Stable `key = value` description embedded in checkpoints.
    pub fn echo(&self) -> String {
        let join = |v: &[usize]| {
            v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
        };
        let e = &self.encoder;
        format!(
            "model.input = {}\nmodel.widths = {}\nmodel.downsample = {}\nmodel.classes = {}\n\
             model.text_dim = {}\nmodel.attention_dim = {}\nmodel.tied_decoupling = {}\nmodel.dsu_scope = {}\n",
            join(&e.input),
            join(&e.widths),
            join(&e.downsample),
            self.classes,
            self.text_dim,
            self.hidden(),
            self.tied_decoupling,
            self.dsu_scope,
        )
    }
}

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new(names: Vec<String>, tensors: Vec<Tensor>) -> Result<Self> {
        if names.len() != tensors.len() {
            return Err(Error::LengthMismatch(names.len(), tensors.len()));
        }
        Ok(Self { names, tensors })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(move |i| &mut self.tensors[i])
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct StageVars {
    /// Pointwise channel mixing, `C_in x C_out`.
    pub weight: Var,
    /// Mixing of the 3x3 neighbourhood mean, `C_in x C_out`.
    pub weight_local: Var,
    pub bias: Var,
}

/// Graph handles for every parameter of a model.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub stages: Vec<StageVars>,
    pub attention: AttentionVars,
    pub attention_prob: Option<AttentionVars>,
    pub head_weight: Var,
    pub head_bias: Var,
}

impl ModelVars {
    /// Rebuilds the handles from vars listed in [`ParamStore`] order.
    pub fn from_ordered(config: &ModelConfig, vars: &[Var]) -> Result<Self> {
        let stages = config.encoder.stages();
        let expected = 3 * stages + 3 + if config.tied_decoupling { 0 } else { 3 } + 2;
        if vars.len() != expected {
            return Err(Error::LengthMismatch(expected, vars.len()));
        }
        let mut it = vars.iter().copied();
        let mut next = || it.next().expect("length checked");
        let stage_vars = (0..stages)
            .map(|_| StageVars {
                weight: next(),
                weight_local: next(),
                bias: next(),
            })
            .collect();
        let attention = AttentionVars {
            w_feat: next(),
            w_text: next(),
            v: next(),
        };
        let attention_prob = (!config.tied_decoupling).then(|| AttentionVars {
            w_feat: next(),
            w_text: next(),
            v: next(),
        });
        Ok(Self {
            stages: stage_vars,
            attention,
            attention_prob,
            head_weight: next(),
            head_bias: next(),
        })
    }
}

/// Graph handles of one training forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOutputs {
    /// Deterministic probabilities `B x T`.
    pub y_hat: Var,
    /// Probabilistic probabilities `B x T`.
    pub y_bar: Var,
    /// Deterministic class features `B x T x C`.
    pub f: Var,
    /// Probabilistic class features `B x T x C`.
    pub f_dot: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TwoStreamModel {
    pub config: ModelConfig,
    pub params: ParamStore,
}

fn he_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Result<Tensor> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-bound..bound)).collect())
}

impl TwoStreamModel {
    /// He-uniform weights (variance `2 / fan_in`) and zero biases, deterministic per seed.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        let mut c_in = config.encoder.input[0];
        for (l, &c_out) in config.encoder.widths.iter().enumerate() {
            names.push(format!("stage{l}.weight"));
            tensors.push(he_uniform(&mut rng, &[c_in, c_out], 2 * c_in)?);
            names.push(format!("stage{l}.weight_local"));
            tensors.push(he_uniform(&mut rng, &[c_in, c_out], 2 * c_in)?);
            names.push(format!("stage{l}.bias"));
            tensors.push(Tensor::zeros(&[c_out])?);
            c_in = c_out;
        }
        let hidden = config.hidden();
        let blocks = if config.tied_decoupling {
            vec!["attn"]
        } else {
            vec!["attn", "attn_prob"]
        };
        for prefix in blocks {
            names.push(format!("{prefix}.w_feat"));
            tensors.push(he_uniform(&mut rng, &[hidden, c_in], c_in)?);
            names.push(format!("{prefix}.w_text"));
            tensors.push(he_uniform(&mut rng, &[hidden, config.text_dim], config.text_dim)?);
            names.push(format!("{prefix}.v"));
            tensors.push(he_uniform(&mut rng, &[hidden], hidden)?);
        }
        names.push("head.weight".into());
        tensors.push(he_uniform(&mut rng, &[config.classes, c_in], c_in)?);
        names.push("head.bias".into());
        tensors.push(Tensor::zeros(&[config.classes])?);
        Ok(Self {
            config,
            params: ParamStore::new(names, tensors)?,
        })
    }

    /// Registers every parameter as a gradient-tracking leaf.
    pub fn bind(&self, g: &mut Graph) -> Result<(Vec<Var>, ModelVars)> {
        let vars: Vec<Var> = self.params.tensors().iter().map(|t| g.param(t.clone())).collect();
        let mv = ModelVars::from_ordered(&self.config, &vars)?;
        Ok((vars, mv))
    }

    /// Registers every parameter as a constant.
    pub fn bind_frozen(&self, g: &mut Graph) -> Result<ModelVars> {
        let vars: Vec<Var> = self
            .params
            .tensors()
            .iter()
            .map(|t| g.constant(t.clone()))
            .collect();
        ModelVars::from_ordered(&self.config, &vars)
    }

    fn check_input(&self, g: &Graph, x: Var) -> Result<()> {
        let [c, h, w] = self.config.encoder.input;
        let shape = g.shape(x);
        if shape.len() != 4 || shape[1..] != [c, h, w] {
            return Err(Error::ShapeMismatch {
                op: "model input",
                lhs: shape.to_vec(),
                rhs: vec![c, h, w],
            });
        }
        Ok(())
    }

    /// One stage: average pooling, channel mixing of each position and of its
    /// 3x3 neighbourhood mean, bias, tanh.
    pub fn stage_forward(&self, g: &mut Graph, vars: &ModelVars, x: Var, l: usize) -> Result<Var> {
        let expected_c = if l == 0 {
            self.config.encoder.input[0]
        } else {
            self.config.encoder.widths[l - 1]
        };
        if g.shape(x).len() != 4 || g.shape(x)[1] != expected_c {
            return Err(Error::ShapeMismatch {
                op: "stage input",
                lhs: g.shape(x).to_vec(),
                rhs: vec![expected_c],
            });
        }
        let sv = vars.stages[l];
        let pooled = g.avg_pool2d(x, self.config.encoder.downsample[l])?;
        let local = g.box_filter(pooled, 1)?;
        let last = g.permute(pooled, &[0, 2, 3, 1])?;
        let local = g.permute(local, &[0, 2, 3, 1])?;
        let own = g.matmul(last, sv.weight)?;
        let near = g.matmul(local, sv.weight_local)?;
        let mixed = g.add(own, near)?;
        let mixed = g.add(mixed, sv.bias)?;
        let act = g.tanh(mixed)?;
        g.permute(act, &[0, 3, 1, 2])
    }

    /// Runs all stages, applying the perturbation after each one when `rng` is given.
    pub fn encode(
        &self,
        g: &mut Graph,
        vars: &ModelVars,
        x: Var,
        mut perturb: Option<&mut RandomSource>,
    ) -> Result<Var> {
        self.check_input(g, x)?;
        let mut h = x;
        for l in 0..self.config.encoder.stages() {
            h = self.stage_forward(g, vars, h, l)?;
            if let Some(rng) = perturb.as_deref_mut() {
                h = dsu_forward_graph(g, h, rng, true, self.config.dsu_scope)?;
            }
        }
        Ok(h)
    }

    /// Shared per-class linear heads followed by sigmoid: `B x T x C -> B x T`.
    pub fn heads(&self, g: &mut Graph, vars: &ModelVars, f: Var) -> Result<Var> {
        let prod = g.mul(f, vars.head_weight)?;
        let logits = g.sum(prod, &[2], false)?;
        let logits = g.add(logits, vars.head_bias)?;
        g.sigmoid(logits)
    }

    fn decoupled(&self, g: &mut Graph, features: Var, text: Var, attn: &AttentionVars) -> Result<Var> {
        let alpha = attention_scores(g, features, text, attn)?;
        decouple(g, features, alpha)
    }

    /// Deterministic stream: probabilities `B x T` and class features `B x T x C`.
    pub fn forward_deterministic(&self, g: &mut Graph, vars: &ModelVars, x: Var, text: Var) -> Result<(Var, Var)> {
        let det = self.encode(g, vars, x, None)?;
        let f = self.decoupled(g, det, text, &vars.attention)?;
        let y_hat = self.heads(g, vars, f)?;
        Ok((y_hat, f))
    }

    /// Both streams over one batch. With `dsu_active == false` the
    /// probabilistic stream repeats the deterministic computation.
    pub fn forward_train(
        &self,
        g: &mut Graph,
        vars: &ModelVars,
        x: Var,
        text: Var,
        rng: &mut RandomSource,
        dsu_active: bool,
    ) -> Result<ForwardOutputs> {
        let (y_hat, f) = self.forward_deterministic(g, vars, x, text)?;
        let prob = self.encode(g, vars, x, dsu_active.then_some(rng))?;
        let attn = vars.attention_prob.unwrap_or(vars.attention);
        let f_dot = self.decoupled(g, prob, text, &attn)?;
        let y_bar = self.heads(g, vars, f_dot)?;
        Ok(ForwardOutputs {
            y_hat,
            y_bar,
            f,
            f_dot,
        })
    }

    /// Deterministic-stream probabilities `B x T`; consumes no randomness.
    pub fn forward_eval(&self, x: &Tensor, text: &TextEmbeddingMatrix) -> Result<Tensor> {
        if text.classes() != self.config.classes || text.dim() != self.config.text_dim {
            return Err(Error::ShapeMismatch {
                op: "text embeddings",
                lhs: text.matrix.shape().to_vec(),
                rhs: vec![self.config.classes, self.config.text_dim],
            });
        }
        let mut g = Graph::new();
        let vars = self.bind_frozen(&mut g)?;
        let xv = g.constant(x.clone());
        let tv = g.constant(text.matrix.clone());
        let (y, _) = self.forward_deterministic(&mut g, &vars, xv, tv)?;
        Ok(g.value(y).clone())
    }
}
