//! Arena-backed reverse-mode differentiation tape.
//!
//! Nodes are appended in evaluation order, so the arena index order is a
//! topological order and backward is a single reverse sweep. Leaves keep
//! their accumulated gradient inside their [`Tensor`]; calling
//! [`Graph::backward`] twice adds the second pass on top of the first.
//!
//! Values that must not carry gradient (teacher predictions, kernel
//! bandwidths, perturbation scales) go through [`Graph::freeze`]. In record
//! mode those values are captured, and in replay mode a later graph reuses
//! them, so a finite-difference check sees the same surrogate objective the
//! analytic gradient differentiates.

use super::broadcast::{index_map, row_major_strides, BroadcastPlan};
use super::tensor::{numel, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryKind {
    Tanh,
    Sigmoid,
    Exp,
    Log,
    Sqrt,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum ReduceKind {
    Sum,
    Mean,
    Variance,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary {
        kind: BinaryKind,
        a: Var,
        b: Var,
        plan: BroadcastPlan,
    },
    AddScalar(Var),
    MulScalar(Var, f64),
    Unary(UnaryKind, Var),
    Clamp {
        x: Var,
        lo: f64,
        hi: f64,
    },
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        shared_rhs: bool,
    },
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Reduce {
        kind: ReduceKind,
        x: Var,
        map: Vec<usize>,
        count: usize,
        means: Vec<f64>,
    },
    Reshape(Var),
    Permute {
        x: Var,
        /// output flat index -> input flat index
        map: Vec<usize>,
    },
    GradScale(Var, f64),
    BoxFilter {
        x: Var,
        h: usize,
        w: usize,
        radius: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Stop-gradient values captured by a recording graph.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FrozenValues(Vec<Vec<f64>>);

impl FrozenValues {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Default)]
enum FrozenMode {
    #[default]
    Live,
    Record(Vec<Vec<f64>>),
    Replay {
        values: Vec<Vec<f64>>,
        cursor: usize,
    },
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    frozen: FrozenMode,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Graph that captures every frozen value it produces.
    pub fn recording() -> Self {
        Self {
            nodes: Vec::new(),
            frozen: FrozenMode::Record(Vec::new()),
        }
    }

    /// Graph that substitutes previously captured frozen values in order.
    pub fn replaying(values: FrozenValues) -> Self {
        Self {
            nodes: Vec::new(),
            frozen: FrozenMode::Replay {
                values: values.0,
                cursor: 0,
            },
        }
    }

    pub fn take_frozen(&mut self) -> FrozenValues {
        match std::mem::take(&mut self.frozen) {
            FrozenMode::Record(v) => FrozenValues(v),
            FrozenMode::Replay { values, .. } => FrozenValues(values),
            FrozenMode::Live => FrozenValues::default(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Passes `computed` through the freeze channel: recorded, replayed, or returned as is.
    pub fn freeze(&mut self, computed: Vec<f64>) -> Result<Vec<f64>> {
        match &mut self.frozen {
            FrozenMode::Live => Ok(computed),
            FrozenMode::Record(store) => {
                store.push(computed.clone());
                Ok(computed)
            }
            FrozenMode::Replay { values, cursor } => {
                let stored = values.get(*cursor).ok_or_else(|| {
                    Error::FrozenReplay(format!("no recorded value at position {cursor}"))
                })?;
                if stored.len() != computed.len() {
                    return Err(Error::FrozenReplay(format!(
                        "position {cursor}: recorded {} values, graph produced {}",
                        stored.len(),
                        computed.len()
                    )));
                }
                *cursor += 1;
                Ok(stored.clone())
            }
        }
    }

    // ---- leaves ----------------------------------------------------------

    /// Inserts a tensor as a leaf, keeping its `requires_grad` flag.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.requiring_grad())
    }

    pub fn constant(&mut self, mut tensor: Tensor) -> Var {
        tensor.set_requires_grad(false);
        tensor.zero_grad();
        self.leaf(tensor)
    }

    pub fn scalar(&mut self, value: f64) -> Result<Var> {
        Ok(self.constant(Tensor::scalar(value)?))
    }

    /// Constant copy of `x` routed through the freeze channel.
    pub fn stop_gradient(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let data = self.freeze(self.value(x).data().to_vec())?;
        Ok(self.constant(Tensor::new(shape, data)?))
    }

    // ---- accessors -------------------------------------------------------

    pub fn value(&self, x: Var) -> &Tensor {
        &self.nodes[x.0].value
    }

    pub fn shape(&self, x: Var) -> &[usize] {
        self.nodes[x.0].value.shape()
    }

    pub fn data(&self, x: Var) -> &[f64] {
        self.nodes[x.0].value.data()
    }

    pub fn item(&self, x: Var) -> Result<f64> {
        self.nodes[x.0].value.item()
    }

    pub fn requires_grad(&self, x: Var) -> bool {
        self.nodes[x.0].value.requires_grad()
    }

    /// Accumulated gradient of a leaf; `None` if no backward pass reached it.
    pub fn grad(&self, x: Var) -> Option<&[f64]> {
        self.nodes[x.0].value.grad()
    }

    /// Gradient of a leaf, zeros if it was never reached.
    pub fn grad_or_zero(&self, x: Var) -> Vec<f64> {
        self.grad(x)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; self.value(x).numel()])
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.value.zero_grad();
        }
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, name: &str) -> Result<Var> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(name.to_string()));
        }
        let requires_grad = self.inputs(&op).iter().any(|v| self.requires_grad(*v));
        let mut value = Tensor::from_parts(shape, data);
        value.set_requires_grad(requires_grad);
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    fn inputs(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::Binary { a, b, .. } | Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::AddScalar(x)
            | Op::MulScalar(x, _)
            | Op::Unary(_, x)
            | Op::Clamp { x, .. }
            | Op::Softmax { x, .. }
            | Op::Reduce { x, .. }
            | Op::Reshape(x)
            | Op::Permute { x, .. }
            | Op::GradScale(x, _)
            | Op::BoxFilter { x, .. } => vec![*x],
        }
    }

    // ---- elementwise -----------------------------------------------------

    pub fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let name = match kind {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
            BinaryKind::Div => "div",
        };
        let plan = BroadcastPlan::new(name, self.shape(a), self.shape(b))?;
        let (da, db) = (self.data(a), self.data(b));
        let mut out = vec![0.0; numel(&plan.out_shape)];
        match kind {
            BinaryKind::Add => plan.walk(|o, i, j| out[o] = da[i] + db[j]),
            BinaryKind::Sub => plan.walk(|o, i, j| out[o] = da[i] - db[j]),
            BinaryKind::Mul => plan.walk(|o, i, j| out[o] = da[i] * db[j]),
            BinaryKind::Div => plan.walk(|o, i, j| out[o] = da[i] / db[j]),
        }
        let shape = plan.out_shape.clone();
        self.push(shape, out, Op::Binary { kind, a, b, plan }, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Result<Var> {
        let out = self.data(x).iter().map(|v| v + s).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::AddScalar(x), "add_scalar")
    }

    pub fn mul_scalar(&mut self, x: Var, s: f64) -> Result<Var> {
        let out = self.data(x).iter().map(|v| v * s).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::MulScalar(x, s), "mul_scalar")
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.mul_scalar(x, -1.0)
    }

    /// `1 - x`
    pub fn one_minus(&mut self, x: Var) -> Result<Var> {
        let n = self.neg(x)?;
        self.add_scalar(n, 1.0)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.mul(x, x)
    }

    pub fn unary(&mut self, kind: UnaryKind, x: Var) -> Result<Var> {
        let src = self.data(x);
        let (name, out): (&'static str, Vec<f64>) = match kind {
            UnaryKind::Tanh => ("tanh", src.iter().map(|v| v.tanh()).collect()),
            UnaryKind::Sigmoid => ("sigmoid", src.iter().map(|&v| sigmoid(v)).collect()),
            UnaryKind::Exp => ("exp", src.iter().map(|v| v.exp()).collect()),
            UnaryKind::Log => {
                if let Some(&bad) = src.iter().find(|&&v| v <= 0.0) {
                    return Err(Error::Domain {
                        op: "log",
                        value: bad,
                    });
                }
                ("log", src.iter().map(|v| v.ln()).collect())
            }
            UnaryKind::Sqrt => {
                if let Some(&bad) = src.iter().find(|&&v| v <= 0.0) {
                    return Err(Error::Domain {
                        op: "sqrt",
                        value: bad,
                    });
                }
                ("sqrt", src.iter().map(|v| v.sqrt()).collect())
            }
        };
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Unary(kind, x), name)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Tanh, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Sigmoid, x)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Log, x)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Sqrt, x)
    }

    /// Clamps into `[lo, hi]`; gradient passes only where the input is inside.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        let out = self.data(x).iter().map(|v| v.clamp(lo, hi)).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Clamp { x, lo, hi }, "clamp")
    }

    /// `log(max(x, floor))`
    pub fn log_floored(&mut self, x: Var, floor: f64) -> Result<Var> {
        let c = self.clamp(x, floor, f64::INFINITY)?;
        self.log(c)
    }

    /// Identity forward; backward multiplies the incoming gradient by `factor`.
    pub fn grad_scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let out = self.data(x).to_vec();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::GradScale(x, factor), "grad_scale")
    }

    // ---- linear algebra --------------------------------------------------

    /// Matrix product over the last two axes.
    ///
    /// `a: [.., m, k]` with `b: [k, n]` shares `b` across the leading axes;
    /// `a: [.., m, k]` with `b: [.., k, n]` of equal leading shape is batched.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mismatch = || Error::ShapeMismatch {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(mismatch());
        }
        let lead = &sa[..sa.len() - 2];
        let shared_rhs = sb.len() == 2;
        if !shared_rhs && lead != &sb[..sb.len() - 2] {
            return Err(mismatch());
        }
        let batch = numel(lead);
        let (da, db) = (self.data(a), self.data(b));
        let mut out = vec![0.0; batch * m * n];
        for bi in 0..batch {
            let ao = &da[bi * m * k..(bi + 1) * m * k];
            let bo = if shared_rhs {
                db
            } else {
                &db[bi * k * n..(bi + 1) * k * n]
            };
            let co = &mut out[bi * m * n..(bi + 1) * m * n];
            for i in 0..m {
                let crow = &mut co[i * n..(i + 1) * n];
                for p in 0..k {
                    let aip = ao[i * k + p];
                    if aip == 0.0 {
                        continue;
                    }
                    let brow = &bo[p * n..(p + 1) * n];
                    for (c, bv) in crow.iter_mut().zip(brow) {
                        *c += aip * bv;
                    }
                }
            }
        }
        let mut shape = lead.to_vec();
        shape.extend([m, n]);
        self.push(
            shape,
            out,
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_rhs,
            },
            "matmul",
        )
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidAxis {
                axis,
                rank: shape.len(),
            });
        }
        let outer = numel(&shape[..axis]);
        let len = shape[axis];
        let inner = numel(&shape[axis + 1..]);
        let src = self.data(x);
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let max = (0..len)
                    .map(|j| src[base + j * inner])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..len {
                    let e = (src[base + j * inner] - max).exp();
                    out[base + j * inner] = e;
                    total += e;
                }
                for j in 0..len {
                    out[base + j * inner] /= total;
                }
            }
        }
        self.push(
            shape,
            out,
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            },
            "softmax",
        )
    }

    // ---- reductions ------------------------------------------------------

    fn reduce(&mut self, kind: ReduceKind, x: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let rank = shape.len();
        let mut reduced = vec![false; rank];
        for &ax in axes {
            if ax >= rank {
                return Err(Error::InvalidAxis { axis: ax, rank });
            }
            if reduced[ax] {
                return Err(Error::InvalidShape(format!("duplicate reduction axis {ax}")));
            }
            reduced[ax] = true;
        }
        if axes.is_empty() && rank > 0 {
            return Err(Error::EmptyReduction(axes.to_vec()));
        }
        let kept: Vec<usize> = (0..rank)
            .map(|i| if reduced[i] { 1 } else { shape[i] })
            .collect();
        let kept_strides = row_major_strides(&kept);
        let strides: Vec<usize> = (0..rank)
            .map(|i| if reduced[i] { 0 } else { kept_strides[i] })
            .collect();
        let map = index_map(&shape, &strides);
        let out_len = numel(&kept);
        let count = numel(&shape) / out_len;
        let src = self.data(x);
        let mut sums = vec![0.0; out_len];
        for (v, &o) in src.iter().zip(&map) {
            sums[o] += v;
        }
        let mut means = Vec::new();
        let out = match kind {
            ReduceKind::Sum => sums,
            ReduceKind::Mean => sums.into_iter().map(|s| s / count as f64).collect(),
            ReduceKind::Variance => {
                means = sums.into_iter().map(|s| s / count as f64).collect();
                let mut acc = vec![0.0; out_len];
                for (v, &o) in src.iter().zip(&map) {
                    let d = v - means[o];
                    acc[o] += d * d;
                }
                acc.into_iter().map(|s| s / count as f64).collect()
            }
        };
        let out_shape = if keepdim {
            kept
        } else {
            (0..rank).filter(|&i| !reduced[i]).map(|i| shape[i]).collect()
        };
        let name = match kind {
            ReduceKind::Sum => "sum",
            ReduceKind::Mean => "mean",
            ReduceKind::Variance => "variance",
        };
        self.push(
            out_shape,
            out,
            Op::Reduce {
                kind,
                x,
                map,
                count,
                means,
            },
            name,
        )
    }

    pub fn sum(&mut self, x: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        self.reduce(ReduceKind::Sum, x, axes, keepdim)
    }

    pub fn mean(&mut self, x: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        self.reduce(ReduceKind::Mean, x, axes, keepdim)
    }

    /// Biased (1/N) variance.
    pub fn variance(&mut self, x: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        self.reduce(ReduceKind::Variance, x, axes, keepdim)
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.reduce(ReduceKind::Sum, x, &axes, false)
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.reduce(ReduceKind::Mean, x, &axes, false)
    }

    // ---- layout ----------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).numel() || shape.iter().any(|&d| d == 0) {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let out = self.data(x).to_vec();
        self.push(shape.to_vec(), out, Op::Reshape(x), "reshape")
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() {
            return Err(Error::InvalidShape(format!(
                "permutation {perm:?} for rank {}",
                shape.len()
            )));
        }
        for &p in perm {
            if p >= shape.len() || seen[p] {
                return Err(Error::InvalidShape(format!("invalid permutation {perm:?}")));
            }
            seen[p] = true;
        }
        let in_strides = row_major_strides(&shape);
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let map = index_map(&out_shape, &strides);
        let src = self.data(x);
        let out = map.iter().map(|&i| src[i]).collect();
        self.push(out_shape, out, Op::Permute { x, map }, "permute")
    }

    /// Average pooling over the last two axes by an integer factor.
    pub fn avg_pool2d(&mut self, x: Var, factor: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let r = shape.len();
        if r < 2 || factor == 0 || shape[r - 2] % factor != 0 || shape[r - 1] % factor != 0 {
            return Err(Error::InvalidShape(format!(
                "cannot pool {shape:?} by factor {factor}"
            )));
        }
        if factor == 1 {
            return Ok(x);
        }
        let mut split = shape[..r - 2].to_vec();
        split.extend([shape[r - 2] / factor, factor, shape[r - 1] / factor, factor]);
        let v = self.reshape(x, &split)?;
        let n = split.len();
        self.mean(v, &[n - 3, n - 1], false)
    }

    /// Mean over the `(2r+1) x (2r+1)` neighbourhood of each position in the
    /// last two axes, zero padded; the divisor is fixed so the map is self-adjoint.
    pub fn box_filter(&mut self, x: Var, radius: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let r = shape.len();
        if r < 2 {
            return Err(Error::InvalidShape(format!("cannot filter rank-{r} tensor")));
        }
        if radius == 0 {
            return Ok(x);
        }
        let (h, w) = (shape[r - 2], shape[r - 1]);
        let out = box_filter(self.data(x), h, w, radius);
        self.push(shape, out, Op::BoxFilter { x, h, w, radius }, "box_filter")
    }

    // ---- backward --------------------------------------------------------

    /// Accumulates d(root)/d(leaf) into every gradient-tracking leaf.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let rv = &self.nodes[root.0].value;
        if rv.numel() != 1 {
            return Err(Error::NonScalarRoot(rv.shape().to_vec()));
        }
        if !rv.requires_grad() {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);
        let mut leaf_grads = Vec::new();
        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            self.propagate(node, id, g, &mut grads, &mut leaf_grads);
        }
        for (id, g) in leaf_grads {
            self.nodes[id].value.accumulate_grad(&g)?;
        }
        Ok(())
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
        if !self.nodes[v.0].value.requires_grad() {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn propagate(
        &self,
        node: &Node,
        id: usize,
        g: Vec<f64>,
        grads: &mut [Option<Vec<f64>>],
        leaf_grads: &mut Vec<(usize, Vec<f64>)>,
    ) {
        let y = node.value.data();
        match &node.op {
            Op::Leaf => leaf_grads.push((id, g)),
            Op::Binary { kind, a, b, plan } => {
                let (da, db) = (self.data(*a), self.data(*b));
                if let Some(ga) = self.slot(grads, *a) {
                    match kind {
                        BinaryKind::Add | BinaryKind::Sub => plan.walk(|o, i, _| ga[i] += g[o]),
                        BinaryKind::Mul => plan.walk(|o, i, j| ga[i] += g[o] * db[j]),
                        BinaryKind::Div => plan.walk(|o, i, j| ga[i] += g[o] / db[j]),
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    match kind {
                        BinaryKind::Add => plan.walk(|o, _, j| gb[j] += g[o]),
                        BinaryKind::Sub => plan.walk(|o, _, j| gb[j] -= g[o]),
                        BinaryKind::Mul => plan.walk(|o, i, j| gb[j] += g[o] * da[i]),
                        BinaryKind::Div => {
                            plan.walk(|o, i, j| gb[j] -= g[o] * da[i] / (db[j] * db[j]))
                        }
                    }
                }
            }
            Op::AddScalar(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
                }
            }
            Op::MulScalar(x, s) => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().zip(&g).for_each(|(a, b)| *a += b * s);
                }
            }
            Op::GradScale(x, s) => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().zip(&g).for_each(|(a, b)| *a += b * s);
                }
            }
            Op::Unary(kind, x) => {
                let xs = self.data(*x);
                if let Some(gx) = self.slot(grads, *x) {
                    for i in 0..g.len() {
                        let d = match kind {
                            UnaryKind::Tanh => 1.0 - y[i] * y[i],
                            UnaryKind::Sigmoid => y[i] * (1.0 - y[i]),
                            UnaryKind::Exp => y[i],
                            UnaryKind::Log => 1.0 / xs[i],
                            UnaryKind::Sqrt => 0.5 / y[i],
                        };
                        gx[i] += g[i] * d;
                    }
                }
            }
            Op::Clamp { x, lo, hi } => {
                let xs = self.data(*x);
                if let Some(gx) = self.slot(grads, *x) {
                    for i in 0..g.len() {
                        if xs[i] >= *lo && xs[i] <= *hi {
                            gx[i] += g[i];
                        }
                    }
                }
            }
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_rhs,
            } => {
                let (m, k, n) = (*m, *k, *n);
                let (da, db) = (self.data(*a), self.data(*b));
                if let Some(ga) = self.slot(grads, *a) {
                    for bi in 0..*batch {
                        let bo = if *shared_rhs { 0 } else { bi * k * n };
                        for i in 0..m {
                            let grow = &g[bi * m * n + i * n..bi * m * n + (i + 1) * n];
                            for p in 0..k {
                                let brow = &db[bo + p * n..bo + (p + 1) * n];
                                let s: f64 = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                                ga[bi * m * k + i * k + p] += s;
                            }
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for bi in 0..*batch {
                        let bo = if *shared_rhs { 0 } else { bi * k * n };
                        for i in 0..m {
                            let grow = &g[bi * m * n + i * n..bi * m * n + (i + 1) * n];
                            for p in 0..k {
                                let aip = da[bi * m * k + i * k + p];
                                let brow = &mut gb[bo + p * n..bo + (p + 1) * n];
                                for (gbv, gv) in brow.iter_mut().zip(grow) {
                                    *gbv += aip * gv;
                                }
                            }
                        }
                    }
                }
            }
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => {
                if let Some(gx) = self.slot(grads, *x) {
                    for o in 0..*outer {
                        for i in 0..*inner {
                            let base = o * len * inner + i;
                            let dot: f64 = (0..*len)
                                .map(|j| g[base + j * inner] * y[base + j * inner])
                                .sum();
                            for j in 0..*len {
                                let at = base + j * inner;
                                gx[at] += y[at] * (g[at] - dot);
                            }
                        }
                    }
                }
            }
            Op::Reduce {
                kind,
                x,
                map,
                count,
                means,
            } => {
                let xs = self.data(*x);
                if let Some(gx) = self.slot(grads, *x) {
                    let c = *count as f64;
                    match kind {
                        ReduceKind::Sum => {
                            map.iter().enumerate().for_each(|(i, &o)| gx[i] += g[o])
                        }
                        ReduceKind::Mean => {
                            map.iter().enumerate().for_each(|(i, &o)| gx[i] += g[o] / c)
                        }
                        ReduceKind::Variance => map
                            .iter()
                            .enumerate()
                            .for_each(|(i, &o)| gx[i] += g[o] * 2.0 * (xs[i] - means[o]) / c),
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
                }
            }
            Op::Permute { x, map } => {
                if let Some(gx) = self.slot(grads, *x) {
                    map.iter().zip(&g).for_each(|(&i, gv)| gx[i] += gv);
                }
            }
            Op::BoxFilter { x, h, w, radius } => {
                if let Some(gx) = self.slot(grads, *x) {
                    let back = box_filter(&g, *h, *w, *radius);
                    gx.iter_mut().zip(&back).for_each(|(a, b)| *a += b);
                }
            }
        }
    }
}

fn box_filter(src: &[f64], h: usize, w: usize, radius: usize) -> Vec<f64> {
    let scale = 1.0 / ((2 * radius + 1) * (2 * radius + 1)) as f64;
    let mut out = vec![0.0; src.len()];
    for (plane, dst) in src.chunks(h * w).zip(out.chunks_mut(h * w)) {
        for i in 0..h {
            let (i0, i1) = (i.saturating_sub(radius), (i + radius).min(h - 1));
            for j in 0..w {
                let (j0, j1) = (j.saturating_sub(radius), (j + radius).min(w - 1));
                let mut acc = 0.0;
                for ii in i0..=i1 {
                    acc += plane[ii * w + j0..=ii * w + j1].iter().sum::<f64>();
                }
                dst[i * w + j] = acc * scale;
            }
        }
    }
    out
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
