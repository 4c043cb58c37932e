//! Reverse-mode differentiation over a linear record of executed operations.
//!
//! A [`Tape`] owns every intermediate value of one forward pass. Operations
//! append a node holding the value plus enough context to replay the local
//! gradient rule; [`Tape::backward`] walks the nodes in reverse execution
//! order. Parameters enter the record through [`Tape::param`] and receive
//! their gradients via [`Tape::accumulate_grads`].

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::{matmul_raw, transpose_raw, Tensor};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    idx: usize,
}

/// Kind of recorded operation; used for diagnostics and fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    Sub,
    Mul,
    Scale,
    AppendOnes,
    Concat,
    Transpose,
    Relu,
    MaskedSoftmax,
    Conv1d,
    MaskRows,
    SliceRows,
    GatherRows,
    MaskedMeanRows,
    Sum,
    CrossEntropy,
    RelPos,
    Cca,
}

impl OpKind {
    pub const ALL: [OpKind; 20] = [
        OpKind::Leaf,
        OpKind::MatMul,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::AppendOnes,
        OpKind::Concat,
        OpKind::Transpose,
        OpKind::Relu,
        OpKind::MaskedSoftmax,
        OpKind::Conv1d,
        OpKind::MaskRows,
        OpKind::SliceRows,
        OpKind::GatherRows,
        OpKind::MaskedMeanRows,
        OpKind::Sum,
        OpKind::CrossEntropy,
        OpKind::RelPos,
        OpKind::Cca,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::AppendOnes => "append_ones",
            OpKind::Concat => "concat",
            OpKind::Transpose => "transpose",
            OpKind::Relu => "relu",
            OpKind::MaskedSoftmax => "masked_softmax",
            OpKind::Conv1d => "conv1d",
            OpKind::MaskRows => "mask_rows",
            OpKind::SliceRows => "slice_rows",
            OpKind::GatherRows => "gather_rows",
            OpKind::MaskedMeanRows => "masked_mean_rows",
            OpKind::Sum => "sum",
            OpKind::CrossEntropy => "cross_entropy",
            OpKind::RelPos => "relative_position_logits",
            OpKind::Cca => "cca_corr",
        }
    }

    pub fn parse(name: &str) -> Option<OpKind> {
        OpKind::ALL.into_iter().find(|k| k.name() == name)
    }
}

enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AppendOnes(usize),
    Concat { parts: Vec<usize>, axis: usize },
    Transpose(usize),
    Relu(usize),
    MaskedSoftmax(usize),
    Conv1d { x: usize, kernel: usize },
    MaskRows { x: usize, mask: Vec<bool> },
    SliceRows { x: usize, start: usize },
    GatherRows { x: usize, index: Vec<usize> },
    MaskedMeanRows { x: usize, mask: Vec<bool>, count: usize },
    Sum(usize),
    CrossEntropy { x: usize, target: usize, probs: Vec<f64> },
    RelPos { x: usize, w: usize },
    /// Scalar op whose local gradients were computed alongside the value.
    Custom { inputs: Vec<usize>, local: Vec<Vec<f64>>, kind: OpKind },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::AppendOnes(..) => OpKind::AppendOnes,
            Op::Concat { .. } => OpKind::Concat,
            Op::Transpose(..) => OpKind::Transpose,
            Op::Relu(..) => OpKind::Relu,
            Op::MaskedSoftmax(..) => OpKind::MaskedSoftmax,
            Op::Conv1d { .. } => OpKind::Conv1d,
            Op::MaskRows { .. } => OpKind::MaskRows,
            Op::SliceRows { .. } => OpKind::SliceRows,
            Op::GatherRows { .. } => OpKind::GatherRows,
            Op::MaskedMeanRows { .. } => OpKind::MaskedMeanRows,
            Op::Sum(..) => OpKind::Sum,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::RelPos { .. } => OpKind::RelPos,
            Op::Custom { kind, .. } => *kind,
        }
    }
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// The computation record for one forward/backward pass.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    params: HashMap<usize, usize>,
    grads: Vec<Option<Vec<f64>>>,
    fault: Option<OpKind>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            params: HashMap::new(),
            grads: Vec::new(),
            fault: None,
        }
    }

    /// Test hook: scales every gradient produced by ops of `kind` by 1.5.
    #[doc(hidden)]
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        debug_assert!(value.grad.is_none());
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(Error::ForeignVar);
        }
        Ok(v.idx)
    }

    fn val(&self, v: Var) -> Result<&Tensor> {
        let i = self.check(v)?;
        Ok(&self.nodes[i].value)
    }

    fn rg(&self, idx: usize) -> bool {
        self.nodes[idx].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[self.check(v).expect("foreign variable")].value
    }

    /// Registers a parameter tensor. Registering the same tensor twice
    /// returns the same variable, so gradients from both uses accumulate.
    pub fn param(&mut self, t: &Tensor) -> Var {
        let key = t as *const Tensor as usize;
        if let Some(&idx) = self.params.get(&key) {
            return Var { tape: self.id, idx };
        }
        let mut value = t.clone();
        value.grad = None;
        let v = self.push(value, t.requires_grad, Op::Leaf);
        self.params.insert(key, v.idx);
        v
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.grad = None;
        t.requires_grad = false;
        self.push(t, false, Op::Leaf)
    }

    /// Records a leaf that receives a gradient without being tied to a parameter.
    pub fn input(&mut self, mut t: Tensor) -> Var {
        t.grad = None;
        t.requires_grad = true;
        self.push(t, true, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.val(a)?, self.val(b)?);
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.cols() != bv.rows() {
            return Err(Error::shape("matmul", av.shape(), bv.shape()));
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        let out = matmul_raw(av.data(), bv.data(), m, k, n);
        let rg = self.rg(a.idx) || self.rg(b.idx);
        Ok(self.push(Tensor::from_vec(&[m, n], out), rg, Op::MatMul(a.idx, b.idx)))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (av, bv) = (self.val(a)?, self.val(b)?);
        if av.shape() != bv.shape() {
            return Err(Error::shape(op, av.shape(), bv.shape()));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let av = &self.nodes[a.idx].value;
        let bv = &self.nodes[b.idx].value;
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| f(*x, *y)).collect();
        let t = Tensor::from_vec(av.shape(), data);
        let rg = self.rg(a.idx) || self.rg(b.idx);
        self.push(t, rg, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, |x, y| x + y, Op::Add(a.idx, b.idx)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, |x, y| x - y, Op::Sub(a.idx, b.idx)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, |x, y| x * y, Op::Mul(a.idx, b.idx)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let av = self.val(a)?;
        let data = av.data().iter().map(|x| x * s).collect();
        let t = Tensor::from_vec(av.shape(), data);
        let rg = self.rg(a.idx);
        Ok(self.push(t, rg, Op::Scale(a.idx, s)))
    }

    /// Appends a constant-one column, turning `[T x d]` into `[T x (d+1)]`.
    pub fn append_ones(&mut self, a: Var) -> Result<Var> {
        let av = self.val(a)?;
        let (r, c) = (av.rows(), av.cols());
        let mut data = Vec::with_capacity(r * (c + 1));
        for i in 0..r {
            data.extend_from_slice(av.row(i));
            data.push(1.0);
        }
        let rg = self.rg(a.idx);
        Ok(self.push(Tensor::from_vec(&[r, c + 1], data), rg, Op::AppendOnes(a.idx)))
    }

    /// Affine map with the bias stored as the last row of `w`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xv, wv) = (self.val(x)?, self.val(w)?);
        if xv.cols() + 1 != wv.rows() {
            return Err(Error::shape("linear", xv.shape(), wv.shape()));
        }
        let xa = self.append_ones(x)?;
        self.matmul(xa, w)
    }

    /// Concatenates 2-D tensors along `axis` (0 = rows/time, 1 = features).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Empty("concat".into()));
        }
        if axis > 1 {
            return Err(Error::Config(format!("concat axis {axis} out of range")));
        }
        let first = self.val(parts[0])?.shape().to_vec();
        let mut rows = 0;
        let mut cols = 0;
        for &p in parts {
            let s = self.val(p)?;
            let (r, c) = (s.rows(), s.cols());
            if axis == 0 && c != first[1..].iter().product::<usize>() {
                return Err(Error::shape("concat", &first, s.shape()));
            }
            if axis == 1 && r != first[0] {
                return Err(Error::shape("concat", &first, s.shape()));
            }
            rows += r;
            cols += c;
        }
        let (out_r, out_c) = if axis == 0 {
            (rows, self.nodes[parts[0].idx].value.cols())
        } else {
            (first[0], cols)
        };
        let mut data = Vec::with_capacity(out_r * out_c);
        if axis == 0 {
            for &p in parts {
                data.extend_from_slice(self.nodes[p.idx].value.data());
            }
        } else {
            for i in 0..out_r {
                for &p in parts {
                    data.extend_from_slice(self.nodes[p.idx].value.row(i));
                }
            }
        }
        let rg = parts.iter().any(|p| self.rg(p.idx));
        let idx = parts.iter().map(|p| p.idx).collect();
        Ok(self.push(
            Tensor::from_vec(&[out_r, out_c], data),
            rg,
            Op::Concat { parts: idx, axis },
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let av = self.val(a)?;
        let t = av.transpose();
        let rg = self.rg(a.idx);
        Ok(self.push(t, rg, Op::Transpose(a.idx)))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let av = self.val(a)?;
        let data = av.data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let t = Tensor::from_vec(av.shape(), data);
        let rg = self.rg(a.idx);
        Ok(self.push(t, rg, Op::Relu(a.idx)))
    }

    /// Row-wise softmax. `mask` is either one entry per column (shared by all
    /// rows) or one entry per element. Masked entries come out exactly zero.
    pub fn masked_softmax(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var> {
        let av = self.val(a)?;
        let out = masked_softmax_rows(av, mask)?;
        let rg = self.rg(a.idx);
        Ok(self.push(out, rg, Op::MaskedSoftmax(a.idx)))
    }

    /// Same-length 1-D convolution over the time axis with zero padding.
    /// `kernel` has shape `[k, d_in, d_out]`, `k` odd.
    pub fn conv1d(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let (xv, kv) = (self.val(x)?, self.val(kernel)?);
        let out = conv1d_forward(xv, kv)?;
        let rg = self.rg(x.idx) || self.rg(kernel.idx);
        Ok(self.push(out, rg, Op::Conv1d { x: x.idx, kernel: kernel.idx }))
    }

    /// Zeroes rows whose mask entry is false.
    pub fn mask_rows(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let av = self.val(a)?;
        if mask.len() != av.rows() {
            return Err(Error::shape("mask_rows", av.shape(), &[mask.len()]));
        }
        let c = av.cols();
        let mut data = av.data().to_vec();
        for (i, &m) in mask.iter().enumerate() {
            if !m {
                data[i * c..(i + 1) * c].iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let t = Tensor::from_vec(av.shape(), data);
        let rg = self.rg(a.idx);
        Ok(self.push(t, rg, Op::MaskRows { x: a.idx, mask: mask.to_vec() }))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.val(a)?;
        if len == 0 || start + len > av.rows() {
            return Err(Error::shape("slice_rows", av.shape(), &[start, len]));
        }
        let c = av.cols();
        let data = av.data()[start * c..(start + len) * c].to_vec();
        let t = Tensor::from_vec(&[len, c], data);
        let rg = self.rg(a.idx);
        Ok(self.push(t, rg, Op::SliceRows { x: a.idx, start }))
    }

    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let av = self.val(a)?;
        if index.is_empty() || index.iter().any(|&i| i >= av.rows()) {
            return Err(Error::shape("gather_rows", av.shape(), &[index.len()]));
        }
        let c = av.cols();
        let mut data = Vec::with_capacity(index.len() * c);
        for &i in index {
            data.extend_from_slice(av.row(i));
        }
        let t = Tensor::from_vec(&[index.len(), c], data);
        let rg = self.rg(a.idx);
        Ok(self.push(t, rg, Op::GatherRows { x: a.idx, index: index.to_vec() }))
    }

    /// Mean over rows with a true mask entry, producing `[1 x d]`.
    pub fn masked_mean_rows(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let av = self.val(a)?;
        if mask.len() != av.rows() {
            return Err(Error::shape("masked_mean_rows", av.shape(), &[mask.len()]));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::Empty("mean over zero valid rows".into()));
        }
        let c = av.cols();
        let mut out = vec![0.0; c];
        for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            out.iter_mut().zip(av.row(i)).for_each(|(o, v)| *o += v);
        }
        out.iter_mut().for_each(|o| *o /= count as f64);
        let rg = self.rg(a.idx);
        Ok(self.push(
            Tensor::from_vec(&[1, c], out),
            rg,
            Op::MaskedMeanRows { x: a.idx, mask: mask.to_vec(), count },
        ))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.val(a)?.data().iter().sum();
        let rg = self.rg(a.idx);
        Ok(self.push(Tensor::scalar(s), rg, Op::Sum(a.idx)))
    }

    /// Negative log-likelihood of `target` under softmax(logits).
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let lv = self.val(logits)?;
        if target >= lv.numel() {
            return Err(Error::shape("cross_entropy", lv.shape(), &[target]));
        }
        let max = lv.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = lv.data().iter().map(|x| (x - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let probs: Vec<f64> = exps.iter().map(|e| e / z).collect();
        let loss = -(lv.data()[target] - max - z.ln());
        let rg = self.rg(logits.idx);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::CrossEntropy { x: logits.idx, target, probs },
        ))
    }

    /// `out[i][j] = sum_k (x[j][k] - x[i][k]) * w[k][j]` for a `[T x d]` input and
    /// a `[d x T_max]` table. Differences are formed before the contraction.
    pub fn relative_position(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xv, wv) = (self.val(x)?, self.val(w)?);
        let out = relpos_forward(xv, wv)?;
        let rg = self.rg(x.idx) || self.rg(w.idx);
        Ok(self.push(out, rg, Op::RelPos { x: x.idx, w: w.idx }))
    }

    /// Records a scalar-valued op whose gradient with respect to each input
    /// has already been evaluated (`local[i]` has the shape of `inputs[i]`).
    pub(crate) fn custom_scalar(
        &mut self,
        value: f64,
        inputs: &[Var],
        local: Vec<Vec<f64>>,
        kind: OpKind,
    ) -> Result<Var> {
        for (v, g) in inputs.iter().zip(&local) {
            if self.val(*v)?.numel() != g.len() {
                return Err(Error::shape("custom", self.val(*v)?.shape(), &[g.len()]));
            }
        }
        let rg = inputs.iter().any(|v| self.rg(v.idx));
        Ok(self.push(
            Tensor::scalar(value),
            rg,
            Op::Custom {
                inputs: inputs.iter().map(|v| v.idx).collect(),
                local,
                kind,
            },
        ))
    }

    pub fn backward(&mut self, root: Var) -> Result<()> {
        self.backward_scaled(root, 1.0)
    }

    /// Back-propagates `seed * d(root)`; repeated calls on one tape overwrite
    /// previous gradients.
    pub fn backward_scaled(&mut self, root: Var, seed: f64) -> Result<()> {
        let r = self.check(root)?;
        let rv = &self.nodes[r].value;
        if rv.numel() != 1 {
            return Err(Error::NonScalarRoot(rv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[r] = Some(vec![seed]);
        for i in (0..=r).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            let factor = if self.fault == Some(self.nodes[i].op.kind()) { 1.5 } else { 1.0 };
            self.propagate(i, &g, factor, &mut grads);
            grads[i] = Some(g);
        }
        if !rv.is_finite() || grads.iter().flatten().any(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite("gradient".into()));
        }
        self.grads = grads;
        Ok(())
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.check(v).ok().and_then(|i| self.grads.get(i)).and_then(|g| g.as_deref())
    }

    /// Gradient of a registered parameter, if it was reached by backward.
    pub fn param_grad(&self, t: &Tensor) -> Option<&[f64]> {
        let key = t as *const Tensor as usize;
        self.params.get(&key).and_then(|&i| self.grads.get(i)).and_then(|g| g.as_deref())
    }

    /// Adds recorded gradients into each parameter's `grad` buffer.
    pub fn accumulate_grads<'a>(&self, params: impl IntoIterator<Item = &'a mut Tensor>) {
        for p in params {
            if !p.requires_grad {
                continue;
            }
            match self.param_grad(p) {
                Some(g) => {
                    let g = g.to_vec();
                    p.accumulate_grad(&g);
                }
                None => {
                    if p.grad.is_none() {
                        let n = p.numel();
                        p.grad = Some(vec![0.0; n]);
                    }
                }
            }
        }
    }

    fn propagate(&self, i: usize, g: &[f64], factor: f64, grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        let mut send = |idx: usize, contrib: Vec<f64>| {
            if !nodes[idx].requires_grad {
                return;
            }
            match &mut grads[idx] {
                Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c * factor),
                None => {
                    grads[idx] = Some(if factor == 1.0 {
                        contrib
                    } else {
                        contrib.into_iter().map(|c| c * factor).collect()
                    })
                }
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if nodes[*a].requires_grad {
                    let bt = transpose_raw(bv.data(), k, n);
                    send(*a, matmul_raw(g, &bt, m, n, k));
                }
                if nodes[*b].requires_grad {
                    let at = transpose_raw(av.data(), m, k);
                    send(*b, matmul_raw(&at, g, k, m, n));
                }
            }
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (nodes[*a].value.data(), nodes[*b].value.data());
                send(*a, g.iter().zip(bv).map(|(g, y)| g * y).collect());
                send(*b, g.iter().zip(av).map(|(g, x)| g * x).collect());
            }
            Op::Scale(a, s) => send(*a, g.iter().map(|v| v * s).collect()),
            Op::AppendOnes(a) => {
                let c = nodes[*a].value.cols();
                let mut out = Vec::with_capacity(nodes[*a].value.numel());
                for row in g.chunks(c + 1) {
                    out.extend_from_slice(&row[..c]);
                }
                send(*a, out);
            }
            Op::Concat { parts, axis } => {
                let out_c = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let pv = &nodes[p].value;
                    let (r, c) = (pv.rows(), pv.cols());
                    let piece = if *axis == 0 {
                        g[offset * out_c..(offset + r) * out_c].to_vec()
                    } else {
                        let mut piece = Vec::with_capacity(r * c);
                        for row in 0..r {
                            piece.extend_from_slice(&g[row * out_c + offset..row * out_c + offset + c]);
                        }
                        piece
                    };
                    offset += if *axis == 0 { r } else { c };
                    send(p, piece);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (node.value.rows(), node.value.cols());
                send(*a, transpose_raw(g, r, c));
            }
            Op::Relu(a) => {
                let x = nodes[*a].value.data();
                send(*a, g.iter().zip(x).map(|(g, x)| if *x > 0.0 { *g } else { 0.0 }).collect());
            }
            Op::MaskedSoftmax(a) => {
                let y = &node.value;
                let c = y.cols();
                let mut out = vec![0.0; y.numel()];
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = &g[r * c..(r + 1) * c];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        out[r * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                send(*a, out);
            }
            Op::Conv1d { x, kernel } => {
                let (dx, dk) = conv1d_backward(&nodes[*x].value, &nodes[*kernel].value, g);
                if nodes[*x].requires_grad {
                    send(*x, dx);
                }
                if nodes[*kernel].requires_grad {
                    send(*kernel, dk);
                }
            }
            Op::MaskRows { x, mask } => {
                let c = node.value.cols();
                let mut out = g.to_vec();
                for (r, &m) in mask.iter().enumerate() {
                    if !m {
                        out[r * c..(r + 1) * c].iter_mut().for_each(|v| *v = 0.0);
                    }
                }
                send(*x, out);
            }
            Op::SliceRows { x, start } => {
                let c = node.value.cols();
                let mut out = vec![0.0; nodes[*x].value.numel()];
                out[start * c..start * c + g.len()].copy_from_slice(g);
                send(*x, out);
            }
            Op::GatherRows { x, index } => {
                let c = node.value.cols();
                let mut out = vec![0.0; nodes[*x].value.numel()];
                for (k, &i) in index.iter().enumerate() {
                    for j in 0..c {
                        out[i * c + j] += g[k * c + j];
                    }
                }
                send(*x, out);
            }
            Op::MaskedMeanRows { x, mask, count } => {
                let c = node.value.cols();
                let mut out = vec![0.0; nodes[*x].value.numel()];
                for (r, &m) in mask.iter().enumerate() {
                    if m {
                        for j in 0..c {
                            out[r * c + j] = g[j] / *count as f64;
                        }
                    }
                }
                send(*x, out);
            }
            Op::Sum(a) => send(*a, vec![g[0]; nodes[*a].value.numel()]),
            Op::CrossEntropy { x, target, probs } => {
                let mut out: Vec<f64> = probs.iter().map(|p| p * g[0]).collect();
                out[*target] -= g[0];
                send(*x, out);
            }
            Op::RelPos { x, w } => {
                let (dx, dw) = relpos_backward(&nodes[*x].value, &nodes[*w].value, g);
                if nodes[*x].requires_grad {
                    send(*x, dx);
                }
                if nodes[*w].requires_grad {
                    send(*w, dw);
                }
            }
            Op::Custom { inputs, local, .. } => {
                for (&inp, l) in inputs.iter().zip(local) {
                    send(inp, l.iter().map(|v| v * g[0]).collect());
                }
            }
        }
    }
}

pub(crate) fn masked_softmax_rows(a: &Tensor, mask: Option<&[bool]>) -> Result<Tensor> {
    let (r, c) = (a.rows(), a.cols());
    let full = |i: usize, j: usize| -> bool {
        match mask {
            None => true,
            Some(m) if m.len() == c => m[j],
            Some(m) => m[i * c + j],
        }
    };
    if let Some(m) = mask {
        if m.len() != c && m.len() != r * c {
            return Err(Error::shape("masked_softmax", a.shape(), &[m.len()]));
        }
    }
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let row = a.row(i);
        let max = (0..c)
            .filter(|&j| full(i, j))
            .map(|j| row[j])
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(Error::DegenerateRow { row: i });
        }
        let mut z = 0.0;
        for j in 0..c {
            if full(i, j) {
                let e = (row[j] - max).exp();
                out[i * c + j] = e;
                z += e;
            }
        }
        for v in &mut out[i * c..(i + 1) * c] {
            *v /= z;
        }
    }
    Ok(Tensor::from_vec(a.shape(), out))
}

fn conv_dims(x: &Tensor, k: &Tensor) -> Result<(usize, usize, usize, usize)> {
    let ks = k.shape();
    if ks.len() != 3 {
        return Err(Error::shape("conv1d", x.shape(), ks));
    }
    let (kw, din, dout) = (ks[0], ks[1], ks[2]);
    if kw % 2 == 0 {
        return Err(Error::Config(format!("conv1d kernel width {kw} must be odd")));
    }
    if x.cols() != din {
        return Err(Error::shape("conv1d", x.shape(), ks));
    }
    Ok((x.rows(), kw, din, dout))
}

pub(crate) fn conv1d_forward(x: &Tensor, k: &Tensor) -> Result<Tensor> {
    let (t_len, kw, din, dout) = conv_dims(x, k)?;
    let pad = kw / 2;
    let (xd, kd) = (x.data(), k.data());
    let mut out = vec![0.0; t_len * dout];
    for t in 0..t_len {
        for u in 0..kw {
            let s = t + u;
            if s < pad || s - pad >= t_len {
                continue;
            }
            let src = &xd[(s - pad) * din..(s - pad + 1) * din];
            for (i, &xv) in src.iter().enumerate() {
                if xv == 0.0 {
                    continue;
                }
                let krow = &kd[(u * din + i) * dout..(u * din + i + 1) * dout];
                for (o, kv) in out[t * dout..(t + 1) * dout].iter_mut().zip(krow) {
                    *o += xv * kv;
                }
            }
        }
    }
    Ok(Tensor::from_vec(&[t_len, dout], out))
}

fn conv1d_backward(x: &Tensor, k: &Tensor, g: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (t_len, kw, din, dout) = conv_dims(x, k).expect("validated in forward");
    let pad = kw / 2;
    let (xd, kd) = (x.data(), k.data());
    let mut dx = vec![0.0; xd.len()];
    let mut dk = vec![0.0; kd.len()];
    for t in 0..t_len {
        let gt = &g[t * dout..(t + 1) * dout];
        for u in 0..kw {
            let s = t + u;
            if s < pad || s - pad >= t_len {
                continue;
            }
            let src = s - pad;
            for i in 0..din {
                let base = (u * din + i) * dout;
                let mut acc = 0.0;
                let xv = xd[src * din + i];
                for o in 0..dout {
                    acc += gt[o] * kd[base + o];
                    dk[base + o] += xv * gt[o];
                }
                dx[src * din + i] += acc;
            }
        }
    }
    (dx, dk)
}

fn relpos_dims(x: &Tensor, w: &Tensor) -> Result<(usize, usize)> {
    let (t_len, d) = (x.rows(), x.cols());
    if w.shape().len() != 2 || w.rows() != d {
        return Err(Error::shape("relative_position", x.shape(), w.shape()));
    }
    if t_len > w.cols() {
        return Err(Error::Capacity {
            len: t_len,
            capacity: w.cols(),
        });
    }
    Ok((t_len, d))
}

pub(crate) fn relpos_forward(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let (t_len, d) = relpos_dims(x, w)?;
    let wc = w.cols();
    let (xd, wd) = (x.data(), w.data());
    let mut out = vec![0.0; t_len * t_len];
    for i in 0..t_len {
        for j in 0..t_len {
            if i == j {
                continue;
            }
            let mut acc = 0.0;
            for k in 0..d {
                acc += (xd[j * d + k] - xd[i * d + k]) * wd[k * wc + j];
            }
            out[i * t_len + j] = acc;
        }
    }
    Ok(Tensor::from_vec(&[t_len, t_len], out))
}

fn relpos_backward(x: &Tensor, w: &Tensor, g: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (t_len, d) = relpos_dims(x, w).expect("validated in forward");
    let wc = w.cols();
    let (xd, wd) = (x.data(), w.data());
    let mut dx = vec![0.0; xd.len()];
    let mut dw = vec![0.0; wd.len()];
    for i in 0..t_len {
        for j in 0..t_len {
            let gij = g[i * t_len + j];
            if gij == 0.0 || i == j {
                continue;
            }
            for k in 0..d {
                let wkj = wd[k * wc + j];
                dx[j * d + k] += gij * wkj;
                dx[i * d + k] -= gij * wkj;
                dw[k * wc + j] += gij * (xd[j * d + k] - xd[i * d + k]);
            }
        }
    }
    (dx, dw)
}
