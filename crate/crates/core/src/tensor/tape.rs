use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use super::gemm::gemm;
use super::{Float, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Running statistics of one batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormStats {
    pub running_mean: Vec<Float>,
    pub running_var: Vec<Float>,
    pub momentum: Float,
    pub eps: Float,
}

impl BatchNormStats {
    pub fn new(channels: usize) -> Self {
        Self {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: 0.1,
            eps: 1e-5,
        }
    }
}

enum Op {
    Leaf,
    Conv1d {
        input: usize,
        weight: usize,
        bias: usize,
        stride: usize,
        padding: usize,
        // im2col buffer per batch item, [C_in*K, T_out]
        cols: Vec<Float>,
    },
    BatchNorm {
        input: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<Float>,
        inv_std: Vec<Float>,
        batch_stats: bool,
    },
    Relu(usize),
    Add(usize, usize),
    Linear {
        input: usize,
        weight: usize,
        bias: usize,
    },
    GlobalAvgPool(usize),
    Softmax(usize),
    SoftmaxCrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<Float>,
    },
    L2Distance {
        a: usize,
        b: usize,
        diff: Vec<Float>,
        norms: Vec<Float>,
    },
    Sum(usize),
    WeightedSum(Vec<(usize, Float)>),
}

struct Node {
    shape: Vec<usize>,
    value: Vec<Float>,
    requires_grad: bool,
    op: Op,
}

/// Per-forward-pass record of operations for reverse-mode differentiation.
///
/// A tape is built during one forward pass and consumed by exactly one call to
/// [`Tape::backward`]. Saved intermediates are released afterwards; values and
/// gradients stay readable.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<Float>>>,
    params: HashMap<u64, usize>,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
            params: HashMap::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn index(&self, v: Var) -> Result<usize> {
        if v.tape != self.id {
            return Err(Error::Backward(
                "variable belongs to a different (detached) tape".into(),
            ));
        }
        Ok(v.index)
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<Float>, requires_grad: bool, op: Op) -> Result<Var> {
        if self.consumed {
            return Err(Error::Backward(
                "tape was already consumed by backward; record a fresh forward pass".into(),
            ));
        }
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
        });
        Ok(Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        })
    }

    /// Records a tensor as an input. Tensors with `requires_grad` are
    /// deduplicated by id, so binding the same parameter twice yields the same
    /// variable and its gradient contributions add up.
    pub fn leaf(&mut self, t: &Tensor) -> Result<Var> {
        if t.requires_grad() {
            if let Some(&index) = self.params.get(&t.id()) {
                return Ok(Var { tape: self.id, index });
            }
        }
        let v = self.push(t.shape().to_vec(), t.data().to_vec(), t.requires_grad(), Op::Leaf)?;
        if t.requires_grad() {
            self.params.insert(t.id(), v.index);
        }
        Ok(v)
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<Float>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        self.push(t.shape().to_vec(), t.into_data(), false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &[Float] {
        &self.nodes[v.index].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.index].shape
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.index];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape values are shape-consistent")
    }

    pub fn scalar(&self, v: Var) -> Float {
        self.nodes[v.index].value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.index].requires_grad
    }

    /// Gradient of the loss with respect to `v`, available after backward.
    pub fn grad(&self, v: Var) -> Option<&[Float]> {
        self.grads.get(v.index).and_then(|g| g.as_deref())
    }

    /// Adds the gradient recorded for each parameter into its `grad` slot.
    /// Parameters that were never bound on this tape are left untouched.
    pub fn accumulate_param_grads<'a>(&self, params: impl IntoIterator<Item = &'a mut Tensor>) -> Result<()> {
        for p in params {
            if let Some(&index) = self.params.get(&p.id()) {
                if let Some(g) = self.grads.get(index).and_then(|g| g.as_deref()) {
                    p.accumulate_grad(g)?;
                }
            }
        }
        Ok(())
    }

    fn rg(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    /// Temporal convolution (cross-correlation) over `[B, C_in, T]`.
    pub fn conv1d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let (xi, wi, bi) = (self.index(input)?, self.index(weight)?, self.index(bias)?);
        let xs = self.nodes[xi].shape.clone();
        let ws = self.nodes[wi].shape.clone();
        let bs = self.nodes[bi].shape.clone();
        if xs.len() != 3 || ws.len() != 3 || bs.len() != 1 {
            return Err(Error::shape(
                "conv1d",
                format!("expected input [B,C,T], weight [O,C,K], bias [O]; got {xs:?}, {ws:?}, {bs:?}"),
            ));
        }
        let (batch, c_in, t_in) = (xs[0], xs[1], xs[2]);
        let (c_out, wc_in, k) = (ws[0], ws[1], ws[2]);
        if wc_in != c_in {
            return Err(Error::shape(
                "conv1d",
                format!("input has {c_in} channels but weight expects {wc_in}"),
            ));
        }
        if bs[0] != c_out {
            return Err(Error::shape(
                "conv1d",
                format!("bias length {} does not match {c_out} output channels", bs[0]),
            ));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv1d stride must be at least 1".into()));
        }
        if k == 0 || k > t_in + 2 * padding {
            return Err(Error::shape(
                "conv1d",
                format!("kernel {k} does not fit input length {t_in} with padding {padding}"),
            ));
        }
        let t_out = (t_in + 2 * padding - k) / stride + 1;
        let rows = c_in * k;
        let mut cols = vec![0.0; batch * rows * t_out];
        let x = &self.nodes[xi].value;
        for b in 0..batch {
            let col = &mut cols[b * rows * t_out..(b + 1) * rows * t_out];
            for ci in 0..c_in {
                let xrow = &x[(b * c_in + ci) * t_in..(b * c_in + ci + 1) * t_in];
                for kk in 0..k {
                    let dst = &mut col[(ci * k + kk) * t_out..(ci * k + kk + 1) * t_out];
                    for (t, d) in dst.iter_mut().enumerate() {
                        let pos = (t * stride + kk) as isize - padding as isize;
                        if pos >= 0 && (pos as usize) < t_in {
                            *d = xrow[pos as usize];
                        }
                    }
                }
            }
        }
        let w = &self.nodes[wi].value;
        let bias_v = &self.nodes[bi].value;
        let mut out = vec![0.0; batch * c_out * t_out];
        for b in 0..batch {
            let o = &mut out[b * c_out * t_out..(b + 1) * c_out * t_out];
            for (co, row) in o.chunks_mut(t_out).enumerate() {
                row.fill(bias_v[co]);
            }
            gemm(
                c_out,
                rows,
                t_out,
                1.0,
                w,
                (rows as isize, 1),
                &cols[b * rows * t_out..],
                (t_out as isize, 1),
                1.0,
                o,
                (t_out as isize, 1),
            );
        }
        let rg = self.rg(xi) || self.rg(wi) || self.rg(bi);
        self.push(
            vec![batch, c_out, t_out],
            out,
            rg,
            Op::Conv1d {
                input: xi,
                weight: wi,
                bias: bi,
                stride,
                padding,
                cols: if rg { cols } else { Vec::new() },
            },
        )
    }

    /// Per-channel normalisation over the batch and time axes of `[B, C, T]`.
    ///
    /// Train mode normalises with batch statistics and returns the running
    /// statistics updated by momentum; eval mode uses `stats` as they are and
    /// returns `None`.
    pub fn batch_norm1d(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: &BatchNormStats,
        mode: Mode,
    ) -> Result<(Var, Option<BatchNormStats>)> {
        let (xi, gi, bi) = (self.index(input)?, self.index(gamma)?, self.index(beta)?);
        let xs = self.nodes[xi].shape.clone();
        if xs.len() != 3 {
            return Err(Error::shape("batch_norm1d", format!("expected [B,C,T], got {xs:?}")));
        }
        let (batch, channels, t) = (xs[0], xs[1], xs[2]);
        for (name, idx) in [("gamma", gi), ("beta", bi)] {
            if self.nodes[idx].shape != [channels] {
                return Err(Error::shape(
                    "batch_norm1d",
                    format!("{name} has shape {:?}, expected [{channels}]", self.nodes[idx].shape),
                ));
            }
        }
        if stats.running_mean.len() != channels || stats.running_var.len() != channels {
            return Err(Error::shape(
                "batch_norm1d",
                format!("running statistics sized for {} channels, input has {channels}", stats.running_mean.len()),
            ));
        }
        let n = batch * t;
        if n == 0 {
            return Err(Error::shape("batch_norm1d", "empty batch"));
        }
        let x = &self.nodes[xi].value;
        let g = &self.nodes[gi].value;
        let be = &self.nodes[bi].value;
        let mut mean = vec![0.0; channels];
        let mut inv_std = vec![0.0; channels];
        let mut updated = None;
        match mode {
            Mode::Train => {
                let mut next = stats.clone();
                for c in 0..channels {
                    let mut s = 0.0;
                    for b in 0..batch {
                        s += x[(b * channels + c) * t..(b * channels + c + 1) * t].iter().sum::<Float>();
                    }
                    let m = s / n as Float;
                    let mut v = 0.0;
                    for b in 0..batch {
                        v += x[(b * channels + c) * t..(b * channels + c + 1) * t]
                            .iter()
                            .map(|&xv| (xv - m) * (xv - m))
                            .sum::<Float>();
                    }
                    let var = v / n as Float;
                    mean[c] = m;
                    inv_std[c] = 1.0 / (var + stats.eps).sqrt();
                    let unbiased = if n > 1 { v / (n - 1) as Float } else { var };
                    next.running_mean[c] = (1.0 - stats.momentum) * stats.running_mean[c] + stats.momentum * m;
                    next.running_var[c] = (1.0 - stats.momentum) * stats.running_var[c] + stats.momentum * unbiased;
                }
                updated = Some(next);
            }
            Mode::Eval => {
                for c in 0..channels {
                    mean[c] = stats.running_mean[c];
                    inv_std[c] = 1.0 / (stats.running_var[c] + stats.eps).sqrt();
                }
            }
        }
        let mut xhat = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        for b in 0..batch {
            for c in 0..channels {
                let base = (b * channels + c) * t;
                for i in base..base + t {
                    xhat[i] = (x[i] - mean[c]) * inv_std[c];
                    out[i] = g[c] * xhat[i] + be[c];
                }
            }
        }
        let rg = self.rg(xi) || self.rg(gi) || self.rg(bi);
        let v = self.push(
            xs,
            out,
            rg,
            Op::BatchNorm {
                input: xi,
                gamma: gi,
                beta: bi,
                xhat: if rg { xhat } else { Vec::new() },
                inv_std,
                batch_stats: mode == Mode::Train,
            },
        )?;
        Ok((v, updated))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let xi = self.index(x)?;
        let out = self.nodes[xi].value.iter().map(|&v| v.max(0.0)).collect();
        let shape = self.nodes[xi].shape.clone();
        let rg = self.rg(xi);
        self.push(shape, out, rg, Op::Relu(xi))
    }

    /// Elementwise sum of two equally shaped values.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.index(a)?, self.index(b)?);
        if self.nodes[ai].shape != self.nodes[bi].shape {
            return Err(Error::shape(
                "add",
                format!("{:?} vs {:?}", self.nodes[ai].shape, self.nodes[bi].shape),
            ));
        }
        let out = self.nodes[ai]
            .value
            .iter()
            .zip(&self.nodes[bi].value)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.nodes[ai].shape.clone();
        let rg = self.rg(ai) || self.rg(bi);
        self.push(shape, out, rg, Op::Add(ai, bi))
    }

    /// Affine map `x · Wᵀ + b` with `x: [B, D]`, `W: [O, D]`, `b: [O]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (xi, wi, bi) = (self.index(input)?, self.index(weight)?, self.index(bias)?);
        let xs = &self.nodes[xi].shape;
        let ws = &self.nodes[wi].shape;
        let bs = &self.nodes[bi].shape;
        if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 || xs[1] != ws[1] || bs[0] != ws[0] {
            return Err(Error::shape(
                "linear",
                format!("input {xs:?}, weight {ws:?}, bias {bs:?} are incompatible"),
            ));
        }
        let (batch, d, o) = (xs[0], xs[1], ws[0]);
        let mut out = vec![0.0; batch * o];
        let bias_v = &self.nodes[bi].value;
        for row in out.chunks_mut(o) {
            row.copy_from_slice(bias_v);
        }
        gemm(
            batch,
            d,
            o,
            1.0,
            &self.nodes[xi].value,
            (d as isize, 1),
            &self.nodes[wi].value,
            (1, d as isize),
            1.0,
            &mut out,
            (o as isize, 1),
        );
        let rg = self.rg(xi) || self.rg(wi) || self.rg(bi);
        self.push(
            vec![batch, o],
            out,
            rg,
            Op::Linear {
                input: xi,
                weight: wi,
                bias: bi,
            },
        )
    }

    /// Mean over the time axis: `[B, C, T] -> [B, C]`.
    pub fn global_avg_pool_time(&mut self, x: Var) -> Result<Var> {
        let xi = self.index(x)?;
        let xs = self.nodes[xi].shape.clone();
        if xs.len() != 3 || xs[2] == 0 {
            return Err(Error::shape("global_avg_pool_time", format!("expected [B,C,T>0], got {xs:?}")));
        }
        let t = xs[2];
        let out = self.nodes[xi]
            .value
            .chunks(t)
            .map(|row| row.iter().sum::<Float>() / t as Float)
            .collect();
        let rg = self.rg(xi);
        self.push(vec![xs[0], xs[1]], out, rg, Op::GlobalAvgPool(xi))
    }

    /// Row-wise softmax of a `[B, C]` value.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xi = self.index(x)?;
        let xs = self.nodes[xi].shape.clone();
        if xs.len() != 2 || xs[1] == 0 {
            return Err(Error::shape("softmax", format!("expected [B,C>0], got {xs:?}")));
        }
        let mut out = self.nodes[xi].value.clone();
        for row in out.chunks_mut(xs[1]) {
            softmax_in_place(row);
        }
        let rg = self.rg(xi);
        self.push(xs, out, rg, Op::Softmax(xi))
    }

    /// Batch mean of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let li = self.index(logits)?;
        let ls = self.nodes[li].shape.clone();
        if ls.len() != 2 || ls[1] == 0 {
            return Err(Error::shape("softmax_cross_entropy", format!("expected [B,C>0], got {ls:?}")));
        }
        let (batch, classes) = (ls[0], ls[1]);
        if labels.len() != batch {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("{} labels for a batch of {batch}", labels.len()),
            ));
        }
        if batch == 0 {
            return Err(Error::shape("softmax_cross_entropy", "empty batch"));
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
            return Err(Error::LabelOutOfRange { index, label, classes });
        }
        let z = &self.nodes[li].value;
        let mut probs = z.clone();
        let mut total = 0.0;
        for (i, row) in z.chunks(classes).enumerate() {
            // log-sum-exp as max + ln(1 + Σ_{j≠argmax} e^{z_j - max}) keeps
            // precision when the margin is large
            let (arg, max) = row
                .iter()
                .cloned()
                .enumerate()
                .fold((0, Float::NEG_INFINITY), |acc, (j, v)| if v > acc.1 { (j, v) } else { acc });
            let rest: Float = row
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != arg)
                .map(|(_, &v)| (v - max).exp())
                .sum();
            total += (max - row[labels[i]]) + rest.ln_1p();
            softmax_in_place(&mut probs[i * classes..(i + 1) * classes]);
        }
        let rg = self.rg(li);
        self.push(
            Vec::new(),
            vec![total / batch as Float],
            rg,
            Op::SoftmaxCrossEntropy {
                logits: li,
                labels: labels.to_vec(),
                probs,
            },
        )
    }

    /// Batch mean of the per-row Euclidean distance between `[B, D]` values.
    pub fn l2_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.index(a)?, self.index(b)?);
        let s = self.nodes[ai].shape.clone();
        if s.len() != 2 || s != self.nodes[bi].shape {
            return Err(Error::shape(
                "l2_distance",
                format!("{s:?} vs {:?}, expected matching [B, D]", self.nodes[bi].shape),
            ));
        }
        let (batch, d) = (s[0], s[1]);
        if batch == 0 {
            return Err(Error::shape("l2_distance", "empty batch"));
        }
        let diff: Vec<Float> = self.nodes[ai]
            .value
            .iter()
            .zip(&self.nodes[bi].value)
            .map(|(x, y)| x - y)
            .collect();
        let norms: Vec<Float> = if d == 0 {
            vec![0.0; batch]
        } else {
            diff.chunks(d).map(|r| r.iter().map(|v| v * v).sum::<Float>().sqrt()).collect()
        };
        let mean = norms.iter().sum::<Float>() / batch as Float;
        let rg = self.rg(ai) || self.rg(bi);
        self.push(
            Vec::new(),
            vec![mean],
            rg,
            Op::L2Distance { a: ai, b: bi, diff, norms },
        )
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let xi = self.index(x)?;
        let s = self.nodes[xi].value.iter().sum();
        let rg = self.rg(xi);
        self.push(Vec::new(), vec![s], rg, Op::Sum(xi))
    }

    /// `Σ wᵢ·xᵢ` over scalar terms.
    pub fn weighted_sum(&mut self, terms: &[(Var, Float)]) -> Result<Var> {
        let mut idx = Vec::with_capacity(terms.len());
        let mut total = 0.0;
        for &(v, w) in terms {
            let i = self.index(v)?;
            if self.nodes[i].value.len() != 1 {
                return Err(Error::shape(
                    "weighted_sum",
                    format!("term of shape {:?} is not a scalar", self.nodes[i].shape),
                ));
            }
            total += w * self.nodes[i].value[0];
            idx.push((i, w));
        }
        let rg = idx.iter().any(|&(i, _)| self.rg(i));
        self.push(Vec::new(), vec![total], rg, Op::WeightedSum(idx))
    }

    /// Reverse sweep from a scalar loss. May be called once per tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let li = self.index(loss)?;
        if self.consumed {
            return Err(Error::Backward(
                "backward already ran on this tape; re-run the forward pass".into(),
            ));
        }
        if self.nodes[li].value.len() != 1 {
            return Err(Error::Backward(format!(
                "loss must be a scalar, got shape {:?}",
                self.nodes[li].shape
            )));
        }
        if !self.nodes[li].requires_grad {
            return Err(Error::Backward(
                "loss does not depend on any tensor that requires a gradient".into(),
            ));
        }
        self.grads = self
            .nodes
            .iter()
            .map(|n| n.requires_grad.then(|| vec![0.0; n.value.len()]))
            .collect();
        self.grads[li] = Some(vec![1.0]);

        for i in (0..=li).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let (before, rest) = self.grads.split_at_mut(i);
            let g = rest[0].as_deref().expect("allocated for requires_grad nodes");
            backprop_node(&self.nodes, i, g, before);
        }
        self.consumed = true;
        for n in &mut self.nodes {
            n.op = Op::Leaf;
        }
        Ok(())
    }
}

fn softmax_in_place(row: &mut [Float]) {
    let max = row.iter().cloned().fold(Float::NEG_INFINITY, Float::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

fn acc(grads: &mut [Option<Vec<Float>>], i: usize) -> Option<&mut Vec<Float>> {
    grads[i].as_mut()
}

fn backprop_node(nodes: &[Node], i: usize, g: &[Float], grads: &mut [Option<Vec<Float>>]) {
    let node = &nodes[i];
    match &node.op {
        Op::Leaf => {}
        Op::Conv1d {
            input,
            weight,
            bias,
            stride,
            padding,
            cols,
        } => {
            let (batch, c_in, t_in) = {
                let s = &nodes[*input].shape;
                (s[0], s[1], s[2])
            };
            let (c_out, k) = (nodes[*weight].shape[0], nodes[*weight].shape[2]);
            let t_out = node.shape[2];
            let rows = c_in * k;
            if let Some(db) = acc(grads, *bias) {
                for b in 0..batch {
                    for co in 0..c_out {
                        let base = (b * c_out + co) * t_out;
                        db[co] += g[base..base + t_out].iter().sum::<Float>();
                    }
                }
            }
            if let Some(dw) = acc(grads, *weight) {
                for b in 0..batch {
                    gemm(
                        c_out,
                        t_out,
                        rows,
                        1.0,
                        &g[b * c_out * t_out..],
                        (t_out as isize, 1),
                        &cols[b * rows * t_out..],
                        (1, t_out as isize),
                        1.0,
                        dw,
                        (rows as isize, 1),
                    );
                }
            }
            if nodes[*input].requires_grad {
                let w = &nodes[*weight].value;
                let mut dcol = vec![0.0; rows * t_out];
                let dx = grads[*input].as_mut().expect("requires_grad");
                for b in 0..batch {
                    gemm(
                        rows,
                        c_out,
                        t_out,
                        1.0,
                        w,
                        (1, rows as isize),
                        &g[b * c_out * t_out..],
                        (t_out as isize, 1),
                        0.0,
                        &mut dcol,
                        (t_out as isize, 1),
                    );
                    for ci in 0..c_in {
                        let dxrow = &mut dx[(b * c_in + ci) * t_in..(b * c_in + ci + 1) * t_in];
                        for kk in 0..k {
                            let src = &dcol[(ci * k + kk) * t_out..(ci * k + kk + 1) * t_out];
                            for (t, &s) in src.iter().enumerate() {
                                let pos = (t * stride + kk) as isize - *padding as isize;
                                if pos >= 0 && (pos as usize) < t_in {
                                    dxrow[pos as usize] += s;
                                }
                            }
                        }
                    }
                }
            }
        }
        Op::BatchNorm {
            input,
            gamma,
            beta,
            xhat,
            inv_std,
            batch_stats,
        } => {
            let (batch, channels, t) = (node.shape[0], node.shape[1], node.shape[2]);
            let n = (batch * t) as Float;
            let mut sum_dy = vec![0.0; channels];
            let mut sum_dy_xhat = vec![0.0; channels];
            for b in 0..batch {
                for c in 0..channels {
                    let base = (b * channels + c) * t;
                    for j in base..base + t {
                        sum_dy[c] += g[j];
                        sum_dy_xhat[c] += g[j] * xhat[j];
                    }
                }
            }
            if let Some(dg) = acc(grads, *gamma) {
                dg.iter_mut().zip(&sum_dy_xhat).for_each(|(a, b)| *a += b);
            }
            if let Some(dbeta) = acc(grads, *beta) {
                dbeta.iter_mut().zip(&sum_dy).for_each(|(a, b)| *a += b);
            }
            if nodes[*input].requires_grad {
                let gam = &nodes[*gamma].value;
                let dx = grads[*input].as_mut().expect("requires_grad");
                for b in 0..batch {
                    for c in 0..channels {
                        let base = (b * channels + c) * t;
                        let scale = gam[c] * inv_std[c];
                        for j in base..base + t {
                            dx[j] += if *batch_stats {
                                scale / n * (n * g[j] - sum_dy[c] - xhat[j] * sum_dy_xhat[c])
                            } else {
                                scale * g[j]
                            };
                        }
                    }
                }
            }
        }
        Op::Relu(x) => {
            if let Some(dx) = acc(grads, *x) {
                for ((d, &gv), &xv) in dx.iter_mut().zip(g).zip(&nodes[*x].value) {
                    if xv > 0.0 {
                        *d += gv;
                    }
                }
            }
        }
        Op::Add(a, b) => {
            for p in [*a, *b] {
                if let Some(d) = acc(grads, p) {
                    d.iter_mut().zip(g).for_each(|(d, gv)| *d += gv);
                }
            }
        }
        Op::Linear { input, weight, bias } => {
            let (batch, d) = (nodes[*input].shape[0], nodes[*input].shape[1]);
            let o = nodes[*weight].shape[0];
            if let Some(db) = acc(grads, *bias) {
                for row in g.chunks(o) {
                    db.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
            }
            if let Some(dw) = acc(grads, *weight) {
                gemm(
                    o,
                    batch,
                    d,
                    1.0,
                    g,
                    (1, o as isize),
                    &nodes[*input].value,
                    (d as isize, 1),
                    1.0,
                    dw,
                    (d as isize, 1),
                );
            }
            if let Some(dx) = acc(grads, *input) {
                gemm(
                    batch,
                    o,
                    d,
                    1.0,
                    g,
                    (o as isize, 1),
                    &nodes[*weight].value,
                    (d as isize, 1),
                    1.0,
                    dx,
                    (d as isize, 1),
                );
            }
        }
        Op::GlobalAvgPool(x) => {
            let t = nodes[*x].shape[2];
            if let Some(dx) = acc(grads, *x) {
                for (row, &gv) in dx.chunks_mut(t).zip(g) {
                    row.iter_mut().for_each(|d| *d += gv / t as Float);
                }
            }
        }
        Op::Softmax(x) => {
            let c = node.shape[1];
            if let Some(dx) = acc(grads, *x) {
                for ((drow, yrow), grow) in dx.chunks_mut(c).zip(node.value.chunks(c)).zip(g.chunks(c)) {
                    let dot: Float = yrow.iter().zip(grow).map(|(y, g)| y * g).sum();
                    for ((d, &y), &gv) in drow.iter_mut().zip(yrow).zip(grow) {
                        *d += y * (gv - dot);
                    }
                }
            }
        }
        Op::SoftmaxCrossEntropy { logits, labels, probs } => {
            let (batch, c) = (nodes[*logits].shape[0], nodes[*logits].shape[1]);
            let scale = g[0] / batch as Float;
            if let Some(dz) = acc(grads, *logits) {
                for (i, (drow, prow)) in dz.chunks_mut(c).zip(probs.chunks(c)).enumerate() {
                    for (j, (d, &p)) in drow.iter_mut().zip(prow).enumerate() {
                        let target = if j == labels[i] { 1.0 } else { 0.0 };
                        *d += scale * (p - target);
                    }
                }
            }
        }
        Op::L2Distance { a, b, diff, norms } => {
            let (batch, d) = (nodes[*a].shape[0], nodes[*a].shape[1]);
            let scale = g[0] / batch as Float;
            for (p, sign) in [(*a, 1.0), (*b, -1.0)] {
                if let Some(dp) = acc(grads, p) {
                    for r in 0..batch {
                        // subgradient 0 at coincident rows
                        if norms[r] == 0.0 {
                            continue;
                        }
                        let k = sign * scale / norms[r];
                        for j in r * d..(r + 1) * d {
                            dp[j] += k * diff[j];
                        }
                    }
                }
            }
        }
        Op::Sum(x) => {
            if let Some(dx) = acc(grads, *x) {
                dx.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        Op::WeightedSum(terms) => {
            for &(p, w) in terms {
                if let Some(d) = acc(grads, p) {
                    d[0] += w * g[0];
                }
            }
        }
    }
}
