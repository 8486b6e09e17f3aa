use std::collections::BTreeMap;

use crate::scalar::Scalar;

use super::{BackwardMode, GradError, Tensor};

/// Index of a node on a [`Tape`]. Only valid for the tape that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Map from leaf node id to its gradient (or relevance) tensor.
pub type GradMap<S> = BTreeMap<NodeId, Tensor<S>>;

/// Recorded operation, together with whatever the backward passes need.
#[derive(Debug, Clone)]
enum Op<S> {
    Leaf,
    /// Parent: table `[V, k]`. Output `[len(ids), k]`.
    EmbeddingLookup { ids: Vec<usize> },
    /// Parents: weight `[m, n]`, bias `[m]`, input `[n]`. Output `[m]`.
    Affine,
    /// Parents: filters `[f, width * k]`, bias `[f]`, input `[L, k]`.
    /// Output `[L - width + 1, f]`.
    Conv1d { width: usize },
    /// Parent: `[T, C]`. Output `[C]`; `argmax[c]` is the winning time step,
    /// first maximum on ties.
    MaxPoolTime { argmax: Vec<usize> },
    Relu,
    Sigmoid,
    Tanh,
    Add,
    Mul,
    /// Parents: any number of vectors, concatenated in order.
    Concat,
    Softmax,
    /// Parent: logits `[C]`. Output: scalar loss; `probs` saved for backward.
    CrossEntropy { target: usize, probs: Vec<S> },
    /// Parent: vector. Output: scalar, component `index`.
    Select { index: usize },
    /// Pass-through reinterpretation of the value buffer.
    Reshape,
}

impl<S> Op<S> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::EmbeddingLookup { .. } => "embedding-lookup",
            Op::Affine => "affine",
            Op::Conv1d { .. } => "conv1d",
            Op::MaxPoolTime { .. } => "max-pool-time",
            Op::Relu => "rectifier",
            Op::Sigmoid => "sigmoid",
            Op::Tanh => "tanh",
            Op::Add => "add",
            Op::Mul => "multiply",
            Op::Concat => "concat",
            Op::Softmax => "softmax",
            Op::CrossEntropy { .. } => "cross-entropy",
            Op::Select { .. } => "select",
            Op::Reshape => "reshape",
        }
    }
}

#[derive(Debug, Clone)]
struct Node<S> {
    op: Op<S>,
    parents: Vec<usize>,
    value: Tensor<S>,
}

/// Append-only record of a forward computation.
///
/// Node order is the topological order: every parent index precedes its
/// child. A finished tape is immutable and can be read from any thread.
#[derive(Debug, Clone, Default)]
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record an input tensor. Leaves are the only nodes gradients and
    /// relevances are reported for.
    pub fn leaf(&mut self, value: Tensor<S>) -> NodeId {
        self.push(Op::Leaf, vec![], value)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op<S>, parents: Vec<usize>, value: Tensor<S>) -> NodeId {
        self.nodes.push(Node { op, parents, value });
        NodeId(self.nodes.len() - 1)
    }

    fn get(&self, id: NodeId) -> Result<&Node<S>, GradError> {
        self.nodes.get(id.0).ok_or(GradError::BadNode(id.0))
    }

    fn mismatch(op: &'static str, detail: String) -> GradError {
        GradError::ShapeMismatch { op, detail }
    }

    pub fn embedding_lookup(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId, GradError> {
        let t = self.get(table)?.value.clone();
        if t.shape.len() != 2 {
            return Err(Self::mismatch("embedding-lookup", format!("table must be 2-D, got {:?}", t.shape)));
        }
        if let Some(bad) = ids.iter().find(|&&i| i >= t.rows()) {
            return Err(Self::mismatch("embedding-lookup", format!("id {bad} out of range for {} rows", t.rows())));
        }
        let values = embedding_forward(&t, ids);
        let out = Tensor { shape: vec![ids.len(), t.cols()], values, grad: None };
        Ok(self.push(Op::EmbeddingLookup { ids: ids.to_vec() }, vec![table.0], out))
    }

    pub fn affine(&mut self, weight: NodeId, bias: NodeId, input: NodeId) -> Result<NodeId, GradError> {
        let (w, b, x) = (&self.get(weight)?.value, &self.get(bias)?.value, &self.get(input)?.value);
        if w.shape.len() != 2 || b.shape.len() != 1 || x.shape.len() != 1 {
            return Err(Self::mismatch("affine", format!("want w [m,n], b [m], x [n]; got {:?}, {:?}, {:?}", w.shape, b.shape, x.shape)));
        }
        if w.cols() != x.len() || w.rows() != b.len() {
            return Err(Self::mismatch("affine", format!("w {:?} incompatible with b {:?}, x {:?}", w.shape, b.shape, x.shape)));
        }
        let values = affine_forward(w, b, x);
        let out = Tensor { shape: vec![w.rows()], values, grad: None };
        Ok(self.push(Op::Affine, vec![weight.0, bias.0, input.0], out))
    }

    pub fn conv1d(&mut self, filters: NodeId, bias: NodeId, input: NodeId, width: usize) -> Result<NodeId, GradError> {
        let (w, b, x) = (&self.get(filters)?.value, &self.get(bias)?.value, &self.get(input)?.value);
        if w.shape.len() != 2 || x.shape.len() != 2 || b.shape.len() != 1 {
            return Err(Self::mismatch("conv1d", format!("want filters [f,width*k], bias [f], input [L,k]; got {:?}, {:?}, {:?}", w.shape, b.shape, x.shape)));
        }
        let k = x.cols();
        if width == 0 || x.rows() < width {
            return Err(Self::mismatch("conv1d", format!("width {width} too large for input of {} rows", x.rows())));
        }
        if w.cols() != width * k || w.rows() != b.len() {
            return Err(Self::mismatch("conv1d", format!("filters {:?} incompatible with width {width}, k {k}, bias {:?}", w.shape, b.shape)));
        }
        let values = conv1d_forward(w, b, x, width);
        let out = Tensor { shape: vec![x.rows() - width + 1, w.rows()], values, grad: None };
        Ok(self.push(Op::Conv1d { width }, vec![filters.0, bias.0, input.0], out))
    }

    pub fn max_pool_time(&mut self, input: NodeId) -> Result<NodeId, GradError> {
        let x = &self.get(input)?.value;
        if x.shape.len() != 2 || x.rows() == 0 {
            return Err(Self::mismatch("max-pool-time", format!("want nonempty [T,C], got {:?}", x.shape)));
        }
        let (values, argmax) = max_pool_forward(x);
        let out = Tensor { shape: vec![x.cols()], values, grad: None };
        Ok(self.push(Op::MaxPoolTime { argmax }, vec![input.0], out))
    }

    pub fn relu(&mut self, input: NodeId) -> Result<NodeId, GradError> {
        self.elementwise(input, Op::Relu)
    }

    pub fn sigmoid(&mut self, input: NodeId) -> Result<NodeId, GradError> {
        self.elementwise(input, Op::Sigmoid)
    }

    pub fn tanh(&mut self, input: NodeId) -> Result<NodeId, GradError> {
        self.elementwise(input, Op::Tanh)
    }

    fn elementwise(&mut self, input: NodeId, op: Op<S>) -> Result<NodeId, GradError> {
        let x = &self.get(input)?.value;
        let values = match op {
            Op::Relu => x.values.iter().map(|&v| relu_one(v)).collect(),
            Op::Sigmoid => x.values.iter().map(|&v| sigmoid_one(v)).collect(),
            Op::Tanh => x.values.iter().map(|&v| v.tanh()).collect(),
            _ => unreachable!(),
        };
        let out = Tensor { shape: x.shape.clone(), values, grad: None };
        Ok(self.push(op, vec![input.0], out))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GradError> {
        self.binary(a, b, Op::Add)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GradError> {
        self.binary(a, b, Op::Mul)
    }

    fn binary(&mut self, a: NodeId, b: NodeId, op: Op<S>) -> Result<NodeId, GradError> {
        let (ta, tb) = (&self.get(a)?.value, &self.get(b)?.value);
        if ta.shape != tb.shape {
            return Err(Self::mismatch(
                if matches!(op, Op::Add) { "add" } else { "multiply" },
                format!("operand shapes differ: {:?} vs {:?}", ta.shape, tb.shape),
            ));
        }
        let values = match op {
            Op::Add => ta.values.iter().zip(&tb.values).map(|(&u, &v)| u + v).collect(),
            Op::Mul => ta.values.iter().zip(&tb.values).map(|(&u, &v)| u * v).collect(),
            _ => unreachable!(),
        };
        let out = Tensor { shape: ta.shape.clone(), values, grad: None };
        Ok(self.push(op, vec![a.0, b.0], out))
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId, GradError> {
        if parts.is_empty() {
            return Err(Self::mismatch("concat", "no parts".into()));
        }
        let mut values = Vec::new();
        for &p in parts {
            let t = &self.get(p)?.value;
            if t.shape.len() != 1 {
                return Err(Self::mismatch("concat", format!("parts must be vectors, got {:?}", t.shape)));
            }
            values.extend_from_slice(&t.values);
        }
        let out = Tensor { shape: vec![values.len()], values, grad: None };
        Ok(self.push(Op::Concat, parts.iter().map(|p| p.0).collect(), out))
    }

    pub fn softmax(&mut self, input: NodeId) -> Result<NodeId, GradError> {
        let x = &self.get(input)?.value;
        if x.shape.len() != 1 || x.is_empty() {
            return Err(Self::mismatch("softmax", format!("want nonempty vector, got {:?}", x.shape)));
        }
        let values = softmax_forward(&x.values);
        let out = Tensor { shape: x.shape.clone(), values, grad: None };
        Ok(self.push(Op::Softmax, vec![input.0], out))
    }

    pub fn cross_entropy(&mut self, logits: NodeId, target: usize) -> Result<NodeId, GradError> {
        let x = &self.get(logits)?.value;
        if x.shape.len() != 1 || target >= x.len() {
            return Err(Self::mismatch("cross-entropy", format!("target {target} invalid for logits {:?}", x.shape)));
        }
        let probs = softmax_forward(&x.values);
        let loss = -probs[target].max(S::from_f64(1e-300)).ln();
        let out = Tensor { shape: vec![1], values: vec![loss], grad: None };
        Ok(self.push(Op::CrossEntropy { target, probs }, vec![logits.0], out))
    }

    pub fn select(&mut self, input: NodeId, index: usize) -> Result<NodeId, GradError> {
        let x = &self.get(input)?.value;
        if index >= x.len() {
            return Err(Self::mismatch("select", format!("index {index} out of range for {:?}", x.shape)));
        }
        let out = Tensor { shape: vec![1], values: vec![x.values[index]], grad: None };
        Ok(self.push(Op::Select { index }, vec![input.0], out))
    }

    pub fn reshape(&mut self, input: NodeId, shape: Vec<usize>) -> Result<NodeId, GradError> {
        let x = &self.get(input)?.value;
        let expect: usize = shape.iter().product();
        if expect != x.len() {
            return Err(Self::mismatch("reshape", format!("cannot view {:?} as {:?}", x.shape, shape)));
        }
        let out = Tensor { shape, values: x.values.clone(), grad: None };
        Ok(self.push(Op::Reshape, vec![input.0], out))
    }

    /// Recompute every node from the leaves and check the recorded outputs
    /// are reproduced bit-exactly.
    pub fn replay_matches(&self) -> bool {
        let mut recomputed: Vec<Vec<S>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let parent = |i: usize| -> &Vec<S> {
                let p = node.parents[i];
                if p < recomputed.len() { &recomputed[p] } else { unreachable!() }
            };
            let values: Vec<S> = match &node.op {
                Op::Leaf => node.value.values.clone(),
                Op::EmbeddingLookup { ids } => {
                    let p = &self.nodes[node.parents[0]];
                    let table = Tensor { shape: p.value.shape.clone(), values: parent(0).clone(), grad: None };
                    embedding_forward(&table, ids)
                }
                Op::Affine => {
                    let shapes: Vec<_> = node.parents.iter().map(|&p| self.nodes[p].value.shape.clone()).collect();
                    let w = Tensor { shape: shapes[0].clone(), values: parent(0).clone(), grad: None };
                    let b = Tensor { shape: shapes[1].clone(), values: parent(1).clone(), grad: None };
                    let x = Tensor { shape: shapes[2].clone(), values: parent(2).clone(), grad: None };
                    affine_forward(&w, &b, &x)
                }
                Op::Conv1d { width } => {
                    let shapes: Vec<_> = node.parents.iter().map(|&p| self.nodes[p].value.shape.clone()).collect();
                    let w = Tensor { shape: shapes[0].clone(), values: parent(0).clone(), grad: None };
                    let b = Tensor { shape: shapes[1].clone(), values: parent(1).clone(), grad: None };
                    let x = Tensor { shape: shapes[2].clone(), values: parent(2).clone(), grad: None };
                    conv1d_forward(&w, &b, &x, *width)
                }
                Op::MaxPoolTime { .. } => {
                    let p = &self.nodes[node.parents[0]];
                    let x = Tensor { shape: p.value.shape.clone(), values: parent(0).clone(), grad: None };
                    max_pool_forward(&x).0
                }
                Op::Relu => parent(0).iter().map(|&v| relu_one(v)).collect(),
                Op::Sigmoid => parent(0).iter().map(|&v| sigmoid_one(v)).collect(),
                Op::Tanh => parent(0).iter().map(|&v| v.tanh()).collect(),
                Op::Add => parent(0).iter().zip(parent(1)).map(|(&u, &v)| u + v).collect(),
                Op::Mul => parent(0).iter().zip(parent(1)).map(|(&u, &v)| u * v).collect(),
                Op::Concat => node.parents.iter().flat_map(|&p| recomputed[p].clone()).collect(),
                Op::Softmax => softmax_forward(parent(0)),
                Op::CrossEntropy { target, .. } => {
                    let probs = softmax_forward(parent(0));
                    vec![-probs[*target].max(S::from_f64(1e-300)).ln()]
                }
                Op::Select { index } => vec![parent(0)[*index]],
                Op::Reshape => parent(0).clone(),
            };
            if values != node.value.values {
                return false;
            }
            recomputed.push(values);
        }
        true
    }

    /// Reverse-mode gradients of scalar node `output` with respect to every
    /// leaf it depends on.
    pub fn backward(&self, output: NodeId, mode: BackwardMode) -> Result<GradMap<S>, GradError> {
        if self.nodes.is_empty() {
            return Err(GradError::EmptyTape);
        }
        let out = self.get(output)?;
        if !out.value.is_scalar() {
            return Err(GradError::NotScalar(output.0));
        }

        let mut adjoint: Vec<Option<Vec<S>>> = vec![None; self.nodes.len()];
        adjoint[output.0] = Some(vec![S::one()]);

        for idx in (0..=output.0).rev() {
            let g = match adjoint[idx].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    // Re-park the seed so it can be collected below.
                    adjoint[idx] = Some(g);
                }
                Op::EmbeddingLookup { ids } => {
                    let table = &self.nodes[node.parents[0]].value;
                    let k = table.cols();
                    let gt = acc_buffer(&mut adjoint, node.parents[0], table.len());
                    for (row, &id) in ids.iter().enumerate() {
                        for c in 0..k {
                            gt[id * k + c] = gt[id * k + c] + g[row * k + c];
                        }
                    }
                }
                Op::Affine => {
                    let (wi, bi, xi) = (node.parents[0], node.parents[1], node.parents[2]);
                    let w = &self.nodes[wi].value;
                    let x = &self.nodes[xi].value;
                    let (m, n) = (w.rows(), w.cols());
                    {
                        let gw = acc_buffer(&mut adjoint, wi, w.len());
                        for j in 0..m {
                            for i in 0..n {
                                gw[j * n + i] = gw[j * n + i] + g[j] * x.values[i];
                            }
                        }
                    }
                    {
                        let gb = acc_buffer(&mut adjoint, bi, m);
                        for j in 0..m {
                            gb[j] = gb[j] + g[j];
                        }
                    }
                    {
                        let gx = acc_buffer(&mut adjoint, xi, n);
                        for j in 0..m {
                            for i in 0..n {
                                gx[i] = gx[i] + g[j] * w.values[j * n + i];
                            }
                        }
                    }
                }
                Op::Conv1d { width } => {
                    let (wi, bi, xi) = (node.parents[0], node.parents[1], node.parents[2]);
                    let w = &self.nodes[wi].value;
                    let x = &self.nodes[xi].value;
                    let (f, k) = (w.rows(), x.cols());
                    let t_out = x.rows() - width + 1;
                    {
                        let gw = acc_buffer(&mut adjoint, wi, w.len());
                        for t in 0..t_out {
                            for fi in 0..f {
                                let go = g[t * f + fi];
                                for d in 0..*width {
                                    for c in 0..k {
                                        let wj = d * k + c;
                                        gw[fi * (width * k) + wj] =
                                            gw[fi * (width * k) + wj] + go * x.values[(t + d) * k + c];
                                    }
                                }
                            }
                        }
                    }
                    {
                        let gb = acc_buffer(&mut adjoint, bi, f);
                        for t in 0..t_out {
                            for fi in 0..f {
                                gb[fi] = gb[fi] + g[t * f + fi];
                            }
                        }
                    }
                    {
                        let gx = acc_buffer(&mut adjoint, xi, x.len());
                        for t in 0..t_out {
                            for fi in 0..f {
                                let go = g[t * f + fi];
                                for d in 0..*width {
                                    for c in 0..k {
                                        gx[(t + d) * k + c] =
                                            gx[(t + d) * k + c] + go * w.values[fi * (width * k) + d * k + c];
                                    }
                                }
                            }
                        }
                    }
                }
                Op::MaxPoolTime { argmax } => {
                    let x = &self.nodes[node.parents[0]].value;
                    let cc = x.cols();
                    let gx = acc_buffer(&mut adjoint, node.parents[0], x.len());
                    for (c, &t) in argmax.iter().enumerate() {
                        gx[t * cc + c] = gx[t * cc + c] + g[c];
                    }
                }
                Op::Relu => {
                    let x = &self.nodes[node.parents[0]].value;
                    let gx = acc_buffer(&mut adjoint, node.parents[0], x.len());
                    for i in 0..x.len() {
                        let pass = match mode {
                            BackwardMode::Standard => x.values[i] > S::zero(),
                            BackwardMode::Guided => x.values[i] > S::zero() && g[i] > S::zero(),
                        };
                        if pass {
                            gx[i] = gx[i] + g[i];
                        }
                    }
                }
                Op::Sigmoid => {
                    let y = &node.value.values;
                    let gx = acc_buffer(&mut adjoint, node.parents[0], y.len());
                    for i in 0..y.len() {
                        gx[i] = gx[i] + g[i] * y[i] * (S::one() - y[i]);
                    }
                }
                Op::Tanh => {
                    let y = &node.value.values;
                    let gx = acc_buffer(&mut adjoint, node.parents[0], y.len());
                    for i in 0..y.len() {
                        gx[i] = gx[i] + g[i] * (S::one() - y[i] * y[i]);
                    }
                }
                Op::Add => {
                    for &p in &node.parents.clone() {
                        let gp = acc_buffer(&mut adjoint, p, g.len());
                        for i in 0..g.len() {
                            gp[i] = gp[i] + g[i];
                        }
                    }
                }
                Op::Mul => {
                    let (ai, bi) = (node.parents[0], node.parents[1]);
                    let a = &self.nodes[ai].value;
                    let b = &self.nodes[bi].value;
                    {
                        let ga = acc_buffer(&mut adjoint, ai, a.len());
                        for i in 0..g.len() {
                            ga[i] = ga[i] + g[i] * b.values[i];
                        }
                    }
                    {
                        let gb = acc_buffer(&mut adjoint, bi, b.len());
                        for i in 0..g.len() {
                            gb[i] = gb[i] + g[i] * a.values[i];
                        }
                    }
                }
                Op::Concat => {
                    let mut offset = 0;
                    for &p in &node.parents.clone() {
                        let n = self.nodes[p].value.len();
                        let gp = acc_buffer(&mut adjoint, p, n);
                        for i in 0..n {
                            gp[i] = gp[i] + g[offset + i];
                        }
                        offset += n;
                    }
                }
                Op::Softmax => {
                    let y = &node.value.values;
                    let dot: S = y.iter().zip(&g).map(|(&yi, &gi)| yi * gi).sum();
                    let gx = acc_buffer(&mut adjoint, node.parents[0], y.len());
                    for i in 0..y.len() {
                        gx[i] = gx[i] + y[i] * (g[i] - dot);
                    }
                }
                Op::CrossEntropy { target, probs } => {
                    let gx = acc_buffer(&mut adjoint, node.parents[0], probs.len());
                    for i in 0..probs.len() {
                        let onehot = if i == *target { S::one() } else { S::zero() };
                        gx[i] = gx[i] + g[0] * (probs[i] - onehot);
                    }
                }
                Op::Select { index } => {
                    let n = self.nodes[node.parents[0]].value.len();
                    let gx = acc_buffer(&mut adjoint, node.parents[0], n);
                    gx[*index] = gx[*index] + g[0];
                }
                Op::Reshape => {
                    let gx = acc_buffer(&mut adjoint, node.parents[0], g.len());
                    for i in 0..g.len() {
                        gx[i] = gx[i] + g[i];
                    }
                }
            }
        }

        Ok(self.collect_leaves(adjoint))
    }

    /// Epsilon-rule relevance propagation from a scalar logit node.
    ///
    /// Affine and convolution nodes share out relevance proportionally to
    /// each input's contribution, stabilized by `epsilon`; elementwise
    /// monotone activations pass relevance through; max-pool routes it to the
    /// winner; add splits proportionally to the addends. A multiply gated by
    /// a sigmoid routes all relevance to the non-gate operand, which keeps
    /// recurrent cells conservative.
    pub fn relevance(&self, output: NodeId, epsilon: S) -> Result<GradMap<S>, GradError> {
        if self.nodes.is_empty() {
            return Err(GradError::EmptyTape);
        }
        if epsilon <= S::zero() {
            return Err(GradError::BadEpsilon(epsilon.to_f64()));
        }
        let out = self.get(output)?;
        if !out.value.is_scalar() {
            return Err(GradError::NotScalar(output.0));
        }

        let mut rel: Vec<Option<Vec<S>>> = vec![None; self.nodes.len()];
        rel[output.0] = Some(vec![out.value.values[0]]);

        for idx in (0..=output.0).rev() {
            let r = match rel[idx].take() {
                Some(r) => r,
                None => continue,
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    rel[idx] = Some(r);
                }
                Op::Select { index } => {
                    let n = self.nodes[node.parents[0]].value.len();
                    let rp = acc_buffer(&mut rel, node.parents[0], n);
                    rp[*index] = rp[*index] + r[0];
                }
                Op::Relu | Op::Sigmoid | Op::Tanh | Op::Reshape => {
                    let rp = acc_buffer(&mut rel, node.parents[0], r.len());
                    for i in 0..r.len() {
                        rp[i] = rp[i] + r[i];
                    }
                }
                Op::MaxPoolTime { argmax } => {
                    let x = &self.nodes[node.parents[0]].value;
                    let cc = x.cols();
                    let rp = acc_buffer(&mut rel, node.parents[0], x.len());
                    for (c, &t) in argmax.iter().enumerate() {
                        rp[t * cc + c] = rp[t * cc + c] + r[c];
                    }
                }
                Op::Affine => {
                    let (wi, xi) = (node.parents[0], node.parents[2]);
                    let w = &self.nodes[wi].value;
                    let x = &self.nodes[xi].value;
                    let (m, n) = (w.rows(), w.cols());
                    let rx = acc_buffer(&mut rel, xi, n);
                    for j in 0..m {
                        if r[j] == S::zero() {
                            continue;
                        }
                        let denom = stabilize(node.value.values[j], epsilon);
                        for i in 0..n {
                            rx[i] = rx[i] + w.values[j * n + i] * x.values[i] / denom * r[j];
                        }
                    }
                }
                Op::Conv1d { width } => {
                    let (wi, xi) = (node.parents[0], node.parents[2]);
                    let w = &self.nodes[wi].value;
                    let x = &self.nodes[xi].value;
                    let (f, k) = (w.rows(), x.cols());
                    let t_out = x.rows() - width + 1;
                    let rx = acc_buffer(&mut rel, xi, x.len());
                    for t in 0..t_out {
                        for fi in 0..f {
                            let rj = r[t * f + fi];
                            if rj == S::zero() {
                                continue;
                            }
                            let denom = stabilize(node.value.values[t * f + fi], epsilon);
                            for d in 0..*width {
                                for c in 0..k {
                                    let z = w.values[fi * (width * k) + d * k + c] * x.values[(t + d) * k + c];
                                    rx[(t + d) * k + c] = rx[(t + d) * k + c] + z / denom * rj;
                                }
                            }
                        }
                    }
                }
                Op::Add => {
                    let (ai, bi) = (node.parents[0], node.parents[1]);
                    let a = &self.nodes[ai].value;
                    let b = &self.nodes[bi].value;
                    {
                        let ra = acc_buffer(&mut rel, ai, a.len());
                        for i in 0..r.len() {
                            let denom = stabilize(a.values[i] + b.values[i], epsilon);
                            ra[i] = ra[i] + a.values[i] / denom * r[i];
                        }
                    }
                    {
                        let rb = acc_buffer(&mut rel, bi, b.len());
                        for i in 0..r.len() {
                            let denom = stabilize(a.values[i] + b.values[i], epsilon);
                            rb[i] = rb[i] + b.values[i] / denom * r[i];
                        }
                    }
                }
                Op::Mul => {
                    let (ai, bi) = (node.parents[0], node.parents[1]);
                    let a_gate = matches!(self.nodes[ai].op, Op::Sigmoid);
                    let b_gate = matches!(self.nodes[bi].op, Op::Sigmoid);
                    match (a_gate, b_gate) {
                        (true, false) => {
                            let rb = acc_buffer(&mut rel, bi, r.len());
                            for i in 0..r.len() {
                                rb[i] = rb[i] + r[i];
                            }
                        }
                        (false, true) => {
                            let ra = acc_buffer(&mut rel, ai, r.len());
                            for i in 0..r.len() {
                                ra[i] = ra[i] + r[i];
                            }
                        }
                        _ => {
                            let half = S::from_f64(0.5);
                            for &p in &[ai, bi] {
                                let rp = acc_buffer(&mut rel, p, r.len());
                                for i in 0..r.len() {
                                    rp[i] = rp[i] + half * r[i];
                                }
                            }
                        }
                    }
                }
                Op::Concat => {
                    let mut offset = 0;
                    for &p in &node.parents.clone() {
                        let n = self.nodes[p].value.len();
                        let rp = acc_buffer(&mut rel, p, n);
                        for i in 0..n {
                            rp[i] = rp[i] + r[offset + i];
                        }
                        offset += n;
                    }
                }
                Op::EmbeddingLookup { ids } => {
                    let table = &self.nodes[node.parents[0]].value;
                    let k = table.cols();
                    let rt = acc_buffer(&mut rel, node.parents[0], table.len());
                    for (row, &id) in ids.iter().enumerate() {
                        for c in 0..k {
                            rt[id * k + c] = rt[id * k + c] + r[row * k + c];
                        }
                    }
                }
                Op::Softmax | Op::CrossEntropy { .. } => {
                    return Err(GradError::UnsupportedRelevance(node.op.name()));
                }
            }
        }

        Ok(self.collect_leaves(rel))
    }

    fn collect_leaves(&self, buffers: Vec<Option<Vec<S>>>) -> GradMap<S> {
        let mut map = GradMap::new();
        for (idx, buf) in buffers.into_iter().enumerate() {
            if let (Op::Leaf, Some(values)) = (&self.nodes[idx].op, buf) {
                let t = Tensor { shape: self.nodes[idx].value.shape.clone(), values, grad: None };
                map.insert(NodeId(idx), t);
            }
        }
        map
    }
}

/// Fetch (allocating on first touch) the accumulation buffer for node `idx`.
fn acc_buffer<S: Scalar>(buffers: &mut [Option<Vec<S>>], idx: usize, len: usize) -> &mut Vec<S> {
    buffers[idx].get_or_insert_with(|| vec![S::zero(); len])
}

fn stabilize<S: Scalar>(z: S, epsilon: S) -> S {
    if z >= S::zero() {
        z + epsilon
    } else {
        z - epsilon
    }
}

fn relu_one<S: Scalar>(v: S) -> S {
    if v > S::zero() {
        v
    } else {
        S::zero()
    }
}

fn sigmoid_one<S: Scalar>(v: S) -> S {
    S::one() / (S::one() + (-v).exp())
}

fn embedding_forward<S: Scalar>(table: &Tensor<S>, ids: &[usize]) -> Vec<S> {
    let k = table.cols();
    let mut out = Vec::with_capacity(ids.len() * k);
    for &id in ids {
        out.extend_from_slice(&table.values[id * k..(id + 1) * k]);
    }
    out
}

fn affine_forward<S: Scalar>(w: &Tensor<S>, b: &Tensor<S>, x: &Tensor<S>) -> Vec<S> {
    let (m, n) = (w.rows(), w.cols());
    let mut out = Vec::with_capacity(m);
    for j in 0..m {
        let row = &w.values[j * n..(j + 1) * n];
        out.push(b.values[j] + dot(row, &x.values));
    }
    out
}

/// Four-lane dot product: independent accumulators let the compiler
/// vectorize despite floating-point ordering.
fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    let mut acc = [S::zero(); 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let o = i * 4;
        acc[0] = acc[0] + a[o] * b[o];
        acc[1] = acc[1] + a[o + 1] * b[o + 1];
        acc[2] = acc[2] + a[o + 2] * b[o + 2];
        acc[3] = acc[3] + a[o + 3] * b[o + 3];
    }
    let mut tail = S::zero();
    for i in chunks * 4..a.len() {
        tail = tail + a[i] * b[i];
    }
    acc[0] + acc[1] + acc[2] + acc[3] + tail
}

fn conv1d_forward<S: Scalar>(w: &Tensor<S>, b: &Tensor<S>, x: &Tensor<S>, width: usize) -> Vec<S> {
    let (f, k) = (w.rows(), x.cols());
    let t_out = x.rows() - width + 1;
    let mut out = Vec::with_capacity(t_out * f);
    for t in 0..t_out {
        for fi in 0..f {
            let mut acc = b.values[fi];
            for d in 0..width {
                for c in 0..k {
                    acc = acc + w.values[fi * (width * k) + d * k + c] * x.values[(t + d) * k + c];
                }
            }
            out.push(acc);
        }
    }
    out
}

fn max_pool_forward<S: Scalar>(x: &Tensor<S>) -> (Vec<S>, Vec<usize>) {
    let (t_len, c_len) = (x.rows(), x.cols());
    let mut out = Vec::with_capacity(c_len);
    let mut argmax = Vec::with_capacity(c_len);
    for c in 0..c_len {
        let mut best = x.values[c];
        let mut best_t = 0;
        for t in 1..t_len {
            let v = x.values[t * c_len + c];
            // Strict comparison keeps the first maximal index on ties.
            if v > best {
                best = v;
                best_t = t;
            }
        }
        out.push(best);
        argmax.push(best_t);
    }
    (out, argmax)
}

fn softmax_forward<S: Scalar>(x: &[S]) -> Vec<S> {
    let max = x.iter().cloned().fold(S::neg_infinity(), S::max);
    let exps: Vec<S> = x.iter().map(|&v| (v - max).exp()).collect();
    let sum: S = exps.iter().cloned().sum();
    exps.into_iter().map(|e| e / sum).collect()
}
