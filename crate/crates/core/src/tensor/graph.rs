use std::sync::Arc;

use super::params::{ParamId, ParamStore};
use super::{axis_split, shape_err, Result, Tensor, TensorError};

/// Handle to a node recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Operation kinds with their attributes.
///
/// Elementwise binary kinds (`Add`, `Sub`, `Mul`) accept a right operand whose
/// dims equal the left operand's dims or a trailing suffix of them; the right
/// operand is then repeated over the leading dims (bias-style broadcast).
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    Scale(f64),
    AddScalar(f64),
    /// `[.., m, k] x [k, n]`, or batched `[b, m, k] x [b, k, n]`. The flags
    /// mark operands whose last two dims are stored transposed.
    MatMul { trans_a: bool, trans_b: bool },
    /// Operands: input `[b, c, h, w]`, weight `[o, c, kh, kw]`, bias `[o]`.
    /// Valid padding.
    Conv2d { stride: usize },
    /// Operand: table `[n, d]`. Output `[indices.len(), d]`.
    Embedding { indices: Vec<usize> },
    /// Operand: table `[n, d]`. Output row `i` is the sum of the rows listed
    /// in `bags[i]`, accumulated in list order; an empty bag gives zeros.
    BagEmbedding { bags: Vec<Vec<usize>> },
    Relu,
    Tanh,
    Sigmoid,
    Exp,
    Log,
    Softmax { axis: usize },
    LogSoftmax { axis: usize },
    /// Operands: input, scale `[dims[axis]]`, shift `[dims[axis]]`.
    LayerNorm { axis: usize, eps: f64 },
    Mean { axis: usize },
    Sum { axis: usize },
    /// Gradient flows to the first maximal element.
    Max { axis: usize },
    SumAll,
    MeanAll,
    Concat { axis: usize },
    Reshape { dims: Vec<usize> },
    Slice { axis: usize, start: usize, end: usize },
    /// Operand: logits `[b, c]` (or `[c]`). Output: per-row loss `[b]`.
    CrossEntropyLogits { targets: Vec<usize> },
    Minimum,
    Clamp { lo: f64, hi: f64 },
}

impl OpKind {
    fn name(&self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "multiply",
            OpKind::Scale(_) => "scale",
            OpKind::AddScalar(_) => "add-scalar",
            OpKind::MatMul { .. } => "matmul",
            OpKind::Conv2d { .. } => "conv2d",
            OpKind::Embedding { .. } => "embedding",
            OpKind::BagEmbedding { .. } => "bag-embedding",
            OpKind::Relu => "relu",
            OpKind::Tanh => "tanh",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Softmax { .. } => "softmax",
            OpKind::LogSoftmax { .. } => "log-softmax",
            OpKind::LayerNorm { .. } => "layer-norm",
            OpKind::Mean { .. } => "mean",
            OpKind::Sum { .. } => "sum",
            OpKind::Max { .. } => "max",
            OpKind::SumAll => "sum-all",
            OpKind::MeanAll => "mean-all",
            OpKind::Concat { .. } => "concat",
            OpKind::Reshape { .. } => "reshape",
            OpKind::Slice { .. } => "slice",
            OpKind::CrossEntropyLogits { .. } => "cross-entropy",
            OpKind::Minimum => "minimum",
            OpKind::Clamp { .. } => "clamp",
        }
    }
}

enum Source {
    Leaf,
    Param(ParamId),
    Op(OpKind),
}

struct Node {
    value: Arc<Tensor>,
    source: Source,
    operands: Vec<Var>,
    grad: bool,
}

/// Define-by-run computation record.
///
/// Nodes are appended in evaluation order, so every operand precedes its
/// consumer and a single reverse sweep visits each node once.
pub struct Graph {
    nodes: Vec<Node>,
    track_params: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            track_params: true,
        }
    }

    /// A graph whose parameters do not require gradients (acting, evaluation).
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            track_params: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Arc<Tensor>, source: Source, operands: Vec<Var>, grad: bool) -> Var {
        #[cfg(debug_assertions)]
        if let Source::Op(kind) = &source {
            let inputs_finite = operands.iter().all(|v| self.nodes[v.0].value.is_finite());
            debug_assert!(
                !inputs_finite || value.is_finite(),
                "{} produced a non-finite value from finite inputs",
                kind.name()
            );
        }
        self.nodes.push(Node {
            value,
            source,
            operands,
            grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf input. Gradients are reported for it when `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(Arc::new(value), Source::Leaf, Vec::new(), requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let grad = self.track_params;
        self.push(store.shared(id), Source::Param(id), Vec::new(), grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.dims()
    }

    /// Evaluate `kind` on `operands` and record the node.
    pub fn apply(&mut self, kind: OpKind, operands: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = operands.iter().map(|v| self.nodes[v.0].value.as_ref()).collect();
        let out = forward(&kind, &values)?;
        let grad = operands.iter().any(|v| self.nodes[v.0].grad);
        Ok(self.push(Arc::new(out), Source::Op(kind), operands.to_vec(), grad))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Add, &[a, b])
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Mul, &[a, b])
    }
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.apply(OpKind::Scale(c), &[a])
    }
    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.apply(OpKind::AddScalar(c), &[a])
    }
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::MatMul { trans_a: false, trans_b: false }, &[a, b])
    }
    pub fn matmul_t(&mut self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Result<Var> {
        self.apply(OpKind::MatMul { trans_a, trans_b }, &[a, b])
    }
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        self.apply(OpKind::Conv2d { stride }, &[x, w, b])
    }
    pub fn embedding(&mut self, table: Var, indices: Vec<usize>) -> Result<Var> {
        self.apply(OpKind::Embedding { indices }, &[table])
    }
    pub fn bag_embedding(&mut self, table: Var, bags: Vec<Vec<usize>>) -> Result<Var> {
        self.apply(OpKind::BagEmbedding { bags }, &[table])
    }
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Relu, &[a])
    }
    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Tanh, &[a])
    }
    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Sigmoid, &[a])
    }
    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Exp, &[a])
    }
    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Log, &[a])
    }
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.apply(OpKind::Softmax { axis }, &[a])
    }
    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.apply(OpKind::LogSoftmax { axis }, &[a])
    }
    pub fn layer_norm(&mut self, x: Var, scale: Var, shift: Var, axis: usize, eps: f64) -> Result<Var> {
        self.apply(OpKind::LayerNorm { axis, eps }, &[x, scale, shift])
    }
    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.apply(OpKind::Mean { axis }, &[a])
    }
    pub fn sum(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.apply(OpKind::Sum { axis }, &[a])
    }
    pub fn max(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.apply(OpKind::Max { axis }, &[a])
    }
    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::SumAll, &[a])
    }
    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::MeanAll, &[a])
    }
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        self.apply(OpKind::Concat { axis }, parts)
    }
    pub fn reshape(&mut self, a: Var, dims: &[usize]) -> Result<Var> {
        self.apply(OpKind::Reshape { dims: dims.to_vec() }, &[a])
    }
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        self.apply(OpKind::Slice { axis, start, end }, &[a])
    }
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<usize>) -> Result<Var> {
        self.apply(OpKind::CrossEntropyLogits { targets }, &[logits])
    }
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Minimum, &[a, b])
    }
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        self.apply(OpKind::Clamp { lo, hi }, &[a])
    }

    /// `x · w + b` for `x: [.., in]`, `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add(y, b)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got dims {:?}",
                root.value.dims()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let kind = match &node.source {
                Source::Op(kind) if node.grad => kind,
                _ => continue,
            };
            let Some(dy) = grads[i].take() else { continue };
            let inputs: Vec<&Tensor> = node.operands.iter().map(|v| self.nodes[v.0].value.as_ref()).collect();
            let wants: Vec<bool> = node.operands.iter().map(|v| self.nodes[v.0].grad).collect();
            let mut outs: Vec<Option<Vec<f64>>> = vec![None; inputs.len()];
            backward_op(kind, &inputs, &node.value, &dy, &wants, &mut outs);
            for (operand, g) in node.operands.iter().zip(outs) {
                if let Some(g) = g {
                    match &mut grads[operand.0] {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        slot @ None => *slot = Some(g),
                    }
                }
            }
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.map(|g| Tensor { dims: n.value.dims().to_vec(), data: g }))
            .collect();
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.source {
                Source::Param(id) => Some((id, Var(i))),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, params })
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient of the loss with respect to a recorded node, if it was reached.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Per-parameter gradients aligned with `store`; parameters the loss does
    /// not reach get zeros. Multiple uses of one parameter are summed.
    pub fn for_params(&self, store: &ParamStore) -> Vec<Tensor> {
        let mut out: Vec<Tensor> = store.ids().map(|id| Tensor::zeros(store.get(id).dims())).collect();
        for &(id, var) in &self.params {
            if let Some(g) = &self.grads[var.0] {
                out[id.index()]
                    .data
                    .iter_mut()
                    .zip(&g.data)
                    .for_each(|(a, b)| *a += b);
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// dense kernels

/// `c = beta * c + op(a) · op(b)` where `op(a)` is `m×k` and `op(b)` is `k×n`.
/// `ta`/`tb` mark operands stored transposed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, beta: f64, c: &mut [f64]) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index the strides can produce.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1,
        );
    }
}

fn broadcast_ok(a: &[usize], b: &[usize]) -> bool {
    b.len() <= a.len() && a[a.len() - b.len()..] == *b
}

fn elementwise(op: &'static str, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if !broadcast_ok(&a.dims, &b.dims) {
        return Err(shape_err(op, format!("{:?} vs {:?}", a.dims, b.dims)));
    }
    let m = b.data.len();
    let data = a
        .data
        .iter()
        .enumerate()
        .map(|(i, &x)| f(x, b.data[i % m]))
        .collect();
    Ok(Tensor { dims: a.dims.clone(), data })
}

fn map(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor {
        dims: a.dims.clone(),
        data: a.data.iter().map(|&x| f(x)).collect(),
    }
}

fn check_axis(op: &'static str, dims: &[usize], axis: usize) -> Result<()> {
    if axis >= dims.len() {
        return Err(shape_err(op, format!("axis {axis} out of range for dims {dims:?}")));
    }
    Ok(())
}

struct MatMulPlan {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    shared_b: bool,
    out_dims: Vec<usize>,
}

fn plan_matmul(a: &[usize], b: &[usize], ta: bool, tb: bool) -> Result<MatMulPlan> {
    let err = || shape_err("matmul", format!("{a:?} x {b:?} (trans_a={ta}, trans_b={tb})"));
    if a.len() < 2 || b.len() < 2 {
        return Err(err());
    }
    let (bk, n) = if tb { (b[b.len() - 1], b[b.len() - 2]) } else { (b[b.len() - 2], b[b.len() - 1]) };
    if b.len() == 2 {
        if ta && a.len() != 2 {
            return Err(err());
        }
        let (m, k) = if ta { (a[1], a[0]) } else { (a[..a.len() - 1].iter().product(), a[a.len() - 1]) };
        if k != bk {
            return Err(err());
        }
        let mut out_dims = if ta { vec![m] } else { a[..a.len() - 1].to_vec() };
        out_dims.push(n);
        return Ok(MatMulPlan { batch: 1, m, k, n, shared_b: true, out_dims });
    }
    if a.len() == 3 && b.len() == 3 && a[0] == b[0] {
        let (m, k) = if ta { (a[2], a[1]) } else { (a[1], a[2]) };
        if k != bk {
            return Err(err());
        }
        return Ok(MatMulPlan { batch: a[0], m, k, n, shared_b: false, out_dims: vec![a[0], m, n] });
    }
    Err(err())
}

struct ConvPlan {
    batch: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
}

fn plan_conv(x: &[usize], w: &[usize], b: &[usize], stride: usize) -> Result<ConvPlan> {
    let err = |why: &str| shape_err("conv2d", format!("input {x:?}, weight {w:?}, bias {b:?}: {why}"));
    if stride == 0 {
        return Err(err("stride must be >= 1"));
    }
    if x.len() != 4 || w.len() != 4 || b.len() != 1 {
        return Err(err("expected ranks 4, 4, 1"));
    }
    if x[1] != w[1] || b[0] != w[0] {
        return Err(err("channel mismatch"));
    }
    if x[2] < w[2] || x[3] < w[3] {
        return Err(err("kernel larger than input"));
    }
    Ok(ConvPlan {
        batch: x[0],
        c: x[1],
        h: x[2],
        w: x[3],
        o: w[0],
        kh: w[2],
        kw: w[3],
        ho: (x[2] - w[2]) / stride + 1,
        wo: (x[3] - w[3]) / stride + 1,
        stride,
    })
}

impl ConvPlan {
    fn ckk(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let hw = self.ho * self.wo;
        for c in 0..self.c {
            for p in 0..self.kh {
                for q in 0..self.kw {
                    let row = (c * self.kh + p) * self.kw + q;
                    let dst = &mut cols[row * hw..(row + 1) * hw];
                    for oy in 0..self.ho {
                        let src = &x[(c * self.h + oy * self.stride + p) * self.w..];
                        for ox in 0..self.wo {
                            dst[oy * self.wo + ox] = src[ox * self.stride + q];
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let hw = self.ho * self.wo;
        for c in 0..self.c {
            for p in 0..self.kh {
                for q in 0..self.kw {
                    let row = (c * self.kh + p) * self.kw + q;
                    let src = &cols[row * hw..(row + 1) * hw];
                    for oy in 0..self.ho {
                        let base = (c * self.h + oy * self.stride + p) * self.w;
                        for ox in 0..self.wo {
                            dx[base + ox * self.stride + q] += src[oy * self.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn forward(kind: &OpKind, xs: &[&Tensor]) -> Result<Tensor> {
    let arity = match kind {
        OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::MatMul { .. } | OpKind::Minimum => Some(2),
        OpKind::Conv2d { .. } | OpKind::LayerNorm { .. } => Some(3),
        OpKind::Concat { .. } => None,
        _ => Some(1),
    };
    if let Some(n) = arity {
        if xs.len() != n {
            return Err(shape_err(kind.name(), format!("expected {n} operands, got {}", xs.len())));
        }
    } else if xs.is_empty() {
        return Err(shape_err(kind.name(), "no operands"));
    }
    let a = xs[0];
    Ok(match kind {
        OpKind::Add => elementwise("add", a, xs[1], |x, y| x + y)?,
        OpKind::Sub => elementwise("sub", a, xs[1], |x, y| x - y)?,
        OpKind::Mul => elementwise("multiply", a, xs[1], |x, y| x * y)?,
        OpKind::Scale(c) => map(a, |x| x * c),
        OpKind::AddScalar(c) => map(a, |x| x + c),
        OpKind::MatMul { trans_a, trans_b } => {
            let b = xs[1];
            let p = plan_matmul(&a.dims, &b.dims, *trans_a, *trans_b)?;
            let mut out = vec![0.0; p.batch * p.m * p.n];
            for i in 0..p.batch {
                let bs = if p.shared_b { 0 } else { i * p.k * p.n };
                gemm(
                    p.m,
                    p.k,
                    p.n,
                    &a.data[i * p.m * p.k..],
                    *trans_a,
                    &b.data[bs..],
                    *trans_b,
                    0.0,
                    &mut out[i * p.m * p.n..(i + 1) * p.m * p.n],
                );
            }
            Tensor { dims: p.out_dims, data: out }
        }
        OpKind::Conv2d { stride } => {
            let (w, bias) = (xs[1], xs[2]);
            let p = plan_conv(&a.dims, &w.dims, &bias.dims, *stride)?;
            let hw = p.ho * p.wo;
            let mut cols = vec![0.0; p.ckk() * hw];
            let mut out = vec![0.0; p.batch * p.o * hw];
            for bi in 0..p.batch {
                p.im2col(&a.data[bi * p.c * p.h * p.w..(bi + 1) * p.c * p.h * p.w], &mut cols);
                let ob = &mut out[bi * p.o * hw..(bi + 1) * p.o * hw];
                for o in 0..p.o {
                    ob[o * hw..(o + 1) * hw].fill(bias.data[o]);
                }
                gemm(p.o, p.ckk(), hw, &w.data, false, &cols, false, 1.0, ob);
            }
            Tensor { dims: vec![p.batch, p.o, p.ho, p.wo], data: out }
        }
        OpKind::Embedding { indices } => {
            if a.rank() != 2 {
                return Err(shape_err("embedding", format!("table must be rank 2, got {:?}", a.dims)));
            }
            let (n, d) = (a.dims[0], a.dims[1]);
            let mut out = Vec::with_capacity(indices.len() * d);
            for &ix in indices {
                if ix >= n {
                    return Err(shape_err("embedding", format!("index {ix} out of range for table {:?}", a.dims)));
                }
                out.extend_from_slice(&a.data[ix * d..(ix + 1) * d]);
            }
            Tensor { dims: vec![indices.len(), d], data: out }
        }
        OpKind::Relu => map(a, |x| x.max(0.0)),
        OpKind::Tanh => map(a, f64::tanh),
        OpKind::Sigmoid => map(a, sigmoid),
        OpKind::Exp => map(a, f64::exp),
        OpKind::Log => map(a, f64::ln),
        OpKind::Softmax { axis } | OpKind::LogSoftmax { axis } => {
            check_axis(kind.name(), &a.dims, *axis)?;
            let log = matches!(kind, OpKind::LogSoftmax { .. });
            let (outer, n, inner) = axis_split(&a.dims, *axis);
            let mut out = vec![0.0; a.data.len()];
            for o in 0..outer {
                for j in 0..inner {
                    let at = |i: usize| (o * n + i) * inner + j;
                    let mx = (0..n).map(|i| a.data[at(i)]).fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for i in 0..n {
                        let e = (a.data[at(i)] - mx).exp();
                        out[at(i)] = e;
                        z += e;
                    }
                    if log {
                        let lz = z.ln();
                        for i in 0..n {
                            out[at(i)] = a.data[at(i)] - mx - lz;
                        }
                    } else {
                        for i in 0..n {
                            out[at(i)] /= z;
                        }
                    }
                }
            }
            Tensor { dims: a.dims.clone(), data: out }
        }
        OpKind::LayerNorm { axis, eps } => {
            check_axis("layer-norm", &a.dims, *axis)?;
            let (gamma, beta) = (xs[1], xs[2]);
            let (outer, n, inner) = axis_split(&a.dims, *axis);
            if gamma.dims != [n] || beta.dims != [n] {
                return Err(shape_err(
                    "layer-norm",
                    format!("input {:?} axis {axis}: scale {:?}, shift {:?}", a.dims, gamma.dims, beta.dims),
                ));
            }
            let mut out = vec![0.0; a.data.len()];
            for o in 0..outer {
                for j in 0..inner {
                    let at = |i: usize| (o * n + i) * inner + j;
                    let (mu, inv) = norm_stats(&a.data, n, at, *eps);
                    for i in 0..n {
                        out[at(i)] = (a.data[at(i)] - mu) * inv * gamma.data[i] + beta.data[i];
                    }
                }
            }
            Tensor { dims: a.dims.clone(), data: out }
        }
        OpKind::BagEmbedding { bags } => {
            if a.rank() != 2 {
                return Err(shape_err("bag-embedding", format!("table must be rank 2, got {:?}", a.dims)));
            }
            let (n, d) = (a.dims[0], a.dims[1]);
            let mut out = vec![0.0; bags.len() * d];
            for (r, bag) in bags.iter().enumerate() {
                let row = &mut out[r * d..(r + 1) * d];
                for &ix in bag {
                    if ix >= n {
                        return Err(shape_err("bag-embedding", format!("index {ix} out of range for table {:?}", a.dims)));
                    }
                    row.iter_mut().zip(&a.data[ix * d..(ix + 1) * d]).for_each(|(o, v)| *o += v);
                }
            }
            Tensor { dims: vec![bags.len(), d], data: out }
        }
        OpKind::Max { axis } => {
            check_axis("max", &a.dims, *axis)?;
            let (outer, n, inner) = axis_split(&a.dims, *axis);
            if n == 0 {
                return Err(shape_err("max", format!("empty axis {axis} in {:?}", a.dims)));
            }
            let mut out = a.data[..0].to_vec();
            for o in 0..outer {
                out.extend_from_slice(&a.data[o * n * inner..(o * n + 1) * inner]);
                let dst = &mut out[o * inner..(o + 1) * inner];
                for i in 1..n {
                    let src = &a.data[(o * n + i) * inner..(o * n + i + 1) * inner];
                    dst.iter_mut().zip(src).for_each(|(d, &s)| {
                        if s > *d {
                            *d = s
                        }
                    });
                }
            }
            let mut dims = a.dims.clone();
            dims.remove(*axis);
            Tensor { dims, data: out }
        }
        OpKind::Mean { axis } | OpKind::Sum { axis } => {
            check_axis(kind.name(), &a.dims, *axis)?;
            let (outer, n, inner) = axis_split(&a.dims, *axis);
            let scale = if matches!(kind, OpKind::Mean { .. }) { 1.0 / n as f64 } else { 1.0 };
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for i in 0..n {
                    let src = &a.data[(o * n + i) * inner..(o * n + i + 1) * inner];
                    out[o * inner..(o + 1) * inner].iter_mut().zip(src).for_each(|(d, s)| *d += s);
                }
            }
            out.iter_mut().for_each(|v| *v *= scale);
            let mut dims = a.dims.clone();
            dims.remove(*axis);
            Tensor { dims, data: out }
        }
        OpKind::SumAll => Tensor::scalar(a.data.iter().sum()),
        OpKind::MeanAll => Tensor::scalar(a.data.iter().sum::<f64>() / a.data.len().max(1) as f64),
        OpKind::Concat { axis } => {
            check_axis("concat", &a.dims, *axis)?;
            let mut dims = a.dims.clone();
            dims[*axis] = 0;
            for x in xs {
                let compatible = x.rank() == a.rank()
                    && x.dims.iter().zip(&a.dims).enumerate().all(|(i, (p, q))| i == *axis || p == q);
                if !compatible {
                    return Err(shape_err("concat", format!("{:?} vs {:?} along axis {axis}", a.dims, x.dims)));
                }
                dims[*axis] += x.dims[*axis];
            }
            let (outer, _, inner) = axis_split(&dims, *axis);
            let mut out = Vec::with_capacity(dims.iter().product());
            for o in 0..outer {
                for x in xs {
                    let chunk = x.dims[*axis] * inner;
                    out.extend_from_slice(&x.data[o * chunk..(o + 1) * chunk]);
                }
            }
            Tensor { dims, data: out }
        }
        OpKind::Reshape { dims } => a.clone().reshaped(dims)?,
        OpKind::Slice { axis, start, end } => {
            check_axis("slice", &a.dims, *axis)?;
            if start >= end || *end > a.dims[*axis] {
                return Err(shape_err("slice", format!("range {start}..{end} on axis {axis} of {:?}", a.dims)));
            }
            let (outer, n, inner) = axis_split(&a.dims, *axis);
            let mut out = Vec::with_capacity(outer * (end - start) * inner);
            for o in 0..outer {
                out.extend_from_slice(&a.data[(o * n + start) * inner..(o * n + end) * inner]);
            }
            let mut dims = a.dims.clone();
            dims[*axis] = end - start;
            Tensor { dims, data: out }
        }
        OpKind::CrossEntropyLogits { targets } => {
            let (rows, c) = ce_dims(a, targets)?;
            let mut out = vec![0.0; rows];
            for (r, (&t, o)) in targets.iter().zip(&mut out).enumerate() {
                let row = &a.data[r * c..(r + 1) * c];
                *o = logsumexp(row) - row[t];
            }
            Tensor { dims: vec![rows], data: out }
        }
        OpKind::Minimum => {
            let b = xs[1];
            if a.dims != b.dims {
                return Err(shape_err("minimum", format!("{:?} vs {:?}", a.dims, b.dims)));
            }
            Tensor {
                dims: a.dims.clone(),
                data: a.data.iter().zip(&b.data).map(|(x, y)| x.min(*y)).collect(),
            }
        }
        OpKind::Clamp { lo, hi } => map(a, |x| x.clamp(*lo, *hi)),
    })
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn logsumexp(row: &[f64]) -> f64 {
    let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    mx + row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln()
}

fn ce_dims(a: &Tensor, targets: &[usize]) -> Result<(usize, usize)> {
    let (rows, c) = match a.dims.as_slice() {
        [c] => (1, *c),
        [r, c] => (*r, *c),
        _ => return Err(shape_err("cross-entropy", format!("logits must be rank 1 or 2, got {:?}", a.dims))),
    };
    if targets.len() != rows || targets.iter().any(|&t| t >= c) {
        return Err(shape_err(
            "cross-entropy",
            format!("logits {:?} with {} targets (max class {c})", a.dims, targets.len()),
        ));
    }
    Ok((rows, c))
}

/// Mean and inverse standard deviation (population) along a strided lane.
fn norm_stats(x: &[f64], n: usize, at: impl Fn(usize) -> usize, eps: f64) -> (f64, f64) {
    let mu = (0..n).map(|i| x[at(i)]).sum::<f64>() / n as f64;
    let var = (0..n).map(|i| (x[at(i)] - mu).powi(2)).sum::<f64>() / n as f64;
    (mu, 1.0 / (var + eps).sqrt())
}

fn reduce_broadcast(dy: &[f64], m: usize) -> Vec<f64> {
    let mut g = vec![0.0; m];
    for (i, v) in dy.iter().enumerate() {
        g[i % m] += v;
    }
    g
}

fn backward_op(kind: &OpKind, xs: &[&Tensor], y: &Tensor, dy: &[f64], wants: &[bool], outs: &mut [Option<Vec<f64>>]) {
    let a = xs[0];
    match kind {
        OpKind::Add | OpKind::Sub => {
            if wants[0] {
                outs[0] = Some(dy.to_vec());
            }
            if wants[1] {
                let mut g = reduce_broadcast(dy, xs[1].len());
                if matches!(kind, OpKind::Sub) {
                    g.iter_mut().for_each(|v| *v = -*v);
                }
                outs[1] = Some(g);
            }
        }
        OpKind::Mul => {
            let b = xs[1];
            let m = b.len();
            if wants[0] {
                outs[0] = Some(dy.iter().enumerate().map(|(i, d)| d * b.data[i % m]).collect());
            }
            if wants[1] {
                let prod: Vec<f64> = dy.iter().zip(&a.data).map(|(d, x)| d * x).collect();
                outs[1] = Some(reduce_broadcast(&prod, m));
            }
        }
        OpKind::Scale(c) => outs[0] = Some(dy.iter().map(|d| d * c).collect()),
        OpKind::AddScalar(_) => outs[0] = Some(dy.to_vec()),
        OpKind::MatMul { trans_a, trans_b } => {
            let b = xs[1];
            let p = plan_matmul(&a.dims, &b.dims, *trans_a, *trans_b).expect("validated in forward");
            let (m, k, n) = (p.m, p.k, p.n);
            if wants[0] {
                let mut ga = vec![0.0; a.len()];
                for i in 0..p.batch {
                    let bs = if p.shared_b { 0 } else { i * k * n };
                    let dyi = &dy[i * m * n..];
                    let gai = &mut ga[i * m * k..(i + 1) * m * k];
                    if *trans_a {
                        // dA[k×m] = op(B) · dYᵀ
                        gemm(k, n, m, &b.data[bs..], *trans_b, dyi, true, 0.0, gai);
                    } else {
                        // dA[m×k] = dY · op(B)ᵀ
                        gemm(m, n, k, dyi, false, &b.data[bs..], !*trans_b, 0.0, gai);
                    }
                }
                outs[0] = Some(ga);
            }
            if wants[1] {
                let mut gb = vec![0.0; b.len()];
                for i in 0..p.batch {
                    let (bs, beta) = if p.shared_b { (0, if i == 0 { 0.0 } else { 1.0 }) } else { (i * k * n, 0.0) };
                    let ai = &a.data[i * m * k..];
                    let dyi = &dy[i * m * n..];
                    let gbi = &mut gb[bs..bs + k * n];
                    if *trans_b {
                        // dB[n×k] = dYᵀ · op(A)
                        gemm(n, m, k, dyi, true, ai, *trans_a, beta, gbi);
                    } else {
                        // dB[k×n] = op(A)ᵀ · dY
                        gemm(k, m, n, ai, !*trans_a, dyi, false, beta, gbi);
                    }
                }
                outs[1] = Some(gb);
            }
        }
        OpKind::Conv2d { stride } => {
            let (w, bias) = (xs[1], xs[2]);
            let p = plan_conv(&a.dims, &w.dims, &bias.dims, *stride).expect("validated in forward");
            let hw = p.ho * p.wo;
            let chw = p.c * p.h * p.w;
            let mut cols = vec![0.0; p.ckk() * hw];
            let mut gx = if wants[0] { vec![0.0; a.len()] } else { Vec::new() };
            let mut gw = vec![0.0; w.len()];
            let mut gb = vec![0.0; p.o];
            for bi in 0..p.batch {
                let dyb = &dy[bi * p.o * hw..(bi + 1) * p.o * hw];
                if wants[1] {
                    p.im2col(&a.data[bi * chw..(bi + 1) * chw], &mut cols);
                    gemm(p.o, hw, p.ckk(), dyb, false, &cols, true, 1.0, &mut gw);
                }
                if wants[2] {
                    for o in 0..p.o {
                        gb[o] += dyb[o * hw..(o + 1) * hw].iter().sum::<f64>();
                    }
                }
                if wants[0] {
                    gemm(p.ckk(), p.o, hw, &w.data, true, dyb, false, 0.0, &mut cols);
                    p.col2im(&cols, &mut gx[bi * chw..(bi + 1) * chw]);
                }
            }
            if wants[0] {
                outs[0] = Some(gx);
            }
            if wants[1] {
                outs[1] = Some(gw);
            }
            if wants[2] {
                outs[2] = Some(gb);
            }
        }
        OpKind::Embedding { indices } => {
            let d = a.dims[1];
            let mut g = vec![0.0; a.len()];
            for (r, &ix) in indices.iter().enumerate() {
                g[ix * d..(ix + 1) * d].iter_mut().zip(&dy[r * d..(r + 1) * d]).for_each(|(a, b)| *a += b);
            }
            outs[0] = Some(g);
        }
        OpKind::Relu => outs[0] = Some(dy.iter().zip(&a.data).map(|(d, x)| if *x > 0.0 { *d } else { 0.0 }).collect()),
        OpKind::Tanh => outs[0] = Some(dy.iter().zip(&y.data).map(|(d, t)| d * (1.0 - t * t)).collect()),
        OpKind::Sigmoid => outs[0] = Some(dy.iter().zip(&y.data).map(|(d, s)| d * s * (1.0 - s)).collect()),
        OpKind::Exp => outs[0] = Some(dy.iter().zip(&y.data).map(|(d, e)| d * e).collect()),
        OpKind::Log => outs[0] = Some(dy.iter().zip(&a.data).map(|(d, x)| d / x).collect()),
        OpKind::Softmax { axis } | OpKind::LogSoftmax { axis } => {
            let log = matches!(kind, OpKind::LogSoftmax { .. });
            let (outer, n, inner) = axis_split(&a.dims, *axis);
            let mut g = vec![0.0; a.len()];
            for o in 0..outer {
                for j in 0..inner {
                    let at = |i: usize| (o * n + i) * inner + j;
                    if log {
                        let s: f64 = (0..n).map(|i| dy[at(i)]).sum();
                        for i in 0..n {
                            g[at(i)] = dy[at(i)] - y.data[at(i)].exp() * s;
                        }
                    } else {
                        let s: f64 = (0..n).map(|i| dy[at(i)] * y.data[at(i)]).sum();
                        for i in 0..n {
                            g[at(i)] = y.data[at(i)] * (dy[at(i)] - s);
                        }
                    }
                }
            }
            outs[0] = Some(g);
        }
        OpKind::LayerNorm { axis, eps } => {
            let gamma = xs[1];
            let (outer, n, inner) = axis_split(&a.dims, *axis);
            let mut gx = vec![0.0; a.len()];
            let mut gg = vec![0.0; n];
            let mut gb = vec![0.0; n];
            let mut xhat = vec![0.0; n];
            let mut dxhat = vec![0.0; n];
            for o in 0..outer {
                for j in 0..inner {
                    let at = |i: usize| (o * n + i) * inner + j;
                    let (mu, inv) = norm_stats(&a.data, n, at, *eps);
                    for i in 0..n {
                        xhat[i] = (a.data[at(i)] - mu) * inv;
                        dxhat[i] = dy[at(i)] * gamma.data[i];
                        gg[i] += dy[at(i)] * xhat[i];
                        gb[i] += dy[at(i)];
                    }
                    let m1 = dxhat.iter().sum::<f64>() / n as f64;
                    let m2 = dxhat.iter().zip(&xhat).map(|(d, x)| d * x).sum::<f64>() / n as f64;
                    for i in 0..n {
                        gx[at(i)] = inv * (dxhat[i] - m1 - xhat[i] * m2);
                    }
                }
            }
            outs[0] = Some(gx);
            outs[1] = Some(gg);
            outs[2] = Some(gb);
        }
        OpKind::BagEmbedding { bags } => {
            let d = a.dims[1];
            let mut g = vec![0.0; a.len()];
            for (r, bag) in bags.iter().enumerate() {
                for &ix in bag {
                    g[ix * d..(ix + 1) * d].iter_mut().zip(&dy[r * d..(r + 1) * d]).for_each(|(a, b)| *a += b);
                }
            }
            outs[0] = Some(g);
        }
        OpKind::Max { axis } => {
            let (outer, n, inner) = axis_split(&a.dims, *axis);
            let mut g = vec![0.0; a.len()];
            for o in 0..outer {
                for j in 0..inner {
                    let target = y.data[o * inner + j];
                    let i = (0..n).find(|&i| a.data[(o * n + i) * inner + j] == target).unwrap_or(0);
                    g[(o * n + i) * inner + j] = dy[o * inner + j];
                }
            }
            outs[0] = Some(g);
        }
        OpKind::Mean { axis } | OpKind::Sum { axis } => {
            let (outer, n, inner) = axis_split(&a.dims, *axis);
            let scale = if matches!(kind, OpKind::Mean { .. }) { 1.0 / n as f64 } else { 1.0 };
            let mut g = vec![0.0; a.len()];
            for o in 0..outer {
                for i in 0..n {
                    g[(o * n + i) * inner..(o * n + i + 1) * inner]
                        .iter_mut()
                        .zip(&dy[o * inner..(o + 1) * inner])
                        .for_each(|(d, s)| *d = s * scale);
                }
            }
            outs[0] = Some(g);
        }
        OpKind::SumAll => outs[0] = Some(vec![dy[0]; a.len()]),
        OpKind::MeanAll => outs[0] = Some(vec![dy[0] / a.len().max(1) as f64; a.len()]),
        OpKind::Concat { axis } => {
            let (outer, _, inner) = axis_split(&y.dims, *axis);
            let total = y.dims[*axis] * inner;
            let mut offset = 0;
            for (slot, x) in xs.iter().enumerate() {
                let chunk = x.dims[*axis] * inner;
                if wants[slot] {
                    let mut g = Vec::with_capacity(x.len());
                    for o in 0..outer {
                        g.extend_from_slice(&dy[o * total + offset..o * total + offset + chunk]);
                    }
                    outs[slot] = Some(g);
                }
                offset += chunk;
            }
        }
        OpKind::Reshape { .. } => outs[0] = Some(dy.to_vec()),
        OpKind::Slice { axis, start, end } => {
            let (outer, n, inner) = axis_split(&a.dims, *axis);
            let w = (end - start) * inner;
            let mut g = vec![0.0; a.len()];
            for o in 0..outer {
                g[(o * n + start) * inner..(o * n + end) * inner].copy_from_slice(&dy[o * w..(o + 1) * w]);
            }
            outs[0] = Some(g);
        }
        OpKind::CrossEntropyLogits { targets } => {
            let c = *a.dims.last().expect("rank checked");
            let mut g = vec![0.0; a.len()];
            for (r, &t) in targets.iter().enumerate() {
                let row = &a.data[r * c..(r + 1) * c];
                let lse = logsumexp(row);
                for i in 0..c {
                    let p = (row[i] - lse).exp();
                    g[r * c + i] = dy[r] * (p - if i == t { 1.0 } else { 0.0 });
                }
            }
            outs[0] = Some(g);
        }
        OpKind::Minimum => {
            let b = xs[1];
            let mut ga = vec![0.0; a.len()];
            let mut gb = vec![0.0; b.len()];
            for i in 0..a.len() {
                if a.data[i] <= b.data[i] {
                    ga[i] = dy[i];
                } else {
                    gb[i] = dy[i];
                }
            }
            outs[0] = Some(ga);
            outs[1] = Some(gb);
        }
        OpKind::Clamp { lo, hi } => {
            outs[0] = Some(
                dy.iter()
                    .zip(&a.data)
                    .map(|(d, x)| if *x >= *lo && *x <= *hi { *d } else { 0.0 })
                    .collect(),
            )
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(dims: &[usize], v: &[f64]) -> Tensor {
        Tensor::new(dims, v.to_vec()).unwrap()
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(&[0.0, 0.0]));
        let y = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn identity_matmul() {
        let mut g = Graph::new();
        let i = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let x = g.constant(t(&[2, 1], &[3.0, 4.0]));
        let y = g.matmul(i, x).unwrap();
        assert_eq!(g.value(y), &t(&[2, 1], &[3.0, 4.0]));
    }

    #[test]
    fn layer_norm_two_values() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(&[1.0, 3.0]));
        let s = g.constant(Tensor::vector(&[1.0, 1.0]));
        let b = g.constant(Tensor::vector(&[0.0, 0.0]));
        let y = g.layer_norm(x, s, b, 0, 0.0).unwrap();
        assert_eq!(g.value(y).data(), &[-1.0, 1.0]);
    }

    #[test]
    fn grad_of_sum_of_squares() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(&[1.0, 2.0]), true);
        let sq = g.mul(x, x).unwrap();
        let s = g.sum_all(sq).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn cross_entropy_gradient_is_p_minus_onehot() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[1, 2], &[0.0, 0.0]), true);
        let l = g.cross_entropy(x, vec![0]).unwrap();
        let s = g.sum_all(l).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[-0.5, 0.5]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(&[1.0, 2.0]), true);
        assert!(matches!(g.backward(x), Err(TensorError::Contract(_))));
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
        let err = g.softmax(a, 2).unwrap_err().to_string();
        assert!(err.contains("softmax"), "{err}");
        let x = g.constant(Tensor::zeros(&[1, 1, 4, 4]));
        let w = g.constant(Tensor::zeros(&[1, 1, 2, 2]));
        let bias = g.constant(Tensor::zeros(&[1]));
        assert!(g.conv2d(x, w, bias, 0).unwrap_err().to_string().contains("stride"));
    }

    #[test]
    fn unreached_params_get_zero_gradients() {
        let mut store = ParamStore::new();
        let used = store.add("used", Tensor::vector(&[2.0])).unwrap();
        store.add("unused", Tensor::vector(&[1.0, 1.0])).unwrap();
        let mut g = Graph::new();
        let u = g.param(&store, used);
        let s = g.sum_all(u).unwrap();
        let grads = g.backward(s).unwrap().for_params(&store);
        assert_eq!(grads[0].data(), &[1.0]);
        assert_eq!(grads[1].data(), &[0.0, 0.0]);
    }

    #[test]
    fn broadcast_bias_add() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]), true);
        let b = g.leaf(Tensor::vector(&[10.0, 20.0]), true);
        let y = g.add(x, b).unwrap();
        assert_eq!(g.value(y).data(), &[11.0, 22.0, 13.0, 24.0]);
        let s = g.sum_all(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(b).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn concat_and_slice_roundtrip() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 1], &[1.0, 2.0]));
        let b = g.constant(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let s = g.slice(c, 1, 1, 3).unwrap();
        assert_eq!(g.value(s), &t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
    }
}
