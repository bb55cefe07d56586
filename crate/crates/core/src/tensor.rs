//! Minimal reverse-mode automatic-differentiation engine.
//!
//! A [`Graph`] is a flat, topologically ordered list of nodes. Leaves are
//! bound to [`Tensor`] values when the graph is built; interior nodes apply a
//! fixed primitive-op set. [`Graph::eval`] computes every node value in order
//! (checking finiteness as it goes) and [`Graph::backward`] propagates one or
//! more seed gradients in reverse, returning gradients for every
//! `requires_grad` leaf.
//!
//! All arithmetic is in `f64`: the entropy estimator takes logарithms of
//! small nearest-neighbor distances, which underflow in `f32` for tightly
//! clustered sample batches.

use crate::error::{Error, Result};
use crate::rng::fnv1a64;

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

/// A dense, row-major, 64-bit float array of arbitrary rank.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch {
                op: "Tensor::new".into(),
                detail: format!("shape {:?} implies {} elements, got {}", shape, n, data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn full(shape: &[usize], v: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![v; n] }
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor { shape: vec![1], data: vec![v] }
    }

    /// Uniform draws in `[lo, hi)`.
    pub fn rand_uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl rand::Rng) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| lo + (hi - lo) * rng.gen::<f64>()).collect();
        Tensor { shape: shape.to_vec(), data }
    }

    /// Normal draws with the given mean and standard deviation.
    pub fn rand_normal(shape: &[usize], mean: f64, sd: f64, rng: &mut impl rand::Rng) -> Tensor {
        use rand_distr::Distribution;
        let dist = rand_distr::Normal::new(mean, sd).expect("valid normal");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| dist.sample(rng)).collect();
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Reinterpret as a new shape with the same element count.
    pub fn with_shape(mut self, shape: Vec<usize>) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "with_shape".into(),
                detail: format!("cannot view {:?} as {:?}", self.shape, shape),
            });
        }
        self.shape = shape;
        Ok(self)
    }

    /// The single value of a 1-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// Index of the first NaN/Inf entry, if any.
    pub fn first_nonfinite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite())
    }

    fn rows(&self) -> usize {
        self.shape[0]
    }

    fn cols(&self) -> usize {
        self.shape[1]
    }
}

/// Hash of the exact bit pattern of a tensor (used for determinism checks).
pub fn tensor_bits_hash(t: &Tensor) -> u64 {
    let mut bytes = Vec::with_capacity(t.data().len() * 8);
    for v in t.data() {
        bytes.extend_from_slice(&v.to_le_bits_bytes());
    }
    fnv1a64(&bytes)
}

trait F64Bytes {
    fn to_le_bits_bytes(&self) -> [u8; 8];
}
impl F64Bytes for f64 {
    fn to_le_bits_bytes(&self) -> [u8; 8] {
        self.to_bits().to_le_bytes()
    }
}

// ---------------------------------------------------------------------------
// Low-level matmul helper
// ---------------------------------------------------------------------------

/// `C = alpha·A·B + beta·C` for logical `A: m×k`, `B: k×n`, `C: m×n`.
///
/// The `t*` flags mean "the buffer stores the transpose of the logical
/// matrix"; strides are adjusted so no explicit transposition happens.
#[allow(clippy::too_many_arguments)]
fn mm_into(
    c: &mut [f64],
    tc: bool,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    m: usize,
    k: usize,
    n: usize,
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if ta { (1isize, m as isize) } else { (k as isize, 1isize) };
    let (rsb, csb) = if tb { (1isize, k as isize) } else { (n as isize, 1isize) };
    let (rsc, csc) = if tc { (1isize, m as isize) } else { (n as isize, 1isize) };
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc,
            csc,
        );
    }
}

// ---------------------------------------------------------------------------
// Graph
// ---------------------------------------------------------------------------

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

/// Batch-normalization mode: training uses batch statistics, inference uses
/// stored moving averages supplied as constants.
#[derive(Clone, Debug)]
pub enum BnMode {
    Train,
    Infer { mean: Vec<f64>, var: Vec<f64> },
}

#[derive(Clone, Debug)]
enum Op {
    Leaf { requires_grad: bool },
    Matmul { ta: bool, tb: bool },
    Add,
    Sub,
    Mul,
    Scale(f64),
    AddConst(f64),
    LeakyRelu(f64),
    Log,
    Exp,
    PowConst(f64),
    Sum,
    Mean,
    SumAxis(usize),
    Concat(usize),
    Slice { axis: usize, start: usize, end: usize },
    GatherCols(Vec<usize>),
    Reshape,
    Conv2d { kh: usize, kw: usize, stride: usize },
    MaxPool2x2,
    LogSoftmax,
    Nll(Vec<usize>),
    PairwiseSqDist,
    NearestSqDist { rows: Option<Vec<usize>>, floor: f64 },
    BatchNorm { eps: f64, mode: BnMode },
    SegSumSq(Vec<(usize, usize)>),
    ScaleColsBy(Vec<Option<usize>>),
    SubFromCols(Vec<usize>),
    FloorCheck { floor: f64, filters: Vec<(usize, usize)> },
    SqNorm,
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::Matmul { .. } => "matmul",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::AddConst(_) => "add_const",
            Op::LeakyRelu(_) => "leaky_relu",
            Op::Log => "log",
            Op::Exp => "exp",
            Op::PowConst(_) => "pow_const",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::SumAxis(_) => "sum_axis",
            Op::Concat(_) => "concat",
            Op::Slice { .. } => "slice",
            Op::GatherCols(_) => "gather_cols",
            Op::Reshape => "reshape",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool2x2 => "maxpool2x2",
            Op::LogSoftmax => "log_softmax",
            Op::Nll(_) => "nll",
            Op::PairwiseSqDist => "pairwise_sq_dist",
            Op::NearestSqDist { .. } => "nearest_sq_dist",
            Op::BatchNorm { .. } => "batch_norm",
            Op::SegSumSq(_) => "seg_sum_sq",
            Op::ScaleColsBy(_) => "scale_cols_by",
            Op::SubFromCols(_) => "sub_from_cols",
            Op::FloorCheck { .. } => "floor_check",
            Op::SqNorm => "sq_norm",
        }
    }
}

#[derive(Clone, Debug)]
enum Aux {
    None,
    /// Per-output-element linear index of the selected input element.
    Pool(Vec<usize>),
    /// Per-output-row `(sample index, nearest-neighbor index)`.
    Nearest(Vec<(usize, usize)>),
    /// Batch statistics computed in training mode.
    Bn { mean: Vec<f64>, var: Vec<f64> },
}

struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    shape: Vec<usize>,
    value: Option<Tensor>,
    aux: Aux,
    needs_grad: bool,
}

/// A reverse-mode computation graph.
///
/// Nodes are appended in topological order by construction (every builder
/// takes already-existing inputs), evaluated front to back and differentiated
/// back to front, each node exactly once.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    evaluated: bool,
}

/// Gradients returned by [`Graph::backward`]: one tensor per
/// `requires_grad` leaf that the seeds reach.
#[derive(Debug)]
pub struct Grads {
    g: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.g.get(id.0).and_then(|o| o.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.g.get_mut(id.0).and_then(|o| o.take())
    }
}

fn accum(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        None => *slot = Some(g),
        Some(t) => {
            debug_assert_eq!(t.shape(), g.shape());
            for (a, b) in t.data.iter_mut().zip(g.data.iter()) {
                *a += b;
            }
        }
    }
}

impl Graph {
    pub fn new() -> Graph {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Shape of a node, known at build time.
    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    /// Value of a node; panics if the graph has not been evaluated.
    pub fn value(&self, id: NodeId) -> &Tensor {
        self.nodes[id.0]
            .value
            .as_ref()
            .expect("graph must be evaluated before reading values")
    }

    /// Batch statistics (mean, biased variance) recorded by a training-mode
    /// batch-norm node during the last eval.
    pub fn bn_batch_stats(&self, id: NodeId) -> Option<(&[f64], &[f64])> {
        match &self.nodes[id.0].aux {
            Aux::Bn { mean, var } => Some((mean, var)),
            _ => None,
        }
    }

    /// Rebind the value of a leaf (shape must match). Invalidates prior evals.
    pub fn set_value(&mut self, id: NodeId, t: Tensor) -> Result<()> {
        let node = &mut self.nodes[id.0];
        match node.op {
            Op::Leaf { .. } => {}
            _ => return Err(Error::Graph("set_value on non-leaf node".into())),
        }
        if node.shape != t.shape {
            return Err(Error::ShapeMismatch {
                op: "set_value".into(),
                detail: format!("leaf has shape {:?}, new value {:?}", node.shape, t.shape),
            });
        }
        node.value = Some(t);
        self.evaluated = false;
        Ok(())
    }

    // -- node constructors --------------------------------------------------

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, shape: Vec<usize>, value: Option<Tensor>) -> NodeId {
        let needs_grad = match op {
            Op::Leaf { requires_grad } => requires_grad,
            _ => inputs.iter().any(|i| self.nodes[i.0].needs_grad),
        };
        self.evaluated = false;
        self.nodes.push(Node { op, inputs, shape, value, aux: Aux::None, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    /// A leaf bound to `t`; participates in gradients iff `requires_grad`.
    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> NodeId {
        let shape = t.shape.clone();
        self.push(Op::Leaf { requires_grad }, vec![], shape, Some(t))
    }

    /// A constant leaf (no gradient).
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.leaf(t, false)
    }

    fn mismatch(&self, op: &str, detail: String) -> Error {
        Error::ShapeMismatch { op: op.into(), detail }
    }

    /// Matrix product with optional transposition of either stored operand.
    pub fn matmul_flags(&mut self, a: NodeId, ta: bool, b: NodeId, tb: bool) -> Result<NodeId> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 2 || sb.len() != 2 {
            return Err(self.mismatch("matmul", format!("need 2-D operands, got {:?} and {:?}", sa, sb)));
        }
        let (m, k1) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (k2, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k1 != k2 {
            return Err(self.mismatch(
                "matmul",
                format!("inner dims disagree: {:?}{} × {:?}{}", sa, if ta { "ᵀ" } else { "" }, sb, if tb { "ᵀ" } else { "" }),
            ));
        }
        Ok(self.push(Op::Matmul { ta, tb }, vec![a, b], vec![m, n], None))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_flags(a, false, b, false)
    }

    fn ewise_shape(&self, op: &str, a: NodeId, b: NodeId) -> Result<Vec<usize>> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let ok = sa == sb
            || (sb.len() == 1 && !sa.is_empty() && sb[0] == *sa.last().unwrap())
            || (sb.len() == 1 && sb[0] == 1);
        if !ok {
            return Err(self.mismatch(op, format!("incompatible shapes {:?} and {:?}", sa, sb)));
        }
        Ok(sa.to_vec())
    }

    /// Elementwise sum. `b` may also be a vector broadcast over the last axis
    /// of `a`, or a 1-element scalar broadcast over all of `a`.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.ewise_shape("add", a, b)?;
        Ok(self.push(Op::Add, vec![a, b], shape, None))
    }

    /// Elementwise difference, with the same broadcasting as [`Graph::add`].
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.ewise_shape("sub", a, b)?;
        Ok(self.push(Op::Sub, vec![a, b], shape, None))
    }

    /// Elementwise (Hadamard) product, with the same broadcasting as `add`.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.ewise_shape("mul", a, b)?;
        Ok(self.push(Op::Mul, vec![a, b], shape, None))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::Scale(c), vec![a], shape, None)
    }

    pub fn add_const(&mut self, a: NodeId, c: f64) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::AddConst(c), vec![a], shape, None)
    }

    /// Leaky ReLU with negative-branch slope `alpha` (`alpha = 0` is ReLU).
    pub fn leaky_relu(&mut self, a: NodeId, alpha: f64) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::LeakyRelu(alpha), vec![a], shape, None)
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::Log, vec![a], shape, None)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::Exp, vec![a], shape, None)
    }

    /// Elementwise `x^p` (inputs must be positive for fractional `p`).
    pub fn pow_const(&mut self, a: NodeId, p: f64) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::PowConst(p), vec![a], shape, None)
    }

    /// Sum of all elements (scalar output).
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum, vec![a], vec![1], None)
    }

    /// Mean of all elements (scalar output).
    pub fn mean(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Mean, vec![a], vec![1], None)
    }

    /// Reduce a 2-D tensor along `axis` (0 ⇒ column sums, 1 ⇒ row sums).
    pub fn sum_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let s = self.shape(a);
        if s.len() != 2 || axis > 1 {
            return Err(self.mismatch("sum_axis", format!("need 2-D input and axis ∈ {{0,1}}, got {:?} axis {}", s, axis)));
        }
        let shape = vec![if axis == 0 { s[1] } else { s[0] }];
        Ok(self.push(Op::SumAxis(axis), vec![a], shape, None))
    }

    /// Concatenate 2-D tensors along `axis`.
    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        if parts.is_empty() || axis > 1 {
            return Err(self.mismatch("concat", "need ≥1 input and axis ∈ {0,1}".into()));
        }
        let first = self.shape(parts[0]).to_vec();
        if first.len() != 2 {
            return Err(self.mismatch("concat", format!("need 2-D inputs, got {:?}", first)));
        }
        let fixed = 1 - axis;
        let mut total = 0usize;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[fixed] != first[fixed] {
                return Err(self.mismatch("concat", format!("shape {:?} incompatible with {:?} on axis {}", s, first, axis)));
            }
            total += s[axis];
        }
        let mut shape = first;
        shape[axis] = total;
        Ok(self.push(Op::Concat(axis), parts.to_vec(), shape, None))
    }

    /// Contiguous slice `[start, end)` along `axis` of a 1-D or 2-D tensor.
    pub fn slice(&mut self, a: NodeId, axis: usize, start: usize, end: usize) -> Result<NodeId> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || s.len() > 2 || start >= end || end > s[axis] {
            return Err(self.mismatch("slice", format!("slice {}..{} on axis {} of {:?}", start, end, axis, s)));
        }
        let mut shape = s;
        shape[axis] = end - start;
        Ok(self.push(Op::Slice { axis, start, end }, vec![a], shape, None))
    }

    /// Gather the listed columns of a 2-D tensor (columns may repeat).
    pub fn gather_cols(&mut self, a: NodeId, cols: Vec<usize>) -> Result<NodeId> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || cols.iter().any(|&c| c >= s[1]) {
            return Err(self.mismatch("gather_cols", format!("columns {:?} of {:?}", cols, s)));
        }
        let shape = vec![s[0], cols.len()];
        Ok(self.push(Op::GatherCols(cols), vec![a], shape, None))
    }

    /// Reinterpret the element buffer with a new shape.
    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let n: usize = shape.iter().product();
        let s = self.shape(a);
        if n != s.iter().product::<usize>() {
            return Err(self.mismatch("reshape", format!("{:?} → {:?}", s, shape)));
        }
        Ok(self.push(Op::Reshape, vec![a], shape, None))
    }

    /// 2-D convolution, NHWC layout, 'SAME' zero padding.
    ///
    /// `x: [B,H,W,C]`, `w: [F, kh·kw·C]` (each row one filter, patch order
    /// `(di, dj, channel)`), `b: [F]` → `[B, ⌈H/stride⌉, ⌈W/stride⌉, F]`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, kh: usize, kw: usize, stride: usize) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let sb = self.shape(b).to_vec();
        if sx.len() != 4 || sw.len() != 2 || sb.len() != 1 {
            return Err(self.mismatch("conv2d", format!("x {:?}, w {:?}, b {:?}", sx, sw, sb)));
        }
        let c = sx[3];
        if sw[1] != kh * kw * c || sb[0] != sw[0] || stride == 0 {
            return Err(self.mismatch(
                "conv2d",
                format!("w {:?} / b {:?} inconsistent with kernel {}×{}×{} stride {}", sw, sb, kh, kw, c, stride),
            ));
        }
        let oh = sx[1].div_ceil(stride);
        let ow = sx[2].div_ceil(stride);
        Ok(self.push(Op::Conv2d { kh, kw, stride }, vec![x, w, b], vec![sx[0], oh, ow, sw[0]], None))
    }

    /// 2×2 max pooling with stride 2 and 'SAME' padding, NHWC.
    pub fn maxpool2x2(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 {
            return Err(self.mismatch("maxpool2x2", format!("need NHWC input, got {:?}", s)));
        }
        let shape = vec![s[0], s[1].div_ceil(2), s[2].div_ceil(2), s[3]];
        Ok(self.push(Op::MaxPool2x2, vec![a], shape, None))
    }

    /// Row-wise log-softmax of a 2-D tensor.
    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(self.mismatch("log_softmax", format!("need 2-D input, got {:?}", s)));
        }
        Ok(self.push(Op::LogSoftmax, vec![a], s, None))
    }

    /// Negative mean log-likelihood of the labelled classes:
    /// `−(1/B)·Σ_i logp[i, labels[i]]`.
    pub fn nll(&mut self, logp: NodeId, labels: Vec<usize>) -> Result<NodeId> {
        let s = self.shape(logp).to_vec();
        if s.len() != 2 || labels.len() != s[0] {
            return Err(self.mismatch("nll", format!("logp {:?} vs {} labels", s, labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= s[1]) {
            return Err(Error::InvalidArgument(format!("label {} out of range for {} classes", bad, s[1])));
        }
        Ok(self.push(Op::Nll(labels), vec![logp], vec![1], None))
    }

    /// All pairwise squared Euclidean distances between rows: `[N,D] → [N,N]`.
    pub fn pairwise_sq_dist(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(self.mismatch("pairwise_sq_dist", format!("need 2-D input, got {:?}", s)));
        }
        Ok(self.push(Op::PairwiseSqDist, vec![a], vec![s[0], s[0]], None))
    }

    /// Per-row squared distance to the nearest *other* row.
    ///
    /// With `rows = Some(idx)` only those rows are scored (against all rows).
    /// The chosen neighbor index is frozen during backprop. Any distance
    /// below `floor` is a checked "collapsed samples" error.
    pub fn nearest_sq_dist(&mut self, a: NodeId, rows: Option<Vec<usize>>, floor: f64) -> Result<NodeId> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || s[0] < 2 {
            return Err(self.mismatch("nearest_sq_dist", format!("need ≥2 rows, got {:?}", s)));
        }
        let r = match &rows {
            Some(idx) => {
                if idx.is_empty() || idx.iter().any(|&i| i >= s[0]) {
                    return Err(Error::InvalidArgument(format!("row subset {:?} invalid for {} rows", idx, s[0])));
                }
                idx.len()
            }
            None => s[0],
        };
        Ok(self.push(Op::NearestSqDist { rows, floor }, vec![a], vec![r], None))
    }

    /// Batch normalization over rows of `x: [B,D]` with per-column scale and
    /// shift. Training mode uses batch statistics (recorded for the caller);
    /// inference mode uses the supplied moving statistics.
    pub fn batch_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64, mode: BnMode) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        let sg = self.shape(gamma).to_vec();
        let sb = self.shape(beta).to_vec();
        if sx.len() != 2 || sg != vec![sx[1]] || sb != vec![sx[1]] {
            return Err(self.mismatch("batch_norm", format!("x {:?}, gamma {:?}, beta {:?}", sx, sg, sb)));
        }
        if let BnMode::Infer { mean, var } = &mode {
            if mean.len() != sx[1] || var.len() != sx[1] {
                return Err(self.mismatch("batch_norm", format!("moving stats len {} vs {} features", mean.len(), sx[1])));
            }
        }
        Ok(self.push(Op::BatchNorm { eps, mode }, vec![x, gamma, beta], sx, None))
    }

    /// Sums of squares over disjoint column segments of a 2-D tensor.
    pub fn seg_sum_sq(&mut self, a: NodeId, segs: Vec<(usize, usize)>) -> Result<NodeId> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || segs.iter().any(|&(lo, hi)| lo >= hi || hi > s[1]) {
            return Err(self.mismatch("seg_sum_sq", format!("segments {:?} of {:?}", segs, s)));
        }
        let shape = vec![s[0], segs.len()];
        Ok(self.push(Op::SegSumSq(segs), vec![a], shape, None))
    }

    /// Multiply chosen columns by per-row factors: `out[b,j] =
    /// x[b,j] · f[b, map[j]]` (columns with `map[j] = None` pass through).
    pub fn scale_cols_by(&mut self, x: NodeId, factors: NodeId, map: Vec<Option<usize>>) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        let sf = self.shape(factors).to_vec();
        if sx.len() != 2 || sf.len() != 2 || sf[0] != sx[0] || map.len() != sx[1] {
            return Err(self.mismatch("scale_cols_by", format!("x {:?}, factors {:?}, map len {}", sx, sf, map.len())));
        }
        if map.iter().flatten().any(|&k| k >= sf[1]) {
            return Err(self.mismatch("scale_cols_by", format!("factor index out of range for {:?}", sf)));
        }
        Ok(self.push(Op::ScaleColsBy(map), vec![x, factors], sx, None))
    }

    /// Subtract a per-row value from the listed columns:
    /// `out[b,c] = x[b,c] − v[b]` for `c ∈ cols`.
    pub fn sub_from_cols(&mut self, x: NodeId, v: NodeId, cols: Vec<usize>) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        let sv = self.shape(v).to_vec();
        if sx.len() != 2 || sv != vec![sx[0]] || cols.iter().any(|&c| c >= sx[1]) {
            return Err(self.mismatch("sub_from_cols", format!("x {:?}, v {:?}, cols {:?}", sx, sv, cols)));
        }
        Ok(self.push(Op::SubFromCols(cols), vec![x, v], sx, None))
    }

    /// Identity that fails evaluation if any element is below `floor`.
    /// `filters[j]` labels column `j` as `(layer, filter)` for the error.
    pub fn floor_check(&mut self, a: NodeId, floor: f64, filters: Vec<(usize, usize)>) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::FloorCheck { floor, filters }, vec![a], shape, None)
    }

    /// Sum of squares of all elements (scalar output).
    pub fn sq_norm(&mut self, a: NodeId) -> NodeId {
        self.push(Op::SqNorm, vec![a], vec![1], None)
    }

    // -- forward -----------------------------------------------------------

    /// Evaluate every node in order. Detects NaN/Inf per node.
    pub fn eval(&mut self) -> Result<()> {
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Leaf { .. }) {
                if self.nodes[i].value.is_none() {
                    return Err(Error::Graph(format!("leaf node {} has no bound value", i)));
                }
            } else {
                let (value, aux) = self.eval_node(i)?;
                debug_assert_eq!(value.shape(), &self.nodes[i].shape[..], "shape contract of node {}", i);
                self.nodes[i].value = Some(value);
                self.nodes[i].aux = aux;
            }
            if let Some(j) = self.nodes[i].value.as_ref().unwrap().first_nonfinite() {
                let op = self.nodes[i].op.name().to_string();
                let _ = j;
                return Err(Error::NonFinite { node: i, op });
            }
        }
        self.evaluated = true;
        Ok(())
    }

    fn input_value(&self, node: usize, k: usize) -> &Tensor {
        let id = self.nodes[node].inputs[k];
        self.nodes[id.0].value.as_ref().expect("inputs precede node")
    }

    fn eval_node(&self, i: usize) -> Result<(Tensor, Aux)> {
        let node = &self.nodes[i];
        let val = |k: usize| self.input_value(i, k);
        let out = match &node.op {
            Op::Leaf { .. } => unreachable!(),
            Op::Matmul { ta, tb } => {
                let a = val(0);
                let b = val(1);
                let (m, k) = if *ta { (a.cols(), a.rows()) } else { (a.rows(), a.cols()) };
                let n = if *tb { b.rows() } else { b.cols() };
                let mut c = Tensor::zeros(&[m, n]);
                mm_into(c.data_mut(), false, a.data(), *ta, b.data(), *tb, m, k, n, 0.0);
                (c, Aux::None)
            }
            Op::Add | Op::Sub | Op::Mul => {
                let a = val(0);
                let b = val(1);
                let mut out = a.clone();
                let f: fn(f64, f64) -> f64 = match node.op {
                    Op::Add => |x, y| x + y,
                    Op::Sub => |x, y| x - y,
                    _ => |x, y| x * y,
                };
                if a.shape() == b.shape() {
                    for (o, y) in out.data.iter_mut().zip(b.data.iter()) {
                        *o = f(*o, *y);
                    }
                } else if b.numel() == 1 {
                    let y = b.data[0];
                    for o in out.data.iter_mut() {
                        *o = f(*o, y);
                    }
                } else {
                    let d = b.numel();
                    for (j, o) in out.data.iter_mut().enumerate() {
                        *o = f(*o, b.data[j % d]);
                    }
                }
                (out, Aux::None)
            }
            Op::Scale(c) => {
                let mut out = val(0).clone();
                for o in out.data.iter_mut() {
                    *o *= c;
                }
                (out, Aux::None)
            }
            Op::AddConst(c) => {
                let mut out = val(0).clone();
                for o in out.data.iter_mut() {
                    *o += c;
                }
                (out, Aux::None)
            }
            Op::LeakyRelu(alpha) => {
                let mut out = val(0).clone();
                for o in out.data.iter_mut() {
                    if *o < 0.0 {
                        *o *= alpha;
                    }
                }
                (out, Aux::None)
            }
            Op::Log => {
                let mut out = val(0).clone();
                for o in out.data.iter_mut() {
                    *o = o.ln();
                }
                (out, Aux::None)
            }
            Op::Exp => {
                let mut out = val(0).clone();
                for o in out.data.iter_mut() {
                    *o = o.exp();
                }
                (out, Aux::None)
            }
            Op::PowConst(p) => {
                let mut out = val(0).clone();
                for o in out.data.iter_mut() {
                    *o = o.powf(*p);
                }
                (out, Aux::None)
            }
            Op::Sum => (Tensor::scalar(val(0).data.iter().sum()), Aux::None),
            Op::Mean => {
                let a = val(0);
                (Tensor::scalar(a.data.iter().sum::<f64>() / a.numel() as f64), Aux::None)
            }
            Op::SumAxis(axis) => {
                let a = val(0);
                let (r, c) = (a.rows(), a.cols());
                if *axis == 0 {
                    let mut out = vec![0.0; c];
                    for i in 0..r {
                        for j in 0..c {
                            out[j] += a.data[i * c + j];
                        }
                    }
                    (Tensor::new(vec![c], out)?, Aux::None)
                } else {
                    let mut out = vec![0.0; r];
                    for i in 0..r {
                        out[i] = a.data[i * c..(i + 1) * c].iter().sum();
                    }
                    (Tensor::new(vec![r], out)?, Aux::None)
                }
            }
            Op::Concat(axis) => {
                let shape = node.shape.clone();
                let mut out = Tensor::zeros(&shape);
                if *axis == 0 {
                    let mut off = 0;
                    for k in 0..node.inputs.len() {
                        let a = self.input_value(i, k);
                        out.data[off..off + a.numel()].copy_from_slice(&a.data);
                        off += a.numel();
                    }
                } else {
                    let rows = shape[0];
                    let cols = shape[1];
                    let mut col_off = 0;
                    for k in 0..node.inputs.len() {
                        let a = self.input_value(i, k);
                        let ac = a.cols();
                        for r in 0..rows {
                            out.data[r * cols + col_off..r * cols + col_off + ac]
                                .copy_from_slice(&a.data[r * ac..(r + 1) * ac]);
                        }
                        col_off += ac;
                    }
                }
                (out, Aux::None)
            }
            Op::Slice { axis, start, end } => {
                let a = val(0);
                if a.shape.len() == 1 {
                    (Tensor::new(vec![end - start], a.data[*start..*end].to_vec())?, Aux::None)
                } else if *axis == 0 {
                    let c = a.cols();
                    (Tensor::new(vec![end - start, c], a.data[start * c..end * c].to_vec())?, Aux::None)
                } else {
                    let (r, c) = (a.rows(), a.cols());
                    let w = end - start;
                    let mut out = vec![0.0; r * w];
                    for row in 0..r {
                        out[row * w..(row + 1) * w].copy_from_slice(&a.data[row * c + start..row * c + end]);
                    }
                    (Tensor::new(vec![r, w], out)?, Aux::None)
                }
            }
            Op::GatherCols(cols) => {
                let a = val(0);
                let (r, c) = (a.rows(), a.cols());
                let k = cols.len();
                let mut out = vec![0.0; r * k];
                for row in 0..r {
                    for (j, &col) in cols.iter().enumerate() {
                        out[row * k + j] = a.data[row * c + col];
                    }
                }
                (Tensor::new(vec![r, k], out)?, Aux::None)
            }
            Op::Reshape => {
                let t = val(0).clone();
                (t.with_shape(node.shape.clone())?, Aux::None)
            }
            Op::Conv2d { kh, kw, stride } => {
                let x = val(0);
                let w = val(1);
                let b = val(2);
                let (bsz, h, wd, c) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
                let f = w.rows();
                let (oh, ow) = (node.shape[1], node.shape[2]);
                let e = kh * kw * c;
                let rows = bsz * oh * ow;
                let mut patches = vec![0.0; rows * e];
                im2col(&x.data, bsz, h, wd, c, *kh, *kw, *stride, oh, ow, &mut patches);
                let mut out = Tensor::zeros(&[bsz, oh, ow, f]);
                // out_mat [rows, f] = patches [rows, e] @ wᵀ  (w stored [f, e])
                mm_into(out.data_mut(), false, &patches, false, w.data(), true, rows, e, f, 0.0);
                for r in 0..rows {
                    for j in 0..f {
                        out.data[r * f + j] += b.data[j];
                    }
                }
                (out, Aux::None)
            }
            Op::MaxPool2x2 => {
                let x = val(0);
                let (bsz, h, w, c) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
                let (oh, ow) = (node.shape[1], node.shape[2]);
                let mut out = Tensor::zeros(&node.shape);
                let mut idx = vec![0usize; out.numel()];
                for bi in 0..bsz {
                    for oi in 0..oh {
                        for oj in 0..ow {
                            for ch in 0..c {
                                let mut best = f64::NEG_INFINITY;
                                let mut best_at = 0usize;
                                for di in 0..2 {
                                    for dj in 0..2 {
                                        let ii = oi * 2 + di;
                                        let jj = oj * 2 + dj;
                                        if ii < h && jj < w {
                                            let at = ((bi * h + ii) * w + jj) * c + ch;
                                            if x.data[at] > best {
                                                best = x.data[at];
                                                best_at = at;
                                            }
                                        }
                                    }
                                }
                                let o = ((bi * oh + oi) * ow + oj) * c + ch;
                                out.data[o] = best;
                                idx[o] = best_at;
                            }
                        }
                    }
                }
                (out, Aux::Pool(idx))
            }
            Op::LogSoftmax => {
                let a = val(0);
                let (r, c) = (a.rows(), a.cols());
                let mut out = a.clone();
                for row in 0..r {
                    let s = &mut out.data[row * c..(row + 1) * c];
                    let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let lse = m + s.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                    for v in s.iter_mut() {
                        *v -= lse;
                    }
                }
                (out, Aux::None)
            }
            Op::Nll(labels) => {
                let a = val(0);
                let c = a.cols();
                let mut acc = 0.0;
                for (row, &y) in labels.iter().enumerate() {
                    acc -= a.data[row * c + y];
                }
                (Tensor::scalar(acc / labels.len() as f64), Aux::None)
            }
            Op::PairwiseSqDist => {
                let a = val(0);
                let (n, d) = (a.rows(), a.cols());
                let mut out = Tensor::zeros(&[n, n]);
                for p in 0..n {
                    for q in (p + 1)..n {
                        let mut acc = 0.0;
                        for k in 0..d {
                            let diff = a.data[p * d + k] - a.data[q * d + k];
                            acc += diff * diff;
                        }
                        out.data[p * n + q] = acc;
                        out.data[q * n + p] = acc;
                    }
                }
                (out, Aux::None)
            }
            Op::NearestSqDist { rows, floor } => {
                let a = val(0);
                let (n, d) = (a.rows(), a.cols());
                let row_set: Vec<usize> = match rows {
                    Some(v) => v.clone(),
                    None => (0..n).collect(),
                };
                let floor_sq = floor * floor;
                let mut out = vec![0.0; row_set.len()];
                let mut nearest = Vec::with_capacity(row_set.len());
                for (r, &p) in row_set.iter().enumerate() {
                    let mut best = f64::INFINITY;
                    let mut best_j = usize::MAX;
                    let xp = &a.data[p * d..(p + 1) * d];
                    for q in 0..n {
                        if q == p {
                            continue;
                        }
                        let xq = &a.data[q * d..(q + 1) * d];
                        let mut acc = 0.0;
                        for k in 0..d {
                            let diff = xp[k] - xq[k];
                            acc += diff * diff;
                        }
                        if acc < best {
                            best = acc;
                            best_j = q;
                        }
                    }
                    if best < floor_sq {
                        return Err(Error::CollapsedSamples {
                            a: p,
                            b: best_j,
                            dist: best.sqrt(),
                            floor: *floor,
                        });
                    }
                    out[r] = best;
                    nearest.push((p, best_j));
                }
                (Tensor::new(vec![row_set.len()], out)?, Aux::Nearest(nearest))
            }
            Op::BatchNorm { eps, mode } => {
                let x = val(0);
                let gamma = val(1);
                let beta = val(2);
                let (bsz, dft) = (x.rows(), x.cols());
                let (mean, var, aux) = match mode {
                    BnMode::Train => {
                        let mut mean = vec![0.0; dft];
                        for r in 0..bsz {
                            for j in 0..dft {
                                mean[j] += x.data[r * dft + j];
                            }
                        }
                        for m in mean.iter_mut() {
                            *m /= bsz as f64;
                        }
                        let mut var = vec![0.0; dft];
                        for r in 0..bsz {
                            for j in 0..dft {
                                let d = x.data[r * dft + j] - mean[j];
                                var[j] += d * d;
                            }
                        }
                        for v in var.iter_mut() {
                            *v /= bsz as f64;
                        }
                        let aux = Aux::Bn { mean: mean.clone(), var: var.clone() };
                        (mean, var, aux)
                    }
                    BnMode::Infer { mean, var } => (mean.clone(), var.clone(), Aux::None),
                };
                let mut out = Tensor::zeros(&[bsz, dft]);
                for j in 0..dft {
                    let inv = 1.0 / (var[j] + eps).sqrt();
                    for r in 0..bsz {
                        out.data[r * dft + j] = gamma.data[j] * (x.data[r * dft + j] - mean[j]) * inv + beta.data[j];
                    }
                }
                (out, aux)
            }
            Op::SegSumSq(segs) => {
                let a = val(0);
                let (bsz, c) = (a.rows(), a.cols());
                let s = segs.len();
                let mut out = vec![0.0; bsz * s];
                for r in 0..bsz {
                    for (k, &(lo, hi)) in segs.iter().enumerate() {
                        out[r * s + k] = a.data[r * c + lo..r * c + hi].iter().map(|v| v * v).sum();
                    }
                }
                (Tensor::new(vec![bsz, s], out)?, Aux::None)
            }
            Op::ScaleColsBy(map) => {
                let x = val(0);
                let f = val(1);
                let (bsz, c) = (x.rows(), x.cols());
                let fc = f.cols();
                let mut out = x.clone();
                for r in 0..bsz {
                    for (j, m) in map.iter().enumerate() {
                        if let Some(k) = m {
                            out.data[r * c + j] *= f.data[r * fc + k];
                        }
                    }
                }
                (out, Aux::None)
            }
            Op::SubFromCols(cols) => {
                let x = val(0);
                let v = val(1);
                let c = x.cols();
                let mut out = x.clone();
                for r in 0..x.rows() {
                    for &col in cols {
                        out.data[r * c + col] -= v.data[r];
                    }
                }
                (out, Aux::None)
            }
            Op::FloorCheck { floor, filters } => {
                let a = val(0);
                if let Some(j) = a.data.iter().position(|&v| v < *floor) {
                    let (layer, filter) = if filters.is_empty() {
                        (0, j)
                    } else {
                        filters[j % filters.len()]
                    };
                    return Err(Error::ZeroFilter { layer, filter });
                }
                (a.clone(), Aux::None)
            }
            Op::SqNorm => (Tensor::scalar(val(0).data.iter().map(|v| v * v).sum()), Aux::None),
        };
        Ok(out)
    }

    // -- backward ----------------------------------------------------------

    /// Reverse-mode sweep from the given `(node, seed)` pairs. Requires a
    /// prior successful [`Graph::eval`]. Returns gradients for
    /// `requires_grad` leaves.
    pub fn backward(&mut self, seeds: Vec<(NodeId, Tensor)>) -> Result<Grads> {
        if !self.evaluated {
            return Err(Error::Graph("backward before eval".into()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        for (id, seed) in seeds {
            if seed.shape() != self.shape(id) {
                return Err(Error::ShapeMismatch {
                    op: "backward".into(),
                    detail: format!("seed shape {:?} vs node shape {:?}", seed.shape(), self.shape(id)),
                });
            }
            accum(&mut grads[id.0], seed);
        }
        for i in (0..self.nodes.len()).rev() {
            if grads[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf { .. }) {
                continue; // keep leaf gradient for the caller
            }
            let g = grads[i].take().expect("checked above");
            let inputs = self.nodes[i].inputs.clone();
            let input_grads = self.backward_node(i, &g)?;
            debug_assert_eq!(input_grads.len(), inputs.len());
            for (k, ig) in input_grads.into_iter().enumerate() {
                if let Some(t) = ig {
                    if self.nodes[inputs[k].0].needs_grad {
                        accum(&mut grads[inputs[k].0], t);
                    }
                }
            }
        }
        // Retain only requires_grad leaves.
        for (i, slot) in grads.iter_mut().enumerate() {
            let keep = matches!(self.nodes[i].op, Op::Leaf { requires_grad: true });
            if !keep {
                *slot = None;
            }
        }
        Ok(Grads { g: grads })
    }

    /// Per-input gradients of node `i` given its output gradient `g`.
    fn backward_node(&self, i: usize, g: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let node = &self.nodes[i];
        let val = |k: usize| self.input_value(i, k);
        let needs = |k: usize| self.nodes[node.inputs[k].0].needs_grad;
        let out = match &node.op {
            Op::Leaf { .. } => unreachable!("leaves handled by caller"),
            Op::Matmul { ta, tb } => {
                let a = val(0);
                let b = val(1);
                let (m, k) = if *ta { (a.cols(), a.rows()) } else { (a.rows(), a.cols()) };
                let n = if *tb { b.rows() } else { b.cols() };
                let mut da = None;
                let mut db = None;
                if needs(0) {
                    let mut t = Tensor::zeros(a.shape());
                    // dA (logical m×k) = g · Bᵀ ; stored transposed if ta.
                    mm_into(t.data_mut(), *ta, g.data(), false, b.data(), !*tb, m, n, k, 0.0);
                    da = Some(t);
                }
                if needs(1) {
                    let mut t = Tensor::zeros(b.shape());
                    // dB (logical k×n) = Aᵀ · g ; stored transposed if tb.
                    mm_into(t.data_mut(), *tb, a.data(), !*ta, g.data(), false, k, m, n, 0.0);
                    db = Some(t);
                }
                vec![da, db]
            }
            Op::Add | Op::Sub => {
                let sign = if matches!(node.op, Op::Sub) { -1.0 } else { 1.0 };
                let da = needs(0).then(|| g.clone());
                let db = if needs(1) {
                    let b = val(1);
                    Some(reduce_broadcast(g, b.shape(), sign))
                } else {
                    None
                };
                vec![da, db]
            }
            Op::Mul => {
                let a = val(0);
                let b = val(1);
                let da = if needs(0) {
                    let mut t = g.clone();
                    if a.shape() == b.shape() {
                        for (o, y) in t.data.iter_mut().zip(b.data.iter()) {
                            *o *= y;
                        }
                    } else if b.numel() == 1 {
                        let y = b.data[0];
                        for o in t.data.iter_mut() {
                            *o *= y;
                        }
                    } else {
                        let d = b.numel();
                        for (j, o) in t.data.iter_mut().enumerate() {
                            *o *= b.data[j % d];
                        }
                    }
                    Some(t)
                } else {
                    None
                };
                let db = if needs(1) {
                    let mut prod = g.clone();
                    for (o, x) in prod.data.iter_mut().zip(a.data.iter()) {
                        *o *= x;
                    }
                    Some(reduce_broadcast(&prod, b.shape(), 1.0))
                } else {
                    None
                };
                vec![da, db]
            }
            Op::Scale(c) => {
                let mut t = g.clone();
                for o in t.data.iter_mut() {
                    *o *= c;
                }
                vec![Some(t)]
            }
            Op::AddConst(_) => vec![Some(g.clone())],
            Op::LeakyRelu(alpha) => {
                let x = val(0);
                let mut t = g.clone();
                for (o, &xv) in t.data.iter_mut().zip(x.data.iter()) {
                    if xv < 0.0 {
                        *o *= alpha;
                    }
                }
                vec![Some(t)]
            }
            Op::Log => {
                let x = val(0);
                let mut t = g.clone();
                for (o, &xv) in t.data.iter_mut().zip(x.data.iter()) {
                    *o /= xv;
                }
                vec![Some(t)]
            }
            Op::Exp => {
                let y = node.value.as_ref().unwrap();
                let mut t = g.clone();
                for (o, &yv) in t.data.iter_mut().zip(y.data.iter()) {
                    *o *= yv;
                }
                vec![Some(t)]
            }
            Op::PowConst(p) => {
                let x = val(0);
                let mut t = g.clone();
                for (o, &xv) in t.data.iter_mut().zip(x.data.iter()) {
                    *o *= p * xv.powf(p - 1.0);
                }
                vec![Some(t)]
            }
            Op::Sum => {
                let x = val(0);
                vec![Some(Tensor::full(x.shape(), g.item()))]
            }
            Op::Mean => {
                let x = val(0);
                vec![Some(Tensor::full(x.shape(), g.item() / x.numel() as f64))]
            }
            Op::SumAxis(axis) => {
                let x = val(0);
                let (r, c) = (x.rows(), x.cols());
                let mut t = Tensor::zeros(&[r, c]);
                if *axis == 0 {
                    for i2 in 0..r {
                        for j in 0..c {
                            t.data[i2 * c + j] = g.data[j];
                        }
                    }
                } else {
                    for i2 in 0..r {
                        for j in 0..c {
                            t.data[i2 * c + j] = g.data[i2];
                        }
                    }
                }
                vec![Some(t)]
            }
            Op::Concat(axis) => {
                let mut out = Vec::with_capacity(node.inputs.len());
                if *axis == 0 {
                    let mut off = 0;
                    for k in 0..node.inputs.len() {
                        let a = self.input_value(i, k);
                        let t = Tensor::new(a.shape().to_vec(), g.data[off..off + a.numel()].to_vec())?;
                        off += a.numel();
                        out.push(if needs(k) { Some(t) } else { None });
                    }
                } else {
                    let cols = node.shape[1];
                    let rows = node.shape[0];
                    let mut col_off = 0;
                    for k in 0..node.inputs.len() {
                        let a = self.input_value(i, k);
                        let ac = a.cols();
                        if needs(k) {
                            let mut t = Tensor::zeros(a.shape());
                            for r in 0..rows {
                                t.data[r * ac..(r + 1) * ac]
                                    .copy_from_slice(&g.data[r * cols + col_off..r * cols + col_off + ac]);
                            }
                            out.push(Some(t));
                        } else {
                            out.push(None);
                        }
                        col_off += ac;
                    }
                }
                out
            }
            Op::Slice { axis, start, end } => {
                let x = val(0);
                let mut t = Tensor::zeros(x.shape());
                if x.shape.len() == 1 {
                    t.data[*start..*end].copy_from_slice(&g.data);
                } else if *axis == 0 {
                    let c = x.cols();
                    t.data[start * c..end * c].copy_from_slice(&g.data);
                } else {
                    let c = x.cols();
                    let w = end - start;
                    for row in 0..x.rows() {
                        t.data[row * c + start..row * c + end].copy_from_slice(&g.data[row * w..(row + 1) * w]);
                    }
                }
                vec![Some(t)]
            }
            Op::GatherCols(cols) => {
                let x = val(0);
                let (r, c) = (x.rows(), x.cols());
                let k = cols.len();
                let mut t = Tensor::zeros(&[r, c]);
                for row in 0..r {
                    for (j, &col) in cols.iter().enumerate() {
                        t.data[row * c + col] += g.data[row * k + j];
                    }
                }
                vec![Some(t)]
            }
            Op::Reshape => {
                let x = val(0);
                vec![Some(g.clone().with_shape(x.shape().to_vec())?)]
            }
            Op::Conv2d { kh, kw, stride } => {
                let x = val(0);
                let w = val(1);
                let (bsz, h, wd, c) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
                let f = w.rows();
                let (oh, ow) = (node.shape[1], node.shape[2]);
                let e = kh * kw * c;
                let rows = bsz * oh * ow;
                let mut dx = None;
                let mut dw = None;
                let mut db = None;
                if needs(1) {
                    // Patches are not cached during eval (memory); recompute.
                    let mut patches = vec![0.0; rows * e];
                    im2col(&x.data, bsz, h, wd, c, *kh, *kw, *stride, oh, ow, &mut patches);
                    let mut t = Tensor::zeros(&[f, e]);
                    // dW [f,e] = gᵀ [f,rows] @ patches [rows,e]
                    mm_into(t.data_mut(), false, g.data(), true, &patches, false, f, rows, e, 0.0);
                    dw = Some(t);
                }
                if needs(2) {
                    let mut t = Tensor::zeros(&[f]);
                    for r in 0..rows {
                        for j in 0..f {
                            t.data[j] += g.data[r * f + j];
                        }
                    }
                    db = Some(t);
                }
                if needs(0) {
                    let mut dpatch = vec![0.0; rows * e];
                    // d_patches [rows,e] = g [rows,f] @ w [f,e]
                    mm_into(&mut dpatch, false, g.data(), false, w.data(), false, rows, f, e, 0.0);
                    let mut t = Tensor::zeros(x.shape());
                    col2im(&dpatch, bsz, h, wd, c, *kh, *kw, *stride, oh, ow, &mut t.data);
                    dx = Some(t);
                }
                vec![dx, dw, db]
            }
            Op::MaxPool2x2 => {
                let x = val(0);
                let idx = match &node.aux {
                    Aux::Pool(idx) => idx,
                    _ => unreachable!("pool aux recorded at eval"),
                };
                let mut t = Tensor::zeros(x.shape());
                for (o, &at) in idx.iter().enumerate() {
                    t.data[at] += g.data[o];
                }
                vec![Some(t)]
            }
            Op::LogSoftmax => {
                let y = node.value.as_ref().unwrap();
                let (r, c) = (y.rows(), y.cols());
                let mut t = g.clone();
                for row in 0..r {
                    let gs = g.data[row * c..(row + 1) * c].iter().sum::<f64>();
                    for j in 0..c {
                        t.data[row * c + j] -= y.data[row * c + j].exp() * gs;
                    }
                }
                vec![Some(t)]
            }
            Op::Nll(labels) => {
                let x = val(0);
                let c = x.cols();
                let mut t = Tensor::zeros(x.shape());
                let coeff = -g.item() / labels.len() as f64;
                for (row, &y) in labels.iter().enumerate() {
                    t.data[row * c + y] += coeff;
                }
                vec![Some(t)]
            }
            Op::PairwiseSqDist => {
                let x = val(0);
                let (n, d) = (x.rows(), x.cols());
                let mut t = Tensor::zeros(&[n, d]);
                for p in 0..n {
                    for q in 0..n {
                        if p == q {
                            continue;
                        }
                        let coeff = 2.0 * (g.data[p * n + q] + g.data[q * n + p]);
                        if coeff != 0.0 {
                            for k in 0..d {
                                t.data[p * d + k] += coeff * (x.data[p * d + k] - x.data[q * d + k]);
                            }
                        }
                    }
                }
                vec![Some(t)]
            }
            Op::NearestSqDist { .. } => {
                let x = val(0);
                let d = x.cols();
                let nearest = match &node.aux {
                    Aux::Nearest(v) => v,
                    _ => unreachable!("nearest aux recorded at eval"),
                };
                let mut t = Tensor::zeros(x.shape());
                for (r, &(p, q)) in nearest.iter().enumerate() {
                    let gv = g.data[r];
                    for k in 0..d {
                        let diff = 2.0 * (x.data[p * d + k] - x.data[q * d + k]) * gv;
                        t.data[p * d + k] += diff;
                        t.data[q * d + k] -= diff;
                    }
                }
                vec![Some(t)]
            }
            Op::BatchNorm { eps, mode } => {
                let x = val(0);
                let gamma = val(1);
                let (bsz, dft) = (x.rows(), x.cols());
                let bf = bsz as f64;
                let (mean, var): (&[f64], &[f64]) = match (&node.aux, mode) {
                    (Aux::Bn { mean, var }, _) => (mean, var),
                    (_, BnMode::Infer { mean, var }) => (mean, var),
                    _ => unreachable!("train-mode BN records stats at eval"),
                };
                let mut dx = Tensor::zeros(&[bsz, dft]);
                let mut dgamma = Tensor::zeros(&[dft]);
                let mut dbeta = Tensor::zeros(&[dft]);
                for j in 0..dft {
                    let inv = 1.0 / (var[j] + eps).sqrt();
                    let mut sum_dy = 0.0;
                    let mut sum_dy_xc = 0.0;
                    for r in 0..bsz {
                        let dy = g.data[r * dft + j];
                        let xc = x.data[r * dft + j] - mean[j];
                        sum_dy += dy;
                        sum_dy_xc += dy * xc;
                        dgamma.data[j] += dy * xc * inv;
                        dbeta.data[j] += dy;
                    }
                    let gj = gamma.data[j];
                    match mode {
                        BnMode::Train => {
                            // Standard training-mode backward: batch statistics
                            // are functions of x.
                            for r in 0..bsz {
                                let dy = g.data[r * dft + j];
                                let xc = x.data[r * dft + j] - mean[j];
                                dx.data[r * dft + j] =
                                    gj * inv * (dy - sum_dy / bf - xc * inv * inv * sum_dy_xc / bf);
                            }
                        }
                        BnMode::Infer { .. } => {
                            for r in 0..bsz {
                                dx.data[r * dft + j] = g.data[r * dft + j] * gj * inv;
                            }
                        }
                    }
                }
                vec![Some(dx), Some(dgamma), Some(dbeta)]
            }
            Op::SegSumSq(segs) => {
                let x = val(0);
                let (bsz, c) = (x.rows(), x.cols());
                let s = segs.len();
                let mut t = Tensor::zeros(&[bsz, c]);
                for r in 0..bsz {
                    for (k, &(lo, hi)) in segs.iter().enumerate() {
                        let gv = g.data[r * s + k];
                        for j in lo..hi {
                            t.data[r * c + j] = 2.0 * x.data[r * c + j] * gv;
                        }
                    }
                }
                vec![Some(t)]
            }
            Op::ScaleColsBy(map) => {
                let x = val(0);
                let f = val(1);
                let (bsz, c) = (x.rows(), x.cols());
                let fc = f.cols();
                let dx = if needs(0) {
                    let mut t = g.clone();
                    for r in 0..bsz {
                        for (j, m) in map.iter().enumerate() {
                            if let Some(k) = m {
                                t.data[r * c + j] *= f.data[r * fc + k];
                            }
                        }
                    }
                    Some(t)
                } else {
                    None
                };
                let df = if needs(1) {
                    let mut t = Tensor::zeros(&[bsz, fc]);
                    for r in 0..bsz {
                        for (j, m) in map.iter().enumerate() {
                            if let Some(k) = m {
                                t.data[r * fc + k] += g.data[r * c + j] * x.data[r * c + j];
                            }
                        }
                    }
                    Some(t)
                } else {
                    None
                };
                vec![dx, df]
            }
            Op::SubFromCols(cols) => {
                let x = val(0);
                let (bsz, _c) = (x.rows(), x.cols());
                let dx = Some(g.clone());
                let dv = if needs(1) {
                    let mut t = Tensor::zeros(&[bsz]);
                    let c = x.cols();
                    for r in 0..bsz {
                        for &col in cols {
                            t.data[r] -= g.data[r * c + col];
                        }
                    }
                    Some(t)
                } else {
                    None
                };
                vec![dx, dv]
            }
            Op::FloorCheck { .. } => vec![Some(g.clone())],
            Op::SqNorm => {
                let x = val(0);
                let mut t = x.clone();
                let gv = g.item();
                for o in t.data.iter_mut() {
                    *o *= 2.0 * gv;
                }
                vec![Some(t)]
            }
        };
        Ok(out)
    }
}

/// Sum `g` down to `target_shape` (for broadcast operands), scaled by `sign`.
fn reduce_broadcast(g: &Tensor, target_shape: &[usize], sign: f64) -> Tensor {
    if g.shape() == target_shape {
        let mut t = g.clone();
        if sign != 1.0 {
            for o in t.data.iter_mut() {
                *o *= sign;
            }
        }
        return t;
    }
    let d: usize = target_shape.iter().product();
    let mut t = Tensor::zeros(target_shape);
    for (j, &v) in g.data.iter().enumerate() {
        let k = if d == 1 { 0 } else { j % d };
        t.data[k] += sign * v;
    }
    t
}

// ---------------------------------------------------------------------------
// im2col / col2im
// ---------------------------------------------------------------------------

/// 'SAME' padding offsets: output size `ceil(in/stride)`, ties split with the
/// extra row/column on the bottom/right.
fn same_pad_before(input: usize, k: usize, stride: usize) -> usize {
    let out = input.div_ceil(stride);
    let total = ((out - 1) * stride + k).saturating_sub(input);
    total / 2
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    b: usize,
    h: usize,
    w: usize,
    c: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    oh: usize,
    ow: usize,
    patches: &mut [f64],
) {
    let pad_t = same_pad_before(h, kh, stride);
    let pad_l = same_pad_before(w, kw, stride);
    let e = kh * kw * c;
    debug_assert_eq!(patches.len(), b * oh * ow * e);
    for v in patches.iter_mut() {
        *v = 0.0;
    }
    for bi in 0..b {
        for oi in 0..oh {
            for oj in 0..ow {
                let row = ((bi * oh + oi) * ow + oj) * e;
                for di in 0..kh {
                    let ii = (oi * stride + di) as isize - pad_t as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for dj in 0..kw {
                        let jj = (oj * stride + dj) as isize - pad_l as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        let src = ((bi * h + ii as usize) * w + jj as usize) * c;
                        let dst = row + (di * kw + dj) * c;
                        patches[dst..dst + c].copy_from_slice(&x[src..src + c]);
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    patches: &[f64],
    b: usize,
    h: usize,
    w: usize,
    c: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    oh: usize,
    ow: usize,
    x: &mut [f64],
) {
    let pad_t = same_pad_before(h, kh, stride);
    let pad_l = same_pad_before(w, kw, stride);
    let e = kh * kw * c;
    for bi in 0..b {
        for oi in 0..oh {
            for oj in 0..ow {
                let row = ((bi * oh + oi) * ow + oj) * e;
                for di in 0..kh {
                    let ii = (oi * stride + di) as isize - pad_t as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for dj in 0..kw {
                        let jj = (oj * stride + dj) as isize - pad_l as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        let dst = ((bi * h + ii as usize) * w + jj as usize) * c;
                        let src = row + (di * kw + dj) * c;
                        for ch in 0..c {
                            x[dst + ch] += patches[src + ch];
                        }
                    }
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checking
// ---------------------------------------------------------------------------

/// Compare the analytic vector-Jacobian product against central finite
/// differences.
///
/// `seed` is the cotangent at `out`; the scalar being differentiated is
/// `⟨seed, f(leaves)⟩`. Checks every coordinate of every listed leaf (or a
/// deterministic subsample of `max_coords` per leaf when set) and returns the
/// maximum relative error, with the denominator floored at `1e-8`.
pub fn vjp_fd_check(
    g: &mut Graph,
    out: NodeId,
    seed: &Tensor,
    leaves: &[NodeId],
    h: f64,
    max_coords: Option<usize>,
) -> Result<f64> {
    g.eval()?;
    let mut grads = g.backward(vec![(out, seed.clone())])?;
    let analytic: Vec<Tensor> = leaves
        .iter()
        .map(|&l| grads.take(l).unwrap_or_else(|| Tensor::zeros(g.shape(l))))
        .collect();
    let dot = |a: &Tensor, b: &Tensor| -> f64 { a.data().iter().zip(b.data().iter()).map(|(x, y)| x * y).sum() };
    let mut max_rel: f64 = 0.0;
    for (li, &leaf) in leaves.iter().enumerate() {
        let base = g.value(leaf).clone();
        let n = base.numel();
        let coords: Vec<usize> = match max_coords {
            Some(m) if n > m => {
                // Deterministic stride-based subsample covering the range.
                let step = n / m;
                (0..m).map(|j| j * step).collect()
            }
            _ => (0..n).collect(),
        };
        for &j in &coords {
            let mut plus = base.clone();
            plus.data_mut()[j] += h;
            g.set_value(leaf, plus)?;
            g.eval()?;
            let fp = dot(seed, g.value(out));
            let mut minus = base.clone();
            minus.data_mut()[j] -= h;
            g.set_value(leaf, minus)?;
            g.eval()?;
            let fm = dot(seed, g.value(out));
            let fd = (fp - fm) / (2.0 * h);
            let an = analytic[li].data()[j];
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-8);
            if rel > max_rel {
                max_rel = rel;
            }
        }
        g.set_value(leaf, base)?;
    }
    g.eval()?;
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn t2(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
        Tensor::new(vec![rows, cols], data).unwrap()
    }

    #[test]
    fn d_x_squared_is_2x() {
        // d(x·x)/dx at x=3 → 6
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0), true);
        let y = g.mul(x, x).unwrap();
        g.eval().unwrap();
        assert_eq!(g.value(y).item(), 9.0);
        let grads = g.backward(vec![(y, Tensor::scalar(1.0))]).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn leaky_relu_negative_branch_slope() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(-2.0), true);
        let y = g.leaky_relu(x, 0.1);
        g.eval().unwrap();
        assert!((g.value(y).item() + 0.2).abs() < 1e-15);
        let grads = g.backward(vec![(y, Tensor::scalar(1.0))]).unwrap();
        assert!((grads.get(x).unwrap().item() - 0.1).abs() < 1e-15);
    }

    #[test]
    fn leaky_relu_at_zero_uses_positive_branch() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(0.0), true);
        let y = g.leaky_relu(x, 0.1);
        g.eval().unwrap();
        let grads = g.backward(vec![(y, Tensor::scalar(1.0))]).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 1.0);
    }

    #[test]
    fn conv2d_identity_kernel_preserves_input() {
        // 3×3 input, single 1×1 identity kernel, zero bias → input unchanged.
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 3, 3, 1], (1..=9).map(|v| v as f64).collect()).unwrap());
        let w = g.constant(t2(1, 1, vec![1.0]));
        let b = g.constant(Tensor::new(vec![1], vec![0.0]).unwrap());
        let y = g.conv2d(x, w, b, 1, 1, 1).unwrap();
        g.eval().unwrap();
        assert_eq!(g.value(y).data(), &(1..=9).map(|v| v as f64).collect::<Vec<_>>()[..]);
    }

    #[test]
    fn maxpool_takes_block_max() {
        // maxpool2x2 over [[1,2],[3,4]] → [[4]]
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = g.maxpool2x2(x).unwrap();
        g.eval().unwrap();
        assert_eq!(g.value(y).data(), &[4.0]);
    }

    #[test]
    fn conv2d_same_padding_center_is_full_sum() {
        // 5×5 ones input, 5×5 ones kernel, SAME stride 1 → center element 25.
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[1, 5, 5, 1], 1.0));
        let w = g.constant(Tensor::full(&[1, 25], 1.0));
        let b = g.constant(Tensor::zeros(&[1]));
        let y = g.conv2d(x, w, b, 5, 5, 1).unwrap();
        g.eval().unwrap();
        let v = g.value(y);
        assert_eq!(v.shape(), &[1, 5, 5, 1]);
        assert_eq!(v.data()[2 * 5 + 2], 25.0);
        // Corner sees only a 3×3 overlap.
        assert_eq!(v.data()[0], 9.0);
    }

    #[test]
    fn eval_is_deterministic_bitwise() {
        let mut rng = stream(1, "det");
        let xt = Tensor::rand_normal(&[4, 4], 0.0, 1.0, &mut rng);
        let mut g = Graph::new();
        let x = g.leaf(xt, true);
        let y0 = g.matmul(x, x).unwrap();
        let y = g.log_softmax(y0).unwrap();
        g.eval().unwrap();
        let a = g.value(y).clone();
        g.eval().unwrap();
        assert_eq!(a, *g.value(y));
    }

    #[test]
    fn nonfinite_is_reported_with_node() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(-1.0));
        let y = g.log(x);
        let err = g.eval().unwrap_err();
        match err {
            Error::NonFinite { node, op } => {
                assert_eq!(node, y.0);
                assert_eq!(op, "log");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(g.matmul(a, b), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn softmax_rows_normalize() {
        let mut rng = stream(3, "sm");
        let mut g = Graph::new();
        let x = g.constant(Tensor::rand_normal(&[5, 7], 0.0, 3.0, &mut rng));
        let y = g.log_softmax(x).unwrap();
        g.eval().unwrap();
        for r in 0..5 {
            let s: f64 = g.value(y).data()[r * 7..(r + 1) * 7].iter().map(|v| v.exp()).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    /// One FD check per op over several random instances.
    #[test]
    fn finite_difference_all_ops() {
        for inst in 0..3u64 {
            let mut rng = stream(100 + inst, "fd");
            // matmul (all flag combinations)
            for &(ta, tb) in &[(false, false), (true, false), (false, true), (true, true)] {
                let mut g = Graph::new();
                let sa = if ta { [3, 4] } else { [4, 3] };
                let sb = if tb { [5, 3] } else { [3, 5] };
                let a = g.leaf(Tensor::rand_normal(&sa, 0.0, 1.0, &mut rng), true);
                let b = g.leaf(Tensor::rand_normal(&sb, 0.0, 1.0, &mut rng), true);
                let y = g.matmul_flags(a, ta, b, tb).unwrap();
                let seed = Tensor::rand_normal(&[4, 5], 0.0, 1.0, &mut rng);
                let e = vjp_fd_check(&mut g, y, &seed, &[a, b], 1e-5, None).unwrap();
                assert!(e < 1e-4, "matmul ta={ta} tb={tb}: {e}");
            }
            // add/sub/mul with broadcasting
            for which in 0..3 {
                for bshape in [vec![2, 4], vec![4], vec![1]] {
                    let mut g = Graph::new();
                    let a = g.leaf(Tensor::rand_normal(&[2, 4], 0.0, 1.0, &mut rng), true);
                    let b = g.leaf(Tensor::rand_normal(&bshape, 0.0, 1.0, &mut rng), true);
                    let y = match which {
                        0 => g.add(a, b).unwrap(),
                        1 => g.sub(a, b).unwrap(),
                        _ => g.mul(a, b).unwrap(),
                    };
                    let seed = Tensor::rand_normal(&[2, 4], 0.0, 1.0, &mut rng);
                    let e = vjp_fd_check(&mut g, y, &seed, &[a, b], 1e-5, None).unwrap();
                    assert!(e < 1e-4, "ewise {which} {bshape:?}: {e}");
                }
            }
            // conv2d stride 1 and 2 on a 4×4 instance
            for stride in [1, 2] {
                let mut g = Graph::new();
                let x = g.leaf(Tensor::rand_normal(&[2, 4, 4, 3], 0.0, 1.0, &mut rng), true);
                let w = g.leaf(Tensor::rand_normal(&[2, 3 * 3 * 3], 0.0, 0.5, &mut rng), true);
                let b = g.leaf(Tensor::rand_normal(&[2], 0.0, 0.5, &mut rng), true);
                let y = g.conv2d(x, w, b, 3, 3, stride).unwrap();
                let seed = Tensor::rand_normal(g.shape(y), 0.0, 1.0, &mut rng);
                let e = vjp_fd_check(&mut g, y, &seed, &[x, w, b], 1e-5, None).unwrap();
                assert!(e < 1e-4, "conv2d stride {stride}: {e}");
            }
            // maxpool on 4×4 (even) and 5×5 (odd ⇒ SAME padding)
            for hw in [4, 5] {
                let mut g = Graph::new();
                let x = g.leaf(Tensor::rand_normal(&[2, hw, hw, 2], 0.0, 1.0, &mut rng), true);
                let y = g.maxpool2x2(x).unwrap();
                let seed = Tensor::rand_normal(g.shape(y), 0.0, 1.0, &mut rng);
                let e = vjp_fd_check(&mut g, y, &seed, &[x], 1e-5, None).unwrap();
                assert!(e < 1e-4, "maxpool {hw}: {e}");
            }
            // batchnorm, train and infer
            {
                let mut g = Graph::new();
                let x = g.leaf(Tensor::rand_normal(&[4, 4], 0.0, 2.0, &mut rng), true);
                let gamma = g.leaf(Tensor::rand_uniform(&[4], 0.5, 1.5, &mut rng), true);
                let beta = g.leaf(Tensor::rand_normal(&[4], 0.0, 0.5, &mut rng), true);
                let y = g.batch_norm(x, gamma, beta, 1e-5, BnMode::Train).unwrap();
                let seed = Tensor::rand_normal(&[4, 4], 0.0, 1.0, &mut rng);
                let e = vjp_fd_check(&mut g, y, &seed, &[x, gamma, beta], 1e-5, None).unwrap();
                assert!(e < 1e-4, "batchnorm train: {e}");

                let mut g = Graph::new();
                let x = g.leaf(Tensor::rand_normal(&[4, 4], 0.0, 2.0, &mut rng), true);
                let gamma = g.leaf(Tensor::rand_uniform(&[4], 0.5, 1.5, &mut rng), true);
                let beta = g.leaf(Tensor::rand_normal(&[4], 0.0, 0.5, &mut rng), true);
                let mode = BnMode::Infer { mean: vec![0.1, -0.2, 0.3, 0.0], var: vec![1.0, 0.5, 2.0, 1.5] };
                let y = g.batch_norm(x, gamma, beta, 1e-5, mode).unwrap();
                let seed = Tensor::rand_normal(&[4, 4], 0.0, 1.0, &mut rng);
                let e = vjp_fd_check(&mut g, y, &seed, &[x, gamma, beta], 1e-5, None).unwrap();
                assert!(e < 1e-4, "batchnorm infer: {e}");
            }
            // log_softmax + nll
            {
                let mut g = Graph::new();
                let x = g.leaf(Tensor::rand_normal(&[3, 5], 0.0, 2.0, &mut rng), true);
                let lp = g.log_softmax(x).unwrap();
                let y = g.nll(lp, vec![0, 3, 2]).unwrap();
                let e = vjp_fd_check(&mut g, y, &Tensor::scalar(1.0), &[x], 1e-5, None).unwrap();
                assert!(e < 1e-4, "log_softmax+nll: {e}");
            }
            // pairwise distances and nearest-neighbor distances
            {
                let mut g = Graph::new();
                let x = g.leaf(Tensor::rand_normal(&[6, 3], 0.0, 1.0, &mut rng), true);
                let y = g.pairwise_sq_dist(x).unwrap();
                let seed = Tensor::rand_normal(&[6, 6], 0.0, 1.0, &mut rng);
                let e = vjp_fd_check(&mut g, y, &seed, &[x], 1e-5, None).unwrap();
                assert!(e < 1e-4, "pairwise_sq_dist: {e}");

                let mut g = Graph::new();
                let x = g.leaf(Tensor::rand_normal(&[6, 3], 0.0, 1.0, &mut rng), true);
                let y = g.nearest_sq_dist(x, Some(vec![0, 2, 5]), 1e-12).unwrap();
                let seed = Tensor::rand_normal(&[3], 0.0, 1.0, &mut rng);
                let e = vjp_fd_check(&mut g, y, &seed, &[x], 1e-5, None).unwrap();
                assert!(e < 1e-4, "nearest_sq_dist: {e}");
            }
            // remaining elementwise / structural ops in one composite graph
            {
                let mut g = Graph::new();
                let x = g.leaf(Tensor::rand_uniform(&[3, 6], 0.5, 2.0, &mut rng), true);
                let l = g.log(x);
                let e1 = g.exp(l);
                let p = g.pow_const(e1, 1.7);
                let s = g.scale(p, 0.3);
                let a = g.add_const(s, 0.2);
                let lr = g.leaky_relu(a, 0.1);
                let seg = g.seg_sum_sq(lr, vec![(0, 2), (2, 5)]).unwrap();
                let sa = g.sum_axis(seg, 1).unwrap();
                let y = g.mean(sa);
                let e = vjp_fd_check(&mut g, y, &Tensor::scalar(1.0), &[x], 1e-5, None).unwrap();
                assert!(e < 1e-4, "composite chain: {e}");
            }
            // concat / slice / gather / reshape / sub_from_cols / scale_cols_by / sq_norm
            {
                let mut g = Graph::new();
                let a = g.leaf(Tensor::rand_normal(&[3, 2], 0.0, 1.0, &mut rng), true);
                let b = g.leaf(Tensor::rand_normal(&[3, 4], 0.0, 1.0, &mut rng), true);
                let cat = g.concat(&[a, b], 1).unwrap();
                let f = g.leaf(Tensor::rand_uniform(&[3, 2], 0.5, 1.5, &mut rng), true);
                let map = vec![Some(0), None, Some(1), Some(1), None, Some(0)];
                let scaled = g.scale_cols_by(cat, f, map).unwrap();
                let v = g.leaf(Tensor::rand_normal(&[3], 0.0, 1.0, &mut rng), true);
                let sub = g.sub_from_cols(scaled, v, vec![1, 4]).unwrap();
                let gat = g.gather_cols(sub, vec![0, 2, 2, 5]).unwrap();
                let sl = g.slice(gat, 1, 1, 4).unwrap();
                let rs = g.reshape(sl, vec![9]).unwrap();
                let sl2 = g.slice(rs, 0, 2, 8).unwrap();
                let y = g.sq_norm(sl2);
                let e = vjp_fd_check(&mut g, y, &Tensor::scalar(1.0), &[a, b, f, v], 1e-5, None).unwrap();
                assert!(e < 1e-4, "structural chain: {e}");
            }
        }
    }

    #[test]
    fn multi_seed_injection_accumulates() {
        // Seeding two interior consumers equals seeding the sum downstream.
        let mut rng = stream(9, "seed");
        let xt = Tensor::rand_normal(&[3, 3], 0.0, 1.0, &mut rng);
        let st = Tensor::rand_normal(&[3, 3], 0.0, 1.0, &mut rng);

        let mut g = Graph::new();
        let x = g.leaf(xt.clone(), true);
        let y1 = g.mul(x, x).unwrap();
        let y2 = g.scale(x, 3.0);
        g.eval().unwrap();
        let grads = g
            .backward(vec![(y1, st.clone()), (y2, st.clone())])
            .unwrap();
        let got = grads.get(x).unwrap().clone();

        let mut g2 = Graph::new();
        let x2 = g2.leaf(xt.clone(), true);
        let y1b = g2.mul(x2, x2).unwrap();
        let y2b = g2.scale(x2, 3.0);
        let tot = g2.add(y1b, y2b).unwrap();
        g2.eval().unwrap();
        let grads2 = g2.backward(vec![(tot, st)]).unwrap();
        let want = grads2.get(x2).unwrap();
        for (a, b) in got.data().iter().zip(want.data().iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn nearest_sq_dist_detects_collapse() {
        let mut g = Graph::new();
        let x = g.leaf(t2(3, 2, vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0]), false);
        let y = g.nearest_sq_dist(x, None, 1e-12).unwrap();
        let _ = y;
        match g.eval() {
            Err(Error::CollapsedSamples { .. }) => {}
            other => panic!("expected collapse, got {other:?}"),
        }
    }

    #[test]
    fn backward_requires_eval() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(1.0), true);
        let y = g.scale(x, 2.0);
        match g.backward(vec![(y, Tensor::scalar(1.0))]) {
            Err(Error::Graph(_)) => {}
            other => panic!("expected graph misuse error, got {other:?}"),
        }
    }

    #[test]
    fn seed_shape_must_match() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[2, 2]), true);
        let y = g.scale(x, 2.0);
        g.eval().unwrap();
        assert!(g.backward(vec![(y, Tensor::scalar(1.0))]).is_err());
    }

    #[test]
    fn same_padding_splits_ties_bottom_right() {
        // H=4, k=2, stride 2 → no padding; H=4, k=3, stride 2: out=2,
        // total=(2-1)*2+3-4=1 → pad_t=0, extra row at the bottom.
        assert_eq!(same_pad_before(4, 2, 2), 0);
        assert_eq!(same_pad_before(4, 3, 2), 0);
        // H=5, k=5, stride 1: total=4 → 2 before, 2 after.
        assert_eq!(same_pad_before(5, 5, 1), 2);
    }
}
