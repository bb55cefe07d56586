//! The target network `T(x;θ)`: architecture description, flat-θ ↔
//! per-filter layout, forward evaluation with externally supplied weights,
//! and the target-side losses.
//!
//! Dense layers are treated as convolutions whose receptive field is the
//! whole previous layer, so every layer is a bank of "filters" and each
//! filter block carries its bias as the last element.

use crate::data::{Dataset, GaussianMixture};
use crate::error::{Error, Result};
use crate::tensor::{Graph, NodeId, Tensor};

// ---------------------------------------------------------------------------
// Architecture
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    /// 5×5-style convolution, stride 1, 'SAME' padding.
    Conv { kh: usize, kw: usize },
    /// Fully connected layer over the flattened previous output.
    Dense,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Layer {
    pub kind: LayerKind,
    /// Output channels (conv) or units (dense).
    pub filters: usize,
    /// Leaky-ReLU slope after the layer; `None` = no activation (logits).
    pub activation: Option<f64>,
    /// 2×2 stride-2 'SAME' max pool after the activation.
    #[serde(default)]
    pub pool: bool,
}

/// Architecture of the target network. The final layer must be the logits
/// layer (its filter count = class count); a row-wise softmax follows it.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchDescriptor {
    /// Input extents: height, width, channels.
    pub input: (usize, usize, usize),
    pub layers: Vec<Layer>,
}

/// Per-layer slice of the flat weight vector.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerLayout {
    /// Offset of the layer's first filter block in the flat vector.
    pub offset: usize,
    pub filters: usize,
    /// Elements per filter block, bias included (the bias is last).
    pub block: usize,
    /// Channel count of the layer's input, for mapping a weight position to
    /// the input channel it reads: position `p` (within the non-bias part of
    /// a block) reads channel `p % sym_channels`.
    pub sym_channels: usize,
}

/// Complete partition of the flat weight vector into filter blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub layers: Vec<LayerLayout>,
    pub total: usize,
}

impl Layout {
    /// Absolute range of filter `i` of layer `l` (bias at `end-1`).
    pub fn filter_range(&self, l: usize, i: usize) -> std::ops::Range<usize> {
        let ll = &self.layers[l];
        let start = ll.offset + i * ll.block;
        start..start + ll.block
    }

    /// Absolute indices, across all filter blocks of layer `l`, of the
    /// weights reading input channel `ch` (biases excluded). These are the
    /// positions that compensate when channel `ch`'s producing filter is
    /// rescaled.
    pub fn incoming_cols(&self, l: usize, ch: usize) -> Vec<usize> {
        let ll = &self.layers[l];
        let mut cols = Vec::new();
        for f in 0..ll.filters {
            let start = ll.offset + f * ll.block;
            let mut p = ch;
            while p < ll.block - 1 {
                cols.push(start + p);
                p += ll.sym_channels;
            }
        }
        cols
    }

    /// Absolute indices of the last layer's bias elements.
    pub fn last_layer_bias_cols(&self) -> Vec<usize> {
        let l = self.layers.len() - 1;
        let ll = &self.layers[l];
        (0..ll.filters).map(|f| ll.offset + f * ll.block + ll.block - 1).collect()
    }
}

impl ArchDescriptor {
    /// The Appendix-style 28×28 grayscale classifier: two 5×5 conv+pool
    /// stages (32 and 16 filters), a dense layer of 8, and 10 logits.
    pub fn mnist() -> ArchDescriptor {
        ArchDescriptor {
            input: (28, 28, 1),
            layers: vec![
                Layer { kind: LayerKind::Conv { kh: 5, kw: 5 }, filters: 32, activation: Some(0.0), pool: true },
                Layer { kind: LayerKind::Conv { kh: 5, kw: 5 }, filters: 16, activation: Some(0.0), pool: true },
                Layer { kind: LayerKind::Dense, filters: 8, activation: Some(0.0), pool: false },
                Layer { kind: LayerKind::Dense, filters: 10, activation: None, pool: false },
            ],
        }
    }

    pub fn classes(&self) -> usize {
        self.layers.last().map(|l| l.filters).unwrap_or(0)
    }

    /// Canonical one-line description (hashed into bank files).
    pub fn canonical_string(&self) -> String {
        let mut s = format!("in:{}x{}x{}", self.input.0, self.input.1, self.input.2);
        for l in &self.layers {
            let kind = match l.kind {
                LayerKind::Conv { kh, kw } => format!("conv{kh}x{kw}"),
                LayerKind::Dense => "dense".to_string(),
            };
            let act = match l.activation {
                Some(a) => format!("{a}"),
                None => "-".to_string(),
            };
            s.push_str(&format!("|{kind}:{}:act{act}:pool{}", l.filters, u8::from(l.pool)));
        }
        s
    }

    /// Shape of each layer's input as `(height, width, channels)`, with the
    /// network input first. Validates channel compatibility.
    fn input_shapes(&self) -> Result<Vec<(usize, usize, usize)>> {
        if self.layers.is_empty() {
            return Err(Error::InvalidArgument("architecture needs ≥1 layer".into()));
        }
        let mut shapes = vec![self.input];
        let (mut h, mut w) = (self.input.0, self.input.1);
        let mut c;
        for (i, l) in self.layers.iter().enumerate() {
            match l.kind {
                LayerKind::Conv { kh, kw } => {
                    if kh == 0 || kw == 0 || l.filters == 0 {
                        return Err(Error::InvalidArgument(format!("layer {i}: empty kernel or filter bank")));
                    }
                    c = l.filters;
                }
                LayerKind::Dense => {
                    if l.filters == 0 {
                        return Err(Error::InvalidArgument(format!("layer {i}: dense layer of width 0")));
                    }
                    if l.pool {
                        return Err(Error::InvalidArgument(format!("layer {i}: pooling after a dense layer")));
                    }
                    (h, w, c) = (1, 1, l.filters);
                }
            }
            if l.pool {
                h = h.div_ceil(2);
                w = w.div_ceil(2);
            }
            shapes.push((h, w, c));
        }
        Ok(shapes)
    }

    /// The flat-θ partition into per-layer, per-filter blocks.
    pub fn layout(&self) -> Result<Layout> {
        let shapes = self.input_shapes()?;
        let mut layers = Vec::with_capacity(self.layers.len());
        let mut offset = 0;
        for (i, l) in self.layers.iter().enumerate() {
            let (h, w, c) = shapes[i];
            let (weights, sym_channels) = match l.kind {
                LayerKind::Conv { kh, kw } => (kh * kw * c, c),
                LayerKind::Dense => (h * w * c, c),
            };
            let block = weights + 1;
            layers.push(LayerLayout { offset, filters: l.filters, block, sym_channels });
            offset += l.filters * block;
        }
        Ok(Layout { layers, total: offset })
    }
}

/// Total weight count of the target network (biases included).
pub fn arch_weight_count(arch: &ArchDescriptor) -> Result<usize> {
    Ok(arch.layout()?.total)
}

// ---------------------------------------------------------------------------
// Weight vectors
// ---------------------------------------------------------------------------

/// A flat parameter vector for a target architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightVector {
    pub flat: Tensor,
    pub gauge_fixed: bool,
}

impl WeightVector {
    pub fn new(flat: Tensor) -> WeightVector {
        WeightVector { flat, gauge_fixed: false }
    }

    pub fn len(&self) -> usize {
        self.flat.numel()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Split a flat vector into per-layer, per-filter blocks (bias last in each
/// block).
pub fn unflatten(w: &WeightVector, arch: &ArchDescriptor) -> Result<Vec<Vec<Vec<f64>>>> {
    let layout = arch.layout()?;
    if w.len() != layout.total {
        return Err(Error::ShapeMismatch {
            op: "unflatten".into(),
            detail: format!("θ has {} elements, architecture needs {}", w.len(), layout.total),
        });
    }
    let data = w.flat.data();
    let mut out = Vec::with_capacity(layout.layers.len());
    for (l, ll) in layout.layers.iter().enumerate() {
        let mut filters = Vec::with_capacity(ll.filters);
        for i in 0..ll.filters {
            filters.push(data[layout.filter_range(l, i)].to_vec());
        }
        out.push(filters);
    }
    Ok(out)
}

/// Inverse of [`unflatten`]; bit-exact round trip.
pub fn flatten(blocks: &[Vec<Vec<f64>>]) -> WeightVector {
    let mut data = Vec::new();
    for layer in blocks {
        for filter in layer {
            data.extend_from_slice(filter);
        }
    }
    let n = data.len();
    WeightVector::new(Tensor::new(vec![n], data).expect("sized by construction"))
}

// ---------------------------------------------------------------------------
// Forward evaluation
// ---------------------------------------------------------------------------

/// Build the forward pass `x, θ → log p(class | x; θ)` into `g`.
///
/// `x` is `[B,H,W,C]`; `theta` is the flat `[total]` weight node. Returns the
/// `[B, classes]` log-probability node (rows log-sum-exp to zero).
pub fn forward_graph(g: &mut Graph, x: NodeId, theta: NodeId, arch: &ArchDescriptor) -> Result<NodeId> {
    let layout = arch.layout()?;
    let shapes = arch.input_shapes()?;
    if g.shape(theta) != [layout.total] {
        return Err(Error::ShapeMismatch {
            op: "forward".into(),
            detail: format!("θ shape {:?}, architecture needs [{}]", g.shape(theta), layout.total),
        });
    }
    let xs = g.shape(x).to_vec();
    if xs.len() != 4 || (xs[1], xs[2], xs[3]) != arch.input {
        return Err(Error::ShapeMismatch {
            op: "forward".into(),
            detail: format!("input shape {:?} vs architecture input {:?}", xs, arch.input),
        });
    }
    let batch = xs[0];
    let mut cur = x;
    for (i, l) in arch.layers.iter().enumerate() {
        let ll = &layout.layers[i];
        let span = g.slice(theta, 0, ll.offset, ll.offset + ll.filters * ll.block)?;
        let mat = g.reshape(span, vec![ll.filters, ll.block])?;
        let wpart = g.slice(mat, 1, 0, ll.block - 1)?;
        let bcol = g.slice(mat, 1, ll.block - 1, ll.block)?;
        cur = match l.kind {
            LayerKind::Conv { kh, kw } => {
                let b = g.reshape(bcol, vec![ll.filters])?;
                g.conv2d(cur, wpart, b, kh, kw, 1)?
            }
            LayerKind::Dense => {
                let (h, w, c) = shapes[i];
                let flat = g.reshape(cur, vec![batch, h * w * c])?;
                let y = g.matmul_flags(flat, false, wpart, true)?;
                let b = g.reshape(bcol, vec![ll.filters])?;
                let y = g.add(y, b)?;
                let (oh, ow, oc) = (1usize, 1usize, l.filters);
                g.reshape(y, vec![batch, oh, ow, oc])?
            }
        };
        if let Some(slope) = l.activation {
            cur = g.leaky_relu(cur, slope);
        }
        if l.pool {
            cur = g.maxpool2x2(cur)?;
        }
    }
    let (h, w, c) = *shapes.last().expect("≥1 layer");
    debug_assert_eq!((h, w), (1, 1), "final layer must collapse spatial dims");
    let logits = g.reshape(cur, vec![batch, c])?;
    g.log_softmax(logits)
}

/// Evaluate the network on a batch without keeping the graph.
pub fn forward(x: &Tensor, w: &WeightVector, arch: &ArchDescriptor) -> Result<Tensor> {
    let mut g = Graph::new();
    let xn = g.constant(x.clone());
    let tn = g.constant(w.flat.clone());
    let logp = forward_graph(&mut g, xn, tn, arch)?;
    g.eval()?;
    Ok(g.value(logp).clone())
}

/// Negative mean log-likelihood of the labels under row-wise
/// log-probabilities.
pub fn class_loss(logp: &Tensor, labels: &[usize]) -> Result<f64> {
    let s = logp.shape();
    if s.len() != 2 || labels.len() != s[0] {
        return Err(Error::ShapeMismatch {
            op: "class_loss".into(),
            detail: format!("logp {:?} vs {} labels", s, labels.len()),
        });
    }
    let c = s[1];
    let mut acc = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::InvalidArgument(format!("label {y} out of range for {c} classes")));
        }
        acc -= logp.data()[i * c + y];
    }
    Ok(acc / labels.len() as f64)
}

/// Index of the row maximum (ties break toward the lower index).
pub fn argmax_row(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of rows whose argmax matches the label.
pub fn accuracy(logp: &Tensor, labels: &[usize]) -> f64 {
    let c = logp.shape()[1];
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| argmax_row(&logp.data()[i * c..(i + 1) * c]) == y)
        .count();
    hits as f64 / labels.len() as f64
}

/// Accuracy of a weight vector over a dataset, evaluated in fixed-size
/// chunks to bound memory.
pub fn dataset_accuracy(w: &WeightVector, arch: &ArchDescriptor, ds: &Dataset, chunk: usize) -> Result<f64> {
    let mut hits = 0usize;
    let mut seen = 0usize;
    while seen < ds.len() {
        let idx: Vec<usize> = (seen..(seen + chunk).min(ds.len())).collect();
        let (x, labels) = ds.batch(&idx);
        let logp = forward(&x, w, arch)?;
        let c = logp.shape()[1];
        hits += labels
            .iter()
            .enumerate()
            .filter(|&(i, &y)| argmax_row(&logp.data()[i * c..(i + 1) * c]) == y)
            .count();
        seen += idx.len();
    }
    Ok(hits as f64 / ds.len() as f64)
}

// ---------------------------------------------------------------------------
// Toy loss
// ---------------------------------------------------------------------------

/// Build `−mean_j density(points_j)` into the graph for `points: [B,2]`.
pub fn toy_loss_graph(g: &mut Graph, points: NodeId, gm: &GaussianMixture) -> Result<NodeId> {
    let s = g.shape(points).to_vec();
    if s.len() != 2 || s[1] != 2 {
        return Err(Error::ShapeMismatch {
            op: "toy_loss".into(),
            detail: format!("need [B,2] points, got {:?}", s),
        });
    }
    let mut density: Option<NodeId> = None;
    for (c, (inv, norm)) in gm.cached() {
        let mu = g.constant(Tensor::new(vec![2], c.mean.to_vec())?);
        let d = g.sub(points, mu)?;
        let a = g.constant(Tensor::new(vec![2, 2], vec![inv[0][0], inv[0][1], inv[1][0], inv[1][1]])?);
        let da = g.matmul(d, a)?;
        let quad2 = g.mul(da, d)?;
        let q = g.sum_axis(quad2, 1)?;
        let e = g.scale(q, -0.5);
        let e = g.exp(e);
        let term = g.scale(e, *norm);
        density = Some(match density {
            None => term,
            Some(acc) => g.add(acc, term)?,
        });
    }
    let dens = density.expect("≥1 component");
    let m = g.mean(dens);
    Ok(g.scale(m, -1.0))
}

/// `−mean density` of a batch of 2-D points.
pub fn toy_loss(points: &Tensor, gm: &GaussianMixture) -> Result<f64> {
    let mut g = Graph::new();
    let p = g.constant(points.clone());
    let l = toy_loss_graph(&mut g, p, gm)?;
    g.eval()?;
    Ok(g.value(l).item())
}

// ---------------------------------------------------------------------------
// Direct training baseline
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct DirectTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for DirectTrainConfig {
    fn default() -> Self {
        DirectTrainConfig { steps: 3000, batch_size: 64, learning_rate: 1e-3 }
    }
}

/// Glorot-uniform initialization of a flat target weight vector (biases 0).
pub fn init_weights(arch: &ArchDescriptor, rng: &mut impl rand::Rng) -> Result<WeightVector> {
    let layout = arch.layout()?;
    let mut data = vec![0.0; layout.total];
    for ll in &layout.layers {
        let fan_in = ll.block - 1;
        let fan_out = ll.filters;
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        for f in 0..ll.filters {
            let start = ll.offset + f * ll.block;
            for v in data[start..start + ll.block - 1].iter_mut() {
                *v = rng.gen_range(-bound..bound);
            }
        }
    }
    Ok(WeightVector::new(Tensor::new(vec![layout.total], data)?))
}

/// Standard single-network supervised training (the comparison baseline).
/// Returns the final weights and the per-step loss curve.
pub fn train_target_direct(
    arch: &ArchDescriptor,
    ds: &Dataset,
    cfg: &DirectTrainConfig,
    rng: &mut impl rand::Rng,
) -> Result<(WeightVector, Vec<f64>)> {
    let mut theta = init_weights(arch, rng)?;
    let mut adam = crate::trainer::Adam::new(crate::trainer::AdamConfig {
        learning_rate: cfg.learning_rate,
        ..Default::default()
    });
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let (x, labels) = crate::data::minibatch(ds, cfg.batch_size, rng)?;
        let mut g = Graph::new();
        let xn = g.constant(x);
        let tn = g.leaf(theta.flat.clone(), true);
        let logp = forward_graph(&mut g, xn, tn, arch)?;
        let loss = g.nll(logp, labels)?;
        g.eval().map_err(|e| match e {
            Error::NonFinite { .. } => Error::Diverged { step, detail: "non-finite training loss".into() },
            other => other,
        })?;
        losses.push(g.value(loss).item());
        let mut grads = g.backward(vec![(loss, Tensor::scalar(1.0))])?;
        let grad = grads.take(tn).expect("θ requires grad");
        adam.step_inplace(&mut theta.flat, &grad, 0)?;
    }
    Ok((theta, losses))
}
