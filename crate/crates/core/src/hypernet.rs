//! The generator G(z;φ): an extractor network E maps the latent z to one
//! code per weight-generator invocation, and a per-target-layer weight
//! generator W_l (shared across that layer's filters) maps each code to one
//! filter block. The final target layer is produced by a single invocation
//! covering the whole layer. A direct MLP variant generates low-dimensional
//! samples without the extractor/generator split (the toy setting).

use crate::error::{Error, Result};
use crate::target::{ArchDescriptor, WeightVector};
use crate::tensor::{BnMode, Graph, NodeId, Tensor};

pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZDistribution {
    /// Uniform on [−1, 1] per coordinate.
    Uniform,
    /// Standard normal per coordinate.
    Normal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch-norm uses batch statistics; parameters enter the graph as
    /// differentiable leaves.
    Train,
    /// Batch-norm uses stored moving statistics; parameters are constants.
    Infer,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case", tag = "kind")]
pub enum HyperNetConfig {
    /// Extractor + shared per-layer weight generators.
    Structured {
        z_dim: usize,
        z_dist: ZDistribution,
        /// Code vector length per weight-generator invocation.
        code_size: usize,
        extractor_hidden: Vec<usize>,
        /// Hidden widths of each target layer's weight generator.
        generator_hidden: Vec<Vec<usize>>,
        activation_slope: f64,
        /// Batch-normalize every layer except each sub-network's output.
        batch_norm: bool,
        bias_free: bool,
    },
    /// Single MLP from z straight to the output vector.
    DirectMlp {
        z_dim: usize,
        z_dist: ZDistribution,
        hidden: Vec<usize>,
        out_dim: usize,
        activation_slope: f64,
        bias_free: bool,
    },
}

impl HyperNetConfig {
    /// The full-scale classifier generator: 300-D uniform z, 15-element
    /// codes, extractor 300→300→300→855, weight generators
    /// 15→40→40→26, 15→100→100→801, 15→100→100→785, 15→60→60→90.
    pub fn mnist_default() -> HyperNetConfig {
        HyperNetConfig::Structured {
            z_dim: 300,
            z_dist: ZDistribution::Uniform,
            code_size: 15,
            extractor_hidden: vec![300, 300],
            generator_hidden: vec![vec![40, 40], vec![100, 100], vec![100, 100], vec![60, 60]],
            activation_slope: 0.1,
            batch_norm: true,
            bias_free: true,
        }
    }

    /// The toy sampler: 1-D uniform z through hidden layers 30, 10, 10 to a
    /// 2-D point.
    pub fn toy_default() -> HyperNetConfig {
        HyperNetConfig::DirectMlp {
            z_dim: 1,
            z_dist: ZDistribution::Uniform,
            hidden: vec![30, 10, 10],
            out_dim: 2,
            activation_slope: 0.1,
            bias_free: false,
        }
    }

    pub fn z_dim(&self) -> usize {
        match self {
            HyperNetConfig::Structured { z_dim, .. } | HyperNetConfig::DirectMlp { z_dim, .. } => *z_dim,
        }
    }

    pub fn z_dist(&self) -> ZDistribution {
        match self {
            HyperNetConfig::Structured { z_dist, .. } | HyperNetConfig::DirectMlp { z_dist, .. } => *z_dist,
        }
    }
}

/// Batch-norm state for one hidden layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BnState {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub moving_mean: Vec<f64>,
    pub moving_var: Vec<f64>,
}

/// One sub-network (the extractor, a weight generator, or the direct MLP).
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    /// Layer widths, input first.
    pub widths: Vec<usize>,
    /// One `[in, out]` matrix per layer.
    pub mats: Vec<Tensor>,
    /// One `[out]` bias per layer when not bias-free.
    pub biases: Option<Vec<Tensor>>,
    /// One entry per hidden layer when batch-norm is on.
    pub bn: Option<Vec<BnState>>,
    pub activation_slope: f64,
}

/// All generator parameters φ.
#[derive(Clone, Debug, PartialEq)]
pub struct HyperNetParams {
    pub cfg: HyperNetConfig,
    /// Structured: extractor first, then one weight generator per target
    /// layer. DirectMlp: a single net.
    pub nets: Vec<Mlp>,
    /// Weight-generator invocations per target layer (filter count, except 1
    /// for the final layer). Empty for DirectMlp.
    pub invocations: Vec<usize>,
}

fn glorot(shape_in: usize, shape_out: usize, rng: &mut impl rand::Rng) -> Tensor {
    let bound = (6.0 / (shape_in + shape_out) as f64).sqrt();
    Tensor::rand_uniform(&[shape_in, shape_out], -bound, bound, rng)
}

fn build_mlp(widths: Vec<usize>, bias_free: bool, batch_norm: bool, slope: f64, rng: &mut impl rand::Rng) -> Mlp {
    let layers = widths.len() - 1;
    let mats: Vec<Tensor> = (0..layers).map(|i| glorot(widths[i], widths[i + 1], rng)).collect();
    let biases = (!bias_free).then(|| (0..layers).map(|i| Tensor::zeros(&[widths[i + 1]])).collect());
    let bn = batch_norm.then(|| {
        (0..layers.saturating_sub(1))
            .map(|i| BnState {
                gamma: Tensor::full(&[widths[i + 1]], 1.0),
                beta: Tensor::zeros(&[widths[i + 1]]),
                moving_mean: vec![0.0; widths[i + 1]],
                moving_var: vec![1.0; widths[i + 1]],
            })
            .collect()
    });
    Mlp { widths, mats, biases, bn, activation_slope: slope }
}

impl Mlp {
    fn trainable_count(&self) -> usize {
        let mut n: usize = self.mats.iter().map(Tensor::numel).sum();
        if let Some(bs) = &self.biases {
            n += bs.iter().map(Tensor::numel).sum::<usize>();
        }
        if let Some(bn) = &self.bn {
            n += bn.iter().map(|s| s.gamma.numel() + s.beta.numel()).sum::<usize>();
        }
        n
    }
}

/// Construct and initialize φ for a configuration. Structured configs are
/// validated against the target architecture (which supplies the filter
/// counts and block sizes); the direct MLP ignores `arch`.
pub fn build(cfg: &HyperNetConfig, arch: Option<&ArchDescriptor>, rng: &mut impl rand::Rng) -> Result<HyperNetParams> {
    match cfg {
        HyperNetConfig::Structured {
            z_dim,
            code_size,
            extractor_hidden,
            generator_hidden,
            activation_slope,
            batch_norm,
            bias_free,
            ..
        } => {
            let arch = arch.ok_or_else(|| {
                Error::InvalidArgument("structured generator needs a target architecture".into())
            })?;
            let layout = arch.layout()?;
            let m = layout.layers.len();
            if *z_dim == 0 || *code_size == 0 {
                return Err(Error::InvalidArgument("z_dim and code_size must be ≥ 1".into()));
            }
            if generator_hidden.len() != m {
                return Err(Error::InvalidArgument(format!(
                    "{} weight-generator specs for {m} target layers",
                    generator_hidden.len()
                )));
            }
            let invocations: Vec<usize> =
                (0..m).map(|l| if l + 1 == m { 1 } else { layout.layers[l].filters }).collect();
            let total_codes: usize = invocations.iter().sum();
            let mut nets = Vec::with_capacity(1 + m);
            let mut widths = vec![*z_dim];
            widths.extend_from_slice(extractor_hidden);
            widths.push(total_codes * code_size);
            nets.push(build_mlp(widths, *bias_free, *batch_norm, *activation_slope, rng));
            for l in 0..m {
                let out = if l + 1 == m {
                    layout.layers[l].filters * layout.layers[l].block
                } else {
                    layout.layers[l].block
                };
                let mut widths = vec![*code_size];
                widths.extend_from_slice(&generator_hidden[l]);
                widths.push(out);
                nets.push(build_mlp(widths, *bias_free, *batch_norm, *activation_slope, rng));
            }
            Ok(HyperNetParams { cfg: cfg.clone(), nets, invocations })
        }
        HyperNetConfig::DirectMlp { z_dim, hidden, out_dim, activation_slope, bias_free, .. } => {
            if *z_dim == 0 || *out_dim == 0 {
                return Err(Error::InvalidArgument("z_dim and out_dim must be ≥ 1".into()));
            }
            let mut widths = vec![*z_dim];
            widths.extend_from_slice(hidden);
            widths.push(*out_dim);
            let net = build_mlp(widths, *bias_free, false, *activation_slope, rng);
            Ok(HyperNetParams { cfg: cfg.clone(), nets: vec![net], invocations: vec![] })
        }
    }
}

/// Piecewise-linear interpolant `c + m·z + Σ γ_k·|z − t_k|` of samples
/// `f(t_k)` at ascending nodes. Returns `(c, m, γ)`.
fn hinge_interpolant(nodes: &[f64], values: &[f64]) -> (f64, f64, Vec<f64>) {
    let k = nodes.len();
    // Segment slopes between consecutive nodes, extended flat—sloped at the
    // ends by repeating the boundary segments.
    let interior: Vec<f64> =
        (0..k - 1).map(|j| (values[j + 1] - values[j]) / (nodes[j + 1] - nodes[j])).collect();
    let mut slopes = Vec::with_capacity(k + 1);
    slopes.push(interior[0]);
    slopes.extend_from_slice(&interior);
    slopes.push(interior[k - 2]);
    let m = 0.5 * (slopes[0] + slopes[k]);
    let gamma: Vec<f64> = (1..=k).map(|j| 0.5 * (slopes[j] - slopes[j - 1])).collect();
    let mut c = values[0] - m * nodes[0];
    for (j, &g) in gamma.iter().enumerate() {
        c -= g * (nodes[0] - nodes[j]).abs();
    }
    (c, m, gamma)
}

/// Re-initialize a 1-D-latent direct-MLP generator in place so that its
/// image over z ∈ [−1, 1] is an open loop of the given radius (a random
/// rotation and orientation of `R·(cos, sin)(0.95·π·z)`), plus small
/// uniform weight noise so distinct seeds stay distinct.
///
/// Curve-valued models trained with purely local update rules keep the
/// topology they start with, so the initial curve should already sweep the
/// region the target distribution occupies — the same reason
/// self-organizing maps are initialized to span the data domain. The loop
/// is realized exactly: the first layer pairs hinge units `(z − t_k)⁺`,
/// `(t_k − z)⁺` at evenly spaced kinks, the second layer assembles the
/// piecewise-linear interpolants of the two output coordinates, and later
/// hidden layers carry them by offset passthrough (pre-activations kept
/// positive, so the leaky-relu stays in its linear branch).
///
/// Returns false — leaving the standard initialization untouched — when the
/// network cannot carry the construction: not a direct MLP, latent or
/// output dimension ≠ 1/2, bias-free, no hidden layer, fewer than 4 units
/// in the first hidden layer, or fewer than 2 in a later one.
pub fn init_spanning_loop(params: &mut HyperNetParams, radius: f64, rng: &mut impl rand::Rng) -> bool {
    let (hidden, slope) = match &params.cfg {
        HyperNetConfig::DirectMlp {
            z_dim: 1,
            hidden,
            out_dim: 2,
            activation_slope,
            bias_free: false,
            ..
        } if !hidden.is_empty() && hidden[0] >= 4 && hidden.iter().all(|&h| h >= 2) => {
            (hidden.clone(), *activation_slope)
        }
        _ => return false,
    };
    if !(radius.is_finite() && radius > 0.0) {
        return false;
    }

    let psi = rng.gen_range(0.0..std::f64::consts::TAU);
    let parity: f64 = if rng.gen::<bool>() { 1.0 } else { -1.0 };
    let omega = 0.95 * std::f64::consts::PI;
    let k = hidden[0] / 2;
    let nodes: Vec<f64> =
        (0..k).map(|j| -1.0 + 2.0 * j as f64 / (k - 1).max(1) as f64).collect();
    let xs: Vec<f64> = nodes.iter().map(|&t| radius * (psi + parity * omega * t).cos()).collect();
    let ys: Vec<f64> = nodes.iter().map(|&t| radius * (psi + parity * omega * t).sin()).collect();
    let (cx, mx, gx) = hinge_interpolant(&nodes, &xs);
    let (cy, my, gy) = hinge_interpolant(&nodes, &ys);

    // Offset keeping every passthrough pre-activation strictly positive.
    let lift = 2.0 * radius + 1.0;
    let net = &mut params.nets[0];
    let widths = net.widths.clone();
    let layers = widths.len() - 1;
    let mut mats: Vec<Vec<f64>> = (0..layers).map(|i| vec![0.0; widths[i] * widths[i + 1]]) .collect();
    let mut biases: Vec<Vec<f64>> = (0..layers).map(|i| vec![0.0; widths[i + 1]]).collect();

    // Layer 1: hinge pairs (z − t_k)⁺ and (t_k − z)⁺.
    for (j, &t) in nodes.iter().enumerate() {
        mats[0][2 * j] = 1.0;
        biases[0][2 * j] = -t;
        mats[0][2 * j + 1] = -1.0;
        biases[0][2 * j + 1] = t;
    }
    // Layer 2, units 0/1: assemble x + lift and y + lift from the hinges.
    // |z − t_k| = (u⁺ + u⁻)/(1 − α), and z = t_0 + (u⁺_0 − u⁻_0)/(1 + α).
    let stride = widths[2];
    for (unit, (c, m, gamma)) in [(0usize, (cx, mx, &gx)), (1usize, (cy, my, &gy))] {
        for (j, &g) in gamma.iter().enumerate() {
            mats[1][(2 * j) * stride + unit] += g / (1.0 - slope);
            mats[1][(2 * j + 1) * stride + unit] += g / (1.0 - slope);
        }
        mats[1][unit] += m / (1.0 + slope);
        mats[1][stride + unit] -= m / (1.0 + slope);
        biases[1][unit] = c + m * nodes[0] + lift;
    }
    // Later hidden layers: identity passthrough of units 0 and 1.
    for l in 2..layers {
        let w = widths[l + 1];
        mats[l][0] = 1.0;
        mats[l][w + 1] = 1.0;
    }
    // Final layer: drop the lift. (When the final layer is layer 1 the loop
    // above wrote nothing and the construction still holds: hidden[0] ≥ 4.)
    let last = layers - 1;
    if last >= 2 {
        let w = widths[last + 1];
        mats[last][0] = 1.0;
        mats[last][w + 1] = 1.0;
        biases[last][0] = -lift;
        biases[last][1] = -lift;
    } else {
        // Two-layer net [1, H, 2]: layer 2 built units 0/1 directly above;
        // rewrite it as the coordinates themselves without the lift.
        biases[1][0] -= lift;
        biases[1][1] -= lift;
    }

    // Small uniform noise on every matrix (a fraction of its Glorot bound)
    // so independent seeds produce distinct generators.
    for (i, mat) in mats.iter_mut().enumerate() {
        let bound = 0.02 * (6.0 / (widths[i] + widths[i + 1]) as f64).sqrt();
        for v in mat.iter_mut() {
            *v += rng.gen_range(-bound..bound);
        }
    }

    for (i, (m, b)) in mats.into_iter().zip(biases).enumerate() {
        net.mats[i] = Tensor::new(vec![widths[i], widths[i + 1]], m)
            .expect("loop init matrix shape");
        if let Some(bs) = net.biases.as_mut() {
            bs[i] = Tensor::new(vec![widths[i + 1]], b).expect("loop init bias shape");
        }
    }
    true
}

/// Rescale each weight generator's output in place so that, at
/// initialization, generated samples match the per-layer weight scale of
/// the target network's own initializer (std √(2/(fan_in+fan_out)), the
/// uniform-Glorot standard deviation `init_weights` uses).
///
/// An uncalibrated generator emits layers whose magnitudes are set by the
/// generator's matrix shapes, not the target layer's fan — an order of
/// magnitude off for deep stacks, which starts optimization from saturated
/// or vanishing activations. Calibrating makes every initial sample behave
/// like an ordinarily initialized target network, the same well-conditioned
/// starting regime direct training enjoys.
///
/// The measurement runs a probe batch in training mode (the regime the
/// optimizer sees) and sets the stored moving statistics to the probe batch
/// statistics so inference-mode generation starts in agreement. Returns
/// false — leaving φ untouched — for non-structured configurations.
pub fn init_generator_scale(
    params: &mut HyperNetParams,
    arch: &ArchDescriptor,
    rng: &mut impl rand::Rng,
) -> Result<bool> {
    if !matches!(params.cfg, HyperNetConfig::Structured { .. }) {
        return Ok(false);
    }
    let probe = 64;
    let z = sample_z(probe, &params.cfg, rng)?;
    let mut g = Graph::new();
    let zn = g.constant(z);
    let gen = generate_graph(&mut g, zn, params, Mode::Train)?;
    g.eval()?;
    let theta = g.value(gen.theta);
    let n = theta.shape()[1];
    let layout = arch.layout()?;

    for (l, ll) in layout.layers.iter().enumerate() {
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        let mut count = 0usize;
        for b in 0..probe {
            let row = &theta.data()[b * n..(b + 1) * n];
            for f in 0..ll.filters {
                let start = ll.offset + f * ll.block;
                for &v in &row[start..start + ll.block - 1] {
                    sum += v;
                    sumsq += v * v;
                    count += 1;
                }
            }
        }
        let mean = sum / count as f64;
        let have = (sumsq / count as f64 - mean * mean).max(0.0).sqrt();
        if have < 1e-12 {
            continue;
        }
        let fan_in = ll.block - 1;
        let fan_out = ll.filters;
        let want = (2.0 / (fan_in + fan_out) as f64).sqrt();
        let factor = want / have;
        // Fold the factor into the last hidden layer's batch-norm scale
        // when there is one: leaky-relu is positively homogeneous, so
        // scaling γ (β starts at 0) scales the generator output exactly —
        // and the output matrix keeps ordinary-sized entries, so optimizer
        // steps stay small relative to the weights they perturb. Without
        // batch norm, scale the (linear) output layer itself.
        let net = &mut params.nets[l + 1];
        match net.bn.as_mut().and_then(|bn| bn.last_mut()) {
            Some(state) => {
                for v in state.gamma.data_mut() {
                    *v *= factor;
                }
                for v in state.beta.data_mut() {
                    *v *= factor;
                }
            }
            None => {
                let li = net.mats.len() - 1;
                for v in net.mats[li].data_mut() {
                    *v *= factor;
                }
                if let Some(bs) = net.biases.as_mut() {
                    for v in bs[li].data_mut() {
                        *v *= factor;
                    }
                }
            }
        }
    }
    params.update_moving(&g, &gen.bn_nodes, 0.0);
    Ok(true)
}

impl HyperNetParams {
    /// Number of trainable parameters (matrices, biases, batch-norm scales
    /// and shifts; moving statistics excluded).
    pub fn param_count(&self) -> usize {
        self.nets.iter().map(Mlp::trainable_count).sum()
    }

    /// Trainable tensors in canonical order (per net: matrices, then
    /// biases, then γ/β per hidden layer).
    pub fn trainable(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for net in &self.nets {
            out.extend(net.mats.iter());
            if let Some(bs) = &net.biases {
                out.extend(bs.iter());
            }
            if let Some(bn) = &net.bn {
                for s in bn {
                    out.push(&s.gamma);
                    out.push(&s.beta);
                }
            }
        }
        out
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for net in &mut self.nets {
            out.extend(net.mats.iter_mut());
            if let Some(bs) = &mut net.biases {
                out.extend(bs.iter_mut());
            }
            if let Some(bn) = &mut net.bn {
                for s in bn {
                    out.push(&mut s.gamma);
                    out.push(&mut s.beta);
                }
            }
        }
        out
    }

    /// Full state as one flat vector: every trainable tensor in canonical
    /// order, then every hidden layer's moving mean and variance.
    pub fn flatten(&self) -> Tensor {
        let mut data = Vec::with_capacity(self.param_count());
        for t in self.trainable() {
            data.extend_from_slice(t.data());
        }
        for net in &self.nets {
            if let Some(bn) = &net.bn {
                for s in bn {
                    data.extend_from_slice(&s.moving_mean);
                    data.extend_from_slice(&s.moving_var);
                }
            }
        }
        let n = data.len();
        Tensor::new(vec![n], data).expect("sized by construction")
    }

    /// Total length of [`flatten`]'s output.
    pub fn state_len(&self) -> usize {
        let moving: usize = self
            .nets
            .iter()
            .filter_map(|n| n.bn.as_ref())
            .flatten()
            .map(|s| s.moving_mean.len() + s.moving_var.len())
            .sum();
        self.param_count() + moving
    }

    /// Restore state written by [`flatten`] into an identically configured
    /// parameter set.
    pub fn load_flat(&mut self, flat: &Tensor) -> Result<()> {
        if flat.shape() != [self.state_len()] {
            return Err(Error::ShapeMismatch {
                op: "load_flat".into(),
                detail: format!("state {:?}, expected [{}]", flat.shape(), self.state_len()),
            });
        }
        let data = flat.data();
        let mut pos = 0;
        for t in self.trainable_mut() {
            let n = t.numel();
            t.data_mut().copy_from_slice(&data[pos..pos + n]);
            pos += n;
        }
        for net in &mut self.nets {
            if let Some(bn) = &mut net.bn {
                for s in bn {
                    let n = s.moving_mean.len();
                    s.moving_mean.copy_from_slice(&data[pos..pos + n]);
                    pos += n;
                    s.moving_var.copy_from_slice(&data[pos..pos + n]);
                    pos += n;
                }
            }
        }
        Ok(())
    }

    /// Fold freshly observed batch statistics into the moving statistics:
    /// `moving ← momentum·moving + (1−momentum)·batch`.
    pub fn update_moving(&mut self, g: &Graph, bn_nodes: &[BnNode], momentum: f64) {
        for rec in bn_nodes {
            let (mean, var) = match g.bn_batch_stats(rec.node) {
                Some(sv) => sv,
                None => continue,
            };
            let state = &mut self.nets[rec.net].bn.as_mut().expect("net has bn")[rec.hidden];
            for (m, &b) in state.moving_mean.iter_mut().zip(mean) {
                *m = momentum * *m + (1.0 - momentum) * b;
            }
            for (v, &b) in state.moving_var.iter_mut().zip(var) {
                *v = momentum * *v + (1.0 - momentum) * b;
            }
        }
    }
}

/// Location of one batch-norm op in a generation graph.
#[derive(Clone, Copy, Debug)]
pub struct BnNode {
    pub net: usize,
    pub hidden: usize,
    pub node: NodeId,
}

/// A generation graph's handles: the output, the parameter leaves (canonical
/// order, train mode only), and the batch-norm ops for statistics harvest.
#[derive(Clone, Debug)]
pub struct Generated {
    pub theta: NodeId,
    pub leaves: Vec<NodeId>,
    pub bn_nodes: Vec<BnNode>,
}

fn mlp_graph(
    g: &mut Graph,
    x: NodeId,
    net: &Mlp,
    net_idx: usize,
    mode: Mode,
    leaves: &mut Vec<NodeId>,
    bn_nodes: &mut Vec<BnNode>,
) -> Result<NodeId> {
    let layers = net.mats.len();
    let mut cur = x;
    let mut param = |g: &mut Graph, t: &Tensor| -> NodeId {
        match mode {
            Mode::Train => {
                let id = g.leaf(t.clone(), true);
                leaves.push(id);
                id
            }
            Mode::Infer => g.constant(t.clone()),
        }
    };
    // Graph leaves must be created in canonical (trainable) order: mats,
    // then biases, then γ/β — collect ids first, then wire the dataflow.
    let mat_ids: Vec<NodeId> = net.mats.iter().map(|t| param(g, t)).collect();
    let bias_ids: Option<Vec<NodeId>> =
        net.biases.as_ref().map(|bs| bs.iter().map(|t| param(g, t)).collect());
    let bn_ids: Option<Vec<(NodeId, NodeId)>> = net
        .bn
        .as_ref()
        .map(|bn| bn.iter().map(|s| (param(g, &s.gamma), param(g, &s.beta))).collect());
    for i in 0..layers {
        cur = g.matmul(cur, mat_ids[i])?;
        if let Some(bias_ids) = &bias_ids {
            cur = g.add(cur, bias_ids[i])?;
        }
        if i + 1 < layers {
            if let (Some(bn), Some(bn_ids)) = (&net.bn, &bn_ids) {
                let bn_mode = match mode {
                    Mode::Train => BnMode::Train,
                    Mode::Infer => BnMode::Infer {
                        mean: bn[i].moving_mean.clone(),
                        var: bn[i].moving_var.clone(),
                    },
                };
                cur = g.batch_norm(cur, bn_ids[i].0, bn_ids[i].1, BN_EPS, bn_mode)?;
                bn_nodes.push(BnNode { net: net_idx, hidden: i, node: cur });
            }
            cur = g.leaky_relu(cur, net.activation_slope);
        }
    }
    Ok(cur)
}

/// Build `G(z;φ)` into the graph for a latent batch `z: [B, z_dim]`.
///
/// Structured configs produce `[B, arch_weight_count]`; the direct MLP
/// produces `[B, out_dim]`.
pub fn generate_graph(g: &mut Graph, z: NodeId, params: &HyperNetParams, mode: Mode) -> Result<Generated> {
    let zs = g.shape(z).to_vec();
    if zs.len() != 2 || zs[1] != params.cfg.z_dim() {
        return Err(Error::ShapeMismatch {
            op: "generate".into(),
            detail: format!("z batch {:?}, config needs [B, {}]", zs, params.cfg.z_dim()),
        });
    }
    let batch = zs[0];
    let has_bn = params.nets.iter().any(|n| n.bn.is_some());
    if mode == Mode::Train && has_bn && batch < 2 {
        return Err(Error::InvalidArgument(
            "training-mode generation needs a z batch of ≥ 2 (batch norm)".into(),
        ));
    }
    let mut leaves = Vec::new();
    let mut bn_nodes = Vec::new();
    match &params.cfg {
        HyperNetConfig::Structured { code_size, .. } => {
            let codes = mlp_graph(g, z, &params.nets[0], 0, mode, &mut leaves, &mut bn_nodes)?;
            let mut parts = Vec::with_capacity(params.invocations.len());
            let mut col = 0;
            for (l, &inv) in params.invocations.iter().enumerate() {
                let width = inv * code_size;
                let span = g.slice(codes, 1, col, col + width)?;
                col += width;
                let rows = g.reshape(span, vec![batch * inv, *code_size])?;
                let net = &params.nets[l + 1];
                let out = mlp_graph(g, rows, net, l + 1, mode, &mut leaves, &mut bn_nodes)?;
                let out_width = *net.widths.last().expect("≥1 layer");
                parts.push(g.reshape(out, vec![batch, inv * out_width])?);
            }
            let theta = g.concat(&parts, 1)?;
            Ok(Generated { theta, leaves, bn_nodes })
        }
        HyperNetConfig::DirectMlp { .. } => {
            let theta = mlp_graph(g, z, &params.nets[0], 0, mode, &mut leaves, &mut bn_nodes)?;
            Ok(Generated { theta, leaves, bn_nodes })
        }
    }
}

/// Generate weight vectors for a latent batch using stored statistics.
pub fn generate(z: &Tensor, params: &HyperNetParams) -> Result<Vec<WeightVector>> {
    let mut g = Graph::new();
    let zn = g.constant(z.clone());
    let gen = generate_graph(&mut g, zn, params, Mode::Infer)?;
    g.eval()?;
    let out = g.value(gen.theta);
    let (b, n) = (out.shape()[0], out.shape()[1]);
    Ok((0..b)
        .map(|i| {
            let row = out.data()[i * n..(i + 1) * n].to_vec();
            WeightVector::new(Tensor::new(vec![n], row).expect("row sized"))
        })
        .collect())
}

/// Draw a batch of latent vectors per the configured distribution.
pub fn sample_z(n: usize, cfg: &HyperNetConfig, rng: &mut impl rand::Rng) -> Result<Tensor> {
    if n == 0 {
        return Err(Error::InvalidArgument("need n ≥ 1 latent draws".into()));
    }
    let d = cfg.z_dim();
    Ok(match cfg.z_dist() {
        ZDistribution::Uniform => Tensor::rand_uniform(&[n, d], -1.0, 1.0, rng),
        ZDistribution::Normal => Tensor::rand_normal(&[n, d], 0.0, 1.0, rng),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use crate::target::{arch_weight_count, Layer, LayerKind};
    use crate::tensor::vjp_fd_check;

    fn micro_arch() -> ArchDescriptor {
        ArchDescriptor {
            input: (4, 4, 1),
            layers: vec![
                Layer { kind: LayerKind::Conv { kh: 3, kw: 3 }, filters: 2, activation: Some(0.0), pool: true },
                Layer { kind: LayerKind::Dense, filters: 3, activation: None, pool: false },
            ],
        }
    }

    fn micro_cfg() -> HyperNetConfig {
        HyperNetConfig::Structured {
            z_dim: 4,
            z_dist: ZDistribution::Uniform,
            code_size: 3,
            extractor_hidden: vec![6],
            generator_hidden: vec![vec![5], vec![4]],
            activation_slope: 0.1,
            batch_norm: true,
            bias_free: true,
        }
    }

    #[test]
    fn mnist_parameter_counts_match_table() {
        let arch = ArchDescriptor::mnist();
        let cfg = HyperNetConfig::mnist_default();
        let params = build(&cfg, Some(&arch), &mut stream(50, "build")).unwrap();
        assert_eq!(params.param_count(), 633_640);
        let mat_counts: Vec<usize> = params
            .nets
            .iter()
            .map(|n| n.mats.iter().map(Tensor::numel).sum())
            .collect();
        assert_eq!(mat_counts, vec![436_500, 3_240, 91_600, 90_000, 9_900]);
        let bn_count: usize = params.param_count() - mat_counts.iter().sum::<usize>();
        assert_eq!(bn_count, 2_400);
        assert_eq!(params.nets[0].widths, vec![300, 300, 300, 855]);
        assert_eq!(params.nets[1].widths, vec![15, 40, 40, 26]);
        assert_eq!(params.nets[2].widths, vec![15, 100, 100, 801]);
        assert_eq!(params.nets[3].widths, vec![15, 100, 100, 785]);
        assert_eq!(params.nets[4].widths, vec![15, 60, 60, 90]);
        assert_eq!(params.invocations, vec![32, 16, 8, 1]);
    }

    #[test]
    fn toy_mlp_structure() {
        let cfg = HyperNetConfig::toy_default();
        let params = build(&cfg, None, &mut stream(51, "toy")).unwrap();
        assert_eq!(params.nets.len(), 1);
        assert_eq!(params.nets[0].widths, vec![1, 30, 10, 10, 2]);
        assert!(params.nets[0].biases.is_some());
        assert!(params.nets[0].bn.is_none());
        // 30 + 300 + 100 + 20 matrices, 30 + 10 + 10 + 2 biases.
        assert_eq!(params.param_count(), 502);
    }

    #[test]
    fn generated_theta_matches_target_layout() {
        let arch = micro_arch();
        let cfg = micro_cfg();
        let params = build(&cfg, Some(&arch), &mut stream(52, "gen")).unwrap();
        let z = sample_z(3, &cfg, &mut stream(53, "z")).unwrap();
        let ws = generate(&z, &params).unwrap();
        assert_eq!(ws.len(), 3);
        let n = arch_weight_count(&arch).unwrap();
        for w in &ws {
            assert_eq!(w.len(), n);
            assert!(!w.gauge_fixed);
        }
    }

    #[test]
    fn inference_is_deterministic() {
        let arch = micro_arch();
        let params = build(&micro_cfg(), Some(&arch), &mut stream(54, "det")).unwrap();
        let z = sample_z(2, &micro_cfg(), &mut stream(55, "z")).unwrap();
        let a = generate(&z, &params).unwrap();
        let b = generate(&z, &params).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.flat, y.flat);
        }
    }

    #[test]
    fn distinct_latents_give_distinct_weights() {
        let arch = micro_arch();
        let params = build(&micro_cfg(), Some(&arch), &mut stream(56, "dist")).unwrap();
        let z = sample_z(2, &micro_cfg(), &mut stream(57, "z")).unwrap();
        let ws = generate(&z, &params).unwrap();
        let linf = ws[0]
            .flat
            .data()
            .iter()
            .zip(ws[1].flat.data().iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(linf > 0.0);
    }

    #[test]
    fn weight_generator_sharing_permutes_filter_blocks() {
        // Swapping two filters' code slices in the extractor output permutes
        // exactly those filter blocks of θ; shared W_l maps codes the same
        // way regardless of position.
        let arch = micro_arch();
        let cfg = micro_cfg();
        let mut params = build(&cfg, Some(&arch), &mut stream(58, "perm")).unwrap();
        let z = sample_z(2, &cfg, &mut stream(59, "z")).unwrap();
        let base = generate(&z, &params).unwrap();
        // Swap code slices for layer-0 filters 0 and 1: extractor output
        // columns 0..3 and 3..6 — swap those columns of E's last matrix and
        // of its (absent) bias; bias-free keeps this a pure column swap.
        let last = params.nets[0].mats.last_mut().unwrap();
        let out_w = last.shape()[1];
        let rows = last.shape()[0];
        for r in 0..rows {
            for c in 0..3 {
                let i = r * out_w + c;
                let j = r * out_w + 3 + c;
                let d = last.data_mut();
                d.swap(i, j);
            }
        }
        let swapped = generate(&z, &params).unwrap();
        let layout = arch.layout().unwrap();
        for (b, s) in base.iter().zip(swapped.iter()) {
            let r0 = layout.filter_range(0, 0);
            let r1 = layout.filter_range(0, 1);
            assert_eq!(b.flat.data()[r0.clone()], s.flat.data()[r1.clone()]);
            assert_eq!(b.flat.data()[r1.clone()], s.flat.data()[r0.clone()]);
            for p in 0..b.len() {
                if !r0.contains(&p) && !r1.contains(&p) {
                    assert_eq!(b.flat.data()[p], s.flat.data()[p], "position {p} moved");
                }
            }
        }
    }

    #[test]
    fn train_mode_gradients_match_fd() {
        let arch = micro_arch();
        let params = build(&micro_cfg(), Some(&arch), &mut stream(60, "fd")).unwrap();
        let mut g = Graph::new();
        let z = g.leaf(sample_z(3, &micro_cfg(), &mut stream(61, "z")).unwrap(), true);
        let gen = generate_graph(&mut g, z, &params, Mode::Train).unwrap();
        let n = arch_weight_count(&arch).unwrap();
        let seed = Tensor::rand_normal(&[3, n], 0.0, 1.0, &mut stream(62, "seed"));
        let mut leaves = gen.leaves.clone();
        leaves.push(z);
        let e = vjp_fd_check(&mut g, gen.theta, &seed, &leaves, 1e-5, Some(40)).unwrap();
        assert!(e < 1e-4, "{e}");
    }

    #[test]
    fn direct_mlp_gradients_match_fd() {
        let cfg = HyperNetConfig::toy_default();
        let params = build(&cfg, None, &mut stream(63, "tfd")).unwrap();
        let mut g = Graph::new();
        let z = g.leaf(sample_z(5, &cfg, &mut stream(64, "z")).unwrap(), true);
        let gen = generate_graph(&mut g, z, &params, Mode::Train).unwrap();
        let seed = Tensor::rand_normal(&[5, 2], 0.0, 1.0, &mut stream(65, "seed"));
        let mut leaves = gen.leaves.clone();
        leaves.push(z);
        let e = vjp_fd_check(&mut g, gen.theta, &seed, &leaves, 1e-5, None).unwrap();
        assert!(e < 1e-4, "{e}");
    }

    #[test]
    fn train_mode_needs_two_rows_with_bn() {
        let arch = micro_arch();
        let params = build(&micro_cfg(), Some(&arch), &mut stream(66, "b1")).unwrap();
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(&[1, 4]));
        assert!(generate_graph(&mut g, z, &params, Mode::Train).is_err());
        // Infer mode accepts a single row.
        let mut g2 = Graph::new();
        let z1 = g2.constant(Tensor::zeros(&[1, 4]));
        assert!(generate_graph(&mut g2, z1, &params, Mode::Infer).is_ok());
    }

    #[test]
    fn z_dim_mismatch_is_rejected() {
        let arch = micro_arch();
        let params = build(&micro_cfg(), Some(&arch), &mut stream(67, "zm")).unwrap();
        let z = Tensor::zeros(&[2, 5]);
        assert!(generate(&z, &params).is_err());
    }

    #[test]
    fn moving_stats_update_and_flatten_round_trip() {
        let arch = micro_arch();
        let cfg = micro_cfg();
        let mut params = build(&cfg, Some(&arch), &mut stream(68, "mov")).unwrap();
        let before = params.flatten();
        let mut g = Graph::new();
        let zn = g.constant(sample_z(8, &cfg, &mut stream(69, "z")).unwrap());
        let gen = generate_graph(&mut g, zn, &params, Mode::Train).unwrap();
        g.eval().unwrap();
        params.update_moving(&g, &gen.bn_nodes, 0.9);
        let after = params.flatten();
        assert_eq!(before.shape(), after.shape());
        assert_eq!(after.numel(), params.state_len());
        assert_ne!(before.data(), after.data(), "moving stats should move");
        // Round trip restores every tensor and statistic.
        let mut reloaded = build(&cfg, Some(&arch), &mut stream(70, "re")).unwrap();
        reloaded.load_flat(&after).unwrap();
        assert_eq!(reloaded.flatten().data(), after.data());
        let a = generate(&sample_z(2, &cfg, &mut stream(71, "z2")).unwrap(), &params).unwrap();
        let b = generate(&sample_z(2, &cfg, &mut stream(71, "z2")).unwrap(), &reloaded).unwrap();
        assert_eq!(a[0].flat, b[0].flat);
    }

    #[test]
    fn sample_z_support_and_determinism() {
        let cfg = micro_cfg();
        let a = sample_z(100, &cfg, &mut stream(72, "s")).unwrap();
        assert!(a.data().iter().all(|&v| (-1.0..=1.0).contains(&v)));
        let b = sample_z(100, &cfg, &mut stream(72, "s")).unwrap();
        assert_eq!(a, b);
        assert!(sample_z(0, &cfg, &mut stream(73, "s0")).is_err());
    }

    #[test]
    fn sample_z_mean_is_centered() {
        // 10⁵ uniform draws per coordinate: σ of the mean is (1/√3)/√n.
        let cfg = HyperNetConfig::DirectMlp {
            z_dim: 3,
            z_dist: ZDistribution::Uniform,
            hidden: vec![4],
            out_dim: 2,
            activation_slope: 0.1,
            bias_free: true,
        };
        let n = 100_000;
        let z = sample_z(n, &cfg, &mut stream(74, "mc")).unwrap();
        let sigma = (1.0 / 3.0f64).sqrt() / (n as f64).sqrt();
        for c in 0..3 {
            let mean: f64 = (0..n).map(|i| z.data()[i * 3 + c]).sum::<f64>() / n as f64;
            assert!(mean.abs() < 3.0 * sigma, "coordinate {c} mean {mean}");
        }
        // Normal distribution support sanity: values beyond ±1 appear.
        let ncfg = HyperNetConfig::DirectMlp {
            z_dim: 2,
            z_dist: ZDistribution::Normal,
            hidden: vec![4],
            out_dim: 2,
            activation_slope: 0.1,
            bias_free: true,
        };
        let zn = sample_z(1000, &ncfg, &mut stream(75, "mcn")).unwrap();
        assert!(zn.data().iter().any(|&v| v.abs() > 1.0));
    }

    #[test]
    fn structured_build_validates_config() {
        let arch = micro_arch();
        let mut bad = micro_cfg();
        if let HyperNetConfig::Structured { generator_hidden, .. } = &mut bad {
            generator_hidden.pop();
        }
        assert!(build(&bad, Some(&arch), &mut stream(76, "bad")).is_err());
        assert!(build(&micro_cfg(), None, &mut stream(77, "noarch")).is_err());
    }
}
