//! Objective assembly and optimization: the total loss
//! `λ·L_accuracy + L_diversity` in its four diversity modes, the Adam
//! optimizer, and the generator training loop for both the classifier and
//! toy settings.

use std::time::Instant;

use crate::data::{minibatch, Dataset, GaussianMixture};
use crate::entropy::kl_entropy_graph;
use crate::error::{Error, Result};
use crate::gauge::gauge_fix_graph;
use crate::hypernet::{
    build, generate_graph, init_generator_scale, init_spanning_loop, sample_z, HyperNetConfig,
    HyperNetParams, Mode,
};
use crate::rng::stream;
use crate::target::{forward_graph, toy_loss_graph, ArchDescriptor};
use crate::tensor::{Graph, NodeId, Tensor};

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { learning_rate: 1e-4, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// Adam with bias correction. One optimizer instance can drive several
/// parameter tensors, addressed by a stable slot index.
#[derive(Clone, Debug)]
pub struct Adam {
    pub cfg: AdamConfig,
    slots: Vec<AdamSlot>,
}

#[derive(Clone, Debug)]
struct AdamSlot {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Adam {
        Adam { cfg, slots: Vec::new() }
    }

    /// One Adam update of `param ← param − lr·m̂/(√v̂+ε)` for slot `slot`.
    /// Slots are created on first use and keyed by index, so a caller with k
    /// parameter tensors uses slots `0..k` consistently.
    pub fn step_inplace(&mut self, param: &mut Tensor, grad: &Tensor, slot: usize) -> Result<()> {
        if param.shape() != grad.shape() {
            return Err(Error::ShapeMismatch {
                op: "adam".into(),
                detail: format!("param {:?} vs grad {:?}", param.shape(), grad.shape()),
            });
        }
        while self.slots.len() <= slot {
            self.slots.push(AdamSlot { m: Vec::new(), v: Vec::new(), t: 0 });
        }
        let s = &mut self.slots[slot];
        let n = param.numel();
        if s.m.is_empty() {
            s.m = vec![0.0; n];
            s.v = vec![0.0; n];
        } else if s.m.len() != n {
            return Err(Error::ShapeMismatch {
                op: "adam".into(),
                detail: format!("slot {slot} was sized {}, got {n}", s.m.len()),
            });
        }
        s.t += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - b1.powi(s.t as i32);
        let bc2 = 1.0 - b2.powi(s.t as i32);
        let lr = self.cfg.learning_rate;
        let eps = self.cfg.epsilon;
        let g = grad.data();
        let p = param.data_mut();
        for i in 0..n {
            s.m[i] = b1 * s.m[i] + (1.0 - b1) * g[i];
            s.v[i] = b2 * s.v[i] + (1.0 - b2) * g[i] * g[i];
            let mhat = s.m[i] / bc1;
            let vhat = s.v[i] / bc2;
            p[i] -= lr * mhat / (vhat.sqrt() + eps);
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiversityMode {
    /// −Ĥ of the (optionally gauge-fixed) generated weight vectors.
    WeightEntropy,
    /// −Ĥ of concatenated target-network outputs on a shared probe batch.
    OutputEntropy,
    /// Classification loss of the mean of per-sample class probabilities on
    /// a shared probe batch.
    EnsembleAggregate,
    /// Toy setting: −Ĥ of the raw samples plus an ℓ2 penalty on φ in place
    /// of gauge fixing.
    L2Reg,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Accuracy weight λ.
    pub lambda: f64,
    pub diversity: DiversityMode,
    /// Latent draws per step.
    pub z_batch: usize,
    /// Images in each per-z minibatch (classifier objectives).
    pub images_per_z: usize,
    pub adam: AdamConfig,
    pub steps: usize,
    pub seed: u64,
    /// Apply gauge fixing inside the weight-entropy term.
    pub gauge: bool,
    /// Entropy subsample count (rows summed); `None` = all rows.
    pub entropy_subsample: Option<usize>,
    /// ℓ2 coefficient on φ in `l2_reg` mode.
    pub l2_coefficient: f64,
    /// Momentum of the generator's moving batch-norm statistics.
    pub bn_momentum: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 1e3,
            diversity: DiversityMode::WeightEntropy,
            z_batch: 32,
            images_per_z: 32,
            adam: AdamConfig::default(),
            steps: 13_000,
            seed: 0,
            gauge: true,
            entropy_subsample: None,
            l2_coefficient: 1e-4,
            bn_momentum: 0.99,
        }
    }
}

impl TrainConfig {
    /// Training defaults for the 2-D toy problem.
    pub fn toy_default() -> TrainConfig {
        TrainConfig {
            lambda: 30.0,
            diversity: DiversityMode::L2Reg,
            z_batch: 64,
            adam: AdamConfig { learning_rate: 1e-3, ..Default::default() },
            steps: 3000,
            gauge: false,
            l2_coefficient: 1e-3,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 || !self.lambda.is_finite() {
            return Err(Error::Config(format!("λ must be finite and ≥ 0, got {}", self.lambda)));
        }
        let entropy_mode = matches!(
            self.diversity,
            DiversityMode::WeightEntropy | DiversityMode::OutputEntropy | DiversityMode::L2Reg
        );
        if entropy_mode && self.z_batch < 2 {
            return Err(Error::Config("entropy diversity needs a z batch of ≥ 2".into()));
        }
        if self.z_batch == 0 {
            return Err(Error::Config("z batch must be ≥ 1".into()));
        }
        if let Some(r) = self.entropy_subsample {
            if r == 0 || r > self.z_batch {
                return Err(Error::Config(format!(
                    "entropy subsample {r} invalid for z batch {}",
                    self.z_batch
                )));
            }
        }
        if !(0.0..1.0).contains(&self.bn_momentum) {
            return Err(Error::Config(format!("bn momentum must be in [0,1), got {}", self.bn_momentum)));
        }
        if self.l2_coefficient < 0.0 {
            return Err(Error::Config("ℓ2 coefficient must be ≥ 0".into()));
        }
        Ok(())
    }
}

/// What the generator is being trained against.
#[derive(Clone, Copy)]
pub enum Task<'a> {
    Classifier { arch: &'a ArchDescriptor, data: &'a Dataset },
    Toy { gm: &'a GaussianMixture },
}

/// Prepared per-step inputs for [`total_loss_graph`].
#[derive(Clone, Debug, Default)]
pub struct StepData {
    /// One image minibatch per z row (classifier objectives).
    pub batches: Vec<(Tensor, Vec<usize>)>,
    /// Shared probe batch (output-entropy and ensemble-aggregate modes).
    pub probe: Option<(Tensor, Vec<usize>)>,
    /// Rows entering the entropy sum; `None` = all.
    pub entropy_subset: Option<Vec<usize>>,
}

/// Handles to the assembled loss terms.
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub total: NodeId,
    pub accuracy: NodeId,
    pub diversity: NodeId,
}

// ---------------------------------------------------------------------------
// Objective assembly
// ---------------------------------------------------------------------------

fn theta_row(g: &mut Graph, theta: NodeId, i: usize, n: usize) -> Result<NodeId> {
    let row = g.slice(theta, 0, i, i + 1)?;
    g.reshape(row, vec![n])
}

fn mean_of(g: &mut Graph, parts: &[NodeId]) -> Result<NodeId> {
    let mut acc = parts[0];
    for &p in &parts[1..] {
        acc = g.add(acc, p)?;
    }
    Ok(g.scale(acc, 1.0 / parts.len() as f64))
}

/// Per-z probe probabilities `exp(log p)` for output-space diversity terms.
fn probe_probs(
    g: &mut Graph,
    theta: NodeId,
    arch: &ArchDescriptor,
    probe_x: NodeId,
    n: usize,
    z_rows: usize,
) -> Result<Vec<NodeId>> {
    let mut probs = Vec::with_capacity(z_rows);
    for i in 0..z_rows {
        let t = theta_row(g, theta, i, n)?;
        let logp = forward_graph(g, probe_x, t, arch)?;
        probs.push(g.exp(logp));
    }
    Ok(probs)
}

/// Build `λ·L_accuracy + L_diversity` into the graph for a generated batch
/// `theta: [B_z, N]`.
///
/// `z_dim` is the intrinsic dimension handed to the entropy estimator and
/// `phi_leaves` are the generator parameter leaves (used by the ℓ2 penalty
/// in `l2_reg` mode).
pub fn total_loss_graph(
    g: &mut Graph,
    theta: NodeId,
    task: &Task,
    data: &StepData,
    cfg: &TrainConfig,
    z_dim: usize,
    phi_leaves: &[NodeId],
) -> Result<LossNodes> {
    let ts = g.shape(theta).to_vec();
    if ts.len() != 2 {
        return Err(Error::ShapeMismatch {
            op: "total_loss".into(),
            detail: format!("θ batch must be 2-D, got {:?}", ts),
        });
    }
    let (z_rows, n) = (ts[0], ts[1]);

    let accuracy = match task {
        Task::Classifier { arch, .. } => {
            if data.batches.len() != z_rows {
                return Err(Error::InvalidArgument(format!(
                    "{} image batches for {} z rows",
                    data.batches.len(),
                    z_rows
                )));
            }
            let mut losses = Vec::with_capacity(z_rows);
            for (i, (x, labels)) in data.batches.iter().enumerate() {
                let t = theta_row(g, theta, i, n)?;
                let xn = g.constant(x.clone());
                let logp = forward_graph(g, xn, t, arch)?;
                losses.push(g.nll(logp, labels.clone())?);
            }
            mean_of(g, &losses)?
        }
        Task::Toy { gm } => toy_loss_graph(g, theta, gm)?,
    };

    let diversity = match cfg.diversity {
        DiversityMode::WeightEntropy => {
            let base = if cfg.gauge {
                match task {
                    Task::Classifier { arch, .. } => gauge_fix_graph(g, theta, arch)?,
                    Task::Toy { .. } => {
                        return Err(Error::InvalidArgument(
                            "gauge fixing needs a target architecture; use l2_reg for the toy task".into(),
                        ))
                    }
                }
            } else {
                theta
            };
            let h = kl_entropy_graph(g, base, z_dim, data.entropy_subset.clone())?;
            g.scale(h, -1.0)
        }
        DiversityMode::L2Reg => {
            let h = kl_entropy_graph(g, theta, z_dim, data.entropy_subset.clone())?;
            let neg_h = g.scale(h, -1.0);
            if phi_leaves.is_empty() {
                return Err(Error::InvalidArgument("l2_reg mode needs the φ leaves".into()));
            }
            let norms: Vec<NodeId> = phi_leaves.iter().map(|&l| g.sq_norm(l)).collect();
            let mut sum = norms[0];
            for &p in &norms[1..] {
                sum = g.add(sum, p)?;
            }
            let penalty = g.scale(sum, cfg.l2_coefficient);
            g.add(neg_h, penalty)?
        }
        DiversityMode::OutputEntropy | DiversityMode::EnsembleAggregate => {
            let arch = match task {
                Task::Classifier { arch, .. } => arch,
                Task::Toy { .. } => {
                    return Err(Error::InvalidArgument(
                        "output-space diversity needs a target architecture".into(),
                    ))
                }
            };
            let (px, plabels) = data
                .probe
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument("output-space diversity needs a probe batch".into()))?;
            let pxn = g.constant(px.clone());
            let probs = probe_probs(g, theta, arch, pxn, n, z_rows)?;
            match cfg.diversity {
                DiversityMode::OutputEntropy => {
                    let width = probs
                        .first()
                        .map(|&p| g.shape(p).iter().product::<usize>())
                        .unwrap_or(0);
                    let rows: Vec<NodeId> = probs
                        .into_iter()
                        .map(|p| g.reshape(p, vec![1, width]))
                        .collect::<Result<_>>()?;
                    let stacked = g.concat(&rows, 0)?;
                    let h = kl_entropy_graph(g, stacked, z_dim, data.entropy_subset.clone())?;
                    g.scale(h, -1.0)
                }
                _ => {
                    let mean_probs = mean_of(g, &probs)?;
                    let log_mean = g.log(mean_probs);
                    g.nll(log_mean, plabels.clone())?
                }
            }
        }
    };

    let weighted = g.scale(accuracy, cfg.lambda);
    let total = g.add(weighted, diversity)?;
    Ok(LossNodes { total, accuracy, diversity })
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct TrainRecord {
    pub step: usize,
    pub acc_loss: f64,
    pub diversity: f64,
    pub total: f64,
    pub ms: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<TrainRecord>,
}

impl TrainLog {
    /// CSV form `step,acc_loss,diversity,total,ms`. All columns are
    /// bit-reproducible for a fixed seed except `ms`, which records
    /// measured wall time.
    pub fn to_csv(&self) -> String {
        let mut csv = crate::report::Csv::new(&["step", "acc_loss", "diversity", "total", "ms"]);
        for r in &self.records {
            csv.row(&[
                r.step.to_string(),
                crate::report::fmt_f64(r.acc_loss),
                crate::report::fmt_f64(r.diversity),
                crate::report::fmt_f64(r.total),
                format!("{:.1}", r.ms),
            ]);
        }
        csv.to_string()
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Final parameters — or, after divergence, the last parameters whose
    /// loss evaluated finite.
    pub params: HyperNetParams,
    pub log: TrainLog,
    /// Step index and message when training aborted.
    pub diverged: Option<(usize, String)>,
}

fn divergence_detail(e: &Error) -> Option<String> {
    match e {
        Error::NonFinite { .. } | Error::CollapsedSamples { .. } | Error::ZeroFilter { .. } => {
            Some(e.to_string())
        }
        _ => None,
    }
}

/// Train the generator. Seed-deterministic: parameter initialization, latent
/// draws, image batches, and entropy subsets each use an independent stream
/// of `cfg.seed`.
pub fn train(hcfg: &HyperNetConfig, task: &Task, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let arch = match task {
        Task::Classifier { arch, .. } => Some(*arch),
        Task::Toy { .. } => None,
    };
    let mut init_rng = stream(cfg.seed, "hypernet-init");
    let mut params = build(hcfg, arch, &mut init_rng)?;
    match task {
        Task::Toy { gm } => {
            // A 1-D-latent curve generator keeps the topology it starts
            // with, so start it as a loop spanning the region the mixture
            // occupies (the mean mode radius); see `init_spanning_loop`.
            let comps = gm.components();
            let radius = comps
                .iter()
                .map(|c| (c.mean[0] * c.mean[0] + c.mean[1] * c.mean[1]).sqrt())
                .sum::<f64>()
                / comps.len().max(1) as f64;
            if radius > 1e-6 {
                init_spanning_loop(&mut params, radius, &mut init_rng);
            }
        }
        Task::Classifier { arch, .. } => {
            // Start generated samples at the target network's own init
            // scale; see `init_generator_scale`.
            init_generator_scale(&mut params, arch, &mut init_rng)?;
        }
    }
    train_from(params, task, cfg)
}

/// Continue (or start) training from explicit generator parameters. The
/// latent draws, image batches, and entropy subsets are seed-deterministic
/// exactly as in [`train`]; only the parameter initialization is the
/// caller's.
pub fn train_from(params: HyperNetParams, task: &Task, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if let Task::Classifier { data, .. } = task {
        if cfg.images_per_z == 0 || cfg.images_per_z > data.len() {
            return Err(Error::Config(format!(
                "images_per_z {} invalid for dataset of {}",
                cfg.images_per_z,
                data.len()
            )));
        }
    }
    let hcfg = &params.cfg.clone();
    let mut z_rng = stream(cfg.seed, "z-draws");
    let mut data_rng = stream(cfg.seed, "image-batches");
    let mut subset_rng = stream(cfg.seed, "entropy-subsets");

    let mut params = params;
    let mut adam = Adam::new(cfg.adam.clone());
    let mut log = TrainLog::default();
    let mut prev_params = params.clone();

    for step in 0..cfg.steps {
        let t0 = Instant::now();
        let z = sample_z(cfg.z_batch, hcfg, &mut z_rng)?;

        let mut data = StepData::default();
        if let Task::Classifier { data: ds, .. } = task {
            for _ in 0..cfg.z_batch {
                data.batches.push(minibatch(ds, cfg.images_per_z, &mut data_rng)?);
            }
            if matches!(cfg.diversity, DiversityMode::OutputEntropy | DiversityMode::EnsembleAggregate) {
                data.probe = Some(minibatch(ds, cfg.images_per_z, &mut data_rng)?);
            }
        }
        if let Some(r) = cfg.entropy_subsample {
            if r < cfg.z_batch {
                data.entropy_subset =
                    Some(rand::seq::index::sample(&mut subset_rng, cfg.z_batch, r).into_vec());
            }
        }

        let mut g = Graph::new();
        let zn = g.constant(z);
        let gen = generate_graph(&mut g, zn, &params, Mode::Train)?;
        let loss = total_loss_graph(&mut g, gen.theta, task, &data, cfg, hcfg.z_dim(), &gen.leaves)?;
        match g.eval() {
            Ok(()) => {}
            Err(e) => match divergence_detail(&e) {
                Some(detail) => {
                    return Ok(TrainOutcome { params: prev_params, log, diverged: Some((step, detail)) })
                }
                None => return Err(e),
            },
        }
        let acc_loss = g.value(loss.accuracy).item();
        let diversity = g.value(loss.diversity).item();
        let total = g.value(loss.total).item();

        let mut grads = g.backward(vec![(loss.total, Tensor::scalar(1.0))])?;
        prev_params = params.clone();
        {
            let mut tensors = params.trainable_mut();
            for (slot, (&leaf, param)) in gen.leaves.iter().zip(tensors.iter_mut()).enumerate() {
                let grad = match grads.take(leaf) {
                    Some(gr) => gr,
                    None => Tensor::zeros(param.shape()),
                };
                adam.step_inplace(param, &grad, slot)?;
            }
        }
        params.update_moving(&g, &gen.bn_nodes, cfg.bn_momentum);

        log.records.push(TrainRecord {
            step,
            acc_loss,
            diversity,
            total,
            ms: t0.elapsed().as_secs_f64() * 1e3,
        });
    }
    Ok(TrainOutcome { params, log, diverged: None })
}
