//! Post-training diagnostics: ensembles, accuracy histograms, weight-space
//! paths, PCA scatter, targeted adversarial sweeps, distillation, toy path
//! profiling, and filter visualization.

use crate::bank::WeightBank;
use crate::data::{Dataset, GaussianMixture};
use crate::error::{Error, Result};
use crate::hypernet::{generate, sample_z, HyperNetParams};
use crate::rng::stream;
use crate::target::{argmax_row, dataset_accuracy, forward, forward_graph, ArchDescriptor, LayerKind, WeightVector};
use crate::tensor::{Graph, Tensor};

// ---------------------------------------------------------------------------
// Ensembles
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnsembleRule {
    /// Argmax of averaged per-class probabilities.
    Mean,
    /// Per-example plurality vote over member argmax predictions.
    Majority,
}

/// Plurality winner over per-class vote counts; ties break toward the lowest
/// class index.
pub fn plurality(counts: &[usize]) -> usize {
    let mut best = 0;
    for (j, &c) in counts.iter().enumerate() {
        if c > counts[best] {
            best = j;
        }
    }
    best
}

/// One pass over bank × dataset producing everything the §4.2 diagnostics
/// need: both ensemble rules and every member's own accuracy.
#[derive(Clone, Debug)]
pub struct EnsembleReport {
    pub mean_accuracy: f64,
    pub majority_accuracy: f64,
    pub member_accuracies: Vec<f64>,
}

pub fn ensemble_report(
    bank: &WeightBank,
    arch: &ArchDescriptor,
    ds: &Dataset,
    chunk: usize,
) -> Result<EnsembleReport> {
    crate::bank::check_arch(bank, arch)?;
    if chunk == 0 {
        return Err(Error::InvalidArgument("chunk size must be ≥ 1".into()));
    }
    let classes = arch.classes();
    let n = ds.len();
    let members = bank.len();
    let mut prob_sum = vec![0.0f64; n * classes];
    let mut votes = vec![0usize; n * classes];
    let mut member_correct = vec![0usize; members];

    let mut at = 0;
    while at < n {
        let hi = (at + chunk).min(n);
        let idx: Vec<usize> = (at..hi).collect();
        let (x, labels) = ds.batch(&idx);
        for (m, w) in bank.thetas().iter().enumerate() {
            let logp = forward(&x, w, arch)?;
            let lp = logp.data();
            for (r, &y) in labels.iter().enumerate() {
                let row = &lp[r * classes..(r + 1) * classes];
                let pred = argmax_row(row);
                if pred == y {
                    member_correct[m] += 1;
                }
                let i = at + r;
                votes[i * classes + pred] += 1;
                for (j, &v) in row.iter().enumerate() {
                    prob_sum[i * classes + j] += v.exp();
                }
            }
        }
        at = hi;
    }

    let mut mean_ok = 0usize;
    let mut maj_ok = 0usize;
    for i in 0..n {
        let y = ds.label(i);
        if argmax_row(&prob_sum[i * classes..(i + 1) * classes]) == y {
            mean_ok += 1;
        }
        if plurality(&votes[i * classes..(i + 1) * classes]) == y {
            maj_ok += 1;
        }
    }
    Ok(EnsembleReport {
        mean_accuracy: mean_ok as f64 / n as f64,
        majority_accuracy: maj_ok as f64 / n as f64,
        member_accuracies: member_correct.iter().map(|&c| c as f64 / n as f64).collect(),
    })
}

pub fn ensemble_eval(
    bank: &WeightBank,
    arch: &ArchDescriptor,
    ds: &Dataset,
    rule: EnsembleRule,
    chunk: usize,
) -> Result<f64> {
    let report = ensemble_report(bank, arch, ds, chunk)?;
    Ok(match rule {
        EnsembleRule::Mean => report.mean_accuracy,
        EnsembleRule::Majority => report.majority_accuracy,
    })
}

// ---------------------------------------------------------------------------
// Accuracy histograms
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    /// `bins + 1` edges spanning [0, 1].
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    /// The raw per-member accuracies that were binned.
    pub accuracies: Vec<f64>,
}

/// Bin accuracies (each in [0, 1]) into `bins` equal-width bins; the final
/// bin is closed so accuracy 1.0 lands in it.
pub fn bin_accuracies(accuracies: &[f64], bins: usize) -> Result<Histogram> {
    if bins == 0 {
        return Err(Error::InvalidArgument("need ≥ 1 bin".into()));
    }
    let edges: Vec<f64> = (0..=bins).map(|i| i as f64 / bins as f64).collect();
    let mut counts = vec![0usize; bins];
    for &a in accuracies {
        if !(0.0..=1.0).contains(&a) {
            return Err(Error::InvalidArgument(format!("accuracy {a} outside [0,1]")));
        }
        let b = ((a * bins as f64) as usize).min(bins - 1);
        counts[b] += 1;
    }
    Ok(Histogram { edges, counts, accuracies: accuracies.to_vec() })
}

pub fn accuracy_histogram(
    bank: &WeightBank,
    arch: &ArchDescriptor,
    ds: &Dataset,
    bins: usize,
    chunk: usize,
) -> Result<Histogram> {
    let report = ensemble_report(bank, arch, ds, chunk)?;
    bin_accuracies(&report.member_accuracies, bins)
}

// ---------------------------------------------------------------------------
// Weight-space paths
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathKind {
    /// `{ G(z₁)·t + G(z₂)·(1−t) }` — straight line in weight space.
    Direct,
    /// `{ G(z₁·t + z₂·(1−t)) }` — image of the straight line in z space.
    Interpolated,
}

#[derive(Clone, Debug)]
pub struct PathSpec {
    pub z1: Tensor,
    pub z2: Tensor,
    pub k: usize,
    pub kind: PathKind,
}

impl PathSpec {
    pub fn validate(&self, z_dim: usize) -> Result<()> {
        if self.k < 2 {
            return Err(Error::InvalidArgument(format!("path needs K ≥ 2 points, got {}", self.k)));
        }
        if self.z1.numel() != z_dim || self.z2.numel() != z_dim {
            return Err(Error::InvalidArgument(format!(
                "path endpoints must have {z_dim} coordinates, got {} and {}",
                self.z1.numel(),
                self.z2.numel()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PathProfile {
    pub ts: Vec<f64>,
    pub accuracies: Vec<f64>,
}

/// Generate the path's weight vectors. `t` runs over K uniform points in
/// [0, 1]; `t = 0` sits at `G(z₂)` and `t = 1` at `G(z₁)` for both kinds.
pub fn path_weights(params: &HyperNetParams, spec: &PathSpec) -> Result<Vec<WeightVector>> {
    spec.validate(params.cfg.z_dim())?;
    let k = spec.k;
    let zd = params.cfg.z_dim();
    let ts: Vec<f64> = (0..k).map(|j| j as f64 / (k - 1) as f64).collect();
    match spec.kind {
        PathKind::Direct => {
            let mut z = Vec::with_capacity(2 * zd);
            z.extend_from_slice(spec.z1.data());
            z.extend_from_slice(spec.z2.data());
            let ends = generate(&Tensor::new(vec![2, zd], z)?, params)?;
            let (t1, t2) = (&ends[0], &ends[1]);
            Ok(ts
                .iter()
                .map(|&t| {
                    let w: Vec<f64> = t1
                        .flat
                        .data()
                        .iter()
                        .zip(t2.flat.data())
                        .map(|(&a, &b)| a * t + b * (1.0 - t))
                        .collect();
                    WeightVector::new(Tensor::new(vec![w.len()], w).expect("same length"))
                })
                .collect())
        }
        PathKind::Interpolated => {
            let mut z = Vec::with_capacity(k * zd);
            for &t in &ts {
                for i in 0..zd {
                    z.push(spec.z1.data()[i] * t + spec.z2.data()[i] * (1.0 - t));
                }
            }
            generate(&Tensor::new(vec![k, zd], z)?, params)
        }
    }
}

pub fn path_eval(
    params: &HyperNetParams,
    arch: &ArchDescriptor,
    ds: &Dataset,
    spec: &PathSpec,
    chunk: usize,
) -> Result<PathProfile> {
    let weights = path_weights(params, spec)?;
    let ts: Vec<f64> = (0..spec.k).map(|j| j as f64 / (spec.k - 1) as f64).collect();
    let mut accuracies = Vec::with_capacity(spec.k);
    for w in &weights {
        accuracies.push(dataset_accuracy(w, arch, ds, chunk)?);
    }
    Ok(PathProfile { ts, accuracies })
}

// ---------------------------------------------------------------------------
// PCA
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct Pca {
    /// Covariance eigenvalues, descending.
    pub eigenvalues: Vec<f64>,
    /// `[k, d]` — unit principal directions, one per row.
    pub components: Tensor,
    /// `[n, k]` — sample coordinates in the component basis.
    pub projections: Tensor,
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix (row-major `n×n`).
/// Returns (eigenvalue, eigenvector) pairs sorted descending.
fn jacobi_eigh(mut a: Vec<f64>, n: usize) -> Vec<(f64, Vec<f64>)> {
    let mut v = vec![0.0f64; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let frob: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    if frob > 0.0 {
        for _sweep in 0..100 {
            let off: f64 = (0..n)
                .flat_map(|p| ((p + 1)..n).map(move |q| (p, q)))
                .map(|(p, q)| a[p * n + q] * a[p * n + q])
                .sum::<f64>()
                .sqrt();
            if off <= 1e-14 * frob {
                break;
            }
            for p in 0..n - 1 {
                for q in p + 1..n {
                    let apq = a[p * n + q];
                    if apq.abs() <= 1e-300 {
                        continue;
                    }
                    let tau = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                    let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
                    let c = 1.0 / (1.0 + t * t).sqrt();
                    let s = t * c;
                    for i in 0..n {
                        let (aip, aiq) = (a[i * n + p], a[i * n + q]);
                        a[i * n + p] = c * aip - s * aiq;
                        a[i * n + q] = s * aip + c * aiq;
                    }
                    for i in 0..n {
                        let (api, aqi) = (a[p * n + i], a[q * n + i]);
                        a[p * n + i] = c * api - s * aqi;
                        a[q * n + i] = s * api + c * aqi;
                    }
                    for i in 0..n {
                        let (vip, viq) = (v[i * n + p], v[i * n + q]);
                        v[i * n + p] = c * vip - s * viq;
                        v[i * n + q] = s * vip + c * viq;
                    }
                }
            }
        }
    }
    let mut pairs: Vec<(f64, Vec<f64>)> = (0..n)
        .map(|j| (a[j * n + j], (0..n).map(|i| v[i * n + j]).collect()))
        .collect();
    pairs.sort_by(|x, y| y.0.partial_cmp(&x.0).expect("symmetric eigenvalues are finite"));
    pairs
}

/// Flip each component so its largest-magnitude coordinate is positive,
/// making the (inherently sign-ambiguous) basis deterministic.
fn canonical_sign(component: &mut [f64], projection_col: &mut [f64]) {
    let mut lead = 0;
    for (i, &c) in component.iter().enumerate() {
        if c.abs() > component[lead].abs() {
            lead = i;
        }
    }
    if component[lead] < 0.0 {
        for c in component.iter_mut() {
            *c = -*c;
        }
        for p in projection_col.iter_mut() {
            *p = -*p;
        }
    }
}

/// Top-`k` principal components of `data: [n, d]`. Mean-centered covariance
/// `XᶜᵀXᶜ/(n−1)`; when `d > n` the eigenproblem is solved on the Gram matrix
/// `XᶜXᶜᵀ` instead and mapped back.
pub fn pca_scatter(data: &Tensor, k: usize) -> Result<Pca> {
    let shape = data.shape();
    if shape.len() != 2 {
        return Err(Error::InvalidArgument(format!("PCA input must be 2-D, got {shape:?}")));
    }
    let (n, d) = (shape[0], shape[1]);
    if n < 2 {
        return Err(Error::InvalidArgument("PCA needs ≥ 2 samples".into()));
    }
    let rank_bound = (n - 1).min(d);
    if k == 0 || k > rank_bound {
        return Err(Error::InvalidArgument(format!(
            "requested {k} components but the rank bound is {rank_bound}"
        )));
    }
    let x = data.data();
    let mut mean = vec![0.0f64; d];
    for i in 0..n {
        for j in 0..d {
            mean[j] += x[i * d + j];
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let mut xc = vec![0.0f64; n * d];
    for i in 0..n {
        for j in 0..d {
            xc[i * d + j] = x[i * d + j] - mean[j];
        }
    }
    let denom = (n - 1) as f64;

    let mut eigenvalues = Vec::with_capacity(k);
    let mut components = vec![0.0f64; k * d];
    let mut projections = vec![0.0f64; n * k];

    if d <= n {
        // Scatter matrix XᶜᵀXᶜ, eigenvalues divided by n−1.
        let mut s = vec![0.0f64; d * d];
        for i in 0..n {
            let row = &xc[i * d..(i + 1) * d];
            for a in 0..d {
                let ra = row[a];
                if ra == 0.0 {
                    continue;
                }
                for b in a..d {
                    s[a * d + b] += ra * row[b];
                }
            }
        }
        for a in 0..d {
            for b in 0..a {
                s[a * d + b] = s[b * d + a];
            }
        }
        let pairs = jacobi_eigh(s, d);
        for (c, (mu, vec_)) in pairs.into_iter().take(k).enumerate() {
            eigenvalues.push(mu / denom);
            components[c * d..(c + 1) * d].copy_from_slice(&vec_);
            for i in 0..n {
                let mut p = 0.0;
                for j in 0..d {
                    p += xc[i * d + j] * vec_[j];
                }
                projections[i * k + c] = p;
            }
        }
    } else {
        // Gram matrix XᶜXᶜᵀ; eigenvector u maps to component Xᶜᵀu/√μ.
        let mut gram = vec![0.0f64; n * n];
        for i in 0..n {
            for j in i..n {
                let mut s = 0.0;
                for t in 0..d {
                    s += xc[i * d + t] * xc[j * d + t];
                }
                gram[i * n + j] = s;
                gram[j * n + i] = s;
            }
        }
        let pairs = jacobi_eigh(gram, n);
        let mu_max = pairs.first().map(|p| p.0).unwrap_or(0.0);
        for (c, (mu, u)) in pairs.into_iter().take(k).enumerate() {
            if mu <= 0.0 || mu <= mu_max * 1e-12 {
                return Err(Error::InvalidArgument(format!(
                    "component {} exceeds the numerical rank of the data",
                    c + 1
                )));
            }
            eigenvalues.push(mu / denom);
            let scale = mu.sqrt();
            for j in 0..d {
                let mut s = 0.0;
                for i in 0..n {
                    s += xc[i * d + j] * u[i];
                }
                components[c * d + j] = s / scale;
            }
            for i in 0..n {
                projections[i * k + c] = u[i] * scale;
            }
        }
    }

    for c in 0..k {
        let mut col: Vec<f64> = (0..n).map(|i| projections[i * k + c]).collect();
        canonical_sign(&mut components[c * d..(c + 1) * d], &mut col);
        for i in 0..n {
            projections[i * k + c] = col[i];
        }
    }

    Ok(Pca {
        eigenvalues,
        components: Tensor::new(vec![k, d], components)?,
        projections: Tensor::new(vec![n, k], projections)?,
    })
}

/// Stack a bank's θ vectors into an `[n, d]` matrix for PCA.
pub fn bank_matrix(bank: &WeightBank) -> Tensor {
    let (n, d) = (bank.len(), bank.theta_len());
    let mut flat = Vec::with_capacity(n * d);
    for w in bank.thetas() {
        flat.extend_from_slice(w.flat.data());
    }
    Tensor::new(vec![n, d], flat).expect("bank members share a length")
}

// ---------------------------------------------------------------------------
// Targeted FGSM
// ---------------------------------------------------------------------------

fn sgn(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Sign of `∇ₓ(−log p(y_target | x; θ))`, one entry per pixel.
pub fn fgsm_gradient_sign(
    x: &Tensor,
    y_target: &[usize],
    w: &WeightVector,
    arch: &ArchDescriptor,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let xl = g.leaf(x.clone(), true);
    let tn = g.constant(w.flat.clone());
    let logp = forward_graph(&mut g, xl, tn, arch)?;
    let loss = g.nll(logp, y_target.to_vec())?;
    g.eval()?;
    let mut grads = g.backward(vec![(loss, Tensor::scalar(1.0))])?;
    let grad = grads
        .take(xl)
        .ok_or_else(|| Error::Graph("input gradient missing".into()))?;
    let signs: Vec<f64> = grad.data().iter().map(|&v| sgn(v)).collect();
    Tensor::new(grad.shape().to_vec(), signs)
}

/// `x′ = clip_{[0,1]}(x − ε·s)` for a precomputed sign tensor `s`.
pub fn fgsm_apply(x: &Tensor, sign: &Tensor, eps: f64) -> Result<Tensor> {
    if x.shape() != sign.shape() {
        return Err(Error::ShapeMismatch {
            op: "fgsm_apply".into(),
            detail: format!("{:?} vs {:?}", x.shape(), sign.shape()),
        });
    }
    let out: Vec<f64> = x
        .data()
        .iter()
        .zip(sign.data())
        .map(|(&xi, &si)| (xi - eps * si).clamp(0.0, 1.0))
        .collect();
    Tensor::new(x.shape().to_vec(), out)
}

/// Targeted fast-gradient-method example pushing `x` toward `y_target`.
pub fn fgsm_targeted(
    x: &Tensor,
    y_true: &[usize],
    y_target: &[usize],
    w: &WeightVector,
    arch: &ArchDescriptor,
    eps: f64,
) -> Result<Tensor> {
    if eps < 0.0 || !eps.is_finite() {
        return Err(Error::InvalidArgument(format!("ε must be finite and ≥ 0, got {eps}")));
    }
    if y_true.len() != y_target.len() {
        return Err(Error::InvalidArgument("y_true and y_target lengths differ".into()));
    }
    for (i, (&a, &b)) in y_true.iter().zip(y_target).enumerate() {
        if a == b {
            return Err(Error::InvalidArgument(format!("example {i}: target class equals true class {a}")));
        }
    }
    let sign = fgsm_gradient_sign(x, y_target, w, arch)?;
    fgsm_apply(x, &sign, eps)
}

/// The sweep grid `ε ∈ {0, 0.02, …, 0.24}` as fractions of the dynamic range.
pub fn epsilon_grid() -> Vec<f64> {
    (0..=12).map(|i| i as f64 * 0.02).collect()
}

// ---------------------------------------------------------------------------
// Adversarial transfer experiment
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdversarialConfig {
    pub epsilons: Vec<f64>,
    /// (θ, x, y′) trials; each produces one adversarial example per ε.
    pub trials: usize,
    /// Members in the freshly sampled defending ensemble (majority rule).
    pub ensemble_size: usize,
    /// Validation images the trials draw from.
    pub image_pool: usize,
}

impl Default for AdversarialConfig {
    fn default() -> Self {
        AdversarialConfig { epsilons: epsilon_grid(), trials: 150, ensemble_size: 20, image_pool: 1000 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdversarialReport {
    pub epsilons: Vec<f64>,
    /// Fraction of trials where the generating model itself was driven to
    /// the target class.
    pub single_success: Vec<f64>,
    /// Fraction of trials where the fresh ensemble's majority vote was.
    pub ensemble_success: Vec<f64>,
    pub trials: usize,
    pub ensemble_size: usize,
}

/// The six-step targeted-transfer protocol: sample θ = G(z); sample (x, y);
/// pick y′ ≠ y uniformly; build FGSM examples per ε against θ; test whether
/// θ is fooled; test whether a freshly sampled ensemble is fooled. A single
/// ensemble is drawn per run and shared across trials; every ε sees the
/// same trials.
pub fn adversarial_transfer_experiment(
    params: &HyperNetParams,
    arch: &ArchDescriptor,
    ds: &Dataset,
    cfg: &AdversarialConfig,
    seed: u64,
) -> Result<AdversarialReport> {
    if cfg.trials == 0 || cfg.ensemble_size == 0 || cfg.epsilons.is_empty() {
        return Err(Error::InvalidArgument("adversarial run needs trials, members, and ε values".into()));
    }
    for &e in &cfg.epsilons {
        if e < 0.0 || !e.is_finite() {
            return Err(Error::InvalidArgument(format!("ε must be finite and ≥ 0, got {e}")));
        }
    }
    let classes = arch.classes();
    let ne = cfg.epsilons.len();

    let mut ens_rng = stream(seed, "adv-ensemble");
    let ze = sample_z(cfg.ensemble_size, &params.cfg, &mut ens_rng)?;
    let ensemble = generate(&ze, params)?;

    let mut trial_rng = stream(seed, "adv-trials");
    let pool = rand::seq::index::sample(&mut trial_rng, ds.len(), cfg.image_pool.min(ds.len())).into_vec();

    let mut single_hits = vec![0usize; ne];
    let mut ensemble_hits = vec![0usize; ne];

    for _ in 0..cfg.trials {
        let z = sample_z(1, &params.cfg, &mut trial_rng)?;
        let theta = generate(&z, params)?.remove(0);
        let idx = pool[rand::Rng::gen_range(&mut trial_rng, 0..pool.len())];
        let (x, labels) = ds.batch(&[idx]);
        let y = labels[0];
        let y_target = (y + rand::Rng::gen_range(&mut trial_rng, 1..classes)) % classes;

        let sign = fgsm_gradient_sign(&x, &[y_target], &theta, arch)?;
        let pix = x.numel();
        let mut batch = Vec::with_capacity(ne * pix);
        for &e in &cfg.epsilons {
            batch.extend_from_slice(fgsm_apply(&x, &sign, e)?.data());
        }
        let mut shape = x.shape().to_vec();
        shape[0] = ne;
        let xb = Tensor::new(shape, batch)?;

        let logp = forward(&xb, &theta, arch)?;
        for e in 0..ne {
            if argmax_row(&logp.data()[e * classes..(e + 1) * classes]) == y_target {
                single_hits[e] += 1;
            }
        }

        let mut votes = vec![0usize; ne * classes];
        for member in &ensemble {
            let mlogp = forward(&xb, member, arch)?;
            for e in 0..ne {
                let pred = argmax_row(&mlogp.data()[e * classes..(e + 1) * classes]);
                votes[e * classes + pred] += 1;
            }
        }
        for e in 0..ne {
            if plurality(&votes[e * classes..(e + 1) * classes]) == y_target {
                ensemble_hits[e] += 1;
            }
        }
    }

    let t = cfg.trials as f64;
    Ok(AdversarialReport {
        epsilons: cfg.epsilons.clone(),
        single_success: single_hits.iter().map(|&h| h as f64 / t).collect(),
        ensemble_success: ensemble_hits.iter().map(|&h| h as f64 / t).collect(),
        trials: cfg.trials,
        ensemble_size: cfg.ensemble_size,
    })
}

// ---------------------------------------------------------------------------
// Distillation
// ---------------------------------------------------------------------------

/// Elementwise mean of the bank's raw θ vectors.
pub fn distill(bank: &WeightBank) -> WeightVector {
    let d = bank.theta_len();
    let mut mean = vec![0.0f64; d];
    for w in bank.thetas() {
        for (m, &v) in mean.iter_mut().zip(w.flat.data()) {
            *m += v;
        }
    }
    let n = bank.len() as f64;
    for m in mean.iter_mut() {
        *m /= n;
    }
    WeightVector::new(Tensor::new(vec![d], mean).expect("length matches"))
}

// ---------------------------------------------------------------------------
// Toy path profile
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct ToyProfile {
    pub zs: Vec<f64>,
    pub points: Vec<[f64; 2]>,
    pub density: Vec<f64>,
    pub nn_dist: Vec<f64>,
    /// Pearson correlation between density and nearest-neighbor distance.
    pub pearson: f64,
}

/// Pearson correlation coefficient of two equal-length series.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::InvalidArgument("correlation needs two series of equal length ≥ 2".into()));
    }
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::InvalidArgument("correlation undefined for a constant series".into()));
    }
    Ok(sab / (saa * sbb).sqrt())
}

/// Evaluate the toy generator on `k` uniform z ∈ [−1, 1]: mixture density at
/// each generated point and its distance to the nearest other point.
pub fn toy_path_profile(params: &HyperNetParams, gm: &GaussianMixture, k: usize) -> Result<ToyProfile> {
    if params.cfg.z_dim() != 1 {
        return Err(Error::InvalidArgument(format!(
            "toy path profiling needs a 1-D latent, got {}",
            params.cfg.z_dim()
        )));
    }
    if k < 2 {
        return Err(Error::InvalidArgument("need ≥ 2 path points".into()));
    }
    let zs: Vec<f64> = (0..k).map(|j| -1.0 + 2.0 * j as f64 / (k - 1) as f64).collect();
    let z = Tensor::new(vec![k, 1], zs.clone())?;
    let generated = generate(&z, params)?;
    let mut points = Vec::with_capacity(k);
    for w in &generated {
        let d = w.flat.data();
        if d.len() != 2 {
            return Err(Error::InvalidArgument(format!("toy generator emits {}-D points, expected 2", d.len())));
        }
        points.push([d[0], d[1]]);
    }
    let density: Vec<f64> = points.iter().map(|&p| gm.density(p)).collect();
    let mut nn_dist = Vec::with_capacity(k);
    for i in 0..k {
        let mut best = f64::INFINITY;
        for j in 0..k {
            if i == j {
                continue;
            }
            let dx = points[i][0] - points[j][0];
            let dy = points[i][1] - points[j][1];
            best = best.min((dx * dx + dy * dy).sqrt());
        }
        nn_dist.push(best);
    }
    let r = pearson(&density, &nn_dist)?;
    Ok(ToyProfile { zs, points, density, nn_dist, pearson: r })
}

// ---------------------------------------------------------------------------
// Filter images
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct FilterGrid {
    pub width: usize,
    pub height: usize,
    /// Row-major 8-bit grayscale.
    pub pixels: Vec<u8>,
    /// Tiles per grid side: ⌈√count⌉.
    pub side: usize,
    pub tiles: usize,
}

/// Channel-0 slices of one conv filter across `count` members, each tile
/// min–max normalized, laid out on a ⌈√count⌉ grid with 1-px separators.
pub fn export_filter_images(
    bank: &WeightBank,
    arch: &ArchDescriptor,
    layer: usize,
    filter: usize,
    count: usize,
) -> Result<FilterGrid> {
    let layout = arch.layout()?;
    if bank.theta_len() != layout.total {
        return Err(Error::InvalidArgument(format!(
            "bank θ length {} does not match architecture weight count {}",
            bank.theta_len(),
            layout.total
        )));
    }
    if layer >= arch.layers.len() {
        return Err(Error::InvalidArgument(format!("layer {layer} out of range")));
    }
    let (kh, kw) = match arch.layers[layer].kind {
        LayerKind::Conv { kh, kw } => (kh, kw),
        LayerKind::Dense => {
            return Err(Error::InvalidArgument(format!("layer {layer} is dense; filter images need a conv layer")))
        }
    };
    let ll = &layout.layers[layer];
    if filter >= ll.filters {
        return Err(Error::InvalidArgument(format!("filter {filter} out of range for layer {layer}")));
    }
    if count == 0 || count > bank.len() {
        return Err(Error::InvalidArgument(format!(
            "count {count} invalid for a bank of {}",
            bank.len()
        )));
    }

    let side = (count as f64).sqrt().ceil() as usize;
    let width = side * kw + (side - 1);
    let height = side * kh + (side - 1);
    let mut pixels = vec![255u8; width * height];

    for m in 0..count {
        let range = bank.thetas()[m].flat.data()[layout.filter_range(layer, filter)].to_vec();
        // Weight part only; channel-0 slice of the (di, dj, ch) patch order.
        let slice: Vec<f64> = range[..range.len() - 1]
            .iter()
            .enumerate()
            .filter(|(p, _)| p % ll.sym_channels == 0)
            .map(|(_, &v)| v)
            .collect();
        debug_assert_eq!(slice.len(), kh * kw);
        let (lo, hi) = slice
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let span = hi - lo;
        let (r0, c0) = ((m / side) * (kh + 1), (m % side) * (kw + 1));
        for di in 0..kh {
            for dj in 0..kw {
                let v = slice[di * kw + dj];
                let norm = if span > 0.0 { (v - lo) / span } else { 0.5 };
                pixels[(r0 + di) * width + (c0 + dj)] = (norm * 255.0).round() as u8;
            }
        }
    }
    Ok(FilterGrid { width, height, pixels, side, tiles: count })
}
