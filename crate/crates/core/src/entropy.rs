//! Nearest-neighbor differential-entropy estimation, used as the diversity
//! term:
//!
//! Ĥ = ψ(N) + (d/N)·Σᵢ log εᵢ
//!
//! where εᵢ is the Euclidean distance from row i to its nearest other row,
//! d is the intrinsic dimension (the latent dimension of the generator, not
//! the ambient width), and ψ is the digamma function. Additive constants
//! that depend only on d are dropped — they do not affect optimization —
//! while the ψ(N) and d/N dependence is kept so values are comparable
//! across batch sizes.
//!
//! For large batches the sum may run over a random subset of rows (scored
//! against all rows), giving an unbiased estimate of the mean log distance
//! at a fraction of the pairwise cost.

use crate::error::{Error, Result};
use crate::tensor::{Graph, NodeId, Tensor};

/// Distances below this are treated as duplicate samples (a checked
/// "collapsed samples" error rather than −∞ in the log).
pub const DISTANCE_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EntropyConfig {
    /// Intrinsic dimension used by the estimator.
    pub d: usize,
    /// When set, sum log-distances over this many randomly chosen rows
    /// instead of all rows.
    pub subsample: Option<usize>,
}

impl EntropyConfig {
    pub fn full(d: usize) -> EntropyConfig {
        EntropyConfig { d, subsample: None }
    }
}

/// The digamma function ψ(x) for x > 0, to ≥1e-10 absolute accuracy.
///
/// Uses the recurrence ψ(x) = ψ(x+1) − 1/x to shift the argument to x ≥ 6,
/// then the asymptotic series with Bernoulli terms through x⁻¹².
pub fn digamma(x: f64) -> Result<f64> {
    if !(x > 0.0) {
        return Err(Error::InvalidArgument(format!("digamma needs x > 0, got {x}")));
    }
    let mut acc = 0.0;
    let mut x = x;
    while x < 6.0 {
        acc -= 1.0 / x;
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    let series = inv2
        * (-1.0 / 12.0
            + inv2
                * (1.0 / 120.0
                    + inv2
                        * (-1.0 / 252.0
                            + inv2 * (1.0 / 240.0 + inv2 * (-1.0 / 132.0 + inv2 * (691.0 / 32760.0))))));
    Ok(acc + x.ln() - 0.5 * inv + series)
}

/// Build the entropy estimate of `x: [N, D]` into the graph.
///
/// `subset`, when given, lists the rows whose nearest-neighbor distances
/// enter the sum (each scored against all rows); the normalization becomes
/// d/(2·|subset|) on squared distances while ψ(N) keeps the full batch
/// size. The nearest-neighbor assignment is frozen during backprop.
pub fn kl_entropy_graph(g: &mut Graph, x: NodeId, d: usize, subset: Option<Vec<usize>>) -> Result<NodeId> {
    let s = g.shape(x).to_vec();
    if s.len() != 2 || s[0] < 2 {
        return Err(Error::ShapeMismatch {
            op: "kl_entropy".into(),
            detail: format!("need ≥2 rows of samples, got {:?}", s),
        });
    }
    if d == 0 {
        return Err(Error::InvalidArgument("entropy dimension d must be ≥ 1".into()));
    }
    let n = s[0];
    let r = match &subset {
        Some(idx) => {
            if idx.is_empty() || idx.len() > n {
                return Err(Error::InvalidArgument(format!(
                    "subset of {} rows invalid for batch of {n}",
                    idx.len()
                )));
            }
            idx.len()
        }
        None => n,
    };
    let sqd = g.nearest_sq_dist(x, subset, DISTANCE_FLOOR)?;
    let logs = g.log(sqd);
    let sum = g.sum(logs);
    let scaled = g.scale(sum, d as f64 / (2.0 * r as f64));
    let psi = digamma(n as f64).expect("N ≥ 2");
    Ok(g.add_const(scaled, psi))
}

/// Entropy estimate of a sample matrix. When `cfg.subsample` is below the
/// batch size, the summed rows are drawn without replacement from `rng`.
pub fn kl_entropy(x: &Tensor, cfg: &EntropyConfig, rng: &mut impl rand::Rng) -> Result<f64> {
    let s = x.shape();
    if s.len() != 2 || s[0] < 2 {
        return Err(Error::ShapeMismatch {
            op: "kl_entropy".into(),
            detail: format!("need ≥2 rows of samples, got {:?}", s),
        });
    }
    let n = s[0];
    let subset = match cfg.subsample {
        Some(r) => {
            if r == 0 || r > n {
                return Err(Error::InvalidArgument(format!("subsample {r} invalid for batch of {n}")));
            }
            Some(rand::seq::index::sample(rng, n, r).into_vec())
        }
        None => None,
    };
    let mut g = Graph::new();
    let xn = g.constant(x.clone());
    let h = kl_entropy_graph(&mut g, xn, cfg.d, subset)?;
    g.eval()?;
    Ok(g.value(h).item())
}
