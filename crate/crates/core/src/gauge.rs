//! Gauge fixing: maps every weight vector in a scaling-symmetry orbit to a
//! canonical representative, so that distances between weight vectors (and
//! the diversity term built from them) measure functional difference rather
//! than reparametrization.
//!
//! Two symmetries are quotiented out:
//! * per-filter positive rescaling of any non-final layer, compensated by
//!   inverse scaling of the downstream weights reading that filter — the
//!   canonical form makes every filter block (bias included) have unit mean
//!   square;
//! * a common shift of the final-layer biases (softmax is shift invariant) —
//!   the canonical form centers them to mean zero.
//!
//! The whole map is built from differentiable graph ops so the diversity
//! gradient flows through it.

use crate::error::{Error, Result};
use crate::target::{ArchDescriptor, WeightVector};
use crate::tensor::{Graph, NodeId};

/// Filter blocks whose sum of squares falls at or below this are reported as
/// a checked error rather than producing huge scale factors.
pub const ZERO_FILTER_FLOOR: f64 = 1e-30;

/// Build the gauge-fixing map into `g` for a batch of flat weight vectors
/// `theta: [B, N]`. Returns the `[B, N]` canonical batch.
///
/// Layers are processed in ascending order so each layer's scale factors are
/// computed after upstream compensation has been applied to it.
pub fn gauge_fix_graph(g: &mut Graph, theta: NodeId, arch: &ArchDescriptor) -> Result<NodeId> {
    let layout = arch.layout()?;
    let s = g.shape(theta).to_vec();
    if s.len() != 2 || s[1] != layout.total {
        return Err(Error::ShapeMismatch {
            op: "gauge_fix".into(),
            detail: format!("θ batch {:?}, architecture needs [B, {}]", s, layout.total),
        });
    }
    let n = layout.total;
    let m = layout.layers.len();
    let mut cur = theta;
    for l in 0..m.saturating_sub(1) {
        let ll = &layout.layers[l];
        let segs: Vec<(usize, usize)> = (0..ll.filters)
            .map(|i| {
                let r = layout.filter_range(l, i);
                (r.start, r.end)
            })
            .collect();
        let sums = g.seg_sum_sq(cur, segs)?;
        let labels: Vec<(usize, usize)> = (0..ll.filters).map(|i| (l, i)).collect();
        let checked = g.floor_check(sums, ZERO_FILTER_FLOOR, labels);
        let meansq = g.scale(checked, 1.0 / ll.block as f64);
        let f = g.pow_const(meansq, -0.5);
        let finv = g.pow_const(meansq, 0.5);
        let factors = g.concat(&[f, finv], 1)?;
        let mut map: Vec<Option<usize>> = vec![None; n];
        for i in 0..ll.filters {
            for c in layout.filter_range(l, i) {
                map[c] = Some(i);
            }
            for c in layout.incoming_cols(l + 1, i) {
                map[c] = Some(ll.filters + i);
            }
        }
        cur = g.scale_cols_by(cur, factors, map)?;
    }
    let bias_cols = layout.last_layer_bias_cols();
    let k = bias_cols.len();
    let b = g.gather_cols(cur, bias_cols.clone())?;
    let sum = g.sum_axis(b, 1)?;
    let mean = g.scale(sum, 1.0 / k as f64);
    g.sub_from_cols(cur, mean, bias_cols)
}

/// Gauge-fix a single weight vector.
pub fn gauge_fix(w: &WeightVector, arch: &ArchDescriptor) -> Result<WeightVector> {
    let n = w.len();
    let mut g = Graph::new();
    let row = g.constant(w.flat.clone().with_shape(vec![1, n])?);
    let fixed = gauge_fix_graph(&mut g, row, arch)?;
    g.eval()?;
    let flat = g.value(fixed).clone().with_shape(vec![n])?;
    Ok(WeightVector { flat, gauge_fixed: true })
}

/// True when `w` already satisfies the canonical-form invariants to within
/// `tol`: unit mean square for every non-final filter block, zero-mean
/// final-layer biases.
pub fn is_gauge_fixed(w: &WeightVector, arch: &ArchDescriptor, tol: f64) -> Result<bool> {
    let layout = arch.layout()?;
    if w.len() != layout.total {
        return Err(Error::ShapeMismatch {
            op: "is_gauge_fixed".into(),
            detail: format!("θ has {} elements, architecture needs {}", w.len(), layout.total),
        });
    }
    let data = w.flat.data();
    let m = layout.layers.len();
    for l in 0..m.saturating_sub(1) {
        let ll = &layout.layers[l];
        for i in 0..ll.filters {
            let block = &data[layout.filter_range(l, i)];
            let meansq = block.iter().map(|v| v * v).sum::<f64>() / ll.block as f64;
            if (meansq - 1.0).abs() > tol {
                return Ok(false);
            }
        }
    }
    let bias_cols = layout.last_layer_bias_cols();
    let mean = bias_cols.iter().map(|&c| data[c]).sum::<f64>() / bias_cols.len() as f64;
    Ok(mean.abs() <= tol)
}

/// Apply a random gauge symmetry: every non-final filter is rescaled by a
/// log-uniform positive factor (with compensating inverse scaling of the
/// weights reading it), and a random constant is added to the final-layer
/// biases. The network function is unchanged.
pub fn random_symmetry(w: &WeightVector, arch: &ArchDescriptor, rng: &mut impl rand::Rng) -> Result<WeightVector> {
    let layout = arch.layout()?;
    if w.len() != layout.total {
        return Err(Error::ShapeMismatch {
            op: "random_symmetry".into(),
            detail: format!("θ has {} elements, architecture needs {}", w.len(), layout.total),
        });
    }
    let mut out = w.clone();
    out.gauge_fixed = false;
    let m = layout.layers.len();
    for l in 0..m.saturating_sub(1) {
        for i in 0..layout.layers[l].filters {
            let s = (rng.gen_range(-2.0f64..2.0)).exp();
            for v in out.flat.data_mut()[layout.filter_range(l, i)].iter_mut() {
                *v *= s;
            }
            for c in layout.incoming_cols(l + 1, i) {
                out.flat.data_mut()[c] /= s;
            }
        }
    }
    let shift = rng.gen_range(-5.0f64..5.0);
    for c in layout.last_layer_bias_cols() {
        out.flat.data_mut()[c] += shift;
    }
    Ok(out)
}
