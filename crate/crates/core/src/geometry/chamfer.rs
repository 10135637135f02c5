use super::PointCloud;
use crate::error::{Error, Result};

/// Symmetric Chamfer distance with unnormalized sums:
/// `Σ_p min_q ‖p − q‖² + Σ_q min_p ‖q − p‖²`.
///
/// The differentiable counterpart is [`crate::tensor::Graph::chamfer`],
/// which shares this arithmetic.
pub fn chamfer_distance(p: &PointCloud, q: &PointCloud) -> Result<f64> {
    if p.is_empty() || q.is_empty() {
        return Err(Error::EmptyCloud("chamfer distance needs two non-empty clouds"));
    }
    let flat = |c: &PointCloud| c.points.iter().flatten().map(|&v| v as f64).collect::<Vec<_>>();
    let (pv, qv) = (flat(p), flat(q));
    let (_, dp) = nearest(&pv, &qv, p.len(), q.len());
    let (_, dq) = nearest(&qv, &pv, q.len(), p.len());
    Ok(dp.iter().sum::<f64>() + dq.iter().sum::<f64>())
}

/// For every point of `a[n×3]`, the index of and squared distance to its
/// nearest point of `b[m×3]` (lowest index on ties).
pub(crate) fn nearest(a: &[f64], b: &[f64], n: usize, m: usize) -> (Vec<usize>, Vec<f64>) {
    let mut idx = vec![0; n];
    let mut dist = vec![0.0; n];
    for i in 0..n {
        let (x, y, z) = (a[i * 3], a[i * 3 + 1], a[i * 3 + 2]);
        let mut best = f64::INFINITY;
        for j in 0..m {
            let (dx, dy, dz) = (x - b[j * 3], y - b[j * 3 + 1], z - b[j * 3 + 2]);
            let d = dx * dx + dy * dy + dz * dz;
            if d < best {
                best = d;
                idx[i] = j;
            }
        }
        dist[i] = best;
    }
    (idx, dist)
}
