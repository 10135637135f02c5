use rand::seq::index;
use rand::Rng;

use super::Box3D;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Ordered 3D points in meters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f32; 3]>,
}

impl PointCloud {
    pub fn new(points: Vec<[f32; 3]>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, i: usize) -> [f64; 3] {
        self.points[i].map(f64::from)
    }

    pub fn iter_f64(&self) -> impl Iterator<Item = [f64; 3]> + '_ {
        self.points.iter().map(|p| p.map(f64::from))
    }

    pub fn validate(&self) -> Result<()> {
        match self.points.iter().position(|p| !p.iter().all(|v| v.is_finite())) {
            Some(i) => Err(Error::NonFinite(format!("point {i}: {:?}", self.points[i]))),
            None => Ok(()),
        }
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self::new(idx.iter().map(|&i| self.points[i]).collect())
    }

    pub fn map(&self, mut f: impl FnMut([f64; 3]) -> [f64; 3]) -> Self {
        Self::new(self.iter_f64().map(|p| f(p).map(|v| v as f32)).collect())
    }

    pub fn extend(&mut self, other: &PointCloud) {
        self.points.extend_from_slice(&other.points);
    }

    /// World coordinates → frame of `b`.
    pub fn to_local(&self, b: &Box3D) -> Self {
        self.map(|p| b.to_local(p))
    }

    /// Frame of `b` → world coordinates.
    pub fn to_world(&self, b: &Box3D) -> Self {
        self.map(|p| b.to_world(p))
    }

    /// `[N×3]` tensor; fails on an empty cloud.
    pub fn to_tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        if self.is_empty() {
            return Err(Error::EmptyCloud("cannot build a tensor from an empty cloud"));
        }
        Tensor::new(
            vec![self.len(), 3],
            self.points.iter().flatten().map(|&v| T::from_f64(v as f64)).collect(),
        )
    }

    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Result<Self> {
        if t.shape().len() != 2 || t.shape()[1] != 3 {
            return Err(Error::Shape(format!("expected [N×3] coordinates, got {:?}", t.shape())));
        }
        Ok(Self::new(
            t.data()
                .chunks(3)
                .map(|c| [c[0].as_f64() as f32, c[1].as_f64() as f32, c[2].as_f64() as f32])
                .collect(),
        ))
    }

    /// Exactly `n` points: a random subset when there are enough, otherwise
    /// every point once plus uniform draws with replacement.
    pub fn resample(&self, n: usize, rng: &mut impl Rng) -> Result<Self> {
        if self.is_empty() {
            return Err(Error::EmptyCloud("cannot resample an empty cloud"));
        }
        let m = self.len();
        let idx: Vec<usize> = if m >= n {
            index::sample(rng, m, n).into_vec()
        } else {
            (0..m).chain((m..n).map(|_| rng.gen_range(0..m))).collect()
        };
        Ok(self.select(&idx))
    }
}

/// Indices of points inside `b` (boundary inclusive), in cloud order.
pub fn points_in_box(pc: &PointCloud, b: &Box3D) -> Vec<usize> {
    pc.iter_f64()
        .enumerate()
        .filter(|(_, p)| b.contains(*p))
        .map(|(i, _)| i)
        .collect()
}

/// Points inside `b` grown by `margin` on every side.
pub fn enlarge_and_crop(pc: &PointCloud, b: &Box3D, margin: f64) -> Result<PointCloud> {
    if !(margin >= 0.0) {
        return Err(Error::InvalidArgument(format!("crop margin must be >= 0, got {margin}")));
    }
    let grown = b.enlarged(margin);
    Ok(pc.select(&points_in_box(pc, &grown)))
}

/// Re-poses points from the frame of `from` into the frame of `to`.
pub fn align_template_to_box(template: &PointCloud, from: &Box3D, to: &Box3D) -> PointCloud {
    template.map(|p| to.to_world(from.to_local(p)))
}

/// Greedy farthest-point sampling starting at `start`; ties go to the
/// lowest index.
pub fn farthest_point_sample(pc: &PointCloud, k: usize, start: usize) -> Result<Vec<usize>> {
    let n = pc.len();
    if k > n {
        return Err(Error::InvalidArgument(format!("cannot sample {k} of {n} points")));
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    if start >= n {
        return Err(Error::InvalidArgument(format!("start index {start} out of {n}")));
    }
    let pts: Vec<[f64; 3]> = pc.iter_f64().collect();
    let mut dist = vec![f64::INFINITY; n];
    let mut picked = Vec::with_capacity(k);
    let mut cur = start;
    for _ in 0..k {
        picked.push(cur);
        let c = pts[cur];
        let mut best = 0;
        let mut best_d = f64::NEG_INFINITY;
        for (i, p) in pts.iter().enumerate() {
            let d = sq_dist(*p, c);
            if d < dist[i] {
                dist[i] = d;
            }
            if dist[i] > best_d {
                best_d = dist[i];
                best = i;
            }
        }
        cur = best;
    }
    Ok(picked)
}

/// For each query, indices of its `k` nearest points (ascending distance,
/// ties by index).
pub fn knn(points: &PointCloud, queries: &[usize], k: usize) -> Vec<Vec<usize>> {
    let pts: Vec<[f64; 3]> = points.iter_f64().collect();
    let k = k.min(pts.len());
    queries
        .iter()
        .map(|&q| {
            let c = pts[q];
            let mut d: Vec<(f64, usize)> = pts.iter().enumerate().map(|(i, p)| (sq_dist(*p, c), i)).collect();
            if k < d.len() {
                d.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                d.truncate(k);
            }
            d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            d.into_iter().map(|(_, i)| i).collect()
        })
        .collect()
}

#[inline]
pub(crate) fn sq_dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    let (dx, dy, dz) = (a[0] - b[0], a[1] - b[1], a[2] - b[2]);
    dx * dx + dy * dy + dz * dz
}
