//! Independent oracles shared by the integration tests. None of these call
//! into the routine they check.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use sotrack::geometry::{box_corners, Box3D, PointCloud};

/// Edge vectors and origin of a box, derived from its corner enumeration
/// (x slowest, then y, then z).
struct CornerFrame {
    origin: [f64; 3],
    edges: [[f64; 3]; 3],
}

impl CornerFrame {
    fn of(b: &Box3D) -> Self {
        let c = box_corners(b);
        let sub = |a: [f64; 3], b: [f64; 3]| [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
        Self { origin: c[0], edges: [sub(c[4], c[0]), sub(c[2], c[0]), sub(c[1], c[0])] }
    }

    /// Fractional coordinates along the three edges (each in [0, 1] inside).
    fn fractions(&self, p: [f64; 3]) -> [f64; 3] {
        let d = [p[0] - self.origin[0], p[1] - self.origin[1], p[2] - self.origin[2]];
        self.edges.map(|e| {
            let len2 = e[0] * e[0] + e[1] * e[1] + e[2] * e[2];
            (d[0] * e[0] + d[1] * e[1] + d[2] * e[2]) / len2
        })
    }

    fn contains(&self, p: [f64; 3], tol: f64) -> bool {
        self.fractions(p).iter().all(|&f| f >= -tol && f <= 1.0 + tol)
    }

    fn point_at(&self, s: [f64; 3]) -> [f64; 3] {
        let mut p = self.origin;
        for (e, k) in self.edges.iter().zip(s) {
            for a in 0..3 {
                p[a] += k * e[a];
            }
        }
        p
    }
}

/// Membership through corner-derived edge projections.
pub fn brute_in_box(pc: &PointCloud, b: &Box3D) -> Vec<usize> {
    let f = CornerFrame::of(b);
    pc.points
        .iter()
        .enumerate()
        .filter(|(_, p)| f.contains(p.map(f64::from), 0.0))
        .map(|(i, _)| i)
        .collect()
}

/// Monte-Carlo IoU: uniform samples inside `a`, tested against `b`.
pub fn monte_carlo_iou(a: &Box3D, b: &Box3D, samples: usize, rng: &mut ChaCha8Rng) -> f64 {
    let (fa, fb) = (CornerFrame::of(a), CornerFrame::of(b));
    let mut hits = 0usize;
    for _ in 0..samples {
        let s = [rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()];
        if fb.contains(fa.point_at(s), 0.0) {
            hits += 1;
        }
    }
    let va = a.size.iter().map(|&v| v as f64).product::<f64>();
    let vb = b.size.iter().map(|&v| v as f64).product::<f64>();
    let inter = hits as f64 / samples as f64 * va;
    inter / (va + vb - inter)
}

/// Chamfer distance by explicit double loops, in the stated order: all
/// p→q minima summed, then all q→p minima summed.
pub fn brute_chamfer(p: &PointCloud, q: &PointCloud) -> f64 {
    let d2 = |a: [f32; 3], b: [f32; 3]| {
        let (dx, dy, dz) = (a[0] as f64 - b[0] as f64, a[1] as f64 - b[1] as f64, a[2] as f64 - b[2] as f64);
        dx * dx + dy * dy + dz * dz
    };
    let one_way = |a: &PointCloud, b: &PointCloud| -> f64 {
        a.points
            .iter()
            .map(|&x| b.points.iter().map(|&y| d2(x, y)).fold(f64::INFINITY, f64::min))
            .sum()
    };
    one_way(p, q) + one_way(q, p)
}

/// Greedy max-min selection recomputed from scratch at every step.
pub fn brute_fps(pc: &PointCloud, k: usize, start: usize) -> Vec<usize> {
    let pts: Vec<[f64; 3]> = pc.points.iter().map(|p| p.map(f64::from)).collect();
    let d = |a: [f64; 3], b: [f64; 3]| (0..3).map(|i| (a[i] - b[i]).powi(2)).sum::<f64>();
    let mut sel = vec![start];
    while sel.len() < k {
        let mut best = (f64::NEG_INFINITY, 0);
        for (i, &p) in pts.iter().enumerate() {
            let m = sel.iter().map(|&s| d(p, pts[s])).fold(f64::INFINITY, f64::min);
            if m > best.0 {
                best = (m, i);
            }
        }
        sel.push(best.1);
    }
    sel
}

pub fn min_pairwise(pc: &PointCloud, idx: &[usize]) -> f64 {
    let mut m = f64::INFINITY;
    for (a, &i) in idx.iter().enumerate() {
        for &j in &idx[a + 1..] {
            let (p, q) = (pc.point(i), pc.point(j));
            m = m.min((0..3).map(|k| (p[k] - q[k]).powi(2)).sum::<f64>().sqrt());
        }
    }
    m
}

pub fn random_box(rng: &mut ChaCha8Rng) -> Box3D {
    Box3D::new(
        [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(-1.0..1.0)],
        [rng.gen_range(0.3..3.0), rng.gen_range(0.3..3.0), rng.gen_range(0.3..2.0)],
        rng.gen_range(-3.14..3.14),
    )
    .unwrap()
}

/// A box overlapping `a`: center jittered within its extents.
pub fn nearby_box(a: &Box3D, rng: &mut ChaCha8Rng) -> Box3D {
    let c = a.center;
    let s = a.size;
    Box3D::new(
        [
            c[0] + rng.gen_range(-0.6..0.6) * s[0],
            c[1] + rng.gen_range(-0.6..0.6) * s[1],
            c[2] + rng.gen_range(-0.4..0.4) * s[2],
        ],
        [
            s[0] * rng.gen_range(0.6..1.5),
            s[1] * rng.gen_range(0.6..1.5),
            s[2] * rng.gen_range(0.6..1.5),
        ],
        a.heading + rng.gen_range(-1.0..1.0),
    )
    .unwrap()
}

pub fn random_cloud(n: usize, extent: f32, rng: &mut ChaCha8Rng) -> PointCloud {
    PointCloud::new(
        (0..n)
            .map(|_| [rng.gen_range(-extent..extent), rng.gen_range(-extent..extent), rng.gen_range(-extent..extent)])
            .collect(),
    )
}
