use super::Box3D;

/// Intersections smaller than this (m²) count as empty.
const MIN_AREA: f64 = 1e-12;

/// Oriented 3D IoU: footprint intersection area from convex clipping times
/// the vertical overlap, over the union volume.
pub fn rotated_iou_3d(a: &Box3D, b: &Box3D) -> f64 {
    let (pa, pb) = (a.footprint(), b.footprint());
    let area_a = polygon_area(&pa);
    let area_b = polygon_area(&pb);
    let (a0, a1) = a.z_range();
    let (b0, b1) = b.z_range();
    let dz = (a1.min(b1) - a0.max(b0)).max(0.0);
    if dz <= 0.0 {
        return 0.0;
    }
    let inter_area = polygon_area(&clip_convex(&pa, &pb));
    if inter_area < MIN_AREA {
        return 0.0;
    }
    let inter = inter_area * dz;
    let union = area_a * (a1 - a0) + area_b * (b1 - b0) - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Bird's-eye-view IoU of the two footprints.
pub fn bev_iou(a: &Box3D, b: &Box3D) -> f64 {
    let (pa, pb) = (a.footprint(), b.footprint());
    let inter = polygon_area(&clip_convex(&pa, &pb));
    if inter < MIN_AREA {
        return 0.0;
    }
    (inter / (polygon_area(&pa) + polygon_area(&pb) - inter)).clamp(0.0, 1.0)
}

/// Shoelace area of a simple polygon (absolute value).
pub fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let mut s = 0.0;
    for i in 0..n {
        let (p, q) = (poly[i], poly[(i + 1) % n]);
        s += p[0] * q[1] - q[0] * p[1];
    }
    s.abs() / 2.0
}

/// Sutherland–Hodgman: clips `subject` by the convex counter-clockwise
/// polygon `clip`.
pub fn clip_convex(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut out = subject.to_vec();
    for i in 0..clip.len() {
        if out.is_empty() {
            break;
        }
        let (e0, e1) = (clip[i], clip[(i + 1) % clip.len()]);
        let side = |p: [f64; 2]| (e1[0] - e0[0]) * (p[1] - e0[1]) - (e1[1] - e0[1]) * (p[0] - e0[0]);
        let input = std::mem::take(&mut out);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let (sc, sp) = (side(cur), side(prev));
            if sc >= 0.0 {
                if sp < 0.0 {
                    out.push(intersect(prev, cur, sp, sc));
                }
                out.push(cur);
            } else if sp >= 0.0 {
                out.push(intersect(prev, cur, sp, sc));
            }
        }
    }
    out
}

fn intersect(p: [f64; 2], q: [f64; 2], sp: f64, sq: f64) -> [f64; 2] {
    let t = sp / (sp - sq);
    [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
}
