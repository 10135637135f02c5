use std::f64::consts::{PI, TAU};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Category, Frame, Sequence};
use crate::error::{Error, Result};
use crate::geometry::{Box3D, PointCloud};

/// For `pointDensity` at or above this value every frame carries at least
/// one target point.
pub const DENSITY_FLOOR: f64 = 1.0;

/// Range at which `pointDensity` (points per m² of surface) applies; density
/// falls off with the inverse square of range beyond it.
const REF_RANGE: f64 = 10.0;
const SENSOR_HEIGHT: f64 = 1.7;
/// Gap between the ground and the bottom face of every object.
const LIFT: f64 = 0.05;
const MAX_TURN: f64 = 0.08;
const GROUND_RADIUS: f64 = 6.0;
const GROUND_DENSITY: f64 = 0.25;
const NOISE: f64 = 0.01;
/// Surface samples stay this fraction inside the box faces.
const SHELL: f64 = 0.98;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetKind {
    /// Car-like cuboid, 4.0 × 1.8 × 1.5 m.
    Slab,
    /// Upright round body, 1.2 × 1.2 × 1.6 m.
    Cylinder,
    /// Pedestrian-like: legs and torso, 0.6 × 0.4 × 1.7 m.
    CapsulePair,
}

impl TargetKind {
    pub fn size(self) -> [f32; 3] {
        match self {
            TargetKind::Slab => [4.0, 1.8, 1.5],
            TargetKind::Cylinder => [1.2, 1.2, 1.6],
            TargetKind::CapsulePair => [0.6, 0.4, 1.7],
        }
    }

    pub fn category(self) -> Category {
        match self {
            TargetKind::CapsulePair => Category::NonRigid,
            _ => Category::Rigid,
        }
    }

    fn speed_range(self) -> (f64, f64) {
        match self {
            TargetKind::Slab => (0.3, 0.6),
            TargetKind::Cylinder => (0.15, 0.3),
            TargetKind::CapsulePair => (0.08, 0.15),
        }
    }

    fn name(self) -> &'static str {
        match self {
            TargetKind::Slab => "slab",
            TargetKind::Cylinder => "cylinder",
            TargetKind::CapsulePair => "capsule-pair",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SynthSpec {
    pub num_sequences: usize,
    pub frames_per_seq: usize,
    pub target_kind: TargetKind,
    pub clutter_count: usize,
    pub point_density: f64,
}

impl SynthSpec {
    fn validate(&self) -> Result<()> {
        if self.num_sequences == 0 || self.frames_per_seq < 2 {
            return Err(Error::InvalidArgument(format!(
                "need at least one sequence of two frames, got {} × {}",
                self.num_sequences, self.frames_per_seq
            )));
        }
        if !(self.point_density > 0.0 && self.point_density.is_finite()) {
            return Err(Error::InvalidArgument(format!("point density must be positive, got {}", self.point_density)));
        }
        Ok(())
    }
}

/// Deterministic synthetic benchmark. Sequence `i` draws from its own
/// stream of the seeded generator, so sequences are independent of one
/// another's length.
pub fn generate_synthetic(seed: u64, spec: &SynthSpec) -> Result<Vec<Sequence>> {
    spec.validate()?;
    (0..spec.num_sequences)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64 + 1);
            generate_sequence(format!("{}-{i:03}", spec.target_kind.name()), spec, &mut rng)
        })
        .collect()
}

#[derive(Clone, Copy)]
enum Shape {
    Cuboid,
    Column,
    Walker,
}

struct Object {
    shape: Shape,
    size: [f64; 3],
    center: [f64; 2],
    heading: f64,
}

fn generate_sequence(id: String, spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Result<Sequence> {
    let kind = spec.target_kind;
    let size = kind.size();
    let size64 = size.map(f64::from);
    let shape = match kind {
        TargetKind::Slab => Shape::Cuboid,
        TargetKind::Cylinder => Shape::Column,
        TargetKind::CapsulePair => Shape::Walker,
    };

    let range = rng.gen_range(6.0..14.0);
    let az = rng.gen_range(-PI..PI);
    let mut pos = [range * az.cos(), range * az.sin()];
    let mut heading = rng.gen_range(-PI..PI);
    let (lo, hi) = kind.speed_range();
    let speed = rng.gen_range(lo..hi);
    let mut track = Vec::with_capacity(spec.frames_per_seq);
    for _ in 0..spec.frames_per_seq {
        track.push((pos, heading));
        heading += rng.gen_range(-MAX_TURN..MAX_TURN);
        pos = [pos[0] + speed * heading.cos(), pos[1] + speed * heading.sin()];
    }

    let clutter = place_clutter(spec, shape, size64, &track, rng);

    let mut frames = Vec::with_capacity(track.len());
    for (t, &(c, h)) in track.iter().enumerate() {
        let gt = Box3D::new([c[0] as f32, c[1] as f32, (size64[2] / 2.0 + LIFT) as f32], size, h as f32)?;
        let target = Object { shape, size: size64, center: c, heading: h };
        let sway = 0.05 * (t as f64 * 0.9).sin();
        let mut pts = sample_object(&target, spec.point_density, sway, rng);
        if pts.is_empty() && spec.point_density >= DENSITY_FLOOR {
            pts = force_visible(&target, sway, rng);
        }
        for o in &clutter {
            pts.extend(sample_object(o, spec.point_density, 0.0, rng));
        }
        pts.extend(sample_ground(c, spec.point_density, rng));
        pts.shuffle(rng);
        frames.push(Frame { cloud: PointCloud::new(pts), gt });
    }
    Ok(Sequence { id, category: kind.category(), frames })
}

/// Half of the clutter are same-kind distractors standing beside the
/// target's path; the rest are poles and crates. All clutter is static.
fn place_clutter(
    spec: &SynthSpec,
    shape: Shape,
    size: [f64; 3],
    track: &[([f64; 2], f64)],
    rng: &mut ChaCha8Rng,
) -> Vec<Object> {
    let n_near = spec.clutter_count.div_ceil(2);
    let target_r = 0.5 * size[0].hypot(size[1]);
    let mut out: Vec<Object> = Vec::new();
    for k in 0..spec.clutter_count {
        for _attempt in 0..50 {
            let o = if k < n_near {
                let (anchor, h) = track[rng.gen_range(0..track.len())];
                let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                let d = rng.gen_range(1.0..3.0) + target_r;
                let along = rng.gen_range(-1.0..1.0);
                let s = rng.gen_range(0.9..1.1);
                Object {
                    shape,
                    size: size.map(|v| v * s),
                    center: [
                        anchor[0] - side * d * h.sin() + along * h.cos(),
                        anchor[1] + side * d * h.cos() + along * h.sin(),
                    ],
                    heading: h + rng.gen_range(-0.5..0.5),
                }
            } else {
                let (anchor, _) = track[rng.gen_range(0..track.len())];
                let a = rng.gen_range(0.0..TAU);
                let d = rng.gen_range(1.5..6.0);
                let center = [anchor[0] + d * a.cos(), anchor[1] + d * a.sin()];
                if rng.gen_bool(0.5) {
                    Object { shape: Shape::Column, size: [0.3, 0.3, 3.0], center, heading: 0.0 }
                } else {
                    let s = [rng.gen_range(0.5..2.0), rng.gen_range(0.5..2.0), rng.gen_range(0.5..1.2)];
                    Object { shape: Shape::Cuboid, size: s, center, heading: rng.gen_range(-PI..PI) }
                }
            };
            let r = 0.5 * o.size[0].hypot(o.size[1]);
            let clear_of_target = track
                .iter()
                .all(|(c, _)| (c[0] - o.center[0]).hypot(c[1] - o.center[1]) > target_r + r + 0.3);
            let clear_of_others = out
                .iter()
                .all(|p| (p.center[0] - o.center[0]).hypot(p.center[1] - o.center[1]) > 0.5 * p.size[0].hypot(p.size[1]) + r);
            if clear_of_target && clear_of_others {
                out.push(o);
                break;
            }
        }
    }
    out
}

fn falloff(x: f64, y: f64) -> f64 {
    let d = x.hypot(y).max(REF_RANGE);
    (REF_RANGE / d).powi(2)
}

fn stochastic_round(x: f64, rng: &mut ChaCha8Rng) -> usize {
    let f = x.floor();
    f as usize + usize::from(rng.gen::<f64>() < x - f)
}

/// A surface sample in the object frame with its outward normal.
type Patch = ([f64; 3], [f64; 3]);

fn surface_area(o: &Object) -> f64 {
    let [w, l, h] = o.size;
    match o.shape {
        Shape::Cuboid => 2.0 * (w * l + w * h + l * h),
        Shape::Column | Shape::Walker => PI * 0.5 * (w + l) * h + PI * w * l / 4.0,
    }
}

fn sample_surface(o: &Object, sway: f64, rng: &mut ChaCha8Rng) -> Patch {
    let [hw, hl, hh] = o.size.map(|v| v / 2.0 * SHELL);
    match o.shape {
        Shape::Cuboid => {
            let faces = [hl * hh, hl * hh, hw * hh, hw * hh, hw * hl, hw * hl];
            let total: f64 = faces.iter().sum();
            let mut pick = rng.gen_range(0.0..total);
            let mut face = 0;
            while pick > faces[face] && face < 5 {
                pick -= faces[face];
                face += 1;
            }
            let (u, v) = (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            match face {
                0 => ([hw, u * hl, v * hh], [1.0, 0.0, 0.0]),
                1 => ([-hw, u * hl, v * hh], [-1.0, 0.0, 0.0]),
                2 => ([u * hw, hl, v * hh], [0.0, 1.0, 0.0]),
                3 => ([u * hw, -hl, v * hh], [0.0, -1.0, 0.0]),
                4 => ([u * hw, v * hl, hh], [0.0, 0.0, 1.0]),
                _ => ([u * hw, v * hl, -hh], [0.0, 0.0, -1.0]),
            }
        }
        Shape::Column => column(hw, hl, -hh, hh, 0.0, rng),
        Shape::Walker => {
            // Legs fill the lower half with a narrower section; the torso
            // the upper half.
            if rng.gen_bool(0.45) {
                let (a, b) = (0.6 * hw, 0.8 * hl);
                let s = sway.clamp(-(hw - a), hw - a);
                column(a, b, -hh, 0.0, s, rng)
            } else {
                column(hw, hl, 0.0, hh, 0.0, rng)
            }
        }
    }
}

/// Elliptic column side (and top cap) between `z0` and `z1`, shifted by `dx`.
fn column(a: f64, b: f64, z0: f64, z1: f64, dx: f64, rng: &mut ChaCha8Rng) -> Patch {
    let side = PI * (a + b) * (z1 - z0);
    let cap = PI * a * b;
    if rng.gen_range(0.0..side + cap) < side {
        let phi = rng.gen_range(0.0..TAU);
        let (s, c) = phi.sin_cos();
        let n = [c / a, s / b, 0.0];
        let len = n[0].hypot(n[1]);
        ([dx + a * c, b * s, rng.gen_range(z0..z1)], [n[0] / len, n[1] / len, 0.0])
    } else {
        let r = rng.gen::<f64>().sqrt();
        let phi = rng.gen_range(0.0..TAU);
        ([dx + a * r * phi.cos(), b * r * phi.sin(), z1], [0.0, 0.0, 1.0])
    }
}

fn to_world(o: &Object, p: [f64; 3]) -> [f64; 3] {
    let (s, c) = o.heading.sin_cos();
    [
        c * p[0] - s * p[1] + o.center[0],
        s * p[0] + c * p[1] + o.center[1],
        p[2] + o.size[2] / 2.0 + LIFT,
    ]
}

fn rotate(o: &Object, n: [f64; 3]) -> [f64; 3] {
    let (s, c) = o.heading.sin_cos();
    [c * n[0] - s * n[1], s * n[0] + c * n[1], n[2]]
}

fn faces_sensor(p: [f64; 3], n: [f64; 3]) -> bool {
    let to_sensor = [-p[0], -p[1], SENSOR_HEIGHT - p[2]];
    n[0] * to_sensor[0] + n[1] * to_sensor[1] + n[2] * to_sensor[2] > 0.0
}

/// Visible surface points. Sensor noise is added in the object frame and
/// clamped to the shell so every sample stays inside its box.
fn sample_object(o: &Object, density: f64, sway: f64, rng: &mut ChaCha8Rng) -> Vec<[f32; 3]> {
    let expected = density * surface_area(o) * falloff(o.center[0], o.center[1]);
    let n = stochastic_round(expected, rng);
    let half = o.size.map(|v| v / 2.0 * SHELL);
    let mut out = Vec::new();
    for _ in 0..n {
        let (p, nrm) = sample_surface(o, sway, rng);
        let w = to_world(o, p);
        if faces_sensor(w, rotate(o, nrm)) {
            let q: [f64; 3] = std::array::from_fn(|k| (p[k] + rng.gen_range(-NOISE..NOISE)).clamp(-half[k], half[k]));
            out.push(to_world(o, q).map(|v| v as f32));
        }
    }
    out
}

fn force_visible(o: &Object, sway: f64, rng: &mut ChaCha8Rng) -> Vec<[f32; 3]> {
    loop {
        let (p, nrm) = sample_surface(o, sway, rng);
        let w = to_world(o, p);
        if faces_sensor(w, rotate(o, nrm)) {
            return vec![w.map(|v| v as f32)];
        }
    }
}

fn sample_ground(c: [f64; 2], density: f64, rng: &mut ChaCha8Rng) -> Vec<[f32; 3]> {
    let area = PI * GROUND_RADIUS * GROUND_RADIUS;
    let n = stochastic_round(GROUND_DENSITY * density * area * falloff(c[0], c[1]), rng);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let r = GROUND_RADIUS * rng.gen::<f64>().sqrt();
        let a = rng.gen_range(0.0..TAU);
        let (x, y) = (c[0] + r * a.cos(), c[1] + r * a.sin());
        out.push([x as f32, y as f32, rng.gen_range(-NOISE..NOISE) as f32]);
    }
    out
}
