use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Category, Sequence};
use crate::error::{Error, Result};
use crate::geometry::{enlarge_and_crop, normalize_heading, points_in_box, Box3D, PointCloud};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct SampleConfig {
    pub search_points: usize,
    pub template_points: usize,
    /// Search-region growth on every side of the reference box, meters.
    pub margin: f64,
    /// Uniform reference-center jitter half-widths during training.
    pub jitter_xy: f64,
    pub jitter_z: f64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self { search_points: 1024, template_points: 512, margin: 2.0, jitter_xy: 0.3, jitter_z: 0.1 }
    }
}

/// One network input. All clouds except `template` live in the frame of
/// `reference`; the template lives in its own canonical box frame.
#[derive(Clone, Debug)]
pub struct TrainingSample {
    pub search: PointCloud,
    pub template: PointCloud,
    /// Ground truth relative to `reference`.
    pub gt: Box3D,
    pub aligned_template: PointCloud,
    /// World pose the search region was cut around.
    pub reference: Box3D,
    pub category: Category,
}

impl SampleConfig {
    /// Crop around `reference`, move into its frame and resample.
    pub fn search_region(&self, cloud: &PointCloud, reference: &Box3D, rng: &mut impl Rng) -> Result<PointCloud> {
        let crop = enlarge_and_crop(cloud, reference, self.margin)?;
        if crop.is_empty() {
            return Err(Error::EmptySearchRegion);
        }
        crop.to_local(reference).resample(self.search_points, rng)
    }

    /// Union of the in-box points of each `(cloud, box)` pair, each in its
    /// own box frame, resampled.
    pub fn template(&self, parts: &[(&PointCloud, &Box3D)], rng: &mut impl Rng) -> Result<PointCloud> {
        let mut all = PointCloud::default();
        for (cloud, b) in parts {
            all.extend(&cloud.select(&points_in_box(cloud, b)).to_local(b));
        }
        if all.is_empty() {
            return Err(Error::EmptyCloud("no target points for the template"));
        }
        all.resample(self.template_points, rng)
    }
}

/// `b` expressed in the frame of `reference`.
pub fn relative_box(b: &Box3D, reference: &Box3D) -> Box3D {
    let c = reference.to_local(b.center_f64()).map(|v| v as f32);
    Box3D {
        center: c,
        size: b.size,
        heading: normalize_heading(b.heading as f64 - reference.heading as f64) as f32,
    }
}

/// Inverse of [`relative_box`].
pub fn absolute_box(local: &Box3D, reference: &Box3D) -> Box3D {
    let c = reference.to_world(local.center_f64()).map(|v| v as f32);
    Box3D {
        center: c,
        size: local.size,
        heading: normalize_heading(local.heading as f64 + reference.heading as f64) as f32,
    }
}

/// Training input for `frame_idx ≥ 1`: search region around the jittered
/// previous box, template from the first and previous frames.
pub fn make_training_sample(
    seq: &Sequence,
    frame_idx: usize,
    cfg: &SampleConfig,
    rng: &mut impl Rng,
) -> Result<TrainingSample> {
    if frame_idx == 0 || frame_idx >= seq.frames.len() {
        return Err(Error::InvalidArgument(format!(
            "frame index {frame_idx} out of 1..{} for `{}`",
            seq.frames.len(),
            seq.id
        )));
    }
    let (first, prev, cur) = (&seq.frames[0], &seq.frames[frame_idx - 1], &seq.frames[frame_idx]);
    let mut reference = prev.gt;
    let j = [cfg.jitter_xy, cfg.jitter_xy, cfg.jitter_z];
    for k in 0..3 {
        if j[k] > 0.0 {
            reference.center[k] += rng.gen_range(-j[k]..=j[k]) as f32;
        }
    }
    let search = cfg.search_region(&cur.cloud, &reference, rng)?;
    let template = cfg.template(&[(&first.cloud, &first.gt), (&prev.cloud, &prev.gt)], rng)?;
    let gt = relative_box(&cur.gt, &reference);
    let aligned_template = template.to_world(&gt);
    Ok(TrainingSample { search, template, gt, aligned_template, reference, category: seq.category })
}
