//! One-pass evaluation: sequential tracking fed by its own predictions,
//! Success/Precision and CSV reports.

pub mod ablation;
mod metrics;

use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{absolute_box, SampleConfig, Sequence};
use crate::error::{Error, Result};
use crate::geometry::{center_distance, rotated_iou_3d, Box3D, PointCloud};
use crate::model::{decode_box, MapValues, Model};
use crate::nn::{ParamStore, Scope};

pub use metrics::{precision_auc, success_auc};

pub const FRAME_HEADER: &str = "seq,frame,iou,center_err";
pub const SUMMARY_HEADER: &str = "seq,success,precision";

/// What a tracker sees for frame `frame` of `seq`.
pub struct TrackInput<'a> {
    pub seq: &'a Sequence,
    pub frame: usize,
    /// Search region in the frame of `reference`.
    pub search: &'a PointCloud,
    /// Template in its canonical box frame.
    pub template: &'a PointCloud,
    /// Previous prediction.
    pub reference: &'a Box3D,
    /// Target size, from the first frame.
    pub size: [f32; 3],
}

pub trait Tracker: Sync {
    /// World-frame box for the current frame.
    fn predict(&self, input: &TrackInput) -> Result<Box3D>;
}

/// Returns the ground truth.
pub struct OracleTracker;

impl Tracker for OracleTracker {
    fn predict(&self, input: &TrackInput) -> Result<Box3D> {
        Ok(input.seq.frames[input.frame].gt)
    }
}

pub struct ModelTracker<'a> {
    pub model: &'a Model,
    pub store: &'a ParamStore<f32>,
}

impl Tracker for ModelTracker<'_> {
    fn predict(&self, input: &TrackInput) -> Result<Box3D> {
        let mut s = Scope::new(self.store, false);
        let fwd = self.model.forward(&mut s, input.search, input.template)?;
        let maps = MapValues::read(&s.g, &fwd.maps);
        let local = decode_box(&maps, &self.model.cfg.output_grid(), input.size)?;
        Ok(absolute_box(&local, input.reference))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameResult {
    pub frame: usize,
    pub iou: f64,
    pub center_err: f64,
    /// The tracker had no input and the previous box was carried forward.
    pub flagged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackReport {
    pub seq: String,
    pub per_frame: Vec<FrameResult>,
    pub success: f64,
    pub precision: f64,
}

impl TrackReport {
    pub fn from_frames(seq: String, per_frame: Vec<FrameResult>) -> Result<Self> {
        let (ious, errs) = split(&per_frame);
        Ok(Self { success: success_auc(&ious)?, precision: precision_auc(&errs)?, seq, per_frame })
    }
}

fn split(frames: &[FrameResult]) -> (Vec<f64>, Vec<f64>) {
    frames.iter().map(|f| (f.iou, f.center_err)).unzip()
}

/// Tracks `seq` once from its first ground-truth box. Each later frame is
/// searched around the previous prediction with a template built from the
/// first ground-truth crop and the previous predicted crop. Frame 0 is
/// reported with its ground truth. `seed` drives point resampling.
pub fn track_sequence(tracker: &dyn Tracker, seq: &Sequence, cfg: &SampleConfig, seed: u64) -> Result<TrackReport> {
    if seq.frames.len() < 2 {
        return Err(Error::InvalidArgument(format!("sequence `{}` has fewer than two frames", seq.id)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let first = &seq.frames[0];
    let mut preds = vec![first.gt];
    let mut flags = vec![false];
    for t in 1..seq.frames.len() {
        let prev = preds[t - 1];
        let template = cfg.template(&[(&first.cloud, &first.gt), (&seq.frames[t - 1].cloud, &prev)], &mut rng);
        let search = cfg.search_region(&seq.frames[t].cloud, &prev, &mut rng);
        let (pred, flagged) = match (search, template) {
            (Ok(search), Ok(template)) => {
                let input = TrackInput {
                    seq,
                    frame: t,
                    search: &search,
                    template: &template,
                    reference: &prev,
                    size: first.gt.size,
                };
                (tracker.predict(&input)?, false)
            }
            (Err(Error::EmptySearchRegion), _) | (_, Err(Error::EmptyCloud(_))) => (prev, true),
            (Err(e), _) | (_, Err(e)) => return Err(e),
        };
        preds.push(pred);
        flags.push(flagged);
    }
    let per_frame = seq
        .frames
        .iter()
        .zip(preds.iter().zip(flags))
        .enumerate()
        .map(|(frame, (f, (p, flagged)))| FrameResult {
            frame,
            iou: rotated_iou_3d(p, &f.gt).clamp(0.0, 1.0),
            center_err: center_distance(p, &f.gt),
            flagged,
        })
        .collect();
    TrackReport::from_frames(seq.id.clone(), per_frame)
}

/// Tracks every sequence (in parallel) and returns the reports in input
/// order.
pub fn track_all(tracker: &dyn Tracker, seqs: &[Sequence], cfg: &SampleConfig, seed: u64) -> Result<Vec<TrackReport>> {
    seqs.par_iter().map(|s| track_sequence(tracker, s, cfg, seed)).collect()
}

/// Success and Precision over the pooled frames of all reports.
pub fn overall(reports: &[TrackReport]) -> Result<(f64, f64)> {
    let frames: Vec<FrameResult> = reports.iter().flat_map(|r| r.per_frame.iter().cloned()).collect();
    let (ious, errs) = split(&frames);
    Ok((success_auc(&ious)?, precision_auc(&errs)?))
}

pub fn write_frame_csv(reports: &[TrackReport], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(FRAME_HEADER.split(','))?;
    for r in reports {
        for f in &r.per_frame {
            w.write_record([r.seq.clone(), f.frame.to_string(), f.iou.to_string(), f.center_err.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_summary_csv(reports: &[TrackReport], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SUMMARY_HEADER.split(','))?;
    for r in reports {
        w.write_record([r.seq.clone(), r.success.to_string(), r.precision.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Parses a per-frame CSV back into reports, one per sequence in order of
/// first appearance.
pub fn read_frame_csv(input: impl Read) -> Result<Vec<TrackReport>> {
    let mut r = csv::Reader::from_reader(input);
    if r.headers()?.iter().collect::<Vec<_>>().join(",") != FRAME_HEADER {
        return Err(Error::InvalidArgument(format!("report header must be `{FRAME_HEADER}`")));
    }
    let mut groups: Vec<(String, Vec<FrameResult>)> = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let field = |i: usize| rec.get(i).ok_or_else(|| Error::InvalidArgument(format!("short report row {rec:?}")));
        let num = |i: usize| -> Result<f64> {
            field(i)?.parse().map_err(|_| Error::InvalidArgument(format!("bad number in report row {rec:?}")))
        };
        let seq = field(0)?.to_string();
        let frame = field(1)?
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("bad frame index in report row {rec:?}")))?;
        let fr = FrameResult { frame, iou: num(2)?, center_err: num(3)?, flagged: false };
        match groups.iter_mut().find(|(s, _)| *s == seq) {
            Some((_, v)) => v.push(fr),
            None => groups.push((seq, vec![fr])),
        }
    }
    if groups.is_empty() {
        return Err(Error::InvalidArgument("report has no rows".into()));
    }
    groups.into_iter().map(|(s, f)| TrackReport::from_frames(s, f)).collect()
}
