use super::{Frame, Sequence};
use crate::error::{Error, Result};
use crate::geometry::{points_in_box, Box3D};

/// Shrinks the in-box points toward the box center by `r` and scales the box
/// size by `r`. Points outside the box are copied untouched.
pub fn scale_frame(frame: &Frame, r: f64) -> Result<Frame> {
    check_rate(r)?;
    let gt = frame.gt;
    let c = gt.center_f64();
    let mut cloud = frame.cloud.clone();
    for i in points_in_box(&frame.cloud, &gt) {
        let p = cloud.points[i];
        cloud.points[i] = [0, 1, 2].map(|k| (c[k] + r * (p[k] as f64 - c[k])) as f32);
    }
    Ok(Frame { cloud, gt: gt.scaled(r) })
}

pub fn scale_sequence(seq: &Sequence, r: f64) -> Result<Sequence> {
    check_rate(r)?;
    Ok(Sequence {
        id: seq.id.clone(),
        category: seq.category,
        frames: seq.frames.iter().map(|f| scale_frame(f, r)).collect::<Result<_>>()?,
    })
}

/// Rigidly shifts every point and the box by `t`.
pub fn translate_frame(frame: &Frame, t: [f64; 3]) -> Frame {
    let cloud = frame.cloud.map(|p| [p[0] + t[0], p[1] + t[1], p[2] + t[2]]);
    let c = frame.gt.center;
    let gt = Box3D { center: [0, 1, 2].map(|k| (c[k] as f64 + t[k]) as f32), ..frame.gt };
    Frame { cloud, gt }
}

fn check_rate(r: f64) -> Result<()> {
    if r > 0.0 && r <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("scaling rate must be in (0, 1], got {r}")))
    }
}
