//! Frames, sequences, on-disk formats, the synthetic benchmark, the
//! foreground scaling transform and training-sample assembly.

mod io;
mod sample;
mod scale;
mod synth;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Box3D, PointCloud};

pub use io::{
    decode_frame, encode_frame, load_dataset, load_sequence, read_frame, save_dataset, save_sequence, write_frame,
    Manifest, FRAME_MAGIC,
};
pub use sample::{absolute_box, make_training_sample, relative_box, SampleConfig, TrainingSample};
pub use scale::{scale_frame, scale_sequence, translate_frame};
pub use synth::{generate_synthetic, SynthSpec, TargetKind, DENSITY_FLOOR};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Category {
    Rigid,
    NonRigid,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub cloud: PointCloud,
    pub gt: Box3D,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub id: String,
    pub category: Category,
    pub frames: Vec<Frame>,
}

impl Sequence {
    /// Checks the frame count and that the box size never changes.
    pub fn validate(&self) -> Result<()> {
        if self.frames.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "sequence `{}` has {} frames, need at least 2",
                self.id,
                self.frames.len()
            )));
        }
        let size = self.frames[0].gt.size;
        for (i, f) in self.frames.iter().enumerate() {
            if f.gt.size != size {
                return Err(Error::InvalidArgument(format!(
                    "sequence `{}` frame {i}: box size {:?} differs from {:?}",
                    self.id, f.gt.size, size
                )));
            }
            f.cloud.validate()?;
        }
        Ok(())
    }
}
