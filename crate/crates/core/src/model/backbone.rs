use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{farthest_point_sample, knn, PointCloud};
use crate::nn::{AttentionBlock, Builder, Mlp, Scope};
use crate::tensor::{Scalar, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct BackboneConfig {
    pub feature_dim: usize,
    /// Points kept after each encoder stage for the search region.
    pub search_fps: Vec<usize>,
    /// Same for the template; must have as many stages as `search_fps`.
    pub template_fps: Vec<usize>,
    pub neighbor_k: usize,
    pub heads: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self { feature_dim: 32, search_fps: vec![256, 128], template_fps: vec![128, 64], neighbor_k: 16, heads: 4 }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let c = self.feature_dim;
        if c == 0 || self.heads == 0 || c % self.heads != 0 {
            return Err(Error::InvalidArgument(format!("feature dim {c} not divisible by {} heads", self.heads)));
        }
        if self.search_fps.is_empty() || self.search_fps.len() != self.template_fps.len() {
            return Err(Error::InvalidArgument("search and template need the same nonzero stage count".into()));
        }
        for fps in [&self.search_fps, &self.template_fps] {
            if fps.windows(2).any(|w| w[1] >= w[0]) || fps.contains(&0) {
                return Err(Error::InvalidArgument(format!("fps targets must be strictly decreasing, got {fps:?}")));
            }
        }
        if self.neighbor_k == 0 {
            return Err(Error::InvalidArgument("neighbor_k must be positive".into()));
        }
        Ok(())
    }
}

/// Encoder output: one feature row per surviving point.
pub struct Encoded {
    pub feats: Var,
    pub coords: PointCloud,
}

/// Stages of per-point MLP, farthest-point downsampling and k-nearest
/// neighbor max pooling. Stages after the first also see the coordinates.
pub struct Encoder {
    stages: Vec<Mlp>,
    k: usize,
}

impl Encoder {
    pub fn new<T: Scalar>(b: &mut Builder<T>, cfg: &BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.feature_dim;
        b.scoped("encoder", |b| {
            let stages = (0..cfg.search_fps.len())
                .map(|i| {
                    let dims = if i == 0 { vec![3, c / 2, c] } else { vec![c + 3, c, c] };
                    Mlp::new(b, &format!("stage{i}"), &dims, true)
                })
                .collect::<Result<_>>()?;
            Ok(Self { stages, k: cfg.neighbor_k })
        })
    }

    /// Per-point features of stage `stage` before any downsampling.
    pub fn pointwise<T: Scalar>(&self, s: &mut Scope<T>, stage: usize, coords: &PointCloud, feats: Option<Var>) -> Result<Var> {
        let xyz = s.input(coords.to_tensor()?);
        let x = match feats {
            Some(f) => s.g.concat_cols(&[f, xyz])?,
            None => xyz,
        };
        self.stages[stage].forward(s, x)
    }

    pub fn encode<T: Scalar>(&self, s: &mut Scope<T>, pc: &PointCloud, fps: &[usize]) -> Result<Encoded> {
        if fps.len() != self.stages.len() {
            return Err(Error::InvalidArgument(format!("{} fps targets for {} stages", fps.len(), self.stages.len())));
        }
        let need = fps[0];
        if pc.len() < need {
            return Err(Error::InvalidArgument(format!("encoder needs at least {need} points, got {}", pc.len())));
        }
        let mut coords = pc.clone();
        let mut feats = None;
        for (stage, &m) in fps.iter().enumerate() {
            let x = self.pointwise(s, stage, &coords, feats)?;
            let centers = farthest_point_sample(&coords, m, 0)?;
            let k = self.k.min(coords.len());
            let flat: Vec<usize> = knn(&coords, &centers, k).concat();
            let grouped = s.g.gather_rows(x, &flat)?;
            feats = Some(s.g.group_max(grouped, k)?);
            coords = coords.select(&centers);
        }
        Ok(Encoded { feats: feats.expect("at least one stage"), coords })
    }
}

/// Template-to-search relation modeling: one cross-attention block with
/// the search features as queries.
pub struct RelationFusion {
    block: AttentionBlock,
    dim: usize,
}

impl RelationFusion {
    pub fn new<T: Scalar>(b: &mut Builder<T>, cfg: &BackboneConfig) -> Result<Self> {
        let block = AttentionBlock::new(b, "fusion", cfg.feature_dim, cfg.heads, true)?;
        Ok(Self { block, dim: cfg.feature_dim })
    }

    pub fn forward<T: Scalar>(&self, s: &mut Scope<T>, f_t: Var, f_s: Var) -> Result<Var> {
        let (ct, cs) = (s.g.shape(f_t).last().copied(), s.g.shape(f_s).last().copied());
        if ct != Some(self.dim) || cs != Some(self.dim) {
            return Err(Error::Shape(format!(
                "relation_fuse: template {:?} and search {:?} must both have {} channels",
                s.g.shape(f_t),
                s.g.shape(f_s),
                self.dim
            )));
        }
        self.block.forward(s, f_s, f_t)
    }
}
