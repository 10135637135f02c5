//! The tracking network: shared point encoder, relation fusion, prototype
//! mining and the bird's-eye-view head.

pub mod backbone;
pub mod rgs;
pub mod tapm;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::geometry::PointCloud;
use crate::nn::{Builder, ParamStore, Scope};
use crate::tensor::{Scalar, Var};

pub use backbone::{BackboneConfig, Encoded, Encoder, RelationFusion};
pub use rgs::{
    argmax, build_targets, decode_box, upsample, voxelize_bev, BevConfig, Grid, HeadConfig, MapValues, PredictionMaps,
    RgsHead, Targets, Variant, Vit,
};
pub use tapm::{assemble_enhanced, Tapm, TapmConfig, Volume};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub tapm: TapmConfig,
    pub bev: BevConfig,
    pub head: HeadConfig,
    pub variant: Variant,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.variant.tapm {
            self.tapm.validate(self.backbone.feature_dim)?;
        }
        self.bev.validate()
    }

    pub fn output_grid(&self) -> Grid {
        self.bev.output_grid(self.variant.shuffle)
    }

    /// Volume the prototype coordinates are confined to.
    pub fn volume(&self) -> Volume {
        let g = self.bev.grid();
        let (x0, x1) = (g.xmin, g.xmin + g.rows as f64 * g.cell);
        let (y0, y1) = (g.ymin, g.ymin + g.cols as f64 * g.cell);
        let [z0, z1] = self.bev.z_range;
        Volume {
            center: [(x0 + x1) / 2.0, (y0 + y1) / 2.0, (z0 + z1) / 2.0],
            half: [(x1 - x0) / 2.0, (y1 - y0) / 2.0, (z1 - z0) / 2.0],
        }
    }
}

pub struct Model {
    pub cfg: ModelConfig,
    pub encoder: Encoder,
    pub fusion: RelationFusion,
    pub tapm: Option<Tapm>,
    pub head: RgsHead,
}

/// Everything the losses and the decoder need from one forward pass.
pub struct Forward {
    pub maps: PredictionMaps,
    pub mask: Option<Var>,
    pub prototype_feats: Option<Var>,
    pub prototypes: Option<Var>,
    pub fused: Var,
}

impl Model {
    /// Registers every parameter in `store` with seeded initialization.
    pub fn new<T: Scalar>(cfg: ModelConfig, store: &mut ParamStore<T>, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut b = Builder::new(store, seed);
        let c = cfg.backbone.feature_dim;
        let encoder = Encoder::new(&mut b, &cfg.backbone)?;
        let fusion = RelationFusion::new(&mut b, &cfg.backbone)?;
        let tapm = if cfg.variant.tapm { Some(Tapm::new(&mut b, &cfg.tapm, c)?) } else { None };
        let head = RgsHead::new(&mut b, &cfg.head, &cfg.bev.grid(), c, cfg.variant)?;
        Ok(Self { cfg, encoder, fusion, tapm, head })
    }

    /// `search` is in the reference-box frame, `template` in its own
    /// canonical box frame.
    pub fn forward<T: Scalar>(&self, s: &mut Scope<T>, search: &PointCloud, template: &PointCloud) -> Result<Forward> {
        let bb = &self.cfg.backbone;
        let ft = self.encoder.encode(s, template, &bb.template_fps)?;
        let fs = self.encoder.encode(s, search, &bb.search_fps)?;
        let fused = self.fusion.forward(s, ft.feats, fs.feats)?;

        let (mask, protos, coords, assembled) = match &self.tapm {
            Some(tapm) => {
                let (m, f_i, p_i) = tapm.forward(s, fused, &self.cfg.volume())?;
                let p_cloud = PointCloud::from_tensor(s.g.value(p_i))?;
                let a = assemble_enhanced(s, &fs.coords, fused, Some((&p_cloud, f_i)))?;
                (Some(m), Some(f_i), Some(p_i), a)
            }
            None => (None, None, None, assemble_enhanced(s, &fs.coords, fused, None)?),
        };
        let (cloud, feats) = assembled;
        let v = voxelize_bev(&mut s.g, &cloud, feats, &self.cfg.bev.grid())?;
        let maps = self.head.forward(s, v)?;
        Ok(Forward { maps, mask, prototype_feats: protos, prototypes: coords, fused })
    }
}
