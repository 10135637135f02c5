use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Box3D, PointCloud};
use crate::nn::{AttentionBlock, Builder, Conv2d, LayerNorm, Linear, ParamId, Scope};
use crate::tensor::{Graph, Scalar, Var};

/// Initial heat-head bias: `σ(-2.19) ≈ 0.1`, so early focal losses are not
/// swamped by the negatives.
const HEAT_PRIOR: f64 = -2.19;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct BevConfig {
    pub voxel_size: f64,
    pub x_range: [f64; 2],
    pub y_range: [f64; 2],
    /// Vertical extent of the prototype volume; the map itself ignores z.
    pub z_range: [f64; 2],
}

impl Default for BevConfig {
    fn default() -> Self {
        Self { voxel_size: 0.2, x_range: [-2.4, 2.4], y_range: [-2.4, 2.4], z_range: [-1.0, 1.0] }
    }
}

/// A regular grid over the region; row index `i` runs along x and column
/// index `j` along y, stored row-major.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Grid {
    pub rows: usize,
    pub cols: usize,
    pub cell: f64,
    pub xmin: f64,
    pub ymin: f64,
}

impl Grid {
    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }

    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let (ci, cj) = ((x - self.xmin) / self.cell, (y - self.ymin) / self.cell);
        if !(ci >= 0.0 && cj >= 0.0) {
            return None;
        }
        let (i, j) = (ci.floor() as usize, cj.floor() as usize);
        (i < self.rows && j < self.cols).then_some((i, j))
    }
}

/// Snaps `x / v` to the nearest integer when it is within rounding noise,
/// otherwise rounds in the direction given.
fn cell_count(x: f64, v: f64, up: bool) -> i64 {
    let r = x / v;
    let n = r.round();
    if (r - n).abs() < 1e-9 {
        n as i64
    } else if up {
        r.ceil() as i64
    } else {
        r.floor() as i64
    }
}

impl BevConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.voxel_size > 0.0
            && self.x_range[1] > self.x_range[0]
            && self.y_range[1] > self.y_range[0]
            && self.z_range[1] > self.z_range[0];
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("degenerate BEV configuration {self:?}")))
        }
    }

    /// Input grid at the voxel size, extents rounded outward to whole cells.
    pub fn grid(&self) -> Grid {
        let v = self.voxel_size;
        let (i0, i1) = (cell_count(self.x_range[0], v, false), cell_count(self.x_range[1], v, true));
        let (j0, j1) = (cell_count(self.y_range[0], v, false), cell_count(self.y_range[1], v, true));
        Grid { rows: (i1 - i0) as usize, cols: (j1 - j0) as usize, cell: v, xmin: i0 as f64 * v, ymin: j0 as f64 * v }
    }

    /// Prediction grid: doubled per side when the map is super-resolved.
    pub fn output_grid(&self, shuffle: bool) -> Grid {
        let g = self.grid();
        if shuffle {
            Grid { rows: 2 * g.rows, cols: 2 * g.cols, cell: g.cell / 2.0, ..g }
        } else {
            g
        }
    }
}

/// Channel-wise max of the features of the points in each cell; empty
/// cells are zero and points outside the grid are dropped.
pub fn voxelize_bev<T: Scalar>(g: &mut Graph<T>, coords: &PointCloud, feats: Var, grid: &Grid) -> Result<Var> {
    let c = *g.shape(feats).last().unwrap_or(&0);
    let bins: Vec<Option<usize>> = coords
        .iter_f64()
        .map(|p| grid.cell_of(p[0], p[1]).map(|(i, j)| i * grid.cols + j))
        .collect();
    g.scatter_max(feats, &bins, grid.cells(), &[grid.rows, grid.cols, c])
}

/// One token per pixel with a learned positional embedding, a stack of
/// pre-normalized self-attention blocks, a final normalization and a
/// per-pixel projection.
pub struct Vit {
    pub pos: ParamId,
    pub blocks: Vec<AttentionBlock>,
    pub norm: LayerNorm,
    pub proj: Linear,
    rows: usize,
    cols: usize,
    dim: usize,
    out: usize,
}

impl Vit {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        b: &mut Builder<T>,
        rows: usize,
        cols: usize,
        dim: usize,
        depth: usize,
        heads: usize,
        out: usize,
    ) -> Result<Self> {
        b.scoped("vit", |b| {
            // std 0.02, small next to the pooled features
            let pos = b.uniform("pos", &[rows * cols, dim], 0.02 * 3f64.sqrt())?;
            let blocks = (0..depth)
                .map(|i| AttentionBlock::new(b, &format!("block{i}"), dim, heads, false))
                .collect::<Result<_>>()?;
            let norm = LayerNorm::new(b, "norm", dim)?;
            let proj = Linear::new(b, "proj", dim, out)?;
            Ok(Self { pos, blocks, norm, proj, rows, cols, dim, out })
        })
    }

    pub fn forward<T: Scalar>(&self, s: &mut Scope<T>, v: Var) -> Result<Var> {
        if s.g.shape(v) != [self.rows, self.cols, self.dim] {
            return Err(Error::Shape(format!(
                "vit expects [{}, {}, {}], got {:?}",
                self.rows,
                self.cols,
                self.dim,
                s.g.shape(v)
            )));
        }
        let tokens = s.g.reshape(v, &[self.rows * self.cols, self.dim])?;
        let pos = s.param(self.pos);
        let mut x = s.g.add(tokens, pos)?;
        for blk in &self.blocks {
            x = blk.forward_self(s, x)?;
        }
        let x = self.norm.forward(s, x)?;
        let y = self.proj.forward(s, x)?;
        s.g.reshape(y, &[self.rows, self.cols, self.out])
    }
}

/// `[H×W×C] → [2H×2W×C/4]` sub-pixel rearrangement.
pub fn upsample<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    g.pixel_shuffle(x, 2)
}

/// Which of the optional stages are present.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Variant {
    pub tapm: bool,
    pub vit: bool,
    pub shuffle: bool,
}

impl Variant {
    pub const FULL: Variant = Variant { tapm: true, vit: true, shuffle: true };
    pub const BASELINE: Variant = Variant { tapm: false, vit: false, shuffle: false };

    pub fn name(&self) -> String {
        let mut parts = Vec::new();
        if self.tapm {
            parts.push("tapm");
        }
        if self.vit {
            parts.push("vit");
        }
        if self.shuffle {
            parts.push("shuffle");
        }
        if parts.is_empty() {
            "baseline".into()
        } else {
            parts.join("+")
        }
    }
}

impl Default for Variant {
    fn default() -> Self {
        Self::FULL
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct HeadConfig {
    pub vit_depth: usize,
    pub vit_heads: usize,
    /// ViT output width when followed by the shuffle (four groups of a
    /// quarter each).
    pub vit_channels: usize,
    pub trunk_channels: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self { vit_depth: 2, vit_heads: 4, vit_channels: 128, trunk_channels: 32 }
    }
}

/// Heat (after sigmoid), offset `(di, dj, θ)` and z maps on the output grid.
#[derive(Clone, Copy, Debug)]
pub struct PredictionMaps {
    pub heat: Var,
    pub offset: Var,
    pub z: Var,
}

/// Plain values of [`PredictionMaps`], row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct MapValues {
    pub heat: Vec<f64>,
    pub offset: Vec<f64>,
    pub z: Vec<f64>,
}

impl MapValues {
    pub fn read<T: Scalar>(g: &Graph<T>, maps: &PredictionMaps) -> Self {
        let f = |v: Var| g.data(v).iter().map(|x| x.as_f64()).collect();
        Self { heat: f(maps.heat), offset: f(maps.offset), z: f(maps.z) }
    }
}

pub struct RgsHead {
    pub vit: Option<Vit>,
    pub shuffle: bool,
    pub trunk: Vec<Conv2d>,
    pub heat: Conv2d,
    pub offset: Conv2d,
    pub z: Conv2d,
}

impl RgsHead {
    pub fn new<T: Scalar>(b: &mut Builder<T>, cfg: &HeadConfig, grid: &Grid, dim: usize, variant: Variant) -> Result<Self> {
        b.scoped("head", |b| {
            let mut ch = dim;
            let vit = if variant.vit {
                ch = if variant.shuffle { cfg.vit_channels } else { dim };
                Some(Vit::new(b, grid.rows, grid.cols, dim, cfg.vit_depth, cfg.vit_heads, ch)?)
            } else {
                None
            };
            if variant.shuffle {
                if ch % 4 != 0 {
                    return Err(Error::InvalidArgument(format!("{ch} channels cannot be split into four groups")));
                }
                ch /= 4;
            }
            let t = cfg.trunk_channels;
            let trunk = vec![Conv2d::new(b, "trunk0", 3, ch, t)?, Conv2d::new(b, "trunk1", 3, t, t)?];
            Ok(Self {
                vit,
                shuffle: variant.shuffle,
                trunk,
                heat: Conv2d::with_bias(b, "heat", 1, t, 1, HEAT_PRIOR)?,
                offset: Conv2d::new(b, "offset", 1, t, 3)?,
                z: Conv2d::new(b, "z", 1, t, 1)?,
            })
        })
    }

    pub fn predict_maps<T: Scalar>(&self, s: &mut Scope<T>, x: Var) -> Result<PredictionMaps> {
        let mut h = x;
        for conv in &self.trunk {
            let y = conv.forward(s, h)?;
            h = s.g.relu(y)?;
        }
        let logits = self.heat.forward(s, h)?;
        Ok(PredictionMaps {
            heat: s.g.sigmoid(logits)?,
            offset: self.offset.forward(s, h)?,
            z: self.z.forward(s, h)?,
        })
    }

    /// BEV map `[H×W×C]` → prediction maps on the output grid.
    pub fn forward<T: Scalar>(&self, s: &mut Scope<T>, v: Var) -> Result<PredictionMaps> {
        let mut x = v;
        if let Some(vit) = &self.vit {
            x = vit.forward(s, x)?;
        }
        if self.shuffle {
            x = upsample(&mut s.g, x)?;
        }
        self.predict_maps(s, x)
    }
}

/// Regression targets on the output grid; offset and z are supervised at
/// the center cell only.
#[derive(Clone, Debug, PartialEq)]
pub struct Targets {
    pub heat: Vec<f64>,
    pub offset: Vec<f64>,
    pub offset_mask: Vec<bool>,
    pub z: Vec<f64>,
    pub z_mask: Vec<bool>,
    pub center_cell: (usize, usize),
}

/// Heat is 1 at the floored center cell and `1 / (1 + d)` elsewhere, `d`
/// the grid distance; the offset target there is `(c̃ - c, θ)`.
pub fn build_targets(gt: &Box3D, grid: &Grid) -> Result<Targets> {
    let [x, y, z] = gt.center_f64();
    let (cx, cy) = ((x - grid.xmin) / grid.cell, (y - grid.ymin) / grid.cell);
    let Some((ci, cj)) = grid.cell_of(x, y) else {
        return Err(Error::OutOfRegion(format!("({x:.3}, {y:.3}) outside the {}×{} grid", grid.rows, grid.cols)));
    };
    let n = grid.cells();
    let mut heat = vec![0.0; n];
    for i in 0..grid.rows {
        for j in 0..grid.cols {
            let d = ((i as f64 - ci as f64).powi(2) + (j as f64 - cj as f64).powi(2)).sqrt();
            heat[i * grid.cols + j] = if d == 0.0 { 1.0 } else { 1.0 / (1.0 + d) };
        }
    }
    let k = ci * grid.cols + cj;
    let mut offset = vec![0.0; 3 * n];
    let mut offset_mask = vec![false; 3 * n];
    offset[3 * k] = ci as f64 - cx;
    offset[3 * k + 1] = cj as f64 - cy;
    offset[3 * k + 2] = gt.heading as f64;
    offset_mask[3 * k..3 * k + 3].fill(true);
    let mut zt = vec![0.0; n];
    let mut z_mask = vec![false; n];
    zt[k] = z;
    z_mask[k] = true;
    Ok(Targets { heat, offset, offset_mask, z: zt, z_mask, center_cell: (ci, cj) })
}

/// Row-major index of the first maximum.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Peak cell, refined by its offset; z and heading read at the peak.
pub fn decode_box(maps: &MapValues, grid: &Grid, size: [f32; 3]) -> Result<Box3D> {
    let k = argmax(&maps.heat);
    let (i, j) = (k / grid.cols, k % grid.cols);
    let cx = i as f64 - maps.offset[3 * k];
    let cy = j as f64 - maps.offset[3 * k + 1];
    let x = grid.xmin + grid.cell * cx;
    let y = grid.ymin + grid.cell * cy;
    Box3D::new([x as f32, y as f32, maps.z[k] as f32], size, maps.offset[3 * k + 2] as f32)
}
