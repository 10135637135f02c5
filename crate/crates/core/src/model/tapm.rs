use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::nn::{AttentionBlock, Builder, Linear, Mlp, ParamId, Scope};
use crate::tensor::{Scalar, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct TapmConfig {
    pub prototype_count: usize,
    pub depth: usize,
    pub heads: usize,
}

impl Default for TapmConfig {
    fn default() -> Self {
        Self { prototype_count: 64, depth: 5, heads: 4 }
    }
}

impl TapmConfig {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.prototype_count == 0 || self.depth == 0 {
            return Err(Error::InvalidArgument(format!(
                "prototype count and depth must be positive, got {} and {}",
                self.prototype_count, self.depth
            )));
        }
        if self.heads == 0 || dim % self.heads != 0 {
            return Err(Error::InvalidArgument(format!("width {dim} not divisible by {} heads", self.heads)));
        }
        Ok(())
    }
}

/// Axis-aligned volume the prototype coordinates are squashed into.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Volume {
    pub center: [f64; 3],
    pub half: [f64; 3],
}

/// Prototype mining: mask gating of the detached fusion features, a bank of
/// learnable substrate rows refined by self-attention together with them,
/// and a coordinate decoder for the resulting prototypes.
pub struct Tapm {
    pub mask: Linear,
    pub substrate: ParamId,
    pub blocks: Vec<AttentionBlock>,
    pub coords: Mlp,
}

impl Tapm {
    pub fn new<T: Scalar>(b: &mut Builder<T>, cfg: &TapmConfig, dim: usize) -> Result<Self> {
        cfg.validate(dim)?;
        b.scoped("tapm", |b| {
            let mask = Linear::new(b, "mask", dim, 1)?;
            let substrate = b.glorot("substrate", &[cfg.prototype_count, dim], dim, dim)?;
            let blocks = (0..cfg.depth)
                .map(|i| AttentionBlock::new(b, &format!("block{i}"), dim, cfg.heads, false))
                .collect::<Result<_>>()?;
            let coords = Mlp::new(b, "coords", &[dim, dim, 3], false)?;
            Ok(Self { mask, substrate, blocks, coords })
        })
    }

    /// Detaches `fused`, then returns the per-point mask `σ(F W + b)` and
    /// the row-scaled features.
    pub fn mask_and_enhance<T: Scalar>(&self, s: &mut Scope<T>, fused: Var) -> Result<(Var, Var)> {
        let f = s.g.detach(fused);
        let logits = self.mask.forward(s, f)?;
        let m = s.g.sigmoid(logits)?;
        let enhanced = s.g.mul_rows(f, m)?;
        Ok((m, enhanced))
    }

    /// Runs the blocks over `[enhanced; substrate]` and splits the result
    /// into (teacher rows, prototype rows).
    pub fn iterate_prototypes<T: Scalar>(&self, s: &mut Scope<T>, enhanced: Var, substrate: Var) -> Result<(Var, Var)> {
        let n = s.g.shape(enhanced)[0];
        let ni = s.g.shape(substrate)[0];
        let mut x = s.g.concat_rows(&[enhanced, substrate])?;
        for blk in &self.blocks {
            x = blk.forward_self(s, x)?;
        }
        let teacher = s.g.slice_rows(x, 0, n)?;
        let protos = s.g.slice_rows(x, n, ni)?;
        Ok((teacher, protos))
    }

    /// `center + half · tanh(MLP(row))` per prototype.
    pub fn predict_prototype_coords<T: Scalar>(&self, s: &mut Scope<T>, protos: Var, vol: &Volume) -> Result<Var> {
        let raw = self.coords.forward(s, protos)?;
        let t = s.g.tanh(raw)?;
        s.g.affine_cols(t, &vol.half, &vol.center)
    }

    /// The full branch: returns (mask, prototype features, prototype coordinates).
    pub fn forward<T: Scalar>(&self, s: &mut Scope<T>, fused: Var, vol: &Volume) -> Result<(Var, Var, Var)> {
        let (m, enhanced) = self.mask_and_enhance(s, fused)?;
        let substrate = s.param(self.substrate);
        let (_teacher, protos) = self.iterate_prototypes(s, enhanced, substrate)?;
        let coords = self.predict_prototype_coords(s, protos, vol)?;
        Ok((m, protos, coords))
    }
}

/// `[P_S, P_I; F_S, F_I]`: search rows first, then prototypes. With no
/// prototypes the search cloud passes through unchanged.
pub fn assemble_enhanced<T: Scalar>(
    s: &mut Scope<T>,
    p_s: &PointCloud,
    f_s: Var,
    prototypes: Option<(&PointCloud, Var)>,
) -> Result<(PointCloud, Var)> {
    if s.g.shape(f_s)[0] != p_s.len() {
        return Err(Error::Shape(format!("{} search points but {:?} features", p_s.len(), s.g.shape(f_s))));
    }
    let Some((p_i, f_i)) = prototypes else {
        return Ok((p_s.clone(), f_s));
    };
    if p_i.is_empty() {
        return Ok((p_s.clone(), f_s));
    }
    if s.g.shape(f_i)[0] != p_i.len() {
        return Err(Error::Shape(format!("{} prototype points but {:?} features", p_i.len(), s.g.shape(f_i))));
    }
    let mut coords = p_s.clone();
    coords.extend(p_i);
    let feats = s.g.concat_rows(&[f_s, f_i])?;
    Ok((coords, feats))
}
