use serde::{Deserialize, Serialize};

use crate::dataset::Category;
use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::model::{PredictionMaps, Targets};
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Probability clamp inside the focal-loss logarithms.
pub const FOCAL_CLAMP: f64 = 1e-4;

/// `total = λ₁ (hm + off) + λ₂ z + λ₃ cd`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl LossWeights {
    pub fn for_category(c: Category) -> Self {
        let lambda3 = match c {
            Category::NonRigid => 1e-6,
            Category::Rigid => 2e-7,
        };
        Self { lambda1: 1.0, lambda2: 2.0, lambda3 }
    }
}

/// Graph handles of each component and of the weighted total.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub hm: Var,
    pub off: Var,
    pub z: Var,
    pub cd: Var,
    pub total: Var,
}

/// Plain values of [`LossTerms`].
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossValues {
    pub hm: f64,
    pub off: f64,
    pub z: f64,
    pub cd: f64,
    pub total: f64,
}

impl LossTerms {
    pub fn values<T: Scalar>(&self, g: &Graph<T>) -> LossValues {
        let v = |x: Var| g.value(x).item().as_f64();
        LossValues { hm: v(self.hm), off: v(self.off), z: v(self.z), cd: v(self.cd), total: v(self.total) }
    }

    /// Fails naming the first non-finite component.
    pub fn check_finite<T: Scalar>(&self, g: &Graph<T>, step: usize) -> Result<LossValues> {
        let v = self.values(g);
        for (name, x) in [("hm", v.hm), ("off", v.off), ("z", v.z), ("cd", v.cd), ("total", v.total)] {
            if !x.is_finite() {
                return Err(Error::NonFiniteLoss { component: name, step });
            }
        }
        Ok(v)
    }
}

/// Weighted sum of already-computed components.
pub fn combine<T: Scalar>(g: &mut Graph<T>, hm: Var, off: Var, z: Var, cd: Var, w: &LossWeights) -> Result<LossTerms> {
    let a = g.add(hm, off)?;
    let a = g.scale(a, w.lambda1)?;
    let b = g.scale(z, w.lambda2)?;
    let c = g.scale(cd, w.lambda3)?;
    let ab = g.add(a, b)?;
    let total = g.add(ab, c)?;
    Ok(LossTerms { hm, off, z, cd, total })
}

/// Focal heat loss, center-cell smooth-L1 on offset and z, and the Chamfer
/// term between the prototypes and the aligned template (zero without
/// prototypes).
pub fn total_loss<T: Scalar>(
    g: &mut Graph<T>,
    maps: &PredictionMaps,
    targets: &Targets,
    prototypes: Option<Var>,
    aligned_template: &PointCloud,
    w: &LossWeights,
) -> Result<LossTerms> {
    let hm = g.focal_loss(maps.heat, &targets.heat, FOCAL_CLAMP)?;
    let off = g.smooth_l1(maps.offset, &targets.offset, &targets.offset_mask)?;
    let z = g.smooth_l1(maps.z, &targets.z, &targets.z_mask)?;
    let cd = match prototypes {
        Some(p) => {
            let q = g.constant(aligned_template.to_tensor()?);
            g.chamfer(p, q)?
        }
        None => g.constant(Tensor::scalar(T::zero())),
    };
    combine(g, hm, off, z, cd, w)
}
