//! Variant grids trained and evaluated under one protocol.

use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{overall, track_all, ModelTracker};
use crate::dataset::Sequence;
use crate::error::{Error, Result};
use crate::model::{BackboneConfig, BevConfig, HeadConfig, ModelConfig, TapmConfig, Variant};
use crate::training::{TrainConfig, Trainer};

pub const ABLATION_HEADER: &str = "variant,seed,success,precision";

/// Every on/off combination of the named modules (`tapm`, `vit`,
/// `shuffle`, or `rgs` for ViT and shuffle together); unnamed modules stay
/// off. Ordered from the baseline upward.
pub fn variant_grid(toggles: &str) -> Result<Vec<Variant>> {
    let mut groups: Vec<Vec<&str>> = Vec::new();
    for t in toggles.split(',').map(str::trim).filter(|t| !t.is_empty()) {
        let g = match t {
            "tapm" | "vit" | "shuffle" => vec![t],
            "rgs" => vec!["vit", "shuffle"],
            other => return Err(Error::InvalidArgument(format!("unknown module `{other}`"))),
        };
        if groups.iter().flatten().any(|x| g.contains(x)) {
            return Err(Error::InvalidArgument(format!("module `{t}` named twice")));
        }
        groups.push(g);
    }
    if groups.is_empty() {
        return Err(Error::InvalidArgument("no modules to ablate".into()));
    }
    let mut out = Vec::new();
    for bits in 0..1u32 << groups.len() {
        let mut v = Variant::BASELINE;
        for (k, g) in groups.iter().enumerate() {
            if bits >> k & 1 == 1 {
                for m in g {
                    match *m {
                        "tapm" => v.tapm = true,
                        "vit" => v.vit = true,
                        _ => v.shuffle = true,
                    }
                }
            }
        }
        out.push(v);
    }
    Ok(out)
}

/// A configuration sized for CPU ablations: a ±1.6 m region at the default
/// voxel size, half the point counts, a shallower prototype module and a
/// short schedule.
pub fn desk_config() -> TrainConfig {
    let mut c = TrainConfig { steps: 600, checkpoint_every: 600, ..TrainConfig::default() };
    c.sample.search_points = 512;
    c.sample.template_points = 256;
    c.model = ModelConfig {
        backbone: BackboneConfig { search_fps: vec![128, 64], template_fps: vec![64, 32], ..BackboneConfig::default() },
        tapm: TapmConfig { prototype_count: 32, depth: 2, ..TapmConfig::default() },
        bev: BevConfig { x_range: [-1.6, 1.6], y_range: [-1.6, 1.6], ..BevConfig::default() },
        head: HeadConfig::default(),
        variant: Variant::FULL,
    };
    c
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub success: f64,
    pub precision: f64,
}

/// Trains `base` with each variant and seed on `train`, then tracks `test`
/// with the evaluation seed equal to the training seed.
pub fn run_ablation(
    train: &[Sequence],
    test: &[Sequence],
    base: &TrainConfig,
    variants: &[Variant],
    seeds: &[u64],
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for v in variants {
        for &seed in seeds {
            let (success, precision) = train_and_evaluate(train, test, base, *v, seed)?;
            rows.push(AblationRow { variant: v.name(), seed, success, precision });
        }
    }
    Ok(rows)
}

/// One cell of the grid: overall Success and Precision on `test`.
pub fn train_and_evaluate(
    train: &[Sequence],
    test: &[Sequence],
    base: &TrainConfig,
    variant: Variant,
    seed: u64,
) -> Result<(f64, f64)> {
    let mut cfg = base.clone();
    cfg.seed = seed;
    cfg.model.variant = variant;
    let mut t = Trainer::new(cfg)?;
    while t.step < t.cfg.steps {
        t.train_step(train)?;
    }
    let tracker = ModelTracker { model: &t.model, store: &t.store };
    overall(&track_all(&tracker, test, &t.cfg.sample, seed)?)
}

/// Mean Success of `variant` over its rows.
pub fn mean_success(rows: &[AblationRow], variant: &Variant) -> Option<f64> {
    let name = variant.name();
    let v: Vec<f64> = rows.iter().filter(|r| r.variant == name).map(|r| r.success).collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Original-minus-scaled Success.
pub fn gap(original: f64, scaled: f64) -> f64 {
    original - scaled
}

pub fn write_ablation_csv(rows: &[AblationRow], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(ABLATION_HEADER.split(','))?;
    for r in rows {
        w.write_record([r.variant.clone(), r.seed.to_string(), r.success.to_string(), r.precision.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
