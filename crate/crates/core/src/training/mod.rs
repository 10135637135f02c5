//! Losses, the optimizer, checkpoints and the deterministic training loop.

mod checkpoint;
mod loss;
mod optim;

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{make_training_sample, SampleConfig, Sequence, TrainingSample};
use crate::error::{Error, Result};
use crate::model::{build_targets, Model, ModelConfig};
use crate::nn::{ParamStore, Scope};
use crate::tensor::Tensor;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, sidecar_path, write_atomic, CHECKPOINT_MAGIC};
pub use loss::{combine, total_loss, LossTerms, LossValues, LossWeights, FOCAL_CLAMP};
pub use optim::{Adam, AdamConfig};

pub const LOG_HEADER: &str = "step,hm,off,z,cd,total";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    pub checkpoint_every: usize,
    pub sample: SampleConfig,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            steps: 2000,
            batch_size: 1,
            optimizer: AdamConfig::default(),
            checkpoint_every: 500,
            sample: SampleConfig::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.checkpoint_every == 0 {
            return Err(Error::InvalidArgument("batch size and checkpoint cadence must be positive".into()));
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0 && (0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.eps > 0.0) {
            return Err(Error::InvalidArgument(format!("bad optimizer settings {o:?}")));
        }
        self.model.validate()
    }
}

/// Checkpoint sidecar: the configuration and the number of completed steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CheckpointMeta {
    pub config: TrainConfig,
    pub step: usize,
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: Model,
    pub store: ParamStore<f32>,
    pub adam: Adam,
    pub step: usize,
}

/// Forward pass plus losses for one sample.
pub fn sample_loss(model: &Model, s: &mut Scope<f32>, x: &TrainingSample) -> Result<LossTerms> {
    let fwd = model.forward(s, &x.search, &x.template)?;
    let targets = build_targets(&x.gt, &model.cfg.output_grid())?;
    let w = LossWeights::for_category(x.category);
    total_loss(&mut s.g, &fwd.maps, &targets, fwd.prototypes, &x.aligned_template, &w)
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let model = Model::new(cfg.model.clone(), &mut store, cfg.seed)?;
        let adam = Adam::new(cfg.optimizer, &store);
        Ok(Self { cfg, model, store, adam, step: 0 })
    }

    /// The samples of step `step`; a function of the seed and the step only.
    pub fn batch(&self, data: &[Sequence], step: usize) -> Result<Vec<TrainingSample>> {
        let usable: Vec<&Sequence> = data.iter().filter(|s| s.frames.len() >= 2).collect();
        if usable.is_empty() {
            return Err(Error::InvalidArgument("no sequence with at least two frames".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(step as u64);
        let mut out = Vec::with_capacity(self.cfg.batch_size);
        let mut failures = 0;
        while out.len() < self.cfg.batch_size {
            let seq = usable[rng.gen_range(0..usable.len())];
            let idx = rng.gen_range(1..seq.frames.len());
            match make_training_sample(seq, idx, &self.cfg.sample, &mut rng) {
                Ok(x) => out.push(x),
                Err(Error::EmptySearchRegion | Error::EmptyCloud(_)) if failures < 100 => failures += 1,
                Err(e) => return Err(e),
            }
        }
        Ok(out)
    }

    /// One optimizer update on the mean gradient of a batch. Returns the
    /// batch-mean loss components.
    pub fn train_step(&mut self, data: &[Sequence]) -> Result<LossValues> {
        let batch = self.batch(data, self.step)?;
        let mut grads: Vec<Vec<f64>> = self.store.ids().map(|id| vec![0.0; self.store.get(id).numel()]).collect();
        let mut mean = LossValues::default();
        let k = batch.len() as f64;
        for x in &batch {
            let mut s = Scope::new(&self.store, true);
            let terms = sample_loss(&self.model, &mut s, x)?;
            let v = terms.check_finite(&s.g, self.step + 1)?;
            s.g.backward(terms.total)?;
            for (acc, g) in grads.iter_mut().zip(s.param_grads()) {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b as f64 / k;
                }
            }
            mean.hm += v.hm / k;
            mean.off += v.off / k;
            mean.z += v.z / k;
            mean.cd += v.cd / k;
            mean.total += v.total / k;
        }
        self.adam.step(&mut self.store, &grads)?;
        self.step += 1;
        Ok(mean)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut entries: Vec<(String, &Tensor<f32>)> =
            self.store.iter().map(|(_, name, t)| (name.to_string(), t)).collect();
        for (i, (_, name, _)) in self.store.iter().enumerate() {
            entries.push((format!("adam.m.{name}"), &self.adam.m[i]));
            entries.push((format!("adam.v.{name}"), &self.adam.v[i]));
        }
        write_atomic(path, &encode_checkpoint(&entries))?;
        let meta = CheckpointMeta { config: self.cfg.clone(), step: self.step };
        write_atomic(&sidecar_path(path), (serde_json::to_string_pretty(&meta)? + "\n").as_bytes())
    }

    /// Restores parameters, optimizer moments and progress.
    pub fn load(path: &Path) -> Result<Self> {
        let meta: CheckpointMeta = serde_json::from_slice(&fs::read(sidecar_path(path))?)?;
        let mut t = Trainer::new(meta.config)?;
        let entries = decode_checkpoint(&fs::read(path)?)?;
        fill(&mut t.store, &entries, "")?;
        let n = t.store.len();
        for (kind, dst) in [("m", &mut t.adam.m), ("v", &mut t.adam.v)] {
            let mut moments = t.store.clone();
            fill(&mut moments, &entries, &format!("adam.{kind}."))?;
            *dst = moments.ids().map(|id| moments.get(id).clone()).collect();
            debug_assert_eq!(dst.len(), n);
        }
        t.adam.t = meta.step as u64;
        t.step = meta.step;
        Ok(t)
    }

    /// Trains up to `cfg.steps`, appending to the CSV log and checkpointing
    /// every `checkpoint_every` steps and at the end. On a non-finite loss
    /// the run stops and the last checkpoint is left in place.
    pub fn run(&mut self, data: &[Sequence], ckpt: &Path, log: &Path) -> Result<()> {
        let fresh = self.step == 0 || !log.exists();
        let mut f = if fresh {
            let mut f = fs::File::create(log)?;
            writeln!(f, "{LOG_HEADER}")?;
            f
        } else {
            OpenOptions::new().append(true).open(log)?
        };
        while self.step < self.cfg.steps {
            let v = self.train_step(data)?;
            writeln!(f, "{},{},{},{},{},{}", self.step, v.hm, v.off, v.z, v.cd, v.total)?;
            if self.step % self.cfg.checkpoint_every == 0 || self.step == self.cfg.steps {
                f.flush()?;
                self.save(ckpt)?;
            }
        }
        Ok(())
    }
}

/// Copies the entries named `prefix + name` into the matching parameters.
fn fill(store: &mut ParamStore<f32>, entries: &[(String, Tensor<f32>)], prefix: &str) -> Result<()> {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let want = format!("{prefix}{}", store.name(id));
        let Some((_, t)) = entries.iter().find(|(n, _)| *n == want) else {
            return Err(Error::Checkpoint(format!("missing entry `{want}`")));
        };
        if t.shape() != store.get(id).shape() {
            return Err(Error::Checkpoint(format!(
                "entry `{want}` has shape {:?}, expected {:?}",
                t.shape(),
                store.get(id).shape()
            )));
        }
        *store.get_mut(id) = t.clone();
    }
    Ok(())
}

/// Model and weights from a checkpoint, for inference.
pub fn load_model(path: &Path) -> Result<(Model, ParamStore<f32>, TrainConfig)> {
    let t = Trainer::load(path)?;
    Ok((t.model, t.store, t.cfg))
}
