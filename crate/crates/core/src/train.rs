//! Mini-batch training with gradient accumulation, per-step metrics and
//! resumable state.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::GroundedTrace;
use crate::error::{input_err, Error, Result};
use crate::model::{Model, ModelConfig};
use crate::numerics::{AdamW, AdamWConfig, Checkpoint, Graph, Tensor2};
use crate::pointer::ZLossConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    /// Traces per micro-batch.
    pub batch: usize,
    /// Micro-batches per optimizer step.
    pub grad_accum: usize,
    pub epochs: usize,
    pub seed: u64,
    pub weight_decay: f64,
    /// Stop after this many optimizer steps in total.
    pub max_steps: Option<usize>,
    pub schedule: LrSchedule,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Linear decay from `lr` to zero over the whole schedule.
    Linear,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-5,
            batch: 2,
            grad_accum: 4,
            epochs: 5,
            seed: 0,
            weight_decay: 0.0,
            max_steps: None,
            schedule: LrSchedule::Constant,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.grad_accum == 0 || self.epochs == 0 {
            return input_err("batch, grad_accum and epochs must be positive");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0) {
            return input_err("lr and weight_decay must be finite and non-negative");
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..Default::default()
        }
    }

    /// Traces consumed by one optimizer step.
    pub fn step_size(&self) -> usize {
        self.batch * self.grad_accum
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.step_size())
    }

    /// Total optimizer steps for a dataset of `n` traces.
    pub fn total_steps(&self, n: usize) -> usize {
        let t = self.steps_per_epoch(n) * self.epochs;
        self.max_steps.map_or(t, |m| t.min(m))
    }

    /// Learning rate for optimizer step `step` of `total`.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        match self.schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Linear => self.lr * (1.0 - step as f64 / total.max(1) as f64),
        }
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub ce: f64,
    pub zloss: f64,
    pub ptr_acc: f64,
    pub ptr_total: usize,
}

/// Order in which epoch `epoch` visits the dataset.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    idx.shuffle(&mut rng);
    idx
}

/// Model, optimizer and the number of optimizer steps already taken.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model,
    pub opt: AdamW,
    pub step: usize,
}

impl Trainer {
    pub fn new(model: Model, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let opt = AdamW::new(cfg.adamw(), &model.store)?;
        Ok(Self { model, opt, step: 0 })
    }

    /// One optimizer step over `traces`, split into micro-batches of
    /// `cfg.batch`. Gradients are averaged over micro-batches.
    pub fn train_step(
        &mut self,
        traces: &[&GroundedTrace],
        cfg: &TrainConfig,
        zcfg: &ZLossConfig,
    ) -> Result<StepMetrics> {
        if traces.is_empty() {
            return input_err("no traces for this step");
        }
        let chunks: Vec<&[&GroundedTrace]> = traces.chunks(cfg.batch).collect();
        let m = chunks.len() as f64;
        self.model.store.zero_grads();
        let (mut loss, mut ce, mut z) = (0.0, 0.0, 0.0);
        let (mut pc, mut pt) = (0usize, 0usize);
        for chunk in chunks {
            let grads = {
                let mut g = Graph::new(&self.model.store);
                let (l, rep) = self.model.loss_graph(&mut g, chunk, zcfg)?;
                if !rep.loss.is_finite() {
                    return Err(Error::NonFiniteLoss { step: self.step });
                }
                loss += rep.loss / m;
                ce += rep.ce / m;
                z += rep.zloss / m;
                pc += rep.ptr_correct;
                pt += rep.ptr_total;
                let scaled = g.scale(l, 1.0 / m);
                g.backward(scaled)?
            };
            self.model.store.accumulate(&grads);
        }
        self.opt.step(&mut self.model.store)?;
        let metrics = StepMetrics {
            step: self.step,
            epoch: 0,
            loss,
            ce,
            zloss: z,
            ptr_acc: if pt == 0 { 0.0 } else { pc as f64 / pt as f64 },
            ptr_total: pt,
        };
        self.step += 1;
        Ok(metrics)
    }

    /// Runs the remaining steps of the schedule, calling `on_step` after
    /// each. Resuming from a saved state continues the same data order.
    pub fn run<F>(
        &mut self,
        data: &[GroundedTrace],
        cfg: &TrainConfig,
        zcfg: &ZLossConfig,
        mut on_step: F,
    ) -> Result<()>
    where
        F: FnMut(&StepMetrics) -> Result<()>,
    {
        cfg.validate()?;
        if data.is_empty() {
            return input_err("empty training set");
        }
        let per_epoch = cfg.steps_per_epoch(data.len());
        // The decay horizon ignores `max_steps` so that a capped run and a
        // resumed run see the same rates.
        let horizon = per_epoch * cfg.epochs;
        let total = cfg.total_steps(data.len());
        let mut order_epoch = usize::MAX;
        let mut order = Vec::new();
        while self.step < total {
            let epoch = self.step / per_epoch;
            if epoch != order_epoch {
                order = epoch_order(data.len(), cfg.seed, epoch);
                order_epoch = epoch;
            }
            let start = (self.step % per_epoch) * cfg.step_size();
            let end = (start + cfg.step_size()).min(data.len());
            let batch: Vec<&GroundedTrace> = order[start..end].iter().map(|&i| &data[i]).collect();
            self.opt.config.lr = cfg.lr_at(self.step, horizon);
            let mut m = self.train_step(&batch, cfg, zcfg)?;
            m.epoch = epoch;
            on_step(&m)?;
        }
        Ok(())
    }

    /// Parameters plus optimizer moments and step counters.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = self.model.checkpoint();
        for (i, (_, p)) in self.model.store.iter().enumerate() {
            ck.push(format!("opt.m.{}", p.name), self.opt.first_moment(i).clone());
            ck.push(format!("opt.v.{}", p.name), self.opt.second_moment(i).clone());
        }
        ck.push("opt.step", Tensor2::scalar(self.opt.step as f64));
        ck.push("train.step", Tensor2::scalar(self.step as f64));
        ck
    }

    /// Restores a trainer. A plain model checkpoint starts the optimizer
    /// fresh at step 0.
    pub fn from_checkpoint(model_cfg: ModelConfig, ck: &Checkpoint, cfg: &TrainConfig) -> Result<Self> {
        let model = Model::from_checkpoint(model_cfg, ck)?;
        let mut t = Self::new(model, cfg)?;
        let Some(step) = ck.get("train.step") else {
            return Ok(t);
        };
        let names: Vec<String> = t.model.store.iter().map(|(_, p)| p.name.clone()).collect();
        for (i, name) in names.iter().enumerate() {
            let get = |prefix: &str| {
                ck.get(&format!("{prefix}.{name}"))
                    .cloned()
                    .ok_or_else(|| Error::Checkpoint(format!("missing optimizer state for `{name}`")))
            };
            t.opt.set_moments(i, get("opt.m")?, get("opt.v")?)?;
        }
        let opt_step = ck
            .get("opt.step")
            .ok_or_else(|| Error::Checkpoint("missing opt.step".into()))?;
        t.opt.step = opt_step.get(0, 0) as u64;
        t.step = step.get(0, 0) as usize;
        Ok(t)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.checkpoint().save(path)
    }
}
