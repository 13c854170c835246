//! The optimization loop.
//!
//! Random draws are keyed by counters so a resumed run continues the exact
//! sequence: the epoch permutation uses stream `2·epoch` and the flow draws
//! for step `s` use stream `2·s + 1`, both under the configured seed.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::model::HiFlow;
use crate::nn::ParamStore;
use crate::numerics::Graph;
use crate::training::checkpoint::{Checkpoint, RunSettings};
use crate::training::loss::{flow_loss, Example, FlowDraw};
use crate::training::normalizer::Normalizer;
use crate::training::optim::{AdamW, CosineSchedule, Ema};

/// One line of the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub loss: f64,
    pub loss_per_scale: Vec<f64>,
    pub lr: f64,
    pub ema_gap: f64,
    pub wall_ms: f64,
}

#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub loss: f64,
    pub per_scale: Vec<f64>,
    pub lr: f64,
    pub grad_norm: f64,
}

pub struct Trainer {
    model: HiFlow,
    settings: RunSettings,
    normalizer: Normalizer,
    data: Vec<Example>,
    live: ParamStore,
    ema: Ema,
    opt: AdamW,
    schedule: CosineSchedule,
    step: u64,
    perm: Option<(u64, Vec<usize>)>,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn check_data(model: &ModelConfig, data: &[Example]) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Schema("training set is empty".into()));
    }
    for (k, ex) in data.iter().enumerate() {
        if ex.chunk.cols() != model.action_dim || ex.chunk.rows() != model.chunk_len {
            return Err(Error::Schema(format!(
                "example {k} has chunk {:?}, model expects [{}, {}]",
                ex.chunk.shape(),
                model.chunk_len,
                model.action_dim
            )));
        }
        if ex.obs.features.len() != model.obs_dim || ex.obs.proprio.len() != model.proprio_dim {
            return Err(Error::Schema(format!("example {k} has observation widths that do not match the model")));
        }
        if ex.obs.task_id >= model.num_tasks {
            return Err(Error::Schema(format!("example {k} has task {} of {}", ex.obs.task_id, model.num_tasks)));
        }
    }
    Ok(())
}

impl Trainer {
    /// Fresh run: fits the normalizer on `raw` and initializes parameters
    /// from the seed.
    pub fn new(model: &ModelConfig, train: &TrainConfig, raw: &[Example]) -> Result<Self> {
        train.validate()?;
        check_data(model, raw)?;
        let chunks: Vec<_> = raw.iter().map(|e| e.chunk.clone()).collect();
        let normalizer = Normalizer::fit(&chunks)?;
        let (net, mut live) = HiFlow::new(model, train.seed)?;
        live.round_to_f32();
        let data = normalize_all(&normalizer, raw)?;
        Ok(Self {
            opt: AdamW::new(train, &live),
            ema: Ema::new(train.ema_rate, &live),
            schedule: CosineSchedule::from_config(train),
            settings: RunSettings { model: model.clone(), train: train.clone() },
            model: net,
            normalizer,
            data,
            live,
            step: 0,
            perm: None,
        })
    }

    /// Continues a run from a checkpoint holding optimizer state.
    pub fn resume(ckpt: Checkpoint, raw: &[Example]) -> Result<Self> {
        let RunSettings { model, train } = ckpt.settings.clone();
        check_data(&model, raw)?;
        let (net, init) = HiFlow::new(&model, train.seed)?;
        if !init.same_layout(&ckpt.live) {
            return Err(Error::Schema("checkpoint tensors do not match the configured model".into()));
        }
        let state = ckpt
            .optimizer
            .ok_or_else(|| Error::Schema("checkpoint has no optimizer state to resume from".into()))?;
        let mut opt = AdamW::new(&train, &ckpt.live);
        opt.state = state;
        let data = normalize_all(&ckpt.normalizer, raw)?;
        Ok(Self {
            opt,
            ema: Ema { rate: train.ema_rate, shadow: ckpt.ema },
            schedule: CosineSchedule::from_config(&train),
            settings: ckpt.settings,
            model: net,
            normalizer: ckpt.normalizer,
            data,
            live: ckpt.live,
            step: ckpt.step,
            perm: None,
        })
    }

    pub fn model(&self) -> &HiFlow {
        &self.model
    }

    pub fn live(&self) -> &ParamStore {
        &self.live
    }

    pub fn ema(&self) -> &ParamStore {
        &self.ema.shadow
    }

    pub fn normalizer(&self) -> &Normalizer {
        &self.normalizer
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn settings(&self) -> &RunSettings {
        &self.settings
    }

    /// Normalized training examples.
    pub fn data(&self) -> &[Example] {
        &self.data
    }

    fn batch_indices(&mut self) -> Vec<usize> {
        let n = self.data.len() as u64;
        let b = self.settings.train.batch_size as u64;
        (self.step * b..(self.step + 1) * b)
            .map(|q| {
                let epoch = q / n;
                if self.perm.as_ref().map(|(e, _)| *e) != Some(epoch) {
                    let mut perm: Vec<usize> = (0..self.data.len()).collect();
                    perm.shuffle(&mut stream_rng(self.settings.train.seed, 2 * epoch));
                    self.perm = Some((epoch, perm));
                }
                self.perm.as_ref().expect("just set").1[(q % n) as usize]
            })
            .collect()
    }

    /// One optimizer update on the next batch.
    pub fn step(&mut self) -> Result<StepOutcome> {
        let idx = self.batch_indices();
        let batch: Vec<Example> = idx.iter().map(|&i| self.data[i].clone()).collect();
        let mut rng = stream_rng(self.settings.train.seed, 2 * self.step + 1);
        let schedule = self.model.schedule().clone();
        let a = self.settings.model.action_dim;
        let draws: Vec<FlowDraw> = batch.iter().map(|_| FlowDraw::sample(&schedule, a, &mut rng)).collect();

        let mut g = Graph::new();
        let p = self.live.bind(&mut g, true);
        let out = flow_loss(&self.model, &mut g, &p, &batch, &draws)?;
        let mut grads = g.backward(out.loss)?;
        let grads: Vec<Vec<f64>> = p
            .vars()
            .iter()
            .zip(self.live.tensors())
            .map(|(&v, t)| grads.take(v).unwrap_or_else(|| vec![0.0; t.numel()]))
            .collect();
        let lr = self.schedule.lr(self.step);
        let grad_norm = self.opt.step(&mut self.live, &grads, lr)?;
        self.ema.update(&self.live);
        self.step += 1;
        Ok(StepOutcome { loss: out.value, per_scale: out.per_scale, lr, grad_norm })
    }

    /// Runs `steps` updates, passing a record to `sink` every `log_every`
    /// steps and after the last one.
    pub fn run(&mut self, steps: u64, mut sink: impl FnMut(&MetricRecord) -> Result<()>) -> Result<()> {
        let every = self.settings.train.log_every.max(1) as u64;
        let started = Instant::now();
        for k in 0..steps {
            let out = self.step()?;
            if self.step % every == 0 || k + 1 == steps {
                sink(&MetricRecord {
                    step: self.step,
                    loss: out.loss,
                    loss_per_scale: out.per_scale,
                    lr: out.lr,
                    ema_gap: self.ema.gap(&self.live),
                    wall_ms: started.elapsed().as_secs_f64() * 1e3,
                })?;
            }
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            settings: self.settings.clone(),
            step: self.step,
            normalizer: self.normalizer.clone(),
            live: self.live.clone(),
            ema: self.ema.shadow.clone(),
            optimizer: Some(self.opt.state.clone()),
        }
    }
}

fn normalize_all(normalizer: &Normalizer, raw: &[Example]) -> Result<Vec<Example>> {
    raw.iter()
        .map(|e| Ok(Example { obs: e.obs.clone(), chunk: normalizer.normalize(&e.chunk)? }))
        .collect()
}
