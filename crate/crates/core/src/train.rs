//! Optimization: AdamW with decoupled weight decay, gradient-norm clipping
//! and a line-delimited loss log.

use std::collections::HashMap;
use std::io::Write;

use rand::seq::SliceRandom;
use serde::Serialize;

use crate::autograd::{Graph, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::model::LatentVg;
use crate::objectives::LossReport;
use crate::rng::{seed_all, RngStreams};
use crate::sample::SceneSample;
use crate::tensor::Matrix;

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    first: HashMap<ParamId, Matrix>,
    second: HashMap<ParamId, Matrix>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            first: HashMap::new(),
            second: HashMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update from `grads`; parameters without a gradient are left as
    /// they are (no decay either).
    pub fn update(&mut self, store: &mut ParamStore, grads: &HashMap<ParamId, Matrix>) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let mut ids: Vec<&ParamId> = grads.keys().collect();
        ids.sort();
        for &id in ids {
            let g = &grads[&id];
            let (rows, cols) = g.shape();
            let m = self.first.entry(id).or_insert_with(|| Matrix::zeros(rows, cols));
            let v = self.second.entry(id).or_insert_with(|| Matrix::zeros(rows, cols));
            let p = store.get_mut(id);
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let update = (*mv / c1) / ((*vv / c2).sqrt() + self.eps);
                *pv -= self.lr * (update + self.weight_decay * *pv);
            }
        }
    }
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut HashMap<ParamId, Matrix>, max_norm: f64) -> f64 {
    // Summed in parameter order so the result does not depend on hashing.
    let mut ids: Vec<ParamId> = grads.keys().copied().collect();
    ids.sort();
    let norm = ids
        .iter()
        .flat_map(|id| grads[id].data().iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            g.scale_assign(s);
        }
    }
    norm
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    /// Base learning rate; GRES models train at half of it.
    pub lr: f64,
    pub weight_decay: f64,
    pub clip_norm: Option<f64>,
    pub seed: u64,
    /// Write a log line every this many steps (and at the last step).
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch: 16,
            lr: 1e-4,
            weight_decay: 0.01,
            clip_norm: Some(1.0),
            seed: 0,
            log_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn effective_lr(&self, model: &LatentVg) -> f64 {
        if model.config.gres_enabled {
            self.lr / 2.0
        } else {
            self.lr
        }
    }
}

#[derive(Serialize)]
struct LogLine {
    step: usize,
    lr: f64,
    total: f64,
    pos_cont: f64,
    bce: f64,
    dice: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    gres_bce: Option<f64>,
    grad_norm: f64,
}

/// Draws mini-batches by walking shuffled epochs.
pub struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
}

impl BatchSampler {
    pub fn new(n: usize) -> Self {
        Self {
            order: (0..n).collect(),
            pos: n,
        }
    }

    pub fn next_batch(&mut self, size: usize, streams: &mut RngStreams) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos >= self.order.len() {
                self.order.shuffle(&mut streams.batches);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// One optimization step on `batch`; returns the loss report and the
/// gradient norm before clipping.
pub fn train_step(
    model: &mut LatentVg,
    opt: &mut AdamW,
    batch: &[&SceneSample],
    streams: &mut RngStreams,
    clip_norm: Option<f64>,
) -> Result<(LossReport, f64)> {
    let (report, mut grads) = {
        let mut g = Graph::new(&model.store);
        let out = model.batch_loss(&mut g, batch, Some(streams))?;
        if !out.report.total.is_finite() {
            return Err(Error::format("training", format!("non-finite loss {}", out.report.total)));
        }
        let grads = g.backward(out.total).into_params();
        (out.report, grads)
    };
    let norm = match clip_norm {
        Some(c) => clip_grad_norm(&mut grads, c),
        None => clip_grad_norm(&mut grads, f64::INFINITY),
    };
    opt.update(&mut model.store, &grads);
    Ok((report, norm))
}

/// Training state that survives between segments of a run: optimizer
/// moments, rng streams and the position in the shuffled epoch.
pub struct Session<'a> {
    samples: &'a [SceneSample],
    tc: TrainConfig,
    lr: f64,
    opt: AdamW,
    streams: RngStreams,
    sampler: BatchSampler,
    step: usize,
}

impl<'a> Session<'a> {
    pub fn new(model: &LatentVg, samples: &'a [SceneSample], tc: &TrainConfig) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::BatchTooSmall(0));
        }
        if model.config.has_latents() && tc.batch < 2 {
            return Err(Error::BatchTooSmall(tc.batch));
        }
        let lr = tc.effective_lr(model);
        Ok(Self {
            samples,
            tc: tc.clone(),
            lr,
            opt: AdamW::new(lr, tc.weight_decay),
            streams: seed_all(tc.seed),
            sampler: BatchSampler::new(samples.len()),
            step: 0,
        })
    }

    /// Steps completed so far.
    pub fn step(&self) -> usize {
        self.step
    }

    /// Runs one step and returns its report and pre-clip gradient norm.
    pub fn advance(&mut self, model: &mut LatentVg) -> Result<(LossReport, f64)> {
        let idx = self.sampler.next_batch(self.tc.batch.max(1), &mut self.streams);
        let batch: Vec<&SceneSample> = idx.iter().map(|&i| &self.samples[i]).collect();
        let out = train_step(model, &mut self.opt, &batch, &mut self.streams, self.tc.clip_norm)?;
        self.step += 1;
        Ok(out)
    }

    /// Advances to step `until`, logging as configured; returns the reports
    /// of the steps taken.
    pub fn run_until(
        &mut self,
        model: &mut LatentVg,
        until: usize,
        mut log: Option<&mut dyn Write>,
    ) -> Result<Vec<LossReport>> {
        let mut history = Vec::with_capacity(until.saturating_sub(self.step));
        while self.step < until {
            let (report, norm) = self.advance(model)?;
            let step = self.step;
            if let Some(w) = log.as_deref_mut() {
                if step % self.tc.log_every.max(1) == 0 || step == self.tc.steps || step == 1 {
                    let line = LogLine {
                        step,
                        lr: self.lr,
                        total: report.total,
                        pos_cont: report.pos_cont,
                        bce: report.bce,
                        dice: report.dice,
                        gres_bce: report.gres_bce,
                        grad_norm: norm,
                    };
                    serde_json::to_writer(&mut *w, &line)?;
                    w.write_all(b"\n")?;
                }
            }
            history.push(report);
        }
        Ok(history)
    }
}

/// Trains `model` on `samples` for `tc.steps` steps, optionally writing a
/// JSON line per logged step.
pub fn train(
    model: &mut LatentVg,
    samples: &[SceneSample],
    tc: &TrainConfig,
    log: Option<&mut dyn Write>,
) -> Result<Vec<LossReport>> {
    let mut session = Session::new(model, samples, tc)?;
    session.run_until(model, tc.steps, log)
}

/// Loss of `batch` on the deterministic inference path.
pub fn eval_loss(model: &LatentVg, batch: &[&SceneSample]) -> Result<LossReport> {
    let mut g = Graph::inference(&model.store);
    Ok(model.batch_loss(&mut g, batch, None)?.report)
}
