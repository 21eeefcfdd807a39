//! Sharpness-aware prompt tuning.
//!
//! Each step first moves the prompt to the first-order worst case inside a
//! ball of radius `rho`, `eps* = rho * g / ||g||`, then descends using the
//! gradient taken there. The dependence of `eps*` on the prompt is dropped.
//!
//! Cross-entropy is summed over the batch; the learning rate is divided by
//! the batch length so the same `lr` behaves alike across batch sizes.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::clipette::{
    ce_loss_and_grad, encode_image, probs_from_embeddings, ClassEncoder, FrozenModel, LabeledBatch, PromptParams,
};
use crate::error::{Error, Result};
use crate::ndcore::{Tensor, NORM_EPS};
use crate::seed::{rng, split_seed, split_seed_str};

/// Radii searched for both the tuning and the test-time perturbation.
pub const RHO_GRID: [f64; 5] = [0.05, 0.1, 0.3, 0.5, 0.7];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SaptConfig {
    pub rho: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Training examples drawn per class.
    pub shots: usize,
    pub seed: u64,
    /// Random directions used by the per-epoch sharpness estimate.
    pub log_oracle_dirs: usize,
    /// Radii per direction used by the per-epoch sharpness estimate.
    pub log_oracle_grid: usize,
}

impl Default for SaptConfig {
    fn default() -> Self {
        Self {
            rho: 0.1,
            lr: 0.002,
            epochs: 50,
            batch_size: 32,
            shots: 16,
            seed: 0,
            log_oracle_dirs: 16,
            log_oracle_grid: 4,
        }
    }
}

impl SaptConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho >= 0.0) || !self.rho.is_finite() {
            return Err(Error::InvalidConfig(format!("rho must be non-negative, got {}", self.rho)));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::InvalidConfig(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 || self.shots == 0 {
            return Err(Error::InvalidConfig("batch_size and shots must be positive".into()));
        }
        Ok(())
    }
}

/// A differentiable loss over prompt parameters.
pub trait PromptObjective {
    fn loss(&self, p: &PromptParams) -> Result<f64>;
    fn loss_and_grad(&self, p: &PromptParams) -> Result<(f64, Tensor)>;
}

/// Summed cross-entropy of a fixed batch. Image embeddings are computed once.
pub struct CeObjective<'a> {
    model: &'a FrozenModel,
    batch: &'a LabeledBatch,
    images: Vec<Vec<f64>>,
}

impl<'a> CeObjective<'a> {
    pub fn new(model: &'a FrozenModel, batch: &'a LabeledBatch) -> Result<Self> {
        let images = (0..batch.len())
            .map(|i| encode_image(model, batch.input(i)))
            .collect::<Result<_>>()?;
        Ok(Self { model, batch, images })
    }
}

impl PromptObjective for CeObjective<'_> {
    fn loss(&self, p: &PromptParams) -> Result<f64> {
        self.model.validate_prompt(p)?;
        let classes = ClassEncoder::new(self.model, p).encode_all()?;
        Ok(self
            .images
            .iter()
            .zip(&self.batch.labels)
            .map(|(img, &y)| -probs_from_embeddings(img, &classes, self.model.tau)[y].ln())
            .sum())
    }

    fn loss_and_grad(&self, p: &PromptParams) -> Result<(f64, Tensor)> {
        ce_loss_and_grad(self.model, p, self.batch)
    }
}

/// `rho * g / ||g||` over the flattened gradient; zero when `||g||` is below
/// `1e-12` or `rho` is zero.
pub fn epsilon_star(grad: &Tensor, rho: f64) -> Tensor {
    let n = grad.norm();
    if n < NORM_EPS || rho == 0.0 {
        return Tensor::zeros(grad.shape());
    }
    grad.scale(rho / n)
}

fn descend(p: &PromptParams, step: f64, g: &Tensor) -> Result<PromptParams> {
    let data: Vec<f64> = p.flat().iter().zip(g.data()).map(|(pv, gv)| pv - step * gv).collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::TrainingDiverged("non-finite prompt after update".into()));
    }
    p.with_flat(data)
}

fn checked(loss: f64, grad: &Tensor) -> Result<()> {
    if !loss.is_finite() || !grad.all_finite() {
        return Err(Error::TrainingDiverged(format!("loss {loss}")));
    }
    Ok(())
}

fn diverged(e: Error) -> Error {
    match e {
        Error::InvalidValue(msg) => Error::TrainingDiverged(msg),
        other => other,
    }
}

/// Plain gradient step `p - step * grad(p)`.
pub fn sgd_step(obj: &impl PromptObjective, p: &PromptParams, step: f64) -> Result<PromptParams> {
    let (loss, g) = obj.loss_and_grad(p).map_err(diverged)?;
    checked(loss, &g)?;
    descend(p, step, &g)
}

/// Ascent to `p + eps*`, then `p - step * grad(p + eps*)`.
pub fn sam_step(obj: &impl PromptObjective, p: &PromptParams, rho: f64, step: f64) -> Result<PromptParams> {
    let (loss, g) = obj.loss_and_grad(p).map_err(diverged)?;
    checked(loss, &g)?;
    let eps = epsilon_star(&g, rho);
    if eps.data().iter().all(|&v| v == 0.0) {
        return descend(p, step, &g);
    }
    let (loss_adv, g_adv) = obj.loss_and_grad(&p.perturbed(1.0, eps.data())).map_err(diverged)?;
    checked(loss_adv, &g_adv)?;
    descend(p, step, &g_adv)
}

/// One sharpness-aware step on the summed cross-entropy of `batch`.
pub fn sapt_step(model: &FrozenModel, p: &PromptParams, batch: &LabeledBatch, cfg: &SaptConfig) -> Result<PromptParams> {
    if batch.is_empty() {
        return Err(Error::InvalidDataset("empty batch".into()));
    }
    let obj = CeObjective::new(model, batch)?;
    sam_step(&obj, p, cfg.rho, cfg.lr / batch.len() as f64)
}

/// One plain gradient step with the same step-size convention as [`sapt_step`].
pub fn plain_step(model: &FrozenModel, p: &PromptParams, batch: &LabeledBatch, cfg: &SaptConfig) -> Result<PromptParams> {
    if batch.is_empty() {
        return Err(Error::InvalidDataset("empty batch".into()));
    }
    let obj = CeObjective::new(model, batch)?;
    sgd_step(&obj, p, cfg.lr / batch.len() as f64)
}

/// Brute-force lower bound on `max_{||e|| <= rho} f(p + e) - f(p)`.
///
/// Evaluates `f` at `grid_per_dir` evenly spaced radii in `(0, rho]` along
/// `n_dirs` seeded random unit directions and along the normalized gradient.
/// The zero perturbation is included, so the result is never negative.
pub fn sharpness_oracle_with(
    obj: &impl PromptObjective,
    p: &PromptParams,
    rho: f64,
    n_dirs: usize,
    grid_per_dir: usize,
    seed: u64,
) -> Result<f64> {
    if n_dirs == 0 || grid_per_dir == 0 {
        return Err(Error::InvalidConfig("sharpness oracle needs at least one direction and radius".into()));
    }
    if rho == 0.0 {
        return Ok(0.0);
    }
    let (base, g) = obj.loss_and_grad(p)?;
    let mut directions = oracle_directions(p.dim(), n_dirs, seed);
    let gn = g.norm();
    if gn >= NORM_EPS {
        directions.push(g.data().iter().map(|v| v / gn).collect());
    }
    let mut best = 0.0f64;
    for u in &directions {
        for k in 1..=grid_per_dir {
            let r = rho * k as f64 / grid_per_dir as f64;
            best = best.max(obj.loss(&p.perturbed(r, u))? - base);
        }
    }
    Ok(best)
}

/// Unit directions drawn from the standard normal. The stream is shared by
/// all radii, so for fixed `n_dirs` and seed larger radii see the same
/// directions.
pub fn oracle_directions(dim: usize, n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut r = rng(seed);
    (0..n)
        .map(|_| loop {
            let v: Vec<f64> = (0..dim).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
            let nv = crate::ndcore::norm(&v);
            if nv >= NORM_EPS {
                break v.into_iter().map(|x| x / nv).collect();
            }
        })
        .collect()
}

/// [`sharpness_oracle_with`] on the summed cross-entropy of `batch`.
pub fn sharpness_oracle(
    model: &FrozenModel,
    p: &PromptParams,
    batch: &LabeledBatch,
    rho: f64,
    n_dirs: usize,
    grid_per_dir: usize,
    seed: u64,
) -> Result<f64> {
    let obj = CeObjective::new(model, batch)?;
    sharpness_oracle_with(&obj, p, rho, n_dirs, grid_per_dir, seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub ce_loss: f64,
    pub sharpness_estimate: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuneResult {
    pub prompt: PromptParams,
    /// The few-shot training set actually used.
    pub shots: LabeledBatch,
    pub log: Vec<EpochRecord>,
}

impl TuneResult {
    /// Training log as JSON lines.
    pub fn log_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for rec in &self.log {
            out.push_str(&serde_json::to_string(rec)?);
            out.push('\n');
        }
        Ok(out)
    }
}

/// Seeded per-class sampling of `shots` examples without replacement.
pub fn sample_shots(train: &LabeledBatch, k_classes: usize, shots: usize, seed: u64) -> Result<LabeledBatch> {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); k_classes];
    for (i, &y) in train.labels.iter().enumerate() {
        if y >= k_classes {
            return Err(Error::InvalidDataset(format!("label {y} out of range")));
        }
        by_class[y].push(i);
    }
    let mut r = rng(seed);
    let mut rows = Vec::with_capacity(k_classes * shots);
    for (k, idx) in by_class.iter_mut().enumerate() {
        if idx.len() < shots {
            return Err(Error::InvalidDataset(format!(
                "class {k} has {} examples, {shots} shots requested",
                idx.len()
            )));
        }
        idx.shuffle(&mut r);
        rows.extend_from_slice(&idx[..shots]);
    }
    Ok(train.select(&rows))
}

/// Few-shot prompt tuning from `p0`, sharpness-aware when `sapt_enabled`.
pub fn tune(
    model: &FrozenModel,
    p0: &PromptParams,
    train: &LabeledBatch,
    cfg: &SaptConfig,
    sapt_enabled: bool,
) -> Result<TuneResult> {
    cfg.validate()?;
    model.validate_prompt(p0)?;
    let shots = sample_shots(train, model.k_classes(), cfg.shots, split_seed_str(cfg.seed, "shots"))?;
    let oracle_seed = split_seed_str(cfg.seed, "oracle");
    let mut p = p0.clone();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..shots.len()).collect();
    let full = CeObjective::new(model, &shots)?;
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng(split_seed(cfg.seed, epoch as u64)));
        for chunk in order.chunks(cfg.batch_size) {
            let batch = shots.select(chunk);
            p = if sapt_enabled {
                sapt_step(model, &p, &batch, cfg)?
            } else {
                plain_step(model, &p, &batch, cfg)?
            };
        }
        let ce = full.loss(&p)?;
        if !ce.is_finite() {
            return Err(Error::TrainingDiverged(format!("tuning epoch {epoch}: loss {ce}")));
        }
        let sharp = sharpness_oracle_with(&full, &p, cfg.rho, cfg.log_oracle_dirs, cfg.log_oracle_grid, oracle_seed)?;
        log.push(EpochRecord {
            epoch: epoch + 1,
            ce_loss: ce,
            sharpness_estimate: sharp,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
    }
    Ok(TuneResult { prompt: p, shots, log })
}

#[cfg(test)]
mod tests;
