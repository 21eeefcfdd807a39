//! Sharpness-based test sample selection.
//!
//! Every test input is expanded into a pool of augmented views. Each view is
//! scored by its prediction entropy plus the worst entropy increase seen under
//! `M` random prompt perturbations of radius `rho_prime`. The `top_r` views
//! with the lowest scores vote on the final class.
//!
//! The module never computes a gradient. Per view, the image encoder runs once
//! and the text encoder runs `K * (M + 1)` times.
//!
//! Seeds split as follows, with [`split_seed`]:
//! * sample `i` of a dataset uses `split_seed(cfg.seed, i)` for both the
//!   augmentation and the scoring config;
//! * view `v` of a sample draws its perturbations from
//!   `split_seed(sample_seed, v)`;
//! * augmented view `v >= 1` draws from `split_seed(aug_seed, v)`.

use rand::distr::{Distribution, Uniform};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clipette::{encode_image, probs_from_embeddings, ClassEncoder, FrozenModel, LabeledBatch, PromptParams};
use crate::error::{Error, Result};
use crate::ndcore::{argmax, entropy_unchecked};
use crate::seed::{rng, split_seed};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugConfig {
    /// Augmented views per sample, not counting the original.
    pub n_views: usize,
    pub noise_sigma: f64,
    pub mask_frac: f64,
    pub scale_range: (f64, f64),
    pub seed: u64,
}

impl Default for AugConfig {
    fn default() -> Self {
        Self {
            n_views: 63,
            noise_sigma: 0.1,
            mask_frac: 0.0,
            scale_range: (0.8, 1.2),
            seed: 0,
        }
    }
}

impl AugConfig {
    /// The augmentation that returns copies of the input.
    pub fn identity(n_views: usize) -> Self {
        Self {
            n_views,
            noise_sigma: 0.0,
            mask_frac: 0.0,
            scale_range: (1.0, 1.0),
            seed: 0,
        }
    }

    pub fn pool_size(&self) -> usize {
        self.n_views + 1
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale_range;
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::InvalidConfig("aug.noise_sigma must be finite and non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.mask_frac) {
            return Err(Error::InvalidConfig("aug.mask_frac must lie in [0, 1)".into()));
        }
        if !(lo > 0.0 && lo <= 1.0 && 1.0 <= hi && hi.is_finite()) {
            return Err(Error::InvalidConfig("aug.scale_range must satisfy 0 < lo <= 1 <= hi".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StssConfig {
    pub rho_prime: f64,
    pub m_perturb: usize,
    pub top_r: usize,
    pub lambda: f64,
    pub seed: u64,
}

impl Default for StssConfig {
    fn default() -> Self {
        Self {
            rho_prime: 0.3,
            m_perturb: 10,
            top_r: 7,
            lambda: 1.0,
            seed: 0,
        }
    }
}

impl StssConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho_prime >= 0.0 && self.rho_prime.is_finite()) {
            return Err(Error::InvalidConfig("stss.rho_prime must be finite and non-negative".into()));
        }
        if self.m_perturb == 0 {
            return Err(Error::InvalidConfig("stss.m_perturb must be at least 1".into()));
        }
        if self.top_r == 0 {
            return Err(Error::InvalidConfig("stss.top_r must be at least 1".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidConfig("stss.lambda must be finite and non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharpnessReport {
    pub view_index: usize,
    pub base_entropy: f64,
    pub perturbed_entropies: Vec<f64>,
    pub sharpness: f64,
    pub score: f64,
    pub predicted_class: usize,
    /// Largest unperturbed class probability.
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub reports: Vec<SharpnessReport>,
    pub selected_indices: Vec<usize>,
    pub final_prediction: usize,
    pub vote_tally: Vec<usize>,
}

/// Returns the original input followed by `n_views` augmented copies.
///
/// Each copy is scaled by `u ~ U(lo, hi)`, has each coordinate zeroed with
/// probability `mask_frac`, then receives `N(0, noise_sigma^2)` noise.
pub fn augment_views(x: &[f64], cfg: &AugConfig) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    let (lo, hi) = cfg.scale_range;
    let scale = Uniform::new_inclusive(lo, hi).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let mut views = Vec::with_capacity(cfg.pool_size());
    views.push(x.to_vec());
    for v in 1..=cfg.n_views {
        let mut r = rng(split_seed(cfg.seed, v as u64));
        let u = scale.sample(&mut r);
        let view = x
            .iter()
            .map(|&xi| {
                let kept = if r.random::<f64>() < cfg.mask_frac { 0.0 } else { u * xi };
                let noise: f64 = r.sample(StandardNormal);
                kept + cfg.noise_sigma * noise
            })
            .collect();
        views.push(view);
    }
    Ok(views)
}

/// Scores a single view. Perturbations come from `split_seed(cfg.seed, view_index)`.
pub fn sharpness_score(
    model: &FrozenModel,
    p: &PromptParams,
    x_view: &[f64],
    view_index: usize,
    cfg: &StssConfig,
) -> Result<SharpnessReport> {
    cfg.validate()?;
    model.validate_prompt(p)?;
    let image = encode_image(model, x_view)?;
    score_embedding(model, p, &image, view_index, cfg)
}

fn score_embedding(
    model: &FrozenModel,
    p: &PromptParams,
    image: &[f64],
    view_index: usize,
    cfg: &StssConfig,
) -> Result<SharpnessReport> {
    let max_entropy = (model.k_classes() as f64).ln();
    let entropy = |probs: &[f64]| entropy_unchecked(probs).min(max_entropy);

    let base_sum = p.token_sum();
    let classes = ClassEncoder::from_token_sum(model, base_sum.clone(), p.len()).encode_all()?;
    let probs = probs_from_embeddings(image, &classes, model.tau);
    let predicted_class = argmax(&probs);
    let confidence = probs[predicted_class];
    let base_entropy = entropy(&probs);

    let mut r = rng(split_seed(cfg.seed, view_index as u64));
    let (len, width) = (p.len(), p.width());
    let mut eps = vec![0.0; p.dim()];
    let mut perturbed_entropies = Vec::with_capacity(cfg.m_perturb);
    for _ in 0..cfg.m_perturb {
        eps.iter_mut().for_each(|e| *e = r.sample(StandardNormal));
        let n = eps.iter().map(|e| e * e).sum::<f64>().sqrt();
        let s = if n > 0.0 { cfg.rho_prime / n } else { 0.0 };
        // Only the token sum reaches the text encoder.
        let mut sum = base_sum.clone();
        for t in 0..len {
            for (dst, e) in sum.iter_mut().zip(&eps[t * width..(t + 1) * width]) {
                *dst += s * e;
            }
        }
        let classes = ClassEncoder::from_token_sum(model, sum, len).encode_all()?;
        perturbed_entropies.push(entropy(&probs_from_embeddings(image, &classes, model.tau)));
    }
    let worst = perturbed_entropies.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sharpness = worst - base_entropy;
    Ok(SharpnessReport {
        view_index,
        base_entropy,
        perturbed_entropies,
        sharpness,
        score: base_entropy + cfg.lambda * sharpness,
        predicted_class,
        confidence,
    })
}

/// Keeps the `top_r` lowest-scoring reports and takes a plurality vote.
///
/// Equal scores prefer the lower view index. Tied vote counts prefer the class
/// whose voters have the larger summed confidence, then the lower class index.
pub fn select_from_reports(reports: Vec<SharpnessReport>, top_r: usize, k_classes: usize) -> Result<SelectionResult> {
    if reports.is_empty() {
        return Err(Error::InvalidValue("empty view pool".into()));
    }
    if top_r == 0 || top_r > reports.len() {
        return Err(Error::InvalidConfig(format!(
            "top_r {top_r} must lie in 1..={}",
            reports.len()
        )));
    }
    let mut order: Vec<usize> = (0..reports.len()).collect();
    order.sort_by(|&a, &b| {
        reports[a]
            .score
            .total_cmp(&reports[b].score)
            .then(reports[a].view_index.cmp(&reports[b].view_index))
    });
    let selected: Vec<usize> = order[..top_r].iter().map(|&i| reports[i].view_index).collect();

    let mut tally = vec![0usize; k_classes];
    let mut mass = vec![0.0f64; k_classes];
    for &i in &order[..top_r] {
        let rep = &reports[i];
        if rep.predicted_class >= k_classes {
            return Err(Error::InvalidValue(format!("class {} out of range", rep.predicted_class)));
        }
        tally[rep.predicted_class] += 1;
        mass[rep.predicted_class] += rep.confidence;
    }
    let mut best = 0;
    for c in 1..k_classes {
        if tally[c] > tally[best] || (tally[c] == tally[best] && mass[c] > mass[best]) {
            best = c;
        }
    }
    Ok(SelectionResult {
        reports,
        selected_indices: selected,
        final_prediction: best,
        vote_tally: tally,
    })
}

/// Scores every view and votes among the `top_r` lowest scores.
pub fn select_and_vote(
    model: &FrozenModel,
    p: &PromptParams,
    views: &[Vec<f64>],
    cfg: &StssConfig,
) -> Result<SelectionResult> {
    cfg.validate()?;
    model.validate_prompt(p)?;
    if views.is_empty() {
        return Err(Error::InvalidValue("empty view pool".into()));
    }
    if cfg.top_r > views.len() {
        return Err(Error::InvalidConfig(format!(
            "top_r {} exceeds pool size {}",
            cfg.top_r,
            views.len()
        )));
    }
    let reports = views
        .iter()
        .enumerate()
        .map(|(v, x)| sharpness_score(model, p, x, v, cfg))
        .collect::<Result<Vec<_>>>()?;
    select_from_reports(reports, cfg.top_r, model.k_classes())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleResult {
    pub sample_id: usize,
    pub true_label: usize,
    pub selection: SelectionResult,
}

impl SampleResult {
    /// The per-sample record written to results files.
    pub fn record(&self) -> serde_json::Value {
        let mut scores: Vec<f64> = vec![0.0; self.selection.reports.len()];
        for r in &self.selection.reports {
            scores[r.view_index] = round9(r.score);
        }
        serde_json::json!({
            "sample_id": self.sample_id,
            "true_label": self.true_label,
            "final_prediction": self.selection.final_prediction,
            "selected_indices": self.selection.selected_indices,
            "scores": scores,
        })
    }
}

pub(crate) fn round9(x: f64) -> f64 {
    (x * 1e9).round() / 1e9
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptOutcome {
    pub results: Vec<SampleResult>,
    pub accuracy: f64,
}

impl AdaptOutcome {
    /// One JSON object per line, in sample order.
    pub fn records_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.results {
            out.push_str(&r.record().to_string());
            out.push('\n');
        }
        out
    }
}

/// Seeds used for sample `i`.
pub fn sample_configs(aug: &AugConfig, stss: &StssConfig, i: usize) -> (AugConfig, StssConfig) {
    let i = i as u64;
    (
        AugConfig { seed: split_seed(aug.seed, i), ..*aug },
        StssConfig { seed: split_seed(stss.seed, i), ..*stss },
    )
}

fn adapt_sample(
    model: &FrozenModel,
    p: &PromptParams,
    test_set: &LabeledBatch,
    aug: &AugConfig,
    stss: &StssConfig,
    i: usize,
) -> Result<SampleResult> {
    let (aug_i, stss_i) = sample_configs(aug, stss, i);
    let views = augment_views(test_set.input(i), &aug_i)?;
    Ok(SampleResult {
        sample_id: i,
        true_label: test_set.labels[i],
        selection: select_and_vote(model, p, &views, &stss_i)?,
    })
}

fn check_inputs(model: &FrozenModel, p: &PromptParams, test_set: &LabeledBatch, aug: &AugConfig, stss: &StssConfig) -> Result<()> {
    aug.validate()?;
    stss.validate()?;
    model.validate_prompt(p)?;
    if test_set.is_empty() {
        return Err(Error::InvalidDataset("empty test set".into()));
    }
    if stss.top_r > aug.pool_size() {
        return Err(Error::InvalidConfig(format!(
            "top_r {} exceeds pool size {}",
            stss.top_r,
            aug.pool_size()
        )));
    }
    Ok(())
}

fn outcome(results: Vec<SampleResult>) -> AdaptOutcome {
    let hits = results
        .iter()
        .filter(|r| r.selection.final_prediction == r.true_label)
        .count();
    let accuracy = hits as f64 / results.len() as f64;
    AdaptOutcome { results, accuracy }
}

/// Adapts every sample on the calling thread.
pub fn adapt_dataset(
    model: &FrozenModel,
    p: &PromptParams,
    test_set: &LabeledBatch,
    aug: &AugConfig,
    stss: &StssConfig,
) -> Result<AdaptOutcome> {
    check_inputs(model, p, test_set, aug, stss)?;
    let results = (0..test_set.len())
        .map(|i| adapt_sample(model, p, test_set, aug, stss, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(outcome(results))
}

/// Same result as [`adapt_dataset`], with samples spread over the rayon pool.
pub fn adapt_dataset_par(
    model: &FrozenModel,
    p: &PromptParams,
    test_set: &LabeledBatch,
    aug: &AugConfig,
    stss: &StssConfig,
) -> Result<AdaptOutcome> {
    check_inputs(model, p, test_set, aug, stss)?;
    let results = (0..test_set.len())
        .into_par_iter()
        .map(|i| adapt_sample(model, p, test_set, aug, stss, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(outcome(results))
}
