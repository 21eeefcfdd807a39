//! Stand-in for large-scale contrastive pretraining: every parameter
//! (encoders, class tokens, prompt) is fitted with per-sample cross-entropy
//! on a source corpus, then frozen.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::grad::{record_loss, MlpNodes};
use super::{Activation, Dense, FrozenModel, LabeledBatch, Mlp, PromptParams, Sizes};
use crate::error::{Error, Result};
use crate::ndcore::{Tape, Tensor};
use crate::seed::{rng, split_seed};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    /// Adam step size on the batch-mean loss.
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            lr: 0.01,
            batch_size: 32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pretrained {
    pub model: FrozenModel,
    /// Prompt state reached by pretraining; the starting point for tuning.
    pub prompt: PromptParams,
}

const PROMPT_INIT_STD: f64 = 0.1;

fn gaussian(r: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| std * r.sample::<f64, _>(StandardNormal)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

fn init_mlp(r: &mut impl Rng, d_in: usize, hidden: usize, d_out: usize, activation: Activation) -> Mlp {
    Mlp {
        hidden: Dense {
            weight: gaussian(r, &[hidden, d_in], (1.0 / d_in as f64).sqrt()),
            bias: Tensor::zeros(&[hidden]),
        },
        output: Dense {
            weight: gaussian(r, &[d_out, hidden], (1.0 / hidden as f64).sqrt()),
            bias: Tensor::zeros(&[d_out]),
        },
        activation,
    }
}

/// Seeded random initialization: fan-in scaled Gaussian weights, zero
/// biases, unit Gaussian class tokens and small Gaussian prompt tokens.
pub fn init_model(sizes: Sizes, tau: f64, activation: Activation, seed: u64) -> Result<Pretrained> {
    sizes.validate()?;
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::InvalidConfig(format!("temperature must be positive, got {tau}")));
    }
    let mut r = rng(seed);
    let image_encoder = init_mlp(&mut r, sizes.d_in, sizes.hidden, sizes.d_emb, activation);
    let text_encoder = init_mlp(&mut r, sizes.d_tok, sizes.hidden, sizes.d_emb, activation);
    let class_tokens = gaussian(&mut r, &[sizes.k_classes, sizes.d_tok], 1.0);
    let prompt = PromptParams::new(gaussian(&mut r, &[sizes.prompt_len, sizes.d_tok], PROMPT_INIT_STD))?;
    Ok(Pretrained {
        model: FrozenModel {
            sizes,
            image_encoder,
            text_encoder,
            class_tokens,
            tau,
        },
        prompt,
    })
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(params: &[&mut Tensor]) -> Self {
        Self {
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            for (j, (pv, gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let m = &mut self.m[i][j];
                let v = &mut self.v[i][j];
                *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * gv;
                *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * gv * gv;
                *pv -= lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
            }
        }
    }
}

/// Fits all parameters on `corpus` and returns the frozen result.
pub fn pretrain(
    sizes: Sizes,
    tau: f64,
    activation: Activation,
    corpus: &LabeledBatch,
    cfg: &PretrainConfig,
) -> Result<Pretrained> {
    let init = init_model(sizes, tau, activation, split_seed(cfg.seed, 0))?;
    if corpus.inputs.cols() != sizes.d_in {
        return Err(Error::Shape(format!("corpus width {} but d_in {}", corpus.inputs.cols(), sizes.d_in)));
    }
    let mut seen = vec![false; sizes.k_classes];
    for &y in &corpus.labels {
        if y >= sizes.k_classes {
            return Err(Error::InvalidDataset(format!("label {y} out of range")));
        }
        seen[y] = true;
    }
    if let Some(k) = seen.iter().position(|s| !s) {
        return Err(Error::InvalidDataset(format!("class {k} missing from pretraining corpus")));
    }
    if cfg.epochs == 0 {
        return Ok(init);
    }
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(Error::InvalidConfig("pretraining needs positive batch size and learning rate".into()));
    }

    let Pretrained { mut model, mut prompt } = init;
    let mut prompt_tokens = prompt.tokens.clone();
    let mut adam = {
        let params = model_params(&mut model, &mut prompt_tokens);
        Adam::new(&params)
    };
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng(split_seed(cfg.seed, epoch as u64 + 1)));
        for chunk in order.chunks(cfg.batch_size) {
            let batch = corpus.select(chunk);
            let grads = full_gradient(&model, &prompt_tokens, &batch)
                .map_err(|e| diverged(epoch, e))?;
            let mut params = model_params(&mut model, &mut prompt_tokens);
            adam.step(&mut params, &grads, cfg.lr);
            if params.iter().any(|p| !p.all_finite()) {
                return Err(Error::TrainingDiverged(format!("pretraining epoch {epoch}: non-finite weights")));
            }
        }
    }
    prompt = PromptParams::new(prompt_tokens)?;
    Ok(Pretrained { model, prompt })
}

fn diverged(epoch: usize, e: Error) -> Error {
    match e {
        Error::InvalidValue(msg) => Error::TrainingDiverged(format!("pretraining epoch {epoch}: {msg}")),
        other => other,
    }
}

fn model_params<'a>(model: &'a mut FrozenModel, prompt: &'a mut Tensor) -> Vec<&'a mut Tensor> {
    let FrozenModel {
        image_encoder,
        text_encoder,
        class_tokens,
        ..
    } = model;
    vec![
        &mut image_encoder.hidden.weight,
        &mut image_encoder.hidden.bias,
        &mut image_encoder.output.weight,
        &mut image_encoder.output.bias,
        &mut text_encoder.hidden.weight,
        &mut text_encoder.hidden.bias,
        &mut text_encoder.output.weight,
        &mut text_encoder.output.bias,
        class_tokens,
        prompt,
    ]
}

/// Gradient of the batch-mean cross-entropy for every parameter, in
/// [`model_params`] order.
fn full_gradient(model: &FrozenModel, prompt: &Tensor, batch: &LabeledBatch) -> Result<Vec<Tensor>> {
    let mut tape = Tape::new();
    let x = tape.constant(batch.inputs.clone());
    let image = MlpNodes::param(&mut tape, &model.image_encoder);
    let text = MlpNodes::param(&mut tape, &model.text_encoder);
    let classes = tape.param(model.class_tokens.clone());
    let p = tape.param(prompt.clone());
    let image_emb = image.encode(&mut tape, x)?;
    let loss = record_loss(&mut tape, image_emb, p, classes, &text, model.tau, &batch.labels)?;
    let mean = tape.scale(loss, 1.0 / batch.len() as f64)?;
    tape.backward(
        mean,
        &[
            image.w1, image.b1, image.w2, image.b2, text.w1, text.b1, text.w2, text.b2, classes, p,
        ],
    )
}
