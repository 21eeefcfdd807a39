//! A miniature frozen dual-encoder classifier.
//!
//! Images are encoded by a two-layer dense network. A class is encoded by
//! mean-pooling the learnable prompt tokens together with that class's token
//! and passing the pooled vector through a second two-layer network. Both
//! embeddings are normalized to unit length, and class probabilities are the
//! tempered softmax of the cosine similarities.

mod checkpoint;
mod grad;
mod pretrain;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, SCHEMA_VERSION};
pub use grad::{ce_loss_and_grad, grad_prompt_ce, record_ce};
pub use pretrain::{init_model, pretrain, PretrainConfig, Pretrained};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instrument;
use crate::ndcore::{self, tensor_affine, Tensor, NORM_EPS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, v: &mut [f64]) {
        if self == Activation::Tanh {
            v.iter_mut().for_each(|x| *x = x.tanh());
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Sizes {
    pub d_in: usize,
    pub d_tok: usize,
    pub d_emb: usize,
    pub hidden: usize,
    pub k_classes: usize,
    pub prompt_len: usize,
}

impl Default for Sizes {
    fn default() -> Self {
        Self {
            d_in: 16,
            d_tok: 8,
            d_emb: 8,
            hidden: 32,
            k_classes: 10,
            prompt_len: 4,
        }
    }
}

impl Sizes {
    pub fn validate(&self) -> Result<()> {
        let dims = [self.d_in, self.d_tok, self.d_emb, self.hidden, self.prompt_len];
        if dims.contains(&0) {
            return Err(Error::InvalidConfig(format!("all sizes must be positive: {self:?}")));
        }
        if self.k_classes < 2 {
            return Err(Error::InvalidConfig("need at least two classes".into()));
        }
        Ok(())
    }
}

/// One dense layer, `y = W x + b` with `W: [out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Dense {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        if weight.shape().len() != 2 || bias.len() != weight.rows() {
            return Err(Error::Shape(format!(
                "dense weight {:?} with bias {:?}",
                weight.shape(),
                bias.shape()
            )));
        }
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &[f64], out: &mut Vec<f64>) {
        tensor_affine(&self.weight, x, self.bias.data(), out);
    }
}

/// Two dense layers with an activation in between.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub hidden: Dense,
    pub output: Dense,
    pub activation: Activation,
}

impl Mlp {
    /// Unnormalized output.
    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut h = Vec::with_capacity(self.hidden.weight.rows());
        self.hidden.forward(x, &mut h);
        self.activation.apply(&mut h);
        let mut out = Vec::with_capacity(self.output.weight.rows());
        self.output.forward(&h, &mut out);
        out
    }
}

/// Frozen encoders, class tokens and temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenModel {
    pub sizes: Sizes,
    pub image_encoder: Mlp,
    pub text_encoder: Mlp,
    /// `[K, d_tok]`, one token per class.
    pub class_tokens: Tensor,
    pub tau: f64,
}

/// Learnable prompt tokens, `[L, d_tok]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptParams {
    tokens: Tensor,
}

impl PromptParams {
    pub fn new(tokens: Tensor) -> Result<Self> {
        if tokens.shape().len() != 2 || tokens.rows() == 0 {
            return Err(Error::Shape(format!("prompt tokens need shape [L, d_tok], got {:?}", tokens.shape())));
        }
        if !tokens.all_finite() {
            return Err(Error::InvalidValue("non-finite prompt entry".into()));
        }
        Ok(Self { tokens })
    }

    pub fn tokens(&self) -> &Tensor {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn width(&self) -> usize {
        self.tokens.cols()
    }

    /// Dimension of the flattened prompt, the perturbation space.
    pub fn dim(&self) -> usize {
        self.tokens.len()
    }

    pub fn flat(&self) -> &[f64] {
        self.tokens.data()
    }

    /// `self + s * delta`, with `delta` laid out like the flattened prompt.
    pub fn perturbed(&self, s: f64, delta: &[f64]) -> PromptParams {
        assert_eq!(delta.len(), self.dim(), "perturbation dimension");
        let data = self.flat().iter().zip(delta).map(|(p, d)| p + s * d).collect();
        PromptParams {
            tokens: Tensor::from_parts(self.tokens.shape().to_vec(), data),
        }
    }

    pub fn with_flat(&self, data: Vec<f64>) -> Result<PromptParams> {
        PromptParams::new(Tensor::new(self.tokens.shape().to_vec(), data)?)
    }

    /// Sum of the prompt token rows, the only way the prompt enters the
    /// mean-pooled text path.
    pub fn token_sum(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.width()];
        for j in 0..self.len() {
            for (a, b) in s.iter_mut().zip(self.tokens.row(j)) {
                *a += b;
            }
        }
        s
    }
}

/// Inputs `[n, d_in]` with class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBatch {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

impl LabeledBatch {
    pub fn new(inputs: Tensor, labels: Vec<usize>, k_classes: usize) -> Result<Self> {
        if inputs.shape().len() != 2 || inputs.rows() != labels.len() {
            return Err(Error::Shape(format!(
                "inputs {:?} with {} labels",
                inputs.shape(),
                labels.len()
            )));
        }
        if labels.is_empty() {
            return Err(Error::InvalidDataset("empty batch".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= k_classes) {
            return Err(Error::InvalidDataset(format!("label {bad} out of range for {k_classes} classes")));
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input(&self, i: usize) -> &[f64] {
        self.inputs.row(i)
    }

    /// Sub-batch of the given rows, in order.
    pub fn select(&self, rows: &[usize]) -> LabeledBatch {
        let d = self.inputs.cols();
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            data.extend_from_slice(self.inputs.row(r));
        }
        LabeledBatch {
            inputs: Tensor::from_parts(vec![rows.len(), d], data),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
        }
    }
}

fn normalized(mut v: Vec<f64>) -> Result<Vec<f64>> {
    let n = ndcore::norm(&v);
    if !(n >= NORM_EPS) {
        return Err(Error::DegenerateEmbedding(NORM_EPS));
    }
    v.iter_mut().for_each(|x| *x /= n);
    Ok(v)
}

/// Encodes class tokens against one fixed prompt, sharing the pooled prompt
/// sum across classes. Each [`ClassEncoder::encode`] call is one text-encoder
/// invocation.
pub struct ClassEncoder<'a> {
    model: &'a FrozenModel,
    token_sum: Vec<f64>,
    denom: f64,
    pooled: Vec<f64>,
}

impl<'a> ClassEncoder<'a> {
    pub fn new(model: &'a FrozenModel, p: &PromptParams) -> Self {
        Self::from_token_sum(model, p.token_sum(), p.len())
    }

    pub(crate) fn from_token_sum(model: &'a FrozenModel, token_sum: Vec<f64>, prompt_len: usize) -> Self {
        Self {
            model,
            pooled: vec![0.0; token_sum.len()],
            token_sum,
            denom: (prompt_len + 1) as f64,
        }
    }

    pub fn encode(&mut self, k: usize) -> Result<Vec<f64>> {
        instrument::text_encode();
        let c = self.model.class_tokens.row(k);
        for ((dst, s), ck) in self.pooled.iter_mut().zip(&self.token_sum).zip(c) {
            *dst = (s + ck) / self.denom;
        }
        normalized(self.model.text_encoder.forward(&self.pooled))
    }

    /// All `K` class embeddings.
    pub fn encode_all(&mut self) -> Result<Vec<Vec<f64>>> {
        (0..self.model.sizes.k_classes).map(|k| self.encode(k)).collect()
    }
}

impl FrozenModel {
    pub fn k_classes(&self) -> usize {
        self.sizes.k_classes
    }

    pub fn validate_prompt(&self, p: &PromptParams) -> Result<()> {
        if p.width() != self.sizes.d_tok {
            return Err(Error::Shape(format!(
                "prompt width {} but model token width {}",
                p.width(),
                self.sizes.d_tok
            )));
        }
        Ok(())
    }
}

/// Unit-norm image embedding.
pub fn encode_image(model: &FrozenModel, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != model.sizes.d_in {
        return Err(Error::Shape(format!("input length {} but d_in {}", x.len(), model.sizes.d_in)));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidValue("non-finite input".into()));
    }
    instrument::image_encode();
    normalized(model.image_encoder.forward(x))
}

/// Unit-norm embedding of class `k` under prompt `p`.
pub fn encode_class(model: &FrozenModel, p: &PromptParams, k: usize) -> Result<Vec<f64>> {
    if k >= model.k_classes() {
        return Err(Error::InvalidValue(format!("class {k} out of range")));
    }
    model.validate_prompt(p)?;
    ClassEncoder::new(model, p).encode(k)
}

/// Pre-normalization text-encoder output for class `k`.
pub fn class_features(model: &FrozenModel, p: &PromptParams, k: usize) -> Result<Vec<f64>> {
    model.validate_prompt(p)?;
    let s = p.token_sum();
    let denom = (p.len() + 1) as f64;
    let pooled: Vec<f64> = s.iter().zip(model.class_tokens.row(k)).map(|(a, c)| (a + c) / denom).collect();
    Ok(model.text_encoder.forward(&pooled))
}

/// Tempered softmax over cosine similarities between unit embeddings.
pub fn probs_from_embeddings(image: &[f64], classes: &[Vec<f64>], tau: f64) -> Vec<f64> {
    let sims: Vec<f64> = classes
        .iter()
        .map(|c| ndcore::dot(image, c).clamp(-1.0, 1.0))
        .collect();
    ndcore::softmax_t_unchecked(&sims, tau)
}

pub fn class_probs(model: &FrozenModel, p: &PromptParams, x: &[f64]) -> Result<Vec<f64>> {
    model.validate_prompt(p)?;
    let image = encode_image(model, x)?;
    let classes = ClassEncoder::new(model, p).encode_all()?;
    Ok(probs_from_embeddings(&image, &classes, model.tau))
}

/// Summed negative log-likelihood of the true classes.
pub fn ce_loss(model: &FrozenModel, p: &PromptParams, batch: &LabeledBatch) -> Result<f64> {
    model.validate_prompt(p)?;
    let classes = ClassEncoder::new(model, p).encode_all()?;
    let mut loss = 0.0;
    for (i, &y) in batch.labels.iter().enumerate() {
        let image = encode_image(model, batch.input(i))?;
        let probs = probs_from_embeddings(&image, &classes, model.tau);
        loss -= probs[y].ln();
    }
    Ok(loss)
}

/// Mean prediction entropy over the rows of a batch.
pub fn mean_entropy(model: &FrozenModel, p: &PromptParams, inputs: &Tensor) -> Result<f64> {
    let classes = ClassEncoder::new(model, p).encode_all()?;
    let mut total = 0.0;
    for i in 0..inputs.rows() {
        let image = encode_image(model, inputs.row(i))?;
        total += ndcore::entropy_unchecked(&probs_from_embeddings(&image, &classes, model.tau));
    }
    Ok(total / inputs.rows() as f64)
}

/// Top-1 accuracy of the plain zero-shot argmax.
pub fn accuracy(model: &FrozenModel, p: &PromptParams, batch: &LabeledBatch) -> Result<f64> {
    let classes = ClassEncoder::new(model, p).encode_all()?;
    let mut hits = 0usize;
    for (i, &y) in batch.labels.iter().enumerate() {
        let image = encode_image(model, batch.input(i))?;
        if ndcore::argmax(&probs_from_embeddings(&image, &classes, model.tau)) == y {
            hits += 1;
        }
    }
    Ok(hits as f64 / batch.len() as f64)
}
