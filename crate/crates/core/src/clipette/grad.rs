use super::{encode_image, Activation, FrozenModel, LabeledBatch, Mlp, PromptParams};
use crate::error::Result;
use crate::ndcore::{NodeId, Tape, Tensor};

pub(crate) struct MlpNodes {
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
    pub activation: Activation,
}

impl MlpNodes {
    pub fn constant(tape: &mut Tape, mlp: &Mlp) -> Self {
        Self {
            w1: tape.constant(mlp.hidden.weight.clone()),
            b1: tape.constant(mlp.hidden.bias.clone()),
            w2: tape.constant(mlp.output.weight.clone()),
            b2: tape.constant(mlp.output.bias.clone()),
            activation: mlp.activation,
        }
    }

    pub fn param(tape: &mut Tape, mlp: &Mlp) -> Self {
        Self {
            w1: tape.param(mlp.hidden.weight.clone()),
            b1: tape.param(mlp.hidden.bias.clone()),
            w2: tape.param(mlp.output.weight.clone()),
            b2: tape.param(mlp.output.bias.clone()),
            activation: mlp.activation,
        }
    }

    /// Row-normalized encoder output for each input row.
    pub fn encode(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        let mut h = tape.dense(x, self.w1, self.b1)?;
        if self.activation == Activation::Tanh {
            h = tape.tanh(h)?;
        }
        let out = tape.dense(h, self.w2, self.b2)?;
        tape.normalize_rows(out)
    }
}

/// Records `-Σ log p(y_i | x_i)` given normalized image embeddings and the
/// text-path leaves; returns the loss node.
pub(crate) fn record_loss(
    tape: &mut Tape,
    images: NodeId,
    prompt: NodeId,
    classes: NodeId,
    text: &MlpNodes,
    tau: f64,
    labels: &[usize],
) -> Result<NodeId> {
    let pooled = tape.pool_tokens(prompt, classes)?;
    let text_emb = text.encode(tape, pooled)?;
    let sims = tape.cosine_rows(images, text_emb)?;
    let probs = tape.softmax_rows(sims, tau)?;
    let logp = tape.log(probs)?;
    let picked = tape.gather(logp, labels.to_vec())?;
    let total = tape.sum(picked)?;
    tape.scale(total, -1.0)
}

/// Records the summed cross-entropy with only the prompt differentiable.
/// Image embeddings are computed up front and enter as constants.
pub fn record_ce(
    tape: &mut Tape,
    model: &FrozenModel,
    p: &PromptParams,
    batch: &LabeledBatch,
) -> Result<(NodeId, NodeId)> {
    model.validate_prompt(p)?;
    let d = model.sizes.d_emb;
    let mut emb = Vec::with_capacity(batch.len() * d);
    for i in 0..batch.len() {
        emb.extend(encode_image(model, batch.input(i))?);
    }
    let images = tape.constant(Tensor::from_parts(vec![batch.len(), d], emb));
    let prompt = tape.param(p.tokens().clone());
    let classes = tape.constant(model.class_tokens.clone());
    let text = MlpNodes::constant(tape, &model.text_encoder);
    let loss = record_loss(tape, images, prompt, classes, &text, model.tau, &batch.labels)?;
    Ok((loss, prompt))
}

/// Summed cross-entropy and its gradient with respect to the prompt.
pub fn ce_loss_and_grad(model: &FrozenModel, p: &PromptParams, batch: &LabeledBatch) -> Result<(f64, Tensor)> {
    let mut tape = Tape::new();
    let (loss, prompt) = record_ce(&mut tape, model, p, batch)?;
    let grad = tape.backward(loss, &[prompt])?.remove(0);
    Ok((tape.value(loss).item(), grad))
}

pub fn grad_prompt_ce(model: &FrozenModel, p: &PromptParams, batch: &LabeledBatch) -> Result<Tensor> {
    Ok(ce_loss_and_grad(model, p, batch)?.1)
}
