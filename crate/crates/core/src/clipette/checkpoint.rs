//! JSON checkpoint of a pretrained model.
//!
//! Every array is stored as `{"shape": [...], "values": [...]}` with values
//! written in scientific notation at 17 significant digits, which round-trips
//! any `f64` exactly.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;

use super::{Activation, Dense, FrozenModel, Mlp, Pretrained, PromptParams, Sizes};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::ndcore::Tensor;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Serialize)]
struct ArrayOut {
    shape: Vec<usize>,
    values: Box<RawValue>,
}

#[derive(Deserialize)]
struct ArrayIn {
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Serialize)]
struct CheckpointOut {
    schema_version: u32,
    seed: u64,
    sizes: Sizes,
    activation: Activation,
    tau: f64,
    arrays: BTreeMap<&'static str, ArrayOut>,
}

#[derive(Deserialize)]
struct CheckpointIn {
    schema_version: u32,
    seed: u64,
    sizes: Sizes,
    #[serde(default)]
    activation: Activation,
    tau: f64,
    arrays: BTreeMap<String, ArrayIn>,
}

/// A pretrained model together with the seed it was produced from.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub seed: u64,
    pub pretrained: Pretrained,
}

/// `{:.16e}`, i.e. 17 significant digits.
pub(crate) fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

fn array_out(t: &Tensor) -> Result<ArrayOut> {
    let body: Vec<String> = t.data().iter().map(|&v| fmt17(v)).collect();
    Ok(ArrayOut {
        shape: t.shape().to_vec(),
        values: RawValue::from_string(format!("[{}]", body.join(",")))?,
    })
}

fn named_arrays(p: &Pretrained) -> Vec<(&'static str, &Tensor)> {
    let m = &p.model;
    vec![
        ("image.hidden.weight", &m.image_encoder.hidden.weight),
        ("image.hidden.bias", &m.image_encoder.hidden.bias),
        ("image.output.weight", &m.image_encoder.output.weight),
        ("image.output.bias", &m.image_encoder.output.bias),
        ("text.hidden.weight", &m.text_encoder.hidden.weight),
        ("text.hidden.bias", &m.text_encoder.hidden.bias),
        ("text.output.weight", &m.text_encoder.output.weight),
        ("text.output.bias", &m.text_encoder.output.bias),
        ("class_tokens", &m.class_tokens),
        ("prompt", p.prompt.tokens()),
    ]
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        let mut arrays = BTreeMap::new();
        for (name, t) in named_arrays(&self.pretrained) {
            arrays.insert(name, array_out(t)?);
        }
        let out = CheckpointOut {
            schema_version: SCHEMA_VERSION,
            seed: self.seed,
            sizes: self.pretrained.model.sizes,
            activation: self.pretrained.model.image_encoder.activation,
            tau: self.pretrained.model.tau,
            arrays,
        };
        Ok(serde_json::to_string_pretty(&out)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut ck: CheckpointIn = serde_json::from_str(text)?;
        if ck.schema_version != SCHEMA_VERSION {
            return Err(Error::Format(format!(
                "checkpoint schema {} (expected {SCHEMA_VERSION})",
                ck.schema_version
            )));
        }
        ck.sizes.validate()?;
        let mut take = |name: &str| -> Result<Tensor> {
            let a = ck
                .arrays
                .remove(name)
                .ok_or_else(|| Error::Format(format!("checkpoint is missing array `{name}`")))?;
            Tensor::new(a.shape, a.values)
        };
        let mut mlp = |prefix: &str| -> Result<Mlp> {
            Ok(Mlp {
                hidden: Dense::new(take(&format!("{prefix}.hidden.weight"))?, take(&format!("{prefix}.hidden.bias"))?)?,
                output: Dense::new(take(&format!("{prefix}.output.weight"))?, take(&format!("{prefix}.output.bias"))?)?,
                activation: ck.activation,
            })
        };
        let image_encoder = mlp("image")?;
        let text_encoder = mlp("text")?;
        let class_tokens = take("class_tokens")?;
        let prompt = PromptParams::new(take("prompt")?)?;
        let s = ck.sizes;
        let expect = [
            (image_encoder.hidden.weight.shape(), vec![s.hidden, s.d_in]),
            (image_encoder.output.weight.shape(), vec![s.d_emb, s.hidden]),
            (text_encoder.hidden.weight.shape(), vec![s.hidden, s.d_tok]),
            (text_encoder.output.weight.shape(), vec![s.d_emb, s.hidden]),
            (class_tokens.shape(), vec![s.k_classes, s.d_tok]),
            (prompt.tokens().shape(), vec![s.prompt_len, s.d_tok]),
        ];
        for (got, want) in expect {
            if got != want.as_slice() {
                return Err(Error::Format(format!("checkpoint array shape {got:?}, expected {want:?}")));
            }
        }
        Ok(Checkpoint {
            seed: ck.seed,
            pretrained: Pretrained {
                model: FrozenModel {
                    sizes: s,
                    image_encoder,
                    text_encoder,
                    class_tokens,
                    tau: ck.tau,
                },
                prompt,
            },
        })
    }
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    write_atomic(path, ck.to_json()?.as_bytes())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_json(&text)
}
