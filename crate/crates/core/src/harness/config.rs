//! Run configuration, dotted-path overrides and seed resolution.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::clipette::{Activation, PretrainConfig, Sizes};
use crate::datagen::DomainSpec;
use crate::error::{Error, Result};
use crate::landscape::LossKind;
use crate::sapt::SaptConfig;
use crate::seed::split_seed_str;
use crate::stss::{AugConfig, StssConfig};

/// Environment variable consulted when neither the command line nor the
/// config file sets a seed.
pub const SEED_ENV: &str = "TLLA_SEED";
pub const DEFAULT_SEED: u64 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub sizes: Sizes,
    pub tau: f64,
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            sizes: Sizes::default(),
            tau: 10.0,
            activation: Activation::Tanh,
        }
    }
}

/// A shift applied to the source distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Shift {
    pub rot_theta: f64,
    pub scale: f64,
    pub noise_sigma: f64,
}

impl Default for Shift {
    fn default() -> Self {
        Self { rot_theta: 0.0, scale: 1.0, noise_sigma: 0.0 }
    }
}

impl Shift {
    pub fn rotation(rot_theta: f64, noise_sigma: f64) -> Self {
        Self { rot_theta, scale: 1.0, noise_sigma }
    }

    pub fn apply(&self, source: &DomainSpec) -> DomainSpec {
        DomainSpec {
            rot_theta: self.rot_theta,
            scale: self.scale,
            noise_sigma: self.noise_sigma,
            ..*source
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TargetConfig {
    pub name: String,
    #[serde(flatten)]
    pub shift: Shift,
}

impl Default for TargetConfig {
    fn default() -> Self {
        Self { name: "target".into(), shift: Shift::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Source distribution; its `n_per_class` and `draw` are set per role.
    pub source: DomainSpec,
    pub targets: Vec<TargetConfig>,
    pub pretrain_per_class: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DomainSpec::default(),
            targets: [0.3, 0.6, 0.9, 1.2]
                .iter()
                .enumerate()
                .map(|(i, &t)| TargetConfig { name: format!("rot{}", i + 1), shift: Shift::rotation(t, 0.1) })
                .collect(),
            pretrain_per_class: 100,
            train_per_class: 16,
            test_per_class: 50,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Methods {
    pub sapt_on: bool,
    pub stss_on: bool,
}

impl Default for Methods {
    fn default() -> Self {
        Self { sapt_on: true, stss_on: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    #[default]
    RhoPrime,
    TopR,
    Lambda,
    MPerturb,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::RhoPrime => "rho_prime",
            SweepParam::TopR => "top_r",
            SweepParam::Lambda => "lambda",
            SweepParam::MPerturb => "m_perturb",
        }
    }

    /// `stss` with this parameter set to `value`.
    pub fn apply(self, stss: &StssConfig, value: f64) -> Result<StssConfig> {
        let count = || {
            if value >= 1.0 && value.fract() == 0.0 && value <= u32::MAX as f64 {
                Ok(value as usize)
            } else {
                Err(Error::InvalidConfig(format!("{} needs a positive integer, got {value}", self.name())))
            }
        };
        let out = match self {
            SweepParam::RhoPrime => StssConfig { rho_prime: value, ..*stss },
            SweepParam::Lambda => StssConfig { lambda: value, ..*stss },
            SweepParam::TopR => StssConfig { top_r: count()?, ..*stss },
            SweepParam::MPerturb => StssConfig { m_perturb: count()?, ..*stss },
        };
        out.validate()?;
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub param: SweepParam,
    pub values: Vec<f64>,
    /// CSV path; relative paths are taken inside the output directory.
    pub output: String,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            param: SweepParam::RhoPrime,
            values: vec![0.0, 0.05, 0.1, 0.3, 0.5, 0.7, 1.5],
            output: "sweep.csv".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeparabilityConfig {
    pub near: Shift,
    pub far: Shift,
    /// Samples per domain.
    pub n: usize,
    /// Rotation levels for the shift sweep.
    pub levels: Vec<f64>,
}

impl Default for SeparabilityConfig {
    fn default() -> Self {
        Self {
            near: Shift::rotation(0.1, 0.0),
            far: Shift::rotation(1.2, 0.0),
            n: 500,
            levels: vec![0.0, 0.3, 0.6, 0.9, 1.2],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LandscapeConfig {
    pub resolution: usize,
    pub span: f64,
    pub loss_kind: LossKind,
    /// `"train"` for the tuning shots, otherwise a domain name.
    pub domain: String,
    pub tag: String,
}

impl Default for LandscapeConfig {
    fn default() -> Self {
        Self {
            resolution: crate::landscape::DEFAULT_RESOLUTION,
            span: crate::landscape::DEFAULT_SPAN,
            loss_kind: LossKind::Ce,
            domain: "train".into(),
            tag: "tuned".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub out: String,
    /// Pretrained checkpoint to load instead of pretraining.
    pub checkpoint: Option<String>,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub sapt: SaptConfig,
    pub aug: AugConfig,
    pub stss: StssConfig,
    pub data: DataConfig,
    pub methods: Methods,
    pub sweep: SweepConfig,
    pub separability: SeparabilityConfig,
    pub landscape: LandscapeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            out: "out".into(),
            checkpoint: None,
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            sapt: SaptConfig::default(),
            aug: AugConfig::default(),
            stss: StssConfig::default(),
            data: DataConfig::default(),
            methods: Methods::default(),
            sweep: SweepConfig::default(),
            separability: SeparabilityConfig::default(),
            landscape: LandscapeConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    /// Reads a config file and applies `KEY=VALUE` overrides.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidConfig(format!("cannot read config {}: {e}", path.display())))?;
        let mut value: Value = serde_json::from_str(&text)
            .map_err(|e| Error::InvalidConfig(format!("config {} is not valid JSON: {e}", path.display())))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        serde_json::from_value(value).map_err(|e| Error::InvalidConfig(format!("config {}: {e}", path.display())))
    }

    /// Applies `KEY=VALUE` overrides to an in-memory config.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut value = serde_json::to_value(self)?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        serde_json::from_value(value).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(&self.out)
    }

    pub fn shifted(&self, shift: &Shift) -> DomainSpec {
        shift.apply(&self.data.source)
    }

    /// Fixes the run seed, derives every component seed from it and validates.
    ///
    /// The seed comes from `cli_seed`, then the config, then `TLLA_SEED`,
    /// then [`DEFAULT_SEED`].
    pub fn resolve(&self, cli_seed: Option<u64>) -> Result<Self> {
        let env_seed = match std::env::var(SEED_ENV) {
            Ok(s) => Some(
                s.trim()
                    .parse::<u64>()
                    .map_err(|_| Error::InvalidConfig(format!("{SEED_ENV}={s:?} is not an unsigned integer")))?,
            ),
            Err(_) => None,
        };
        let seed = cli_seed.or(self.seed).or(env_seed).unwrap_or(DEFAULT_SEED);
        let mut out = self.clone();
        out.seed = Some(seed);
        out.pretrain.seed = split_seed_str(seed, "pretrain");
        out.sapt.seed = split_seed_str(seed, "sapt");
        out.aug.seed = split_seed_str(seed, "aug");
        out.stss.seed = split_seed_str(seed, "stss");
        out.data.source.seed = split_seed_str(seed, "data");
        out.validate()?;
        Ok(out)
    }

    pub fn run_seed(&self) -> u64 {
        self.seed.unwrap_or(DEFAULT_SEED)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        self.model.sizes.validate()?;
        self.pretrain_validate()?;
        self.sapt.validate()?;
        self.aug.validate()?;
        self.stss.validate()?;
        self.data.source.validate()?;
        let (sizes, src) = (self.model.sizes, self.data.source);
        if !(self.model.tau > 0.0 && self.model.tau.is_finite()) {
            return bad("model.tau must be positive".into());
        }
        if sizes.k_classes != src.k_classes || sizes.d_in != src.d_in {
            return bad("model.sizes and data.source disagree on k_classes or d_in".into());
        }
        if self.stss.top_r > self.aug.pool_size() {
            return bad(format!("stss.top_r {} exceeds pool size {}", self.stss.top_r, self.aug.pool_size()));
        }
        if self.data.train_per_class < self.sapt.shots {
            return bad("data.train_per_class must be at least sapt.shots".into());
        }
        if self.data.pretrain_per_class == 0 || self.data.test_per_class == 0 {
            return bad("data sizes must be positive".into());
        }
        let mut names: Vec<&str> = self.data.targets.iter().map(|t| t.name.as_str()).collect();
        names.push(SOURCE_DOMAIN);
        names.push(TRAIN_DOMAIN);
        let n = names.len();
        names.sort_unstable();
        names.dedup();
        if names.len() != n {
            return bad("target names must be unique and differ from \"source\" and \"train\"".into());
        }
        for t in &self.data.targets {
            if t.name.is_empty() || !t.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
                return bad(format!("target name {:?} must be non-empty [A-Za-z0-9_-]", t.name));
            }
            self.shifted(&t.shift).validate()?;
        }
        if self.sweep.values.is_empty() {
            return bad("sweep.values must not be empty".into());
        }
        if self.separability.n == 0 {
            return bad("separability.n must be positive".into());
        }
        if self.landscape.resolution < 3 || self.landscape.resolution % 2 == 0 {
            return bad("landscape.resolution must be odd and at least 3".into());
        }
        Ok(())
    }

    fn pretrain_validate(&self) -> Result<()> {
        let p = &self.pretrain;
        if p.batch_size == 0 || !(p.lr > 0.0 && p.lr.is_finite()) {
            return Err(Error::InvalidConfig("pretrain.batch_size and pretrain.lr must be positive".into()));
        }
        Ok(())
    }

    /// SHA-256 of the compact JSON form.
    pub fn digest(&self) -> Result<String> {
        let text = serde_json::to_string(self)?;
        Ok(hex::encode(Sha256::digest(text.as_bytes())))
    }
}

pub const SOURCE_DOMAIN: &str = "source";
pub const TRAIN_DOMAIN: &str = "train";

/// Sets the field at a dotted path such as `stss.rho_prime=0.3`.
///
/// The value is read as JSON when it parses, otherwise as a string. Numeric
/// segments index arrays.
pub fn apply_override(root: &mut Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::InvalidConfig(format!("override {spec:?} is not KEY=VALUE")))?;
    let path = path.trim();
    if path.is_empty() || path.split('.').any(str::is_empty) {
        return Err(Error::InvalidConfig(format!("override {spec:?} has an empty key")));
    }
    let value = serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        node = match node {
            Value::Object(map) => {
                if last {
                    map.insert(part.to_string(), value);
                    return Ok(());
                }
                map.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()))
            }
            Value::Array(items) => {
                let idx: usize = part
                    .parse()
                    .map_err(|_| Error::InvalidConfig(format!("override {spec:?}: {part:?} is not an index")))?;
                let len = items.len();
                let slot = items
                    .get_mut(idx)
                    .ok_or_else(|| Error::InvalidConfig(format!("override {spec:?}: index {idx} out of {len}")))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            Value::Null => {
                *node = Value::Object(Default::default());
                let Value::Object(map) = node else { unreachable!() };
                if last {
                    map.insert(part.to_string(), value);
                    return Ok(());
                }
                map.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()))
            }
            _ => {
                return Err(Error::InvalidConfig(format!(
                    "override {spec:?}: {} is not an object",
                    parts[..i].join(".")
                )))
            }
        };
    }
    Ok(())
}
