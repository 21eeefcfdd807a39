//! Synthetic classification domains with controllable shift.
//!
//! Class means sit on a sphere of radius `class_sep`. A sample of class `k` is
//! `scale * R(theta) * (mu_k + N(0, 0.25^2 I)) + N(0, noise_sigma^2 I)`, where
//! `R` rotates the first two coordinates. The means depend only on `seed`, so
//! specs that share a seed describe the same task under different shifts.
//! `draw` selects an independent sample set from the same distribution.

use std::f64::consts::TAU;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::clipette::LabeledBatch;
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::ndcore::Tensor;
use crate::seed::{rng, split_seed, split_seed_str};

/// Standard deviation of samples around their class mean.
pub const WITHIN_CLASS_SIGMA: f64 = 0.25;
/// Proposal attempts allowed per class mean.
pub const MEAN_PLACEMENT_BUDGET: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DomainSpec {
    pub k_classes: usize,
    pub d_in: usize,
    pub n_per_class: usize,
    pub class_sep: f64,
    pub rot_theta: f64,
    pub scale: f64,
    pub noise_sigma: f64,
    pub seed: u64,
    pub draw: u64,
}

impl Default for DomainSpec {
    fn default() -> Self {
        Self {
            k_classes: 10,
            d_in: 16,
            n_per_class: 100,
            class_sep: 3.0,
            rot_theta: 0.0,
            scale: 1.0,
            noise_sigma: 0.0,
            seed: 0,
            draw: 0,
        }
    }
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("domain spec: {m}")));
        if self.k_classes < 2 {
            return bad("k_classes must be at least 2");
        }
        if self.d_in < 2 {
            return bad("d_in must be at least 2");
        }
        if self.n_per_class == 0 {
            return bad("n_per_class must be positive");
        }
        if !(self.class_sep > 0.0 && self.class_sep.is_finite()) {
            return bad("class_sep must be positive");
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return bad("scale must be positive");
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be non-negative");
        }
        if !self.rot_theta.is_finite() {
            return bad("rot_theta must be finite");
        }
        Ok(())
    }

    /// True for the unshifted source distribution.
    pub fn is_source(&self) -> bool {
        self.rot_theta.rem_euclid(TAU) == 0.0 && self.scale == 1.0
    }

    pub fn with_draw(self, draw: u64) -> Self {
        Self { draw, ..self }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainDataset {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub spec: DomainSpec,
}

impl DomainDataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, spec: DomainSpec) -> Result<Self> {
        if inputs.shape().len() != 2 || inputs.rows() != labels.len() {
            return Err(Error::Shape("inputs must be n x d_in with one label per row".into()));
        }
        if inputs.cols() != spec.d_in {
            return Err(Error::Shape(format!("inputs have {} columns, spec d_in {}", inputs.cols(), spec.d_in)));
        }
        if labels.is_empty() {
            return Err(Error::InvalidDataset("no samples".into()));
        }
        if labels.len() != spec.k_classes * spec.n_per_class {
            return Err(Error::InvalidDataset(format!(
                "{} samples, expected {} x {}",
                labels.len(),
                spec.k_classes,
                spec.n_per_class
            )));
        }
        let mut seen = vec![false; spec.k_classes];
        for &y in &labels {
            match seen.get_mut(y) {
                Some(s) => *s = true,
                None => return Err(Error::InvalidDataset(format!("label {y} out of range"))),
            }
        }
        if let Some(k) = seen.iter().position(|s| !s) {
            return Err(Error::InvalidDataset(format!("class {k} has no samples")));
        }
        Ok(Self { inputs, labels, spec })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn to_batch(&self) -> Result<LabeledBatch> {
        LabeledBatch::new(self.inputs.clone(), self.labels.clone(), self.spec.k_classes)
    }

    /// SHA-256 over labels and the bit patterns of all inputs.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for &y in &self.labels {
            h.update((y as u64).to_le_bytes());
        }
        for v in self.inputs.data() {
            h.update(v.to_bits().to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Class means for a spec; depends only on `seed`, `k_classes`, `d_in` and `class_sep`.
pub fn class_means(spec: &DomainSpec) -> Result<Vec<Vec<f64>>> {
    spec.validate()?;
    let mut r = rng(split_seed_str(spec.seed, "means"));
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(spec.k_classes);
    for k in 0..spec.k_classes {
        let mut placed = false;
        for _ in 0..MEAN_PLACEMENT_BUDGET {
            let mut v: Vec<f64> = (0..spec.d_in).map(|_| r.sample(StandardNormal)).collect();
            let n = crate::ndcore::norm(&v);
            if n == 0.0 {
                continue;
            }
            v.iter_mut().for_each(|x| *x *= spec.class_sep / n);
            let far = means.iter().all(|m| {
                let d2: f64 = m.iter().zip(&v).map(|(a, b)| (a - b) * (a - b)).sum();
                d2.sqrt() >= spec.class_sep
            });
            if far {
                means.push(v);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::InfeasibleSpec(format!(
                "could not place class {k} mean after {MEAN_PLACEMENT_BUDGET} attempts"
            )));
        }
    }
    Ok(means)
}

/// Generates a dataset; row `i` belongs to class `i % k_classes`.
pub fn gen_domain(spec: &DomainSpec) -> Result<DomainDataset> {
    let means = class_means(spec)?;
    let (k, d) = (spec.k_classes, spec.d_in);
    let n = k * spec.n_per_class;
    let theta = spec.rot_theta.rem_euclid(TAU);
    let (sin, cos) = theta.sin_cos();
    let mut r = rng(split_seed(split_seed_str(spec.seed, "samples"), spec.draw));
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    let mut z = vec![0.0; d];
    for i in 0..n {
        let y = i % k;
        for (zj, mj) in z.iter_mut().zip(&means[y]) {
            *zj = mj + WITHIN_CLASS_SIGMA * r.sample::<f64, _>(StandardNormal);
        }
        let (a, b) = (z[0], z[1]);
        z[0] = cos * a - sin * b;
        z[1] = sin * a + cos * b;
        for zj in &z {
            data.push(spec.scale * zj + spec.noise_sigma * r.sample::<f64, _>(StandardNormal));
        }
        labels.push(y);
    }
    DomainDataset::new(Tensor::matrix(n, d, data)?, labels, *spec)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiscriminatorConfig {
    pub iterations: usize,
    pub lr: f64,
    pub l2: f64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            iterations: 300,
            lr: 0.5,
            l2: 1e-3,
        }
    }
}

/// Raw inputs plus all degree-two monomials.
fn quadratic_features(x: &[f64]) -> Vec<f64> {
    let d = x.len();
    let mut f = Vec::with_capacity(d + d * (d + 1) / 2);
    f.extend_from_slice(x);
    for i in 0..d {
        for j in i..d {
            f.push(x[i] * x[j]);
        }
    }
    f
}

/// Proxy A-distance between two datasets, scaled to `[0, 1]`.
///
/// A logistic discriminator on quadratic features is trained on a random half
/// of the pooled samples and scored on the other half; the result is
/// `2 * (accuracy - 0.5)` clamped to `[0, 1]`. The pair is put in a canonical
/// order first, so the proxy is symmetric in its arguments.
pub fn domain_distance_proxy(a: &DomainDataset, b: &DomainDataset, seed: u64) -> Result<f64> {
    domain_distance_proxy_with(a, b, seed, &DiscriminatorConfig::default())
}

pub fn domain_distance_proxy_with(
    a: &DomainDataset,
    b: &DomainDataset,
    seed: u64,
    cfg: &DiscriminatorConfig,
) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidDataset("empty dataset".into()));
    }
    if a.spec.d_in != b.spec.d_in {
        return Err(Error::Shape("datasets differ in input width".into()));
    }
    let (first, second) = if a.digest() <= b.digest() { (a, b) } else { (b, a) };
    let mut rows: Vec<(Vec<f64>, f64)> = Vec::with_capacity(a.len() + b.len());
    for (ds, origin) in [(first, 0.0), (second, 1.0)] {
        for i in 0..ds.len() {
            rows.push((quadratic_features(ds.inputs.row(i)), origin));
        }
    }
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.shuffle(&mut rng(seed));
    let half = rows.len() / 2;
    let (train, test) = order.split_at(half);
    let has_both = |idx: &[usize]| {
        idx.iter().any(|&i| rows[i].1 == 0.0) && idx.iter().any(|&i| rows[i].1 == 1.0)
    };
    if !has_both(train) || !has_both(test) {
        return Err(Error::InvalidDataset("degenerate discriminator split".into()));
    }

    // Standardize with training statistics.
    let dim = rows[0].0.len();
    let mut mean = vec![0.0; dim];
    let mut sd = vec![0.0; dim];
    for &i in train {
        mean.iter_mut().zip(&rows[i].0).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= train.len() as f64);
    for &i in train {
        sd.iter_mut().zip(&rows[i].0).zip(&mean).for_each(|((s, v), m)| *s += (v - m) * (v - m));
    }
    sd.iter_mut().for_each(|s| *s = (*s / train.len() as f64).sqrt().max(1e-12));
    let features: Vec<Vec<f64>> = rows
        .iter()
        .map(|(f, _)| f.iter().zip(&mean).zip(&sd).map(|((v, m), s)| (v - m) / s).collect())
        .collect();

    let mut w = vec![0.0; dim];
    let mut bias = 0.0;
    let mut grad = vec![0.0; dim];
    let n = train.len() as f64;
    for _ in 0..cfg.iterations {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut gb = 0.0;
        for &i in train {
            let z = bias + crate::ndcore::dot(&w, &features[i]);
            let err = 1.0 / (1.0 + (-z).exp()) - rows[i].1;
            grad.iter_mut().zip(&features[i]).for_each(|(g, x)| *g += err * x);
            gb += err;
        }
        for (wj, gj) in w.iter_mut().zip(&grad) {
            *wj -= cfg.lr * (gj / n + cfg.l2 * *wj);
        }
        bias -= cfg.lr * gb / n;
    }
    let hits = test
        .iter()
        .filter(|&&i| {
            let z = bias + crate::ndcore::dot(&w, &features[i]);
            (z > 0.0) == (rows[i].1 == 1.0)
        })
        .count();
    let acc = hits as f64 / test.len() as f64;
    Ok((2.0 * (acc - 0.5)).clamp(0.0, 1.0))
}

/// Writes `# <spec json>`, a `label,f0,...` header and one row per sample.
pub fn to_csv(ds: &DomainDataset) -> Result<String> {
    let mut out = format!("# {}\nlabel", serde_json::to_string(&ds.spec)?);
    for j in 0..ds.spec.d_in {
        let _ = write!(out, ",f{j}");
    }
    out.push('\n');
    for (i, y) in ds.labels.iter().enumerate() {
        let _ = write!(out, "{y}");
        for v in ds.inputs.row(i) {
            let _ = write!(out, ",{v:.16e}");
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn save_csv(ds: &DomainDataset, path: &Path) -> Result<()> {
    write_atomic(path, to_csv(ds)?.as_bytes())
}

/// Parses the format written by [`to_csv`]. Without a metadata line, the
/// spec is inferred from the data and otherwise defaults.
pub fn parse_csv(text: &str) -> Result<DomainDataset> {
    let mut spec: Option<DomainSpec> = None;
    let mut header: Option<usize> = None;
    let mut labels = Vec::new();
    let mut data = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(meta) = line.strip_prefix('#') {
            if header.is_none() && spec.is_none() {
                spec = Some(
                    serde_json::from_str(meta.trim())
                        .map_err(|e| Error::Parse { line: line_no, msg: format!("metadata: {e}") })?,
                );
            }
            continue;
        }
        let Some(d) = header else {
            header = Some(parse_header(line)?);
            continue;
        };
        let mut fields = line.split(',');
        let label = fields.next().unwrap_or("");
        let y: usize = label
            .trim()
            .parse()
            .map_err(|_| Error::Parse { line: line_no, msg: format!("label {label:?} is not a class index") })?;
        let mut count = 0;
        for f in fields {
            let v: f64 = f
                .trim()
                .parse()
                .map_err(|_| Error::Parse { line: line_no, msg: format!("feature {f:?} is not a number") })?;
            if !v.is_finite() {
                return Err(Error::Parse { line: line_no, msg: "non-finite feature".into() });
            }
            data.push(v);
            count += 1;
        }
        if count != d {
            return Err(Error::Parse { line: line_no, msg: format!("expected {d} features, found {count}") });
        }
        labels.push(y);
    }
    let Some(d) = header else {
        return Err(Error::Format("missing label,f0,... header".into()));
    };
    if labels.is_empty() {
        return Err(Error::InvalidDataset("no data rows".into()));
    }
    let spec = match spec {
        Some(s) => s,
        None => {
            let k = labels.iter().max().map_or(0, |m| m + 1);
            if k == 0 || labels.len() % k != 0 {
                return Err(Error::InvalidDataset("classes are not balanced".into()));
            }
            DomainSpec { k_classes: k, d_in: d, n_per_class: labels.len() / k, ..DomainSpec::default() }
        }
    };
    let n = labels.len();
    DomainDataset::new(Tensor::matrix(n, d, data)?, labels, spec)
}

fn parse_header(line: &str) -> Result<usize> {
    let cols: Vec<&str> = line.split(',').map(str::trim).collect();
    let ok = cols.len() >= 2
        && cols[0] == "label"
        && cols[1..].iter().enumerate().all(|(j, c)| *c == format!("f{j}"));
    if !ok {
        return Err(Error::Format(format!("expected label,f0,... header, found {line:?}")));
    }
    Ok(cols.len() - 1)
}

pub fn load_csv(path: &Path) -> Result<DomainDataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv(&text)
}

#[cfg(test)]
mod tests;
