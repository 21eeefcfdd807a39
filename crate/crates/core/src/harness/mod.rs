//! Experiment pipelines: data generation, pretraining, prompt tuning,
//! test-time selection, ablations, sweeps, separability and landscapes.
//!
//! Every entry point takes a [`RunConfig`], resolves its seed and derives all
//! randomness from it, so a report can be regenerated from the config it
//! embeds. Outputs are assembled in memory and written at the end.
//!
//! Dataset draws per role: pretraining corpus 0, tuning pool 1, distance
//! reference 2, source test 3, target `j` at `4 + j`.

pub mod cli;
pub mod config;
pub mod stats;

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clipette::{load_checkpoint, pretrain, Checkpoint, FrozenModel, LabeledBatch, Pretrained, PromptParams};
use crate::datagen::{domain_distance_proxy, gen_domain, DomainDataset, DomainSpec};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::landscape::{grid_file_name, loss_grid, sample_directions, LandscapeData, LandscapeGrid};
use crate::sapt::{sharpness_oracle, tune, TuneResult};
use crate::seed::{split_seed, split_seed_str};
use crate::stss::{
    adapt_dataset_par, round9, sample_configs, select_from_reports, sharpness_score, AugConfig, SampleResult,
    SharpnessReport, StssConfig,
};

pub use config::{
    apply_override, DataConfig, LandscapeConfig, Methods, ModelConfig, RunConfig, SeparabilityConfig, Shift,
    SweepConfig, SweepParam, TargetConfig, SEED_ENV, SOURCE_DOMAIN, TRAIN_DOMAIN,
};

const PRETRAIN_DRAW: u64 = 0;
const TRAIN_DRAW: u64 = 1;
const REFERENCE_DRAW: u64 = 2;
const SOURCE_TEST_DRAW: u64 = 3;
const TARGET_DRAW: u64 = 4;
const NEAR_DRAW: u64 = 100;
const FAR_DRAW: u64 = 101;
const LEVEL_DRAW: u64 = 200;

fn ms_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Wall-clock milliseconds per stage. Excluded from determinism checks.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Timings {
    pub data_ms: f64,
    pub pretrain_ms: f64,
    pub tune_ms: f64,
    pub adapt_ms: f64,
    pub proxy_ms: f64,
}

/// Pretrained model and generated data shared by every pipeline.
#[derive(Debug, Clone)]
pub struct Session {
    pub cfg: RunConfig,
    pub pretrained: Pretrained,
    pub train: LabeledBatch,
    pub reference: DomainDataset,
    /// Source test set first, then targets in config order.
    pub domains: Vec<(String, DomainDataset)>,
    pub timings: Timings,
}

fn sized(spec: DomainSpec, n_per_class: usize, draw: u64) -> DomainSpec {
    DomainSpec { n_per_class, draw, ..spec }
}

/// Every dataset a run uses.
#[derive(Debug, Clone)]
pub struct GeneratedData {
    pub corpus: DomainDataset,
    pub train: DomainDataset,
    pub reference: DomainDataset,
    /// Source test set first, then targets in config order.
    pub domains: Vec<(String, DomainDataset)>,
}

impl GeneratedData {
    /// Datasets with file-friendly names: `pretrain`, `train`, `reference`,
    /// then the evaluation domains.
    pub fn named(&self) -> Vec<(String, &DomainDataset)> {
        let mut out = vec![
            ("pretrain".to_string(), &self.corpus),
            (TRAIN_DOMAIN.to_string(), &self.train),
            ("reference".to_string(), &self.reference),
        ];
        out.extend(self.domains.iter().map(|(n, d)| (n.clone(), d)));
        out
    }
}

/// Generates all datasets for a config.
pub fn generate_data(cfg: &RunConfig) -> Result<GeneratedData> {
    let cfg = cfg.resolve(None)?;
    let d = &cfg.data;
    let src = d.source;
    (|| {
        let mut domains = vec![(SOURCE_DOMAIN.to_string(), gen_domain(&sized(src, d.test_per_class, SOURCE_TEST_DRAW))?)];
        for (j, t) in d.targets.iter().enumerate() {
            let spec = sized(cfg.shifted(&t.shift), d.test_per_class, TARGET_DRAW + j as u64);
            domains.push((t.name.clone(), gen_domain(&spec)?));
        }
        Ok(GeneratedData {
            corpus: gen_domain(&sized(src, d.pretrain_per_class, PRETRAIN_DRAW))?,
            train: gen_domain(&sized(src, d.train_per_class, TRAIN_DRAW))?,
            reference: gen_domain(&sized(src, d.test_per_class, REFERENCE_DRAW))?,
            domains,
        })
    })()
    .map_err(|e: Error| e.in_stage("data"))
}

impl Session {
    /// Resolves the config, generates data and pretrains or loads the model.
    pub fn prepare(cfg: &RunConfig) -> Result<Self> {
        let cfg = cfg.resolve(None)?;
        let mut timings = Timings::default();
        let t = Instant::now();
        let GeneratedData { corpus, train, reference, domains } = generate_data(&cfg)?;
        let train = train.to_batch()?;
        timings.data_ms = ms_since(t);

        let t = Instant::now();
        let pretrained = match &cfg.checkpoint {
            Some(path) => {
                let ck = load_checkpoint(Path::new(path)).map_err(|e| e.in_stage("pretrain"))?;
                let m = &ck.pretrained.model;
                if m.sizes != cfg.model.sizes {
                    return Err(Error::InvalidConfig(format!("checkpoint {path} has sizes {:?}", m.sizes))
                        .in_stage("pretrain"));
                }
                ck.pretrained
            }
            None => pretrain(
                cfg.model.sizes,
                cfg.model.tau,
                cfg.model.activation,
                &corpus.to_batch()?,
                &cfg.pretrain,
            )
            .map_err(|e| e.in_stage("pretrain"))?,
        };
        timings.pretrain_ms = ms_since(t);
        Ok(Self { cfg, pretrained, train, reference, domains, timings })
    }

    pub fn model(&self) -> &FrozenModel {
        &self.pretrained.model
    }

    /// Prompt tuning from the pretrained prompt on the source tuning pool.
    pub fn tune(&self, sapt_on: bool) -> Result<TuneResult> {
        tune(self.model(), &self.pretrained.prompt, &self.train, &self.cfg.sapt, sapt_on)
            .map_err(|e| e.in_stage("tune"))
    }

    /// Adapts every domain with the given prompt and selection settings.
    pub fn evaluate(&self, prompt: &PromptParams, stss: &StssConfig, stss_on: bool) -> Result<Vec<DomainEval>> {
        self.domains
            .iter()
            .map(|(name, ds)| evaluate_domain(self.model(), prompt, name, ds, &self.cfg.aug, stss, stss_on))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| e.in_stage("adapt"))
    }

    /// Distance proxy of every domain against the source reference draw.
    pub fn proxies(&self) -> Result<Vec<f64>> {
        let seed = split_seed_str(self.cfg.run_seed(), "proxy");
        self.domains
            .par_iter()
            .map(|(name, ds)| domain_distance_proxy(&self.reference, ds, split_seed_str(seed, name)))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| e.in_stage("proxy"))
    }
}

/// Outcome of adapting one domain.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainEval {
    pub name: String,
    pub accuracy: f64,
    pub results: Vec<SampleResult>,
    /// Scores and entropies of the unaugmented inputs.
    pub original_scores: Vec<f64>,
    pub original_entropies: Vec<f64>,
}

impl DomainEval {
    pub fn records_jsonl(&self) -> String {
        self.results.iter().map(|r| r.record().to_string() + "\n").collect()
    }
}

fn domain_configs(aug: &AugConfig, stss: &StssConfig, name: &str) -> (AugConfig, StssConfig) {
    (
        AugConfig { seed: split_seed_str(aug.seed, name), ..*aug },
        StssConfig { seed: split_seed_str(stss.seed, name), ..*stss },
    )
}

/// With `stss_on`, full view selection; otherwise the argmax on the
/// unaugmented input, which is also scored for the domain statistics.
pub fn evaluate_domain(
    model: &FrozenModel,
    prompt: &PromptParams,
    name: &str,
    ds: &DomainDataset,
    aug: &AugConfig,
    stss: &StssConfig,
    stss_on: bool,
) -> Result<DomainEval> {
    let (aug, stss) = domain_configs(aug, stss, name);
    let batch = ds.to_batch()?;
    let results = if stss_on {
        adapt_dataset_par(model, prompt, &batch, &aug, &stss)?.results
    } else {
        stss.validate()?;
        (0..batch.len())
            .into_par_iter()
            .map(|i| {
                let (_, s) = sample_configs(&aug, &stss, i);
                let rep = sharpness_score(model, prompt, batch.input(i), 0, &s)?;
                Ok(SampleResult {
                    sample_id: i,
                    true_label: batch.labels[i],
                    selection: select_from_reports(vec![rep], 1, model.k_classes())?,
                })
            })
            .collect::<Result<Vec<_>>>()?
    };
    Ok(domain_eval(name.to_string(), results))
}

fn domain_eval(name: String, results: Vec<SampleResult>) -> DomainEval {
    let hits = results.iter().filter(|r| r.selection.final_prediction == r.true_label).count();
    let original = |f: fn(&SharpnessReport) -> f64| -> Vec<f64> {
        results.iter().map(|r| f(&r.selection.reports[0])).collect()
    };
    DomainEval {
        name,
        accuracy: hits as f64 / results.len() as f64,
        original_scores: original(|r| r.score),
        original_entropies: original(|r| r.base_entropy),
        results,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainMetrics {
    pub name: String,
    pub accuracy: f64,
    pub mean_score: f64,
    pub median_score: f64,
    pub mean_base_entropy: f64,
    /// Distance proxy against a held-out source draw.
    pub distance_proxy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub seed: u64,
    pub config_digest: String,
    pub config: RunConfig,
    pub methods: Methods,
    pub domains: Vec<DomainMetrics>,
    /// Mean accuracy over the target domains.
    pub shifted_accuracy: f64,
    /// Summed cross-entropy on the tuning shots after tuning.
    pub final_train_loss: f64,
    pub timings: Timings,
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// The report with wall-clock fields zeroed, for determinism checks.
    pub fn without_timings(&self) -> Self {
        Self { timings: Timings::default(), ..self.clone() }
    }
}

fn round_metric(x: f64) -> f64 {
    round9(x)
}

fn domain_metrics(eval: &DomainEval, proxy: f64) -> DomainMetrics {
    DomainMetrics {
        name: eval.name.clone(),
        accuracy: eval.accuracy,
        mean_score: round_metric(stats::mean(&eval.original_scores)),
        median_score: round_metric(stats::median(&eval.original_scores)),
        mean_base_entropy: round_metric(stats::mean(&eval.original_entropies)),
        distance_proxy: proxy,
    }
}

/// Mean target accuracy, skipping the source domain.
pub fn shifted_accuracy(evals: &[DomainEval]) -> f64 {
    let targets: Vec<f64> = evals.iter().filter(|e| e.name != SOURCE_DOMAIN).map(|e| e.accuracy).collect();
    if targets.is_empty() {
        f64::NAN
    } else {
        stats::mean(&targets)
    }
}

/// Everything a full run produces.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub report: MetricsReport,
    pub evals: Vec<DomainEval>,
    pub tuned: TuneResult,
}

/// Pretrain (or load), tune, adapt every domain and assemble the report.
pub fn run(cfg: &RunConfig) -> Result<RunArtifacts> {
    let mut session = Session::prepare(cfg)?;
    let cfg = session.cfg.clone();
    let t = Instant::now();
    let tuned = session.tune(cfg.methods.sapt_on)?;
    session.timings.tune_ms = ms_since(t);
    let t = Instant::now();
    let evals = session.evaluate(&tuned.prompt, &cfg.stss, cfg.methods.stss_on)?;
    session.timings.adapt_ms = ms_since(t);
    let t = Instant::now();
    let proxies = session.proxies()?;
    session.timings.proxy_ms = ms_since(t);
    let final_train_loss = tuned.log.last().map_or_else(
        || crate::clipette::ce_loss(session.model(), &tuned.prompt, &session.train),
        |r| Ok(r.ce_loss),
    )?;
    let report = MetricsReport {
        seed: cfg.run_seed(),
        config_digest: cfg.digest()?,
        methods: cfg.methods,
        domains: evals.iter().zip(&proxies).map(|(e, &p)| domain_metrics(e, p)).collect(),
        shifted_accuracy: shifted_accuracy(&evals),
        final_train_loss: round_metric(final_train_loss),
        timings: session.timings,
        config: cfg,
    };
    Ok(RunArtifacts { report, evals, tuned })
}

/// Writes files into `dir`; on failure removes the ones already written.
pub fn write_outputs(dir: &Path, files: &[(String, Vec<u8>)]) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e).in_stage("write"))?;
    let mut written = Vec::new();
    for (name, bytes) in files {
        let path = dir.join(name);
        if let Err(e) = write_atomic(&path, bytes) {
            for p in &written {
                let _ = std::fs::remove_file(p);
            }
            return Err(e.in_stage("write"));
        }
        written.push(path);
    }
    Ok(written)
}

impl RunArtifacts {
    /// `metrics.json`, `config.resolved.json`, `train_log.jsonl` and one
    /// `samples_<domain>.jsonl` per domain.
    pub fn files(&self) -> Result<Vec<(String, Vec<u8>)>> {
        let mut files = vec![
            ("metrics.json".to_string(), self.report.to_json()?.into_bytes()),
            (
                "config.resolved.json".to_string(),
                (serde_json::to_string_pretty(&self.report.config)? + "\n").into_bytes(),
            ),
            ("train_log.jsonl".to_string(), self.tuned.log_jsonl()?.into_bytes()),
        ];
        for e in &self.evals {
            files.push((format!("samples_{}.jsonl", e.name), e.records_jsonl().into_bytes()));
        }
        Ok(files)
    }
}

/// One cell of the method ablation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub methods: Methods,
    pub shifted_accuracy: f64,
    pub accuracies: Vec<(String, f64)>,
    /// Sharpness estimate of the tuned prompt on the tuning shots.
    pub train_sharpness: f64,
}

/// Runs all four `{sapt, stss}` combinations, sharing data and pretraining.
pub fn ablation(cfg: &RunConfig) -> Result<Vec<AblationCell>> {
    let session = Session::prepare(cfg)?;
    let cfg = &session.cfg;
    let mut cells = Vec::new();
    for sapt_on in [false, true] {
        let tuned = session.tune(sapt_on)?;
        let sharp = sharpness_oracle(
            session.model(),
            &tuned.prompt,
            &session.train,
            cfg.sapt.rho,
            cfg.sapt.log_oracle_dirs,
            cfg.sapt.log_oracle_grid,
            split_seed_str(cfg.sapt.seed, "oracle"),
        )?;
        for stss_on in [false, true] {
            let evals = session.evaluate(&tuned.prompt, &cfg.stss, stss_on)?;
            cells.push(AblationCell {
                methods: Methods { sapt_on, stss_on },
                shifted_accuracy: shifted_accuracy(&evals),
                accuracies: evals.iter().map(|e| (e.name.clone(), e.accuracy)).collect(),
                train_sharpness: sharp,
            });
        }
    }
    Ok(cells)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub param_value: f64,
    pub domain: String,
    pub accuracy: f64,
    pub mean_score: f64,
}

/// Re-runs adaptation for each value of one selection parameter, sharing
/// the tuned prompt.
///
/// `top_r` and `lambda` leave the perturbed entropies unchanged, so their
/// sweeps score every view once and only redo the selection; the rows equal
/// those of full runs with each value.
pub fn sweep_with_prompt(session: &Session, prompt: &PromptParams, param: SweepParam, values: &[f64]) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::InvalidConfig("sweep needs at least one value".into()));
    }
    let cfg = &session.cfg;
    let configs = values
        .iter()
        .map(|&v| {
            let stss = param.apply(&cfg.stss, v)?;
            if stss.top_r > cfg.aug.pool_size() {
                return Err(Error::InvalidConfig(format!(
                    "top_r {} exceeds pool size {}",
                    stss.top_r,
                    cfg.aug.pool_size()
                )));
            }
            Ok((v, stss))
        })
        .collect::<Result<Vec<_>>>()?;
    let shared = match param {
        SweepParam::TopR | SweepParam::Lambda => {
            let base = StssConfig { top_r: 1, ..cfg.stss };
            Some(session.evaluate(prompt, &base, cfg.methods.stss_on)?)
        }
        SweepParam::RhoPrime | SweepParam::MPerturb => None,
    };
    let mut rows = Vec::new();
    for (v, stss) in configs {
        let evals = match &shared {
            Some(base) => base
                .iter()
                .map(|e| reselect(e, &stss, cfg.methods.stss_on, session.model().k_classes()))
                .collect::<Result<Vec<_>>>()?,
            None => session.evaluate(prompt, &stss, cfg.methods.stss_on)?,
        };
        for e in evals {
            rows.push(SweepRow {
                param_value: v,
                accuracy: e.accuracy,
                mean_score: round_metric(stats::mean(&e.original_scores)),
                domain: e.name,
            });
        }
    }
    Ok(rows)
}

/// Recomputes scores with `stss.lambda` and selects `stss.top_r` views again.
fn reselect(eval: &DomainEval, stss: &StssConfig, stss_on: bool, k_classes: usize) -> Result<DomainEval> {
    let results = eval
        .results
        .iter()
        .map(|r| {
            let reports = r
                .selection
                .reports
                .iter()
                .map(|rep| SharpnessReport { score: rep.base_entropy + stss.lambda * rep.sharpness, ..rep.clone() })
                .collect();
            let top_r = if stss_on { stss.top_r } else { 1 };
            Ok(SampleResult { selection: select_from_reports(reports, top_r, k_classes)?, ..r.clone() })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(domain_eval(eval.name.clone(), results))
}

/// Sweep over `cfg.sweep`.
pub fn sweep(cfg: &RunConfig) -> Result<Vec<SweepRow>> {
    let session = Session::prepare(cfg)?;
    let tuned = session.tune(session.cfg.methods.sapt_on)?;
    let s = &session.cfg.sweep;
    sweep_with_prompt(&session, &tuned.prompt, s.param, &s.values)
}

/// `param_value,domain,accuracy,mean_score`.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("param_value,domain,accuracy,mean_score\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.param_value, r.domain, r.accuracy, r.mean_score));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSummary {
    pub n: usize,
    pub distance_proxy: f64,
    pub mean_score: f64,
    pub median_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparabilityReport {
    pub near: ScoreSummary,
    pub far: ScoreSummary,
    pub rank_sum: stats::MannWhitney,
    /// Largest gap between the empirical score distributions.
    pub cdf_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftSweep {
    pub levels: Vec<f64>,
    pub distance_proxies: Vec<f64>,
    pub median_scores: Vec<f64>,
    pub mean_scores: Vec<f64>,
    /// Spearman correlation between level and median score.
    pub spearman: f64,
}

/// Scores of the unaugmented inputs of a freshly drawn shifted domain.
fn original_scores(session: &Session, prompt: &PromptParams, label: &str, spec: &DomainSpec) -> Result<(DomainDataset, Vec<f64>)> {
    let ds = gen_domain(spec)?;
    let stss = StssConfig { seed: split_seed_str(session.cfg.stss.seed, label), ..session.cfg.stss };
    stss.validate()?;
    let model = session.model();
    let scores = (0..ds.len())
        .into_par_iter()
        .map(|i| {
            let s = StssConfig { seed: split_seed(stss.seed, i as u64), ..stss };
            Ok(sharpness_score(model, prompt, ds.inputs.row(i), 0, &s)?.score)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok((ds, scores))
}

fn domain_for(session: &Session, shift: &Shift, n: usize, draw: u64) -> DomainSpec {
    let per_class = n.div_ceil(session.cfg.data.source.k_classes);
    sized(session.cfg.shifted(shift), per_class, draw)
}

fn proxy_to_reference(session: &Session, ds: &DomainDataset, label: &str) -> Result<f64> {
    domain_distance_proxy(&session.reference, ds, split_seed_str(split_seed_str(session.cfg.run_seed(), "proxy"), label))
}

/// Compares score distributions of a near and a far shift under `prompt`.
///
/// Each domain has `ceil(n / K)` samples per class. Fails with
/// `PreconditionFailed` unless the near domain is closer to the source by
/// the distance proxy.
pub fn separability_with_prompt(
    session: &Session,
    prompt: &PromptParams,
    near: &Shift,
    far: &Shift,
    n: usize,
) -> Result<SeparabilityReport> {
    let near_spec = domain_for(session, near, n, NEAR_DRAW);
    let far_spec = domain_for(session, far, n, FAR_DRAW);
    let (near_ds, near_scores) = original_scores(session, prompt, "near", &near_spec)?;
    let (far_ds, far_scores) = original_scores(session, prompt, "far", &far_spec)?;
    let near_proxy = proxy_to_reference(session, &near_ds, "near")?;
    let far_proxy = proxy_to_reference(session, &far_ds, "far")?;
    if !(near_proxy < far_proxy) {
        return Err(Error::PreconditionFailed(format!(
            "near domain proxy {near_proxy} is not below far domain proxy {far_proxy}"
        )));
    }
    let summary = |scores: &[f64], proxy: f64| ScoreSummary {
        n: scores.len(),
        distance_proxy: proxy,
        mean_score: stats::mean(scores),
        median_score: stats::median(scores),
    };
    Ok(SeparabilityReport {
        near: summary(&near_scores, near_proxy),
        far: summary(&far_scores, far_proxy),
        rank_sum: stats::mann_whitney(&near_scores, &far_scores),
        cdf_gap: stats::cdf_gap(&near_scores, &far_scores),
    })
}

/// Median original-input score across rotation levels.
pub fn shift_sweep_with_prompt(session: &Session, prompt: &PromptParams, levels: &[f64], n: usize) -> Result<ShiftSweep> {
    let mut out = ShiftSweep { levels: levels.to_vec(), distance_proxies: vec![], median_scores: vec![], mean_scores: vec![], spearman: f64::NAN };
    let noise = session.cfg.separability.near.noise_sigma;
    for (i, &level) in levels.iter().enumerate() {
        let label = format!("level{i}");
        let spec = domain_for(session, &Shift::rotation(level, noise), n, LEVEL_DRAW + i as u64);
        let (ds, scores) = original_scores(session, prompt, &label, &spec)?;
        out.distance_proxies.push(proxy_to_reference(session, &ds, &label)?);
        out.median_scores.push(stats::median(&scores));
        out.mean_scores.push(stats::mean(&scores));
    }
    out.spearman = stats::spearman(levels, &out.median_scores);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparabilityOutput {
    pub seed: u64,
    pub config_digest: String,
    pub check: SeparabilityReport,
    pub shift_sweep: ShiftSweep,
}

/// Separability check and shift sweep from `cfg.separability`.
pub fn separability(cfg: &RunConfig) -> Result<SeparabilityOutput> {
    let session = Session::prepare(cfg)?;
    let tuned = session.tune(session.cfg.methods.sapt_on)?;
    let s = &session.cfg.separability;
    let check = separability_with_prompt(&session, &tuned.prompt, &s.near, &s.far, s.n).map_err(|e| e.in_stage("separability"))?;
    let shift_sweep = shift_sweep_with_prompt(&session, &tuned.prompt, &s.levels, s.n).map_err(|e| e.in_stage("separability"))?;
    Ok(SeparabilityOutput { seed: session.cfg.run_seed(), config_digest: session.cfg.digest()?, check, shift_sweep })
}

/// Loss surface around the tuned prompt, with its conventional file name.
pub fn landscape(cfg: &RunConfig) -> Result<(String, LandscapeGrid)> {
    let session = Session::prepare(cfg)?;
    let cfg = &session.cfg;
    let tuned = session.tune(cfg.methods.sapt_on)?;
    let l = &cfg.landscape;
    let batch = if l.domain == TRAIN_DOMAIN {
        session.train.clone()
    } else {
        let (_, ds) = session
            .domains
            .iter()
            .find(|(n, _)| n == &l.domain)
            .ok_or_else(|| Error::InvalidConfig(format!("landscape.domain {:?} is not a known domain", l.domain)))?;
        ds.to_batch()?
    };
    let seed = cfg.run_seed();
    let grid = (|| {
        let (d1, d2) = sample_directions(&tuned.prompt, split_seed_str(seed, "landscape"))?;
        loss_grid(session.model(), &tuned.prompt, LandscapeData::Batch(&batch), &d1, &d2, l.resolution, l.span, l.loss_kind)
    })()
    .map_err(|e| e.in_stage("landscape"))?;
    Ok((grid_file_name(&l.tag, seed), grid))
}

/// Checkpoint holding the pretrained model, or with the tuned prompt swapped in.
pub fn checkpoint_of(session: &Session, prompt: Option<&PromptParams>) -> Checkpoint {
    let mut pretrained = session.pretrained.clone();
    if let Some(p) = prompt {
        pretrained.prompt = p.clone();
    }
    Checkpoint { seed: session.cfg.pretrain.seed, pretrained }
}
