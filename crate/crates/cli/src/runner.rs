//! The `run` pipeline: training data, the cached HMC reference, every
//! method at every M and repeat, and the report files.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use uqbench::data::{fmt_f64, gen_toy_classification, gen_toy_regression, Dataset};
use uqbench::metrics::{aggregate_repeats, mean_kl_to_reference, EvaluationGrid, RepeatStats};
use uqbench::models::ModelFamily;
use uqbench::predictive::{read_predictive_csv, write_predictive_csv, PredictiveAccumulator, PredictiveValues};
use uqbench::rng::{derive_seed, label, rng_from_seed};
use uqbench::samplers::{
    extraction_schedule, hmc_posterior, member_seed, sg_mcmc_posterior, train_member, InferenceMethod, SgMcmcKind,
};
use uqbench::{ForwardMode, ParamVector};

use crate::config::{
    CurveOutput, EnsemblingMethod, ExperimentConfig, McDropoutMethod, MethodConfig, SgMcmcMethod, TaskKind,
};
use crate::ensemble::{ensemble_subset_aggregation, partition_pool};
use crate::error::CliError;

/// Grid points per parallel work item.
pub const CHUNK: usize = 1024;

pub const REGRESSION_X_RANGE: (f64, f64) = (-3.0, 3.0);

pub const REPORT_HEADER: [&str; 7] = ["task", "method", "M", "metric", "mean", "std", "repeats"];
pub const RUNS_HEADER: [&str; 6] = ["task", "method", "M", "repeat", "seed", "kl"];

pub fn dataset_seed(master: u64) -> u64 {
    derive_seed(master, &[label("dataset")])
}

pub fn reference_seed(master: u64) -> u64 {
    derive_seed(master, &[label("reference")])
}

/// Seed of one MC-dropout or SG-MCMC repeat.
pub fn run_seed(master: u64, method: InferenceMethod, repeat: usize) -> u64 {
    derive_seed(master, &[label(method.as_str()), repeat as u64])
}

/// Seed under which the ensemble pool members are trained.
pub fn pool_seed(master: u64) -> u64 {
    derive_seed(master, &[label(InferenceMethod::Ensembling.as_str())])
}

/// Seed of the pool partition used at ensemble size `m`.
pub fn partition_seed(master: u64, m: usize) -> u64 {
    derive_seed(pool_seed(master), &[label("partition"), m as u64])
}

fn lib_err(context: impl std::fmt::Display) -> impl FnOnce(uqbench::Error) -> CliError {
    move |e| CliError::runtime(context, e)
}

/// One (method, M, repeat) evaluation.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunRecord {
    pub task: String,
    pub method: String,
    #[serde(rename = "M")]
    pub m: usize,
    pub repeat: usize,
    pub seed: u64,
    pub kl: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub members: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub member_seeds: Option<Vec<u64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoints: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub curve: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReportRow {
    pub task: String,
    pub method: String,
    pub m: usize,
    pub metric: String,
    pub stats: RepeatStats,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReferenceInfo {
    pub cache_key: String,
    pub path: String,
    pub map_init_seed: u64,
    pub hmc_seed: u64,
    pub num_samples: usize,
    pub acceptance_rate: f64,
    pub divergences: usize,
    pub final_step_size: f64,
    #[serde(default)]
    pub cached: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct DatasetInfo {
    pub generator: String,
    pub seed: u64,
    pub len: usize,
    pub path: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub tool_version: &'static str,
    pub config: ExperimentConfig,
    pub grid_resolution: usize,
    pub train_size: usize,
    pub dataset: DatasetInfo,
    pub reference: ReferenceInfo,
    pub runs: Vec<RunRecord>,
    pub artifacts: Vec<String>,
    /// Wall-clock seconds per phase.
    pub timings: BTreeMap<String, f64>,
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub records: Vec<RunRecord>,
    pub report: Vec<ReportRow>,
    pub manifest: RunManifest,
}

impl RunSummary {
    /// Report statistics of one (method, M) cell.
    pub fn stats(&self, method: InferenceMethod, m: usize) -> Option<&RepeatStats> {
        self.report
            .iter()
            .find(|r| r.method == method.as_str() && r.m == m)
            .map(|r| &r.stats)
    }
}

fn concat(parts: Vec<PredictiveValues>) -> Result<PredictiveValues, CliError> {
    let mut iter = parts.into_iter();
    let Some(mut out) = iter.next() else {
        return Err(CliError::Runtime("no grid points to evaluate".into()));
    };
    for part in iter {
        match (&mut out, part) {
            (PredictiveValues::Gaussian(a), PredictiveValues::Gaussian(b)) => a.extend(b),
            (PredictiveValues::Categorical(a), PredictiveValues::Categorical(b)) => a.extend(b),
            _ => return Err(CliError::Runtime("mixed predictive head types".into())),
        }
    }
    Ok(out)
}

/// Predictive distribution of the uniform mixture over `samples` at every
/// row of `xs`, evaluated in fixed-size chunks.
pub fn predictive_on_grid(family: &ModelFamily, samples: &[&[f64]], xs: &[f64]) -> Result<PredictiveValues, CliError> {
    let dim = family.input_dim();
    let parts = xs
        .par_chunks(CHUNK * dim)
        .map(|chunk| {
            let mut acc = PredictiveAccumulator::new(chunk.len() / dim);
            for s in samples {
                acc.add(&family.predict_batch(s, chunk, ForwardMode::Deterministic)?)?;
            }
            acc.finish()
        })
        .collect::<uqbench::Result<Vec<_>>>()
        .map_err(lib_err("grid prediction"))?;
    concat(parts)
}

/// MC-dropout predictives after the first `m` passes for each `m` in
/// `m_values` (ascending). Grid chunk `c` draws its masks from
/// `derive_seed(seed, [c])`, so a prefix of passes is reproducible on its own.
pub fn mc_dropout_on_grid(
    family: &ModelFamily,
    params: &[f64],
    xs: &[f64],
    m_values: &[usize],
    seed: u64,
) -> Result<Vec<PredictiveValues>, CliError> {
    let dim = family.input_dim();
    let max_m = m_values.last().copied().unwrap_or(0);
    let parts = xs
        .par_chunks(CHUNK * dim)
        .enumerate()
        .map(|(c, chunk)| {
            let mut rng = rng_from_seed(derive_seed(seed, &[c as u64]));
            let mut acc = PredictiveAccumulator::new(chunk.len() / dim);
            let mut snapshots = Vec::with_capacity(m_values.len());
            for pass in 1..=max_m {
                acc.add(&family.predict_batch(params, chunk, ForwardMode::McDropout(&mut rng))?)?;
                if m_values.contains(&pass) {
                    snapshots.push(acc.finish()?);
                }
            }
            Ok(snapshots)
        })
        .collect::<uqbench::Result<Vec<_>>>()
        .map_err(lib_err("MC-dropout grid prediction"))?;
    let mut per_m: Vec<Vec<PredictiveValues>> = (0..m_values.len()).map(|_| Vec::new()).collect();
    for chunk in parts {
        for (slot, values) in per_m.iter_mut().zip(chunk) {
            slot.push(values);
        }
    }
    per_m.into_iter().map(concat).collect()
}

#[derive(Serialize)]
struct ReferenceKey<'a> {
    format: u32,
    task: TaskKind,
    seed: u64,
    train_size: usize,
    hidden: &'a [usize],
    activation: uqbench::Activation,
    grid_resolution: usize,
    reference: &'a crate::config::ReferenceConfig,
}

/// Datasets, grid and reference predictive for one config; runs any method
/// against them.
pub struct Experiment {
    config: ExperimentConfig,
    out_dir: PathBuf,
    dataset: Dataset,
    dataset_info: DatasetInfo,
    grid_xs: Vec<f64>,
    input_dim: usize,
    reference: PredictiveValues,
    reference_info: ReferenceInfo,
    timings: BTreeMap<String, f64>,
}

impl Experiment {
    /// Generate the training data and load or compute the HMC reference,
    /// caching it in `out_dir`.
    pub fn prepare(config: &ExperimentConfig, out_dir: &Path) -> Result<Self, CliError> {
        config.validate()?;
        fs::create_dir_all(out_dir)
            .map_err(|e| CliError::runtime(format!("cannot create {}", out_dir.display()), e))?;
        let mut timings = BTreeMap::new();
        let clock = Instant::now();
        let seed = dataset_seed(config.seed);
        let dataset = match config.task {
            TaskKind::ToyRegression => gen_toy_regression(config.train_size(), seed, REGRESSION_X_RANGE),
            TaskKind::ToyClassification => gen_toy_classification(config.train_size(), seed),
        }
        .map_err(lib_err("dataset generation"))?;
        let dataset_path = out_dir.join("dataset.csv");
        dataset.save_csv(&dataset_path).map_err(lib_err("writing dataset.csv"))?;
        let dataset_info = DatasetInfo {
            generator: dataset.generator().to_string(),
            seed,
            len: dataset.len(),
            path: "dataset.csv".into(),
        };
        timings.insert("dataset".into(), clock.elapsed().as_secs_f64());

        let grid = match config.task {
            TaskKind::ToyRegression => EvaluationGrid::regression(config.grid_resolution()),
            TaskKind::ToyClassification => EvaluationGrid::classification(config.grid_resolution()),
        }
        .map_err(|e| CliError::Validation(e.to_string()))?;
        let grid_xs = grid.points();

        let clock = Instant::now();
        let (reference, reference_info) = reference_predictive(config, &dataset, &grid_xs, out_dir)?;
        timings.insert("reference".into(), clock.elapsed().as_secs_f64());

        Ok(Self {
            config: config.clone(),
            out_dir: out_dir.to_path_buf(),
            dataset,
            dataset_info,
            grid_xs,
            input_dim: grid.input_dim(),
            reference,
            reference_info,
            timings,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn dataset(&self) -> &Dataset {
        &self.dataset
    }

    pub fn grid_inputs(&self) -> &[f64] {
        &self.grid_xs
    }

    pub fn reference(&self) -> &PredictiveValues {
        &self.reference
    }

    pub fn reference_info(&self) -> &ReferenceInfo {
        &self.reference_info
    }

    fn kl(&self, candidate: &PredictiveValues) -> Result<f64, CliError> {
        mean_kl_to_reference(candidate, &self.reference).map_err(lib_err("KL to reference"))
    }

    fn wants_curve(&self, repeat: usize) -> bool {
        match self.config.curves {
            CurveOutput::None => false,
            CurveOutput::First => repeat == 0,
            CurveOutput::All => true,
        }
    }

    fn write_curve(&self, name: String, values: &PredictiveValues) -> Result<String, CliError> {
        let rel = format!("curves/{name}.csv");
        let path = self.out_dir.join(&rel);
        let file = File::create(&path).map_err(|e| CliError::runtime(format!("cannot create {}", path.display()), e))?;
        write_predictive_csv(BufWriter::new(file), &self.grid_xs, self.input_dim, values)
            .map_err(lib_err(format!("writing {rel}")))?;
        Ok(rel)
    }

    fn record(
        &self,
        method: InferenceMethod,
        m: usize,
        repeat: usize,
        seed: u64,
        values: &PredictiveValues,
    ) -> Result<RunRecord, CliError> {
        let kl = self.kl(values)?;
        let curve = if self.wants_curve(repeat) {
            Some(self.write_curve(format!("{}-m{m}-r{repeat}", method.as_str()), values)?)
        } else {
            None
        };
        Ok(RunRecord {
            task: self.config.task.as_str().into(),
            method: method.as_str().into(),
            m,
            repeat,
            seed,
            kl,
            members: None,
            member_seeds: None,
            checkpoints: None,
            curve,
        })
    }

    /// Run every configured method and write `runs.csv`, `report.csv`,
    /// `manifest.json` and the curve files.
    pub fn run(mut self) -> Result<RunSummary, CliError> {
        fs::create_dir_all(self.out_dir.join("curves"))?;
        let mut records = Vec::new();
        for method in self.config.methods.clone() {
            let clock = Instant::now();
            info!("running {}", method.name());
            let mut runs = match &method {
                MethodConfig::Ensembling(e) => self.run_ensembling(e)?,
                MethodConfig::McDropout(d) => self.run_mc_dropout(d)?,
                MethodConfig::Sgld(s) => self.run_sg_mcmc(SgMcmcKind::Sgld, s)?,
                MethodConfig::Sghmc(s) => self.run_sg_mcmc(SgMcmcKind::Sghmc, s)?,
            };
            runs.sort_by_key(|r| (r.m, r.repeat));
            self.timings
                .insert(format!("method.{}", method.name()), clock.elapsed().as_secs_f64());
            records.extend(runs);
        }
        let report = build_report(&self.config, &records)?;
        write_runs_csv(&self.out_dir.join("runs.csv"), &records)?;
        write_report_csv(&self.out_dir.join("report.csv"), &report)?;

        let mut artifacts = vec![
            "dataset.csv".to_string(),
            self.reference_info.path.clone(),
            reference_meta_path(&self.reference_info.path),
            "runs.csv".into(),
            "report.csv".into(),
            "manifest.json".into(),
        ];
        artifacts.extend(records.iter().filter_map(|r| r.curve.clone()));
        let manifest = RunManifest {
            schema_version: crate::config::SCHEMA_VERSION,
            tool_version: env!("CARGO_PKG_VERSION"),
            config: self.config.clone(),
            grid_resolution: self.config.grid_resolution(),
            train_size: self.config.train_size(),
            dataset: self.dataset_info.clone(),
            reference: self.reference_info.clone(),
            runs: records.clone(),
            artifacts,
            timings: self.timings.clone(),
        };
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(self.out_dir.join("manifest.json"), text + "\n")?;
        Ok(RunSummary {
            out_dir: self.out_dir,
            records,
            report,
            manifest,
        })
    }

    fn run_ensembling(&self, e: &EnsemblingMethod) -> Result<Vec<RunRecord>, CliError> {
        let family = self.config.family(None)?;
        let pool = pool_seed(self.config.seed);
        info!("training {} ensemble members", e.pool_size);
        let members = (0..e.pool_size)
            .into_par_iter()
            .map(|k| {
                let seed = member_seed(pool, k);
                train_member(&family, &self.dataset, &e.train, seed)
                    .map_err(lib_err(format!("ensemble member {k} (seed {seed})")))
            })
            .collect::<Result<Vec<ParamVector>, _>>()?;
        let mut records = Vec::new();
        for &m in &self.config.m_values {
            let seed = partition_seed(self.config.seed, m);
            let runs = std::sync::Mutex::new(Vec::new());
            let (draw, _) = ensemble_subset_aggregation(e.pool_size, m, None, seed, |r, set| {
                let samples: Vec<&[f64]> = set.iter().map(|&i| &members[i][..]).collect();
                let values = predictive_on_grid(&family, &samples, &self.grid_xs)?;
                let rec = self.record(InferenceMethod::Ensembling, m, r, seed, &values)?;
                let kl = rec.kl;
                runs.lock().expect("run list lock").push(rec);
                Ok(kl)
            })?;
            for mut rec in runs.into_inner().expect("run list lock") {
                let set = &draw.sets[rec.repeat];
                rec.member_seeds = Some(set.iter().map(|&i| member_seed(pool, i)).collect());
                rec.members = Some(set.clone());
                records.push(rec);
            }
        }
        Ok(records)
    }

    fn run_mc_dropout(&self, d: &McDropoutMethod) -> Result<Vec<RunRecord>, CliError> {
        let family = self.config.family(Some(self.config.dropout_p(d)))?;
        let m_values = &self.config.m_values;
        let per_repeat = (0..d.repeats)
            .into_par_iter()
            .map(|r| {
                let seed = run_seed(self.config.seed, InferenceMethod::McDropout, r);
                let params = train_member(&family, &self.dataset, &d.train, seed)
                    .map_err(lib_err(format!("mc-dropout repeat {r} (seed {seed})")))?;
                let curves = mc_dropout_on_grid(&family, &params, &self.grid_xs, m_values, passes_seed(seed))?;
                m_values
                    .iter()
                    .zip(&curves)
                    .map(|(&m, values)| self.record(InferenceMethod::McDropout, m, r, seed, values))
                    .collect::<Result<Vec<_>, _>>()
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(per_repeat.into_iter().flatten().collect())
    }

    fn run_sg_mcmc(&self, kind: SgMcmcKind, s: &SgMcmcMethod) -> Result<Vec<RunRecord>, CliError> {
        let method = sg_method(kind);
        let family = self.config.family(None)?;
        let m_values = &self.config.m_values;
        let max_m = *m_values.last().expect("validated non-empty");
        let cfg = self.config.sg_mcmc_config(method, s, max_m);
        let schedules = m_values
            .iter()
            .map(|&m| extraction_schedule(cfg.total_steps, m))
            .collect::<uqbench::Result<Vec<_>>>()
            .map_err(|e| CliError::Validation(e.to_string()))?;
        let mut union: Vec<usize> = schedules.iter().flatten().copied().collect();
        union.sort_unstable();
        union.dedup();
        info!("{}: {} steps per trajectory, {} repeats", method.as_str(), cfg.total_steps, s.repeats);
        let per_repeat = (0..s.repeats)
            .into_par_iter()
            .map(|r| {
                let seed = run_seed(self.config.seed, method, r);
                let thetas = sg_mcmc_posterior(kind, &family, &self.dataset, &cfg, &union, seed)
                    .map_err(lib_err(format!("{} repeat {r} (seed {seed})", method.as_str())))?;
                m_values
                    .iter()
                    .zip(&schedules)
                    .map(|(&m, schedule)| {
                        let samples: Vec<&[f64]> = schedule
                            .iter()
                            .map(|t| &thetas[union.binary_search(t).expect("checkpoint in union")][..])
                            .collect();
                        let values = predictive_on_grid(&family, &samples, &self.grid_xs)?;
                        let mut rec = self.record(method, m, r, seed, &values)?;
                        rec.checkpoints = Some(schedule.clone());
                        Ok(rec)
                    })
                    .collect::<Result<Vec<_>, CliError>>()
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(per_repeat.into_iter().flatten().collect())
    }

    /// Recompute the KL of one run from its seed alone, without the rest of
    /// the repeats or ensemble sizes.
    pub fn reproduce(&self, method: InferenceMethod, m: usize, repeat: usize) -> Result<f64, CliError> {
        let cfg = self
            .config
            .methods
            .iter()
            .find(|c| c.kind() == method)
            .ok_or_else(|| CliError::Validation(format!("method `{method}` is not configured")))?;
        let values = match cfg {
            MethodConfig::Ensembling(e) => {
                let family = self.config.family(None)?;
                let draw = partition_pool(e.pool_size, m, None, partition_seed(self.config.seed, m))?;
                let set = draw
                    .sets
                    .get(repeat)
                    .ok_or_else(|| CliError::Validation(format!("no ensemble subset {repeat} at M = {m}")))?;
                let pool = pool_seed(self.config.seed);
                let members = set
                    .iter()
                    .map(|&k| train_member(&family, &self.dataset, &e.train, member_seed(pool, k)))
                    .collect::<uqbench::Result<Vec<_>>>()
                    .map_err(lib_err("ensemble member"))?;
                let samples: Vec<&[f64]> = members.iter().map(|p| &p[..]).collect();
                predictive_on_grid(&family, &samples, &self.grid_xs)?
            }
            MethodConfig::McDropout(d) => {
                let family = self.config.family(Some(self.config.dropout_p(d)))?;
                let seed = run_seed(self.config.seed, method, repeat);
                let params = train_member(&family, &self.dataset, &d.train, seed).map_err(lib_err("mc-dropout"))?;
                mc_dropout_on_grid(&family, &params, &self.grid_xs, &[m], passes_seed(seed))?
                    .pop()
                    .expect("one snapshot")
            }
            MethodConfig::Sgld(s) | MethodConfig::Sghmc(s) => {
                let kind = match method {
                    InferenceMethod::Sghmc => SgMcmcKind::Sghmc,
                    _ => SgMcmcKind::Sgld,
                };
                let family = self.config.family(None)?;
                let cfg = self.config.sg_mcmc_config(method, s, m);
                let schedule = extraction_schedule(cfg.total_steps, m).map_err(|e| CliError::Validation(e.to_string()))?;
                let seed = run_seed(self.config.seed, method, repeat);
                let thetas = sg_mcmc_posterior(kind, &family, &self.dataset, &cfg, &schedule, seed)
                    .map_err(lib_err(method.as_str()))?;
                let samples: Vec<&[f64]> = thetas.iter().map(|p| &p[..]).collect();
                predictive_on_grid(&family, &samples, &self.grid_xs)?
            }
        };
        self.kl(&values)
    }
}

fn passes_seed(run_seed: u64) -> u64 {
    derive_seed(run_seed, &[label("passes")])
}

fn sg_method(kind: SgMcmcKind) -> InferenceMethod {
    match kind {
        SgMcmcKind::Sgld => InferenceMethod::Sgld,
        SgMcmcKind::Sghmc => InferenceMethod::Sghmc,
    }
}

fn reference_meta_path(csv_path: &str) -> String {
    csv_path.trim_end_matches(".csv").to_string() + ".json"
}

/// HMC reference predictive on the grid. The chain starts from a MAP
/// estimate; the result is cached in `out_dir` under a hash of everything it
/// depends on.
fn reference_predictive(
    config: &ExperimentConfig,
    dataset: &Dataset,
    grid_xs: &[f64],
    out_dir: &Path,
) -> Result<(PredictiveValues, ReferenceInfo), CliError> {
    let key = ReferenceKey {
        format: 1,
        task: config.task,
        seed: config.seed,
        train_size: config.train_size(),
        hidden: &config.hidden,
        activation: config.activation,
        grid_resolution: config.grid_resolution(),
        reference: &config.reference,
    };
    let key_text = serde_json::to_string(&key).expect("key serializes");
    let cache_key = format!("{:016x}", label(&key_text));
    let rel = format!("reference-{}-{cache_key}.csv", config.task.as_str());
    let csv_path = out_dir.join(&rel);
    let meta_path = out_dir.join(reference_meta_path(&rel));

    if let Some(hit) = load_cached_reference(&csv_path, &meta_path, grid_xs) {
        info!("using cached reference {}", csv_path.display());
        return Ok(hit);
    }

    let family = config.family(None)?;
    let seed = reference_seed(config.seed);
    let map_init_seed = derive_seed(seed, &[0]);
    let hmc_seed = derive_seed(seed, &[1]);
    info!("training MAP initialization for the reference chain");
    let init = train_member(&family, dataset, &config.reference.map_init, map_init_seed)
        .map_err(lib_err(format!("reference MAP initialization (seed {map_init_seed})")))?;
    let hmc = &config.reference.hmc;
    info!(
        "running reference HMC: {} warmup + {} samples, {} leapfrog steps",
        hmc.warmup_steps, hmc.num_samples, hmc.leapfrog_steps
    );
    let (samples, diag) = hmc_posterior(&family, dataset, &init, hmc, hmc_seed)
        .map_err(lib_err(format!("reference HMC (seed {hmc_seed})")))?;
    let acceptance_rate = diag.acceptance_rate();
    info!(
        "reference HMC: acceptance {:.3}, {} divergences, step size {:.3e}",
        acceptance_rate, diag.divergences, diag.final_step_size
    );
    if diag.divergences > 0 {
        warn!("reference HMC had {} divergent proposals", diag.divergences);
    }
    let refs: Vec<&[f64]> = samples.samples.iter().map(|p| &p[..]).collect();
    let values = predictive_on_grid(&family, &refs, grid_xs)?;

    let info = ReferenceInfo {
        cache_key,
        path: rel,
        map_init_seed,
        hmc_seed,
        num_samples: samples.len(),
        acceptance_rate,
        divergences: diag.divergences,
        final_step_size: diag.final_step_size,
        cached: false,
    };
    let tmp = csv_path.with_extension("csv.tmp");
    let file = File::create(&tmp).map_err(|e| CliError::runtime(format!("cannot create {}", tmp.display()), e))?;
    write_predictive_csv(BufWriter::new(file), grid_xs, family.input_dim(), &values)
        .map_err(lib_err("writing reference curve"))?;
    fs::rename(&tmp, &csv_path)?;
    fs::write(&meta_path, serde_json::to_string_pretty(&info).expect("info serializes") + "\n")?;
    Ok((values, info))
}

fn load_cached_reference(csv_path: &Path, meta_path: &Path, grid_xs: &[f64]) -> Option<(PredictiveValues, ReferenceInfo)> {
    let meta = fs::read_to_string(meta_path).ok()?;
    let mut info: ReferenceInfo = serde_json::from_str(&meta).ok()?;
    let file = File::open(csv_path).ok()?;
    match read_predictive_csv(std::io::BufReader::new(file)) {
        Ok((xs, _, values)) if xs == grid_xs => {
            info.cached = true;
            Some((values, info))
        }
        Ok(_) => {
            warn!("cached reference {} does not match the grid; recomputing", csv_path.display());
            None
        }
        Err(e) => {
            warn!("cannot read cached reference {}: {e}; recomputing", csv_path.display());
            None
        }
    }
}

/// Repeat statistics of the KL for every (method, M), in config order.
pub fn build_report(config: &ExperimentConfig, records: &[RunRecord]) -> Result<Vec<ReportRow>, CliError> {
    let mut rows = Vec::new();
    for method in &config.methods {
        for &m in &config.m_values {
            let values: Vec<f64> = records
                .iter()
                .filter(|r| r.method == method.name() && r.m == m)
                .map(|r| r.kl)
                .collect();
            let stats = aggregate_repeats(&values)
                .map_err(|e| CliError::Runtime(format!("{} at M = {m}: {e}", method.name())))?;
            rows.push(ReportRow {
                task: config.task.as_str().into(),
                method: method.name().into(),
                m,
                metric: "kl".into(),
                stats,
            });
        }
    }
    Ok(rows)
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> CliError + '_ {
    move |e| CliError::runtime(format!("writing {}", path.display()), e)
}

pub fn write_runs_csv(path: &Path, records: &[RunRecord]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(RUNS_HEADER).map_err(csv_err(path))?;
    for r in records {
        w.write_record([
            r.task.clone(),
            r.method.clone(),
            r.m.to_string(),
            r.repeat.to_string(),
            r.seed.to_string(),
            fmt_f64(r.kl),
        ])
        .map_err(csv_err(path))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_report_csv(path: &Path, rows: &[ReportRow]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(REPORT_HEADER).map_err(csv_err(path))?;
    for r in rows {
        w.write_record([
            r.task.clone(),
            r.method.clone(),
            r.m.to_string(),
            r.metric.clone(),
            fmt_f64(r.stats.mean),
            fmt_f64(r.stats.std),
            r.stats.repeats.to_string(),
        ])
        .map_err(csv_err(path))?;
    }
    w.flush()?;
    Ok(())
}

/// Prepare and run a whole experiment into `out_dir`.
pub fn run_experiment(config: &ExperimentConfig, out_dir: &Path) -> Result<RunSummary, CliError> {
    Experiment::prepare(config, out_dir)?.run()
}
