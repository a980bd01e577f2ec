//! Metric-only evaluation of externally produced predictions.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use uqbench::data::{fmt_f64, PredictionFixture};
use uqbench::metrics::{auce_raw, ause, brier_and_entropy, ece, rmse, SparsificationAggregate};
use uqbench::predictive::PredictiveCategorical;

use crate::error::CliError;

pub const DEFAULT_ECE_BINS: usize = 10;
pub const DEFAULT_AUSE_STEPS: usize = 100;

#[derive(Clone, Debug, Default)]
pub struct MetricsRequest {
    pub ause: bool,
    pub auce: bool,
    pub ece: Option<usize>,
    pub rmse: bool,
    pub steps: Option<usize>,
}

impl MetricsRequest {
    fn is_empty(&self) -> bool {
        !self.ause && !self.auce && self.ece.is_none() && !self.rmse
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsOutcome {
    /// `(metric, value)` in a fixed order.
    pub values: Vec<(String, f64)>,
    pub artifacts: Vec<PathBuf>,
}

impl MetricsOutcome {
    pub fn get(&self, metric: &str) -> Option<f64> {
        self.values.iter().find(|(m, _)| m == metric).map(|(_, v)| *v)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("metric,value\n");
        for (m, v) in &self.values {
            s.push_str(&format!("{m},{}\n", fmt_f64(*v)));
        }
        s
    }
}

fn lib_err(e: uqbench::Error) -> CliError {
    CliError::Runtime(e.to_string())
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::runtime(format!("cannot create {}", path.display()), e))
}

/// Compute the requested metrics (all applicable ones when none are
/// requested) and write `metrics.csv` plus curve CSVs into `out_dir`.
pub fn run_metrics(fixture: &PredictionFixture, request: &MetricsRequest, out_dir: &Path) -> Result<MetricsOutcome, CliError> {
    if fixture.len() < 2 {
        return Err(CliError::Validation("fixture needs at least two rows".into()));
    }
    let steps = request.steps.unwrap_or(DEFAULT_AUSE_STEPS);
    fs::create_dir_all(out_dir)
        .map_err(|e| CliError::runtime(format!("cannot create {}", out_dir.display()), e))?;
    let mut values = Vec::new();
    let mut artifacts = Vec::new();
    match fixture {
        PredictionFixture::Regression(rows) => {
            if request.ece.is_some() {
                return Err(CliError::Validation("--ece applies to classification fixtures only".into()));
            }
            let all = request.is_empty();
            if all || request.ause {
                let errors: Vec<f64> = rows.iter().map(|r| r.target - r.mu).collect();
                let unc: Vec<f64> = rows.iter().map(|r| r.sigma2).collect();
                let (v, curve) = ause(&errors, &unc, SparsificationAggregate::Rmse, steps).map_err(lib_err)?;
                let path = out_dir.join("sparsification.csv");
                curve.write_csv(create(&path)?).map_err(lib_err)?;
                artifacts.push(path);
                values.push(("ause".into(), v));
            }
            if all || request.auce {
                let triples: Vec<(f64, f64, f64)> = rows.iter().map(|r| (r.mu, r.sigma2.sqrt(), r.target)).collect();
                let (v, curve) = auce_raw(&triples).map_err(lib_err)?;
                let path = out_dir.join("calibration.csv");
                curve.write_csv(create(&path)?).map_err(lib_err)?;
                artifacts.push(path);
                values.push(("auce".into(), v));
            }
            if all || request.rmse {
                let mu: Vec<f64> = rows.iter().map(|r| r.mu).collect();
                let y: Vec<f64> = rows.iter().map(|r| r.target).collect();
                values.push(("rmse".into(), rmse(&mu, &y).map_err(lib_err)?));
            }
        }
        PredictionFixture::Classification(rows) => {
            if request.auce || request.rmse {
                return Err(CliError::Validation(
                    "--auce and --rmse apply to regression fixtures only".into(),
                ));
            }
            let all = request.is_empty();
            let preds: Vec<PredictiveCategorical> = rows.iter().map(|(p, _)| PredictiveCategorical::from(p)).collect();
            let labels: Vec<usize> = rows.iter().map(|(_, l)| *l).collect();
            if all || request.ause {
                let (errors, unc): (Vec<f64>, Vec<f64>) = preds
                    .iter()
                    .zip(&labels)
                    .map(|(p, &l)| brier_and_entropy(p, l))
                    .collect::<uqbench::Result<Vec<_>>>()
                    .map_err(|e| CliError::Validation(e.to_string()))?
                    .into_iter()
                    .unzip();
                let (v, curve) = ause(&errors, &unc, SparsificationAggregate::BrierMean, steps).map_err(lib_err)?;
                let path = out_dir.join("sparsification.csv");
                curve.write_csv(create(&path)?).map_err(lib_err)?;
                artifacts.push(path);
                values.push(("ause-brier".into(), v));
            }
            if all || request.ece.is_some() {
                let bins = request.ece.unwrap_or(DEFAULT_ECE_BINS);
                if bins == 0 {
                    return Err(CliError::Validation("--ece needs at least one bin".into()));
                }
                let (v, reliability) = ece(&preds, &labels, bins).map_err(|e| CliError::Validation(e.to_string()))?;
                let path = out_dir.join("reliability.csv");
                reliability.write_csv(create(&path)?).map_err(lib_err)?;
                artifacts.push(path);
                values.push(("ece".into(), v));
            }
        }
    }
    let outcome = MetricsOutcome { values, artifacts };
    let path = out_dir.join("metrics.csv");
    fs::write(&path, outcome.to_text())?;
    let mut outcome = outcome;
    outcome.artifacts.push(path);
    Ok(outcome)
}
