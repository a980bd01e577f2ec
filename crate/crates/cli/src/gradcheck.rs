//! Finite-difference self-check of the analytic MAP-loss gradients.

use std::fmt::Write as _;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use uqbench::data::Dataset;
use uqbench::models::ModelFamily;
use uqbench::nn::{finite_diff_grad, max_relative_error};
use uqbench::rng::{derive_seed, label, rng_from_seed, SeededRng};
use uqbench::{Activation, ForwardMode, MlpArchitecture};

use crate::error::CliError;

pub const TOLERANCE: f64 = 1e-4;
pub const FD_STEP: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub seed: u64,
    pub instances: usize,
    /// Negate the analytic gradient before comparing (negative control).
    pub flip_sign: bool,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            instances: 100,
            flip_sign: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FamilyResult {
    pub family: &'static str,
    pub instances: usize,
    pub worst: f64,
    pub worst_instance: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub seed: u64,
    pub results: Vec<FamilyResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.worst < TOLERANCE)
    }

    pub fn worst(&self) -> f64 {
        self.results.iter().map(|r| r.worst).fold(0.0, f64::max)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "gradcheck seed {}", self.seed).unwrap();
        for r in &self.results {
            writeln!(
                s,
                "{}: {} instances, worst relative error {:.3e} (instance {})",
                r.family, r.instances, r.worst, r.worst_instance
            )
            .unwrap();
        }
        let verdict = if self.passed() { "PASS" } else { "FAIL" };
        writeln!(s, "{verdict}: worst relative error {:.3e}, tolerance {TOLERANCE:.0e}", self.worst()).unwrap();
        s
    }
}

fn activation(i: usize) -> Activation {
    if i % 2 == 0 {
        Activation::Relu
    } else {
        Activation::Tanh
    }
}

/// Random task-shaped problem: a dataset of 32 points and a batch of 8.
fn regression_instance(i: usize, rng: &mut SeededRng) -> Result<(ModelFamily, Dataset), CliError> {
    let arch = MlpArchitecture::new(vec![1, 10, 10, 1], activation(i), None).map_err(runtime)?;
    let family = ModelFamily::gaussian(arch.clone(), arch).map_err(runtime)?;
    let xs: Vec<f64> = (0..32).map(|_| rng.random_range(-3.0..3.0)).collect();
    let ys: Vec<f64> = xs.iter().map(|x| x.sin() + 0.3 * Distribution::<f64>::sample(&StandardNormal, &mut *rng)).collect();
    let data = Dataset::regression(1, xs, ys, 0, "gradcheck").map_err(runtime)?;
    Ok((family, data))
}

fn classification_instance(i: usize, rng: &mut SeededRng) -> Result<(ModelFamily, Dataset), CliError> {
    let arch = MlpArchitecture::new(vec![2, 10, 10, 2], activation(i), None).map_err(runtime)?;
    let family = ModelFamily::categorical(arch).map_err(runtime)?;
    let xs: Vec<f64> = (0..64).map(|_| rng.random_range(-3.0..3.0)).collect();
    let labels: Vec<usize> = (0..32).map(|_| rng.random_range(0..2)).collect();
    let data = Dataset::classification(2, xs, labels, 2, 0, "gradcheck").map_err(runtime)?;
    Ok((family, data))
}

fn runtime(e: uqbench::Error) -> CliError {
    CliError::runtime("gradcheck", e)
}

fn check_family(
    name: &'static str,
    options: &GradcheckOptions,
    make: fn(usize, &mut SeededRng) -> Result<(ModelFamily, Dataset), CliError>,
) -> Result<FamilyResult, CliError> {
    let mut rng = rng_from_seed(derive_seed(options.seed, &[label(name)]));
    let mut result = FamilyResult {
        family: name,
        instances: options.instances,
        worst: 0.0,
        worst_instance: 0,
    };
    for i in 0..options.instances {
        let (family, data) = make(i, &mut rng)?;
        let params = family.init_params(&mut rng);
        let batch: Vec<usize> = (0..8).map(|_| rng.random_range(0..data.len())).collect();
        let (_, mut grad) = family
            .map_loss(&params, &data, &batch, ForwardMode::Deterministic)
            .map_err(runtime)?;
        if options.flip_sign {
            grad.iter_mut().for_each(|g| *g = -*g);
        }
        let fd = finite_diff_grad(
            |t| {
                family
                    .map_loss(t, &data, &batch, ForwardMode::Deterministic)
                    .map(|(l, _)| l)
                    .unwrap_or(f64::NAN)
            },
            &params,
            FD_STEP,
        );
        let err = max_relative_error(&grad, &fd);
        let err = if err.is_nan() { f64::INFINITY } else { err };
        if err > result.worst {
            result.worst = err;
            result.worst_instance = i;
        }
    }
    Ok(result)
}

/// Compare backpropagated MAP-loss gradients with central differences on
/// random regression and classification instances.
pub fn run_gradcheck(options: &GradcheckOptions) -> Result<GradcheckReport, CliError> {
    Ok(GradcheckReport {
        seed: options.seed,
        results: vec![
            check_family("regression", options, regression_instance)?,
            check_family("classification", options, classification_instance)?,
        ],
    })
}
