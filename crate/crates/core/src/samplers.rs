//! Approximate posterior inference: HMC, SGLD, SGHMC, ensembling and
//! MC-dropout.
//!
//! HMC and the stochastic-gradient samplers work against the [`Potential`]
//! and [`StochasticPotential`] traits, so they can be checked on analytic
//! targets as well as on network posteriors ([`DataPotential`]).

use std::fmt;
use std::str::FromStr;

use log::warn;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::{potential_energy, HeadPrediction, ModelFamily};
use crate::nn::{ForwardMode, ParamVector};
use crate::optim::{OptimizerKind, OptimizerState};
use crate::rng::{derive_seed, rng_from_seed, SeededRng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InferenceMethod {
    Hmc,
    Sgld,
    Sghmc,
    Ensembling,
    McDropout,
}

impl InferenceMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            InferenceMethod::Hmc => "hmc",
            InferenceMethod::Sgld => "sgld",
            InferenceMethod::Sghmc => "sghmc",
            InferenceMethod::Ensembling => "ensembling",
            InferenceMethod::McDropout => "mc-dropout",
        }
    }
}

impl fmt::Display for InferenceMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for InferenceMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "hmc" => InferenceMethod::Hmc,
            "sgld" => InferenceMethod::Sgld,
            "sghmc" => InferenceMethod::Sghmc,
            "ensembling" => InferenceMethod::Ensembling,
            "mc-dropout" => InferenceMethod::McDropout,
            other => return Err(Error::config("method", format!("unknown method `{other}`"))),
        })
    }
}

/// Parameter vectors drawn by one inference method, with provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorSampleSet {
    pub samples: Vec<ParamVector>,
    pub method: InferenceMethod,
    pub config: serde_json::Value,
    pub seed: u64,
}

const SAMPLE_SET_MAGIC: &str = "uqbench-samples 1";

impl PosteriorSampleSet {
    pub fn new(
        samples: Vec<ParamVector>,
        method: InferenceMethod,
        config: serde_json::Value,
        seed: u64,
    ) -> Result<Self> {
        let set = Self {
            samples,
            method,
            config,
            seed,
        };
        set.validate()?;
        Ok(set)
    }

    fn validate(&self) -> Result<()> {
        let Some(first) = self.samples.first() else {
            return Err(Error::Empty("posterior sample set"));
        };
        for (i, s) in self.samples.iter().enumerate() {
            if s.len() != first.len() {
                return Err(Error::DimensionMismatch {
                    context: "posterior sample",
                    expected: first.len(),
                    found: s.len(),
                });
            }
            if !s.is_finite() {
                return Err(Error::non_finite(format!("posterior sample {i}")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.samples.first().map_or(0, |s| s.len())
    }

    /// Text serialization:
    ///
    /// ```text
    /// uqbench-samples 1
    /// method <name>
    /// seed <u64>
    /// config <single-line JSON>
    /// dim <P>
    /// count <M>
    /// <P space-separated values>     (M lines)
    /// ```
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(SAMPLE_SET_MAGIC);
        out.push('\n');
        out.push_str(&format!("method {}\n", self.method));
        out.push_str(&format!("seed {}\n", self.seed));
        out.push_str(&format!("config {}\n", self.config));
        out.push_str(&format!("dim {}\n", self.dim()));
        out.push_str(&format!("count {}\n", self.len()));
        for s in &self.samples {
            let row: Vec<String> = s.iter().map(|v| crate::data::fmt_f64(*v)).collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn parse_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i as u64 + 1, l));
        let mut next = |what: &str| {
            lines.next().ok_or_else(|| Error::Parse {
                line: 0,
                message: format!("unexpected end of input, expected {what}"),
            })
        };
        let (line, magic) = next("header")?;
        if magic.trim_end() != SAMPLE_SET_MAGIC {
            return Err(Error::Parse {
                line,
                message: format!("expected `{SAMPLE_SET_MAGIC}`"),
            });
        }
        fn field<'a>(entry: (u64, &'a str), key: &str) -> Result<(u64, &'a str)> {
            let (line, text) = entry;
            text.strip_prefix(key)
                .and_then(|rest| rest.strip_prefix(' '))
                .map(|v| (line, v.trim()))
                .ok_or_else(|| Error::Parse {
                    line,
                    message: format!("expected `{key} <value>`"),
                })
        }
        fn parse_num<T: FromStr>(entry: (u64, &str), what: &str) -> Result<T> {
            entry.1.parse().map_err(|_| Error::Parse {
                line: entry.0,
                message: format!("invalid {what} `{}`", entry.1),
            })
        }
        let method = field(next("method")?, "method")?;
        let method: InferenceMethod = method.1.parse().map_err(|_| Error::Parse {
            line: method.0,
            message: format!("unknown method `{}`", method.1),
        })?;
        let seed: u64 = parse_num(field(next("seed")?, "seed")?, "seed")?;
        let config = field(next("config")?, "config")?;
        let config: serde_json::Value = serde_json::from_str(config.1).map_err(|e| Error::Parse {
            line: config.0,
            message: format!("invalid config JSON: {e}"),
        })?;
        let dim: usize = parse_num(field(next("dim")?, "dim")?, "dim")?;
        let count: usize = parse_num(field(next("count")?, "count")?, "count")?;
        if count == 0 {
            return Err(Error::Empty("posterior sample set"));
        }
        let mut samples = Vec::new();
        for _ in 0..count {
            let (line, row) = next("sample row")?;
            let values = row
                .split_whitespace()
                .map(|tok| {
                    tok.parse::<f64>()
                        .ok()
                        .filter(|v| v.is_finite())
                        .ok_or_else(|| Error::Parse {
                            line,
                            message: format!("invalid value `{tok}`"),
                        })
                })
                .collect::<Result<Vec<f64>>>()?;
            if values.len() != dim {
                return Err(Error::Parse {
                    line,
                    message: format!("expected {dim} values, found {}", values.len()),
                });
            }
            samples.push(ParamVector::from(values));
        }
        Self::new(samples, method, config, seed)
    }
}

/// Potential energy `U(theta)` with exact gradient.
pub trait Potential {
    fn dim(&self) -> usize;
    fn value_and_grad(&self, theta: &[f64]) -> Result<(f64, ParamVector)>;
}

/// Potential defined by a closure, mainly for analytic targets.
pub struct FnPotential<F> {
    dim: usize,
    f: F,
}

impl<F> FnPotential<F>
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F> Potential for FnPotential<F>
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn value_and_grad(&self, theta: &[f64]) -> Result<(f64, ParamVector)> {
        let (u, g) = (self.f)(theta);
        Ok((u, g.into()))
    }
}

/// `U(theta) = -log p(Y | X, theta) - log N(theta; 0, I)` for a network.
pub struct DataPotential<'a> {
    pub family: &'a ModelFamily,
    pub dataset: &'a Dataset,
}

impl Potential for DataPotential<'_> {
    fn dim(&self) -> usize {
        self.family.num_params()
    }

    fn value_and_grad(&self, theta: &[f64]) -> Result<(f64, ParamVector)> {
        potential_energy(self.family, self.dataset, theta)
    }
}

/// Unbiased stochastic estimate of the gradient of a potential.
pub trait StochasticPotential {
    fn dim(&self) -> usize;
    fn stochastic_grad(&mut self, theta: &[f64], rng: &mut SeededRng) -> Result<ParamVector>;
}

/// Uses the exact gradient of a [`Potential`].
pub struct FullBatch<P>(pub P);

impl<P: Potential> StochasticPotential for FullBatch<P> {
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn stochastic_grad(&mut self, theta: &[f64], _rng: &mut SeededRng) -> Result<ParamVector> {
        Ok(self.0.value_and_grad(theta)?.1)
    }
}

/// Shuffled mini-batches over `0..n`; reshuffles after each pass.
#[derive(Clone, Debug)]
pub struct MinibatchStream {
    order: Vec<usize>,
    cursor: usize,
    batch_size: usize,
}

impl MinibatchStream {
    pub fn new(n: usize, batch_size: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Empty("dataset"));
        }
        if batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        Ok(Self {
            order: (0..n).collect(),
            cursor: n,
            batch_size,
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }

    pub fn next_batch(&mut self, rng: &mut SeededRng) -> &[usize] {
        if self.cursor >= self.order.len() {
            self.order.shuffle(rng);
            self.cursor = 0;
        }
        let start = self.cursor;
        let end = (start + self.batch_size).min(self.order.len());
        self.cursor = end;
        &self.order[start..end]
    }
}

/// Mini-batch gradient of [`DataPotential`]: the likelihood term is scaled by
/// `N / |batch|`, the prior term is exact.
pub struct MinibatchPotential<'a> {
    pub family: &'a ModelFamily,
    pub dataset: &'a Dataset,
    stream: MinibatchStream,
}

impl<'a> MinibatchPotential<'a> {
    pub fn new(family: &'a ModelFamily, dataset: &'a Dataset, batch_size: usize) -> Result<Self> {
        Ok(Self {
            family,
            dataset,
            stream: MinibatchStream::new(dataset.len(), batch_size)?,
        })
    }
}

impl StochasticPotential for MinibatchPotential<'_> {
    fn dim(&self) -> usize {
        self.family.num_params()
    }

    fn stochastic_grad(&mut self, theta: &[f64], rng: &mut SeededRng) -> Result<ParamVector> {
        let batch = self.stream.next_batch(rng);
        let scale = self.dataset.len() as f64 / batch.len() as f64;
        let (_, mut grad) = self.family.nll_sum(theta, self.dataset, batch)?;
        for (g, t) in grad.iter_mut().zip(theta) {
            *g = scale * *g + t;
        }
        Ok(grad)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HmcConfig {
    pub num_samples: usize,
    pub warmup_steps: usize,
    pub leapfrog_steps: usize,
    /// Initial step size; adapted during warmup.
    pub step_size: f64,
    pub target_accept: f64,
    /// Each iteration uses `step_size * (1 + u)`, `u ~ Uniform(-jitter, jitter)`.
    pub step_jitter: f64,
}

impl Default for HmcConfig {
    fn default() -> Self {
        Self {
            num_samples: 1000,
            warmup_steps: 1000,
            leapfrog_steps: 50,
            step_size: 1e-3,
            target_accept: 0.8,
            step_jitter: 0.1,
        }
    }
}

impl HmcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_samples == 0 {
            return Err(Error::config("num_samples", "must be at least 1"));
        }
        if self.leapfrog_steps == 0 {
            return Err(Error::config("leapfrog_steps", "must be at least 1"));
        }
        if !(self.step_size > 0.0) || !self.step_size.is_finite() {
            return Err(Error::config("step_size", "must be positive"));
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(Error::config("target_accept", "must lie in (0, 1)"));
        }
        if !(0.0..1.0).contains(&self.step_jitter) {
            return Err(Error::config("step_jitter", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// One Metropolis proposal, as logged by [`hmc_run`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HmcProposal {
    /// `H_new - H_old`; infinite for a numerically failed trajectory.
    pub delta_h: f64,
    pub accept_prob: f64,
    pub accepted: bool,
    pub warmup: bool,
}

#[derive(Clone, Debug, Default)]
pub struct HmcDiagnostics {
    pub proposals: Vec<HmcProposal>,
    pub divergences: usize,
    pub final_step_size: f64,
}

impl HmcDiagnostics {
    /// Acceptance rate over the sampling (post-warmup) phase.
    pub fn acceptance_rate(&self) -> f64 {
        let sampling: Vec<_> = self.proposals.iter().filter(|p| !p.warmup).collect();
        if sampling.is_empty() {
            return 0.0;
        }
        sampling.iter().filter(|p| p.accepted).count() as f64 / sampling.len() as f64
    }
}

/// Divergence threshold on `|H_new - H_old|`.
pub const HMC_DIVERGENCE: f64 = 1e3;

/// `L` leapfrog steps of size `eps` under an identity mass matrix.
///
/// Returns the end position, end momentum and the potential there.
pub fn leapfrog<P: Potential + ?Sized>(
    potential: &P,
    theta: &[f64],
    momentum: &[f64],
    eps: f64,
    steps: usize,
) -> Result<(Vec<f64>, Vec<f64>, f64)> {
    let mut q = theta.to_vec();
    let mut p = momentum.to_vec();
    let (_, mut grad) = potential.value_and_grad(&q)?;
    let mut u = 0.0;
    for step in 0..steps {
        for (pi, gi) in p.iter_mut().zip(grad.iter()) {
            *pi -= 0.5 * eps * gi;
        }
        for (qi, pi) in q.iter_mut().zip(&p) {
            *qi += eps * pi;
        }
        let (u_new, g_new) = potential.value_and_grad(&q)?;
        u = u_new;
        grad = g_new;
        for (pi, gi) in p.iter_mut().zip(grad.iter()) {
            *pi -= 0.5 * eps * gi;
        }
        if !u.is_finite() || p.iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite(format!("leapfrog step {step}")));
        }
    }
    if steps == 0 {
        u = potential.value_and_grad(&q)?.0;
    }
    Ok((q, p, u))
}

fn kinetic(p: &[f64]) -> f64 {
    0.5 * p.iter().map(|v| v * v).sum::<f64>()
}

/// Step-size adaptation by dual averaging toward a target acceptance rate.
struct DualAveraging {
    mu: f64,
    target: f64,
    h_bar: f64,
    log_eps: f64,
    log_eps_bar: f64,
    m: f64,
}

impl DualAveraging {
    const GAMMA: f64 = 0.05;
    const T0: f64 = 10.0;
    const KAPPA: f64 = 0.75;

    fn new(eps0: f64, target: f64) -> Self {
        Self {
            mu: (10.0 * eps0).ln(),
            target,
            h_bar: 0.0,
            log_eps: eps0.ln(),
            log_eps_bar: 0.0,
            m: 0.0,
        }
    }

    fn update(&mut self, accept_prob: f64) -> f64 {
        self.m += 1.0;
        let w = 1.0 / (self.m + Self::T0);
        self.h_bar = (1.0 - w) * self.h_bar + w * (self.target - accept_prob);
        self.log_eps = self.mu - self.m.sqrt() / Self::GAMMA * self.h_bar;
        let eta = self.m.powf(-Self::KAPPA);
        self.log_eps_bar = eta * self.log_eps + (1.0 - eta) * self.log_eps_bar;
        self.log_eps.exp()
    }

    fn final_step(&self) -> f64 {
        self.log_eps_bar.exp()
    }
}

/// Hamiltonian Monte Carlo with a fixed number of leapfrog steps and
/// dual-averaging step-size adaptation during warmup.
///
/// Proposals whose energy error exceeds [`HMC_DIVERGENCE`] (or that produce
/// non-finite values) are rejected and counted as divergences.
pub fn hmc_run<P: Potential + ?Sized>(
    potential: &P,
    init: &[f64],
    config: &HmcConfig,
    rng: &mut SeededRng,
) -> Result<(Vec<ParamVector>, HmcDiagnostics)> {
    config.validate()?;
    if init.len() != potential.dim() {
        return Err(Error::DimensionMismatch {
            context: "HMC initial position",
            expected: potential.dim(),
            found: init.len(),
        });
    }
    let mut theta = init.to_vec();
    let (mut u, _) = potential.value_and_grad(&theta)?;
    if !u.is_finite() {
        return Err(Error::non_finite("HMC initial potential"));
    }
    let mut eps = config.step_size;
    let mut adapt = DualAveraging::new(eps, config.target_accept);
    let mut diag = HmcDiagnostics::default();
    let mut samples = Vec::with_capacity(config.num_samples);
    let total = config.warmup_steps + config.num_samples;

    for iter in 0..total {
        let warmup = iter < config.warmup_steps;
        let p0: Vec<f64> = (0..theta.len()).map(|_| StandardNormal.sample(rng)).collect();
        let jitter = if config.step_jitter > 0.0 {
            1.0 + rng.random_range(-config.step_jitter..config.step_jitter)
        } else {
            1.0
        };
        let h_old = u + kinetic(&p0);
        let (delta_h, proposal) = match leapfrog(potential, &theta, &p0, eps * jitter, config.leapfrog_steps) {
            Ok((q, p, u_new)) => {
                let dh = u_new + kinetic(&p) - h_old;
                if dh.is_finite() {
                    (dh, Some((q, u_new)))
                } else {
                    (f64::INFINITY, None)
                }
            }
            Err(Error::NonFinite { .. }) => (f64::INFINITY, None),
            Err(e) => return Err(e),
        };
        let divergent = proposal.is_none() || delta_h.abs() > HMC_DIVERGENCE;
        let accept_prob = if divergent {
            0.0
        } else if delta_h <= 0.0 {
            1.0
        } else {
            (-delta_h).exp()
        };
        if divergent {
            diag.divergences += 1;
            warn!("HMC iteration {iter}: divergent trajectory (delta H = {delta_h:.3e}), rejected");
        }
        let accepted = !divergent && (accept_prob >= 1.0 || rng.random::<f64>() < accept_prob);
        if accepted {
            let (q, u_new) = proposal.unwrap();
            theta = q;
            u = u_new;
        }
        diag.proposals.push(HmcProposal {
            delta_h,
            accept_prob,
            accepted,
            warmup,
        });
        if warmup {
            eps = adapt.update(accept_prob);
            if iter + 1 == config.warmup_steps {
                eps = adapt.final_step();
            }
        } else {
            samples.push(ParamVector::from(theta.clone()));
        }
    }
    diag.final_step_size = eps;
    Ok((samples, diag))
}

/// HMC on a network posterior, wrapped as a sample set.
pub fn hmc_posterior(
    family: &ModelFamily,
    dataset: &Dataset,
    init: &[f64],
    config: &HmcConfig,
    seed: u64,
) -> Result<(PosteriorSampleSet, HmcDiagnostics)> {
    let potential = DataPotential { family, dataset };
    let mut rng = rng_from_seed(seed);
    let (samples, diag) = hmc_run(&potential, init, config, &mut rng)?;
    let set = PosteriorSampleSet::new(
        samples,
        InferenceMethod::Hmc,
        serde_json::to_value(config).expect("config serializes"),
        seed,
    )?;
    Ok((set, diag))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SgMcmcConfig {
    pub alpha0: f64,
    pub total_steps: usize,
    pub batch_size: usize,
    pub num_samples: usize,
    /// SGHMC friction; ignored by SGLD.
    pub eta: f64,
    pub decay_exponent: f64,
    /// Multiplier on the injected noise. `1.0` is the sampler; `0.0` turns it
    /// into the corresponding optimizer (test hook).
    pub noise_scale: f64,
    /// Keep `alpha_t = alpha0` for every step (test hook).
    pub constant_step: bool,
}

impl Default for SgMcmcConfig {
    fn default() -> Self {
        Self {
            alpha0: 0.01,
            total_steps: 1000,
            batch_size: 32,
            num_samples: 8,
            eta: 0.1,
            decay_exponent: 0.9,
            noise_scale: 1.0,
            constant_step: false,
        }
    }
}

impl SgMcmcConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha0 > 0.0) || !self.alpha0.is_finite() {
            return Err(Error::config("alpha0", "must be positive"));
        }
        if self.num_samples == 0 {
            return Err(Error::config("num_samples", "must be at least 1"));
        }
        if self.total_steps < self.num_samples {
            return Err(Error::config("total_steps", "must be at least num_samples"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return Err(Error::config("eta", "must lie in (0, 1]"));
        }
        Ok(())
    }

    pub fn step_size(&self, t: usize) -> f64 {
        if self.constant_step {
            self.alpha0
        } else {
            decayed_step_size(self.alpha0, t, self.total_steps, self.decay_exponent)
        }
    }
}

/// `alpha_t = alpha0 (1 - t/T)^exponent`.
pub fn decayed_step_size(alpha0: f64, t: usize, total: usize, exponent: f64) -> f64 {
    let frac = 1.0 - t as f64 / total as f64;
    alpha0 * frac.max(0.0).powf(exponent)
}

/// `M` step indices spread evenly from `floor(0.75 T)` to `T`, rounded to the
/// nearest step.
pub fn extraction_schedule(total_steps: usize, num_samples: usize) -> Result<Vec<usize>> {
    if num_samples == 0 {
        return Err(Error::config("num_samples", "must be at least 1"));
    }
    if total_steps < 2 {
        return Err(Error::config("total_steps", "must be at least 2"));
    }
    let start = (0.75 * total_steps as f64).floor() as usize;
    if num_samples == 1 {
        return Ok(vec![total_steps]);
    }
    if num_samples > total_steps - start + 1 {
        return Err(Error::config(
            "num_samples",
            format!(
                "{num_samples} samples cannot be distinct within steps {start}..={total_steps}"
            ),
        ));
    }
    let span = (total_steps - start) as f64;
    let idx: Vec<usize> = (0..num_samples)
        .map(|i| start + (span * i as f64 / (num_samples - 1) as f64).round() as usize)
        .collect();
    debug_assert!(idx.windows(2).all(|w| w[0] < w[1]));
    Ok(idx)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SgMcmcKind {
    Sgld,
    Sghmc,
}

/// Run an SG-MCMC trajectory of `config.total_steps` steps from `init` and
/// return the positions after each step listed in `checkpoints` (1-based,
/// sorted, `<= T`).
///
/// SGLD: `theta_{t+1} = theta_t - a_t g(theta_t) + sqrt(2 a_t) e_t`.
/// SGHMC: `theta_{t+1} = theta_t + r_t`,
/// `r_{t+1} = (1 - eta) r_t - a_t g(theta_t) + sqrt(2 eta a_t) e_t`, `r_0 = 0`.
pub fn sg_mcmc_trajectory<S: StochasticPotential + ?Sized>(
    kind: SgMcmcKind,
    potential: &mut S,
    init: &[f64],
    config: &SgMcmcConfig,
    checkpoints: &[usize],
    rng: &mut SeededRng,
) -> Result<Vec<ParamVector>> {
    config.validate()?;
    if init.len() != potential.dim() {
        return Err(Error::DimensionMismatch {
            context: "SG-MCMC initial position",
            expected: potential.dim(),
            found: init.len(),
        });
    }
    if checkpoints.windows(2).any(|w| w[0] >= w[1])
        || checkpoints.last().is_some_and(|&c| c > config.total_steps)
    {
        return Err(Error::config(
            "checkpoints",
            "must be strictly increasing and at most total_steps",
        ));
    }
    let mut theta = init.to_vec();
    let mut r = vec![0.0; theta.len()];
    let mut out = Vec::with_capacity(checkpoints.len());
    let mut next_checkpoint = checkpoints.iter().peekable();
    while next_checkpoint.peek() == Some(&&0) {
        out.push(ParamVector::from(theta.clone()));
        next_checkpoint.next();
    }
    for t in 1..=config.total_steps {
        let alpha = config.step_size(t);
        let grad = potential.stochastic_grad(&theta, rng)?;
        match kind {
            SgMcmcKind::Sgld => {
                let noise = config.noise_scale * (2.0 * alpha).sqrt();
                for (th, g) in theta.iter_mut().zip(grad.iter()) {
                    let e: f64 = StandardNormal.sample(rng);
                    *th += -alpha * g + noise * e;
                }
            }
            SgMcmcKind::Sghmc => {
                let noise = config.noise_scale * (2.0 * config.eta * alpha).sqrt();
                for ((th, ri), g) in theta.iter_mut().zip(r.iter_mut()).zip(grad.iter()) {
                    let e: f64 = StandardNormal.sample(rng);
                    *th += *ri;
                    *ri = (1.0 - config.eta) * *ri - alpha * g + noise * e;
                }
            }
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite(format!(
                "{kind:?} step {t} of {} (alpha_t = {alpha:.3e})",
                config.total_steps
            )));
        }
        while next_checkpoint.peek() == Some(&&t) {
            out.push(ParamVector::from(theta.clone()));
            next_checkpoint.next();
        }
    }
    Ok(out)
}

/// SG-MCMC on a network posterior.
///
/// `config.alpha0` is per data point: the trajectory runs on `U` with
/// initial step `alpha0 / N`. The chain starts from the default initializer.
pub fn sg_mcmc_posterior(
    kind: SgMcmcKind,
    family: &ModelFamily,
    dataset: &Dataset,
    config: &SgMcmcConfig,
    checkpoints: &[usize],
    seed: u64,
) -> Result<Vec<ParamVector>> {
    let mut scaled = config.clone();
    scaled.alpha0 = config.alpha0 / dataset.len() as f64;
    let mut rng = rng_from_seed(seed);
    let init = family.init_params(&mut rng);
    let mut potential = MinibatchPotential::new(family, dataset, config.batch_size)?;
    sg_mcmc_trajectory(kind, &mut potential, &init, &scaled, checkpoints, &mut rng)
}

pub fn sgld_run(
    family: &ModelFamily,
    dataset: &Dataset,
    config: &SgMcmcConfig,
    seed: u64,
) -> Result<PosteriorSampleSet> {
    let schedule = extraction_schedule(config.total_steps, config.num_samples)?;
    let samples = sg_mcmc_posterior(SgMcmcKind::Sgld, family, dataset, config, &schedule, seed)?;
    PosteriorSampleSet::new(
        samples,
        InferenceMethod::Sgld,
        serde_json::to_value(config).expect("config serializes"),
        seed,
    )
}

pub fn sghmc_run(
    family: &ModelFamily,
    dataset: &Dataset,
    config: &SgMcmcConfig,
    seed: u64,
) -> Result<PosteriorSampleSet> {
    let schedule = extraction_schedule(config.total_steps, config.num_samples)?;
    let samples = sg_mcmc_posterior(SgMcmcKind::Sghmc, family, dataset, config, &schedule, seed)?;
    PosteriorSampleSet::new(
        samples,
        InferenceMethod::Sghmc,
        serde_json::to_value(config).expect("config serializes"),
        seed,
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub lr: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 150,
            batch_size: 32,
            optimizer: OptimizerKind::adam(),
            lr: 1e-3,
        }
    }
}

/// Minimize the MAP loss with mini-batch first-order updates, starting from
/// `init`. Dropout, if the architecture has it, is active during training.
pub fn train_map(
    family: &ModelFamily,
    dataset: &Dataset,
    init: ParamVector,
    config: &TrainConfig,
    rng: &mut SeededRng,
) -> Result<ParamVector> {
    if dataset.is_empty() {
        return Err(Error::Empty("training dataset"));
    }
    let mut params = init;
    let mut opt = OptimizerState::new(config.optimizer, params.len());
    let mut stream = MinibatchStream::new(dataset.len(), config.batch_size)?;
    let per_epoch = stream.batches_per_epoch();
    for epoch in 0..config.epochs {
        for step in 0..per_epoch {
            let batch = stream.next_batch(rng).to_vec();
            let (loss, grad) = family
                .map_loss(&params, dataset, &batch, ForwardMode::Train(rng))
                .map_err(|e| match e {
                    Error::NonFinite { context } => Error::non_finite(format!(
                        "{context} at epoch {epoch}, step {step}"
                    )),
                    other => other,
                })?;
            debug_assert!(loss.is_finite());
            opt.step(&mut params, &grad, config.lr)?;
        }
    }
    Ok(params)
}

/// One ensemble member: fresh initialization and training from its own seed.
pub fn train_member(
    family: &ModelFamily,
    dataset: &Dataset,
    config: &TrainConfig,
    seed: u64,
) -> Result<ParamVector> {
    let mut rng = rng_from_seed(seed);
    let init = family.init_params(&mut rng);
    train_map(family, dataset, init, config, &mut rng)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnsembleConfig {
    pub members: usize,
    pub train: TrainConfig,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            members: 1,
            train: TrainConfig::default(),
        }
    }
}

/// Seed of ensemble member `index` under the ensemble seed.
pub fn member_seed(seed: u64, index: usize) -> u64 {
    derive_seed(seed, &[index as u64])
}

pub fn train_ensemble(
    family: &ModelFamily,
    dataset: &Dataset,
    config: &EnsembleConfig,
    seed: u64,
) -> Result<PosteriorSampleSet> {
    if config.members == 0 {
        return Err(Error::config("members", "must be at least 1"));
    }
    let samples = (0..config.members)
        .map(|m| train_member(family, dataset, &config.train, member_seed(seed, m)))
        .collect::<Result<Vec<_>>>()?;
    PosteriorSampleSet::new(
        samples,
        InferenceMethod::Ensembling,
        serde_json::to_value(config).expect("config serializes"),
        seed,
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct McDropoutConfig {
    pub train: TrainConfig,
    pub forward_passes: usize,
}

impl Default for McDropoutConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig {
                epochs: 300,
                ..TrainConfig::default()
            },
            forward_passes: 8,
        }
    }
}

/// `passes` stochastic forward passes per input with independent dropout
/// masks. Returns one list of `passes` predictions per input row of `xs`.
pub fn mc_dropout_posterior(
    family: &ModelFamily,
    params: &[f64],
    xs: &[f64],
    passes: usize,
    rng: &mut SeededRng,
) -> Result<Vec<Vec<HeadPrediction>>> {
    if !family.has_dropout() {
        return Err(Error::InvalidArchitecture(
            "MC-dropout requires an architecture with a dropout layer".into(),
        ));
    }
    if passes == 0 {
        return Err(Error::config("forward_passes", "must be at least 1"));
    }
    let n = xs.len() / family.input_dim();
    let mut per_input: Vec<Vec<HeadPrediction>> = (0..n).map(|_| Vec::with_capacity(passes)).collect();
    for _ in 0..passes {
        let preds = family.predict_batch(params, xs, ForwardMode::McDropout(rng))?;
        for (slot, p) in per_input.iter_mut().zip(preds) {
            slot.push(p);
        }
    }
    Ok(per_input)
}
