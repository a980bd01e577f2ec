//! Predictive distributions from sets of parameter samples.
//!
//! Regression mixtures are collapsed to a single Gaussian by moment matching;
//! classification predictions are averaged probability vectors.

use std::io::Write;

use serde::Serialize;

use crate::data::fmt_f64;
use crate::error::{Error, Result};
use crate::models::{CategoricalPrediction, GaussianPrediction, HeadPrediction, ModelFamily};
use crate::nn::{ForwardMode, ParamVector};
use crate::rng::SeededRng;
use crate::samplers::{mc_dropout_posterior, PosteriorSampleSet};

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PredictiveGaussian {
    mu_hat: f64,
    sigma2_hat: f64,
}

impl PredictiveGaussian {
    pub fn new(mu_hat: f64, sigma2_hat: f64) -> Result<Self> {
        if !mu_hat.is_finite() || !sigma2_hat.is_finite() {
            return Err(Error::non_finite("predictive Gaussian"));
        }
        if !(sigma2_hat > 0.0) {
            return Err(Error::Invariant {
                line: 0,
                field: "sigma2_hat".into(),
                reason: format!("must be > 0, got {sigma2_hat}"),
            });
        }
        Ok(Self { mu_hat, sigma2_hat })
    }

    pub fn mu_hat(&self) -> f64 {
        self.mu_hat
    }

    pub fn sigma2_hat(&self) -> f64 {
        self.sigma2_hat
    }

    pub fn sigma_hat(&self) -> f64 {
        self.sigma2_hat.sqrt()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PredictiveCategorical {
    probs: Vec<f64>,
}

impl PredictiveCategorical {
    /// Entries must be non-negative and sum to one within `1e-12`.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Empty("predictive probabilities"));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::Support(format!("invalid probability vector {probs:?}")));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::Support(format!("probabilities sum to {sum}")));
        }
        Ok(Self { probs })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn num_classes(&self) -> usize {
        self.probs.len()
    }

    /// `(argmax, max probability)`; ties resolve to the lowest index.
    pub fn max_confidence(&self) -> (usize, f64) {
        self.probs
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (k, &p)| if p > best.1 { (k, p) } else { best })
    }
}

impl From<&CategoricalPrediction> for PredictiveCategorical {
    /// Renormalizes, so probabilities read from text land on the simplex.
    fn from(p: &CategoricalPrediction) -> Self {
        let sum: f64 = p.probs().iter().sum();
        Self {
            probs: p.probs().iter().map(|v| v / sum).collect(),
        }
    }
}

/// Moment-matched single Gaussian of a uniform mixture:
/// `mu = mean(mu_i)`, `sigma2 = mean((mu_i - mu)^2 + sigma2_i)`.
pub fn collapse_gaussian_mixture(components: &[GaussianPrediction]) -> Result<PredictiveGaussian> {
    if components.is_empty() {
        return Err(Error::Empty("mixture components"));
    }
    let m = components.len() as f64;
    let mu = components.iter().map(|c| c.mu).sum::<f64>() / m;
    let var = components
        .iter()
        .map(|c| (c.mu - mu).powi(2) + c.sigma2())
        .sum::<f64>()
        / m;
    PredictiveGaussian::new(mu, var)
}

pub fn average_categorical(components: &[CategoricalPrediction]) -> Result<PredictiveCategorical> {
    let refs: Vec<&CategoricalPrediction> = components.iter().collect();
    average_categorical_refs(&refs)
}

fn average_categorical_refs(components: &[&CategoricalPrediction]) -> Result<PredictiveCategorical> {
    let Some(first) = components.first() else {
        return Err(Error::Empty("categorical components"));
    };
    let c = first.num_classes();
    let mut acc = vec![0.0; c];
    for comp in components {
        if comp.num_classes() != c {
            return Err(Error::DimensionMismatch {
                context: "categorical component classes",
                expected: c,
                found: comp.num_classes(),
            });
        }
        for (a, p) in acc.iter_mut().zip(comp.probs()) {
            *a += p;
        }
    }
    let m = components.len() as f64;
    for a in &mut acc {
        *a /= m;
    }
    // Rounding can leave the sum a few ulps off one.
    let sum: f64 = acc.iter().sum();
    for a in &mut acc {
        *a /= sum;
    }
    PredictiveCategorical::new(acc)
}

/// Predictive distribution at every point of an input grid.
#[derive(Clone, Debug, PartialEq)]
pub enum PredictiveValues {
    Gaussian(Vec<PredictiveGaussian>),
    Categorical(Vec<PredictiveCategorical>),
}

impl PredictiveValues {
    pub fn len(&self) -> usize {
        match self {
            PredictiveValues::Gaussian(v) => v.len(),
            PredictiveValues::Categorical(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Head outputs of individual parameter samples on a fixed grid,
/// `[sample][point]`. Computing these once lets any subset of the samples be
/// aggregated without further forward passes.
#[derive(Clone, Debug, PartialEq)]
pub struct MemberPredictions {
    points: usize,
    members: Vec<Vec<HeadPrediction>>,
}

impl MemberPredictions {
    /// Deterministic forward pass of every sample on `xs` (row-major).
    pub fn evaluate(family: &ModelFamily, samples: &[ParamVector], xs: &[f64]) -> Result<Self> {
        let points = grid_points(family, xs)?;
        let members = samples
            .iter()
            .map(|s| family.predict_batch(s, xs, ForwardMode::Deterministic))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { points, members })
    }

    /// `[pass][point]` outputs, e.g. from MC-dropout passes.
    pub fn from_members(members: Vec<Vec<HeadPrediction>>) -> Result<Self> {
        let points = members.first().map_or(0, |m| m.len());
        if members.iter().any(|m| m.len() != points) {
            return Err(Error::Invariant {
                line: 0,
                field: "members".into(),
                reason: "all members must cover the same points".into(),
            });
        }
        Ok(Self { points, members })
    }

    pub fn num_members(&self) -> usize {
        self.members.len()
    }

    pub fn num_points(&self) -> usize {
        self.points
    }

    pub fn member(&self, i: usize) -> &[HeadPrediction] {
        &self.members[i]
    }

    pub fn aggregate_all(&self) -> Result<PredictiveValues> {
        let all: Vec<usize> = (0..self.members.len()).collect();
        self.aggregate(&all)
    }

    /// Aggregate the members listed in `subset` at every point.
    pub fn aggregate(&self, subset: &[usize]) -> Result<PredictiveValues> {
        if subset.is_empty() {
            return Err(Error::Empty("member subset"));
        }
        if let Some(&bad) = subset.iter().find(|&&i| i >= self.members.len()) {
            return Err(Error::DimensionMismatch {
                context: "member index",
                expected: self.members.len(),
                found: bad,
            });
        }
        match &self.members[subset[0]].first() {
            None => Ok(PredictiveValues::Gaussian(Vec::new())),
            Some(HeadPrediction::Gaussian(_)) => {
                let mut comps = Vec::with_capacity(subset.len());
                let out = (0..self.points)
                    .map(|j| {
                        comps.clear();
                        for &i in subset {
                            match &self.members[i][j] {
                                HeadPrediction::Gaussian(g) => comps.push(*g),
                                HeadPrediction::Categorical(_) => return Err(mixed_heads()),
                            }
                        }
                        collapse_gaussian_mixture(&comps)
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(PredictiveValues::Gaussian(out))
            }
            Some(HeadPrediction::Categorical(_)) => {
                let out = (0..self.points)
                    .map(|j| {
                        let comps = subset
                            .iter()
                            .map(|&i| match &self.members[i][j] {
                                HeadPrediction::Categorical(c) => Ok(c),
                                HeadPrediction::Gaussian(_) => Err(mixed_heads()),
                            })
                            .collect::<Result<Vec<_>>>()?;
                        average_categorical_refs(&comps)
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(PredictiveValues::Categorical(out))
            }
        }
    }
}

fn mixed_heads() -> Error {
    Error::Invariant {
        line: 0,
        field: "members".into(),
        reason: "members mix Gaussian and categorical heads".into(),
    }
}

fn grid_points(family: &ModelFamily, xs: &[f64]) -> Result<usize> {
    let d = family.input_dim();
    if xs.len() % d != 0 {
        return Err(Error::DimensionMismatch {
            context: "grid inputs",
            expected: d,
            found: xs.len() % d,
        });
    }
    Ok(xs.len() / d)
}

/// Predictive distribution of a sample set on `xs` (row-major), each sample
/// evaluated deterministically.
pub fn posterior_predict(
    family: &ModelFamily,
    samples: &PosteriorSampleSet,
    xs: &[f64],
) -> Result<PredictiveValues> {
    if samples.dim() != family.num_params() {
        return Err(Error::DimensionMismatch {
            context: "sample set parameters",
            expected: family.num_params(),
            found: samples.dim(),
        });
    }
    MemberPredictions::evaluate(family, &samples.samples, xs)?.aggregate_all()
}

/// MC-dropout predictive: `passes` stochastic forward passes of one trained
/// network, aggregated like posterior samples.
pub fn mc_dropout_predict(
    family: &ModelFamily,
    params: &[f64],
    xs: &[f64],
    passes: usize,
    rng: &mut SeededRng,
) -> Result<PredictiveValues> {
    mc_dropout_members(family, params, xs, passes, rng)?.aggregate_all()
}

/// Per-pass outputs of MC-dropout, `[pass][point]`.
pub fn mc_dropout_members(
    family: &ModelFamily,
    params: &[f64],
    xs: &[f64],
    passes: usize,
    rng: &mut SeededRng,
) -> Result<MemberPredictions> {
    grid_points(family, xs)?;
    let per_input = mc_dropout_posterior(family, params, xs, passes, rng)?;
    let mut members: Vec<Vec<HeadPrediction>> = (0..passes).map(|_| Vec::with_capacity(per_input.len())).collect();
    for point in per_input {
        for (m, p) in members.iter_mut().zip(point) {
            m.push(p);
        }
    }
    MemberPredictions::from_members(members)
}

/// Streaming aggregation of head outputs, one sample at a time, for every
/// point of a fixed grid. Gaussian moments use Welford updates; the result
/// agrees with [`collapse_gaussian_mixture`] up to rounding.
#[derive(Clone, Debug)]
pub struct PredictiveAccumulator {
    points: usize,
    count: usize,
    state: AccState,
}

#[derive(Clone, Debug)]
enum AccState {
    Empty,
    Gaussian {
        mean_mu: Vec<f64>,
        m2_mu: Vec<f64>,
        mean_var: Vec<f64>,
    },
    Categorical {
        classes: usize,
        sum: Vec<f64>,
    },
}

impl PredictiveAccumulator {
    pub fn new(points: usize) -> Self {
        Self {
            points,
            count: 0,
            state: AccState::Empty,
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// Add one sample's outputs at every grid point.
    pub fn add(&mut self, preds: &[HeadPrediction]) -> Result<()> {
        if preds.len() != self.points {
            return Err(Error::DimensionMismatch {
                context: "accumulated predictions",
                expected: self.points,
                found: preds.len(),
            });
        }
        if self.points == 0 {
            self.count += 1;
            return Ok(());
        }
        if let AccState::Empty = self.state {
            self.state = match &preds[0] {
                HeadPrediction::Gaussian(_) => AccState::Gaussian {
                    mean_mu: vec![0.0; self.points],
                    m2_mu: vec![0.0; self.points],
                    mean_var: vec![0.0; self.points],
                },
                HeadPrediction::Categorical(c) => AccState::Categorical {
                    classes: c.num_classes(),
                    sum: vec![0.0; self.points * c.num_classes()],
                },
            };
        }
        let n = (self.count + 1) as f64;
        match &mut self.state {
            AccState::Gaussian { mean_mu, m2_mu, mean_var } => {
                for (j, p) in preds.iter().enumerate() {
                    let HeadPrediction::Gaussian(g) = p else {
                        return Err(mixed_heads());
                    };
                    let delta = g.mu - mean_mu[j];
                    mean_mu[j] += delta / n;
                    m2_mu[j] += delta * (g.mu - mean_mu[j]);
                    mean_var[j] += (g.sigma2() - mean_var[j]) / n;
                }
            }
            AccState::Categorical { classes, sum } => {
                for (j, p) in preds.iter().enumerate() {
                    let HeadPrediction::Categorical(c) = p else {
                        return Err(mixed_heads());
                    };
                    if c.num_classes() != *classes {
                        return Err(Error::DimensionMismatch {
                            context: "categorical component classes",
                            expected: *classes,
                            found: c.num_classes(),
                        });
                    }
                    for (a, v) in sum[j * *classes..(j + 1) * *classes].iter_mut().zip(c.probs()) {
                        *a += v;
                    }
                }
            }
            AccState::Empty => unreachable!(),
        }
        self.count += 1;
        Ok(())
    }

    /// Predictive values from the samples added so far.
    pub fn finish(&self) -> Result<PredictiveValues> {
        if self.count == 0 {
            return Err(Error::Empty("accumulated samples"));
        }
        match &self.state {
            AccState::Empty => Ok(PredictiveValues::Gaussian(Vec::new())),
            AccState::Gaussian { mean_mu, m2_mu, mean_var } => {
                let n = self.count as f64;
                mean_mu
                    .iter()
                    .zip(m2_mu)
                    .zip(mean_var)
                    .map(|((&mu, &m2), &var)| PredictiveGaussian::new(mu, m2 / n + var))
                    .collect::<Result<Vec<_>>>()
                    .map(PredictiveValues::Gaussian)
            }
            AccState::Categorical { classes, sum } => sum
                .chunks_exact(*classes)
                .map(|row| {
                    let total: f64 = row.iter().sum();
                    PredictiveCategorical::new(row.iter().map(|v| v / total).collect())
                })
                .collect::<Result<Vec<_>>>()
                .map(PredictiveValues::Categorical),
        }
    }
}

/// CSV of a predictive curve: `x,mu_hat,sigma2_hat` for 1-D regression,
/// `x1,x2,p0,p1,...` for classification.
pub fn write_predictive_csv<W: Write>(
    writer: W,
    xs: &[f64],
    input_dim: usize,
    values: &PredictiveValues,
) -> Result<()> {
    if input_dim == 0 || xs.len() != input_dim * values.len() {
        return Err(Error::DimensionMismatch {
            context: "predictive curve inputs",
            expected: input_dim * values.len(),
            found: xs.len(),
        });
    }
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = if input_dim == 1 {
        vec!["x".into()]
    } else {
        (1..=input_dim).map(|d| format!("x{d}")).collect()
    };
    match values {
        PredictiveValues::Gaussian(_) => header.extend(["mu_hat".into(), "sigma2_hat".into()]),
        PredictiveValues::Categorical(v) => {
            let c = v.first().map_or(0, |p| p.num_classes());
            header.extend((0..c).map(|k| format!("p{k}")));
        }
    }
    w.write_record(&header).map_err(csv_io)?;
    let rows = xs.chunks_exact(input_dim);
    let mut record: Vec<String> = Vec::new();
    match values {
        PredictiveValues::Gaussian(v) => {
            for (x, p) in rows.zip(v) {
                record.clear();
                record.extend(x.iter().map(|v| fmt_f64(*v)));
                record.push(fmt_f64(p.mu_hat));
                record.push(fmt_f64(p.sigma2_hat));
                w.write_record(&record).map_err(csv_io)?;
            }
        }
        PredictiveValues::Categorical(v) => {
            for (x, p) in rows.zip(v) {
                record.clear();
                record.extend(x.iter().map(|v| fmt_f64(*v)));
                record.extend(p.probs.iter().map(|v| fmt_f64(*v)));
                w.write_record(&record).map_err(csv_io)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Inverse of [`write_predictive_csv`]: returns the grid inputs, the input
/// dimension and the predictive values.
pub fn read_predictive_csv<R: std::io::Read>(reader: R) -> Result<(Vec<f64>, usize, PredictiveValues)> {
    let mut r = csv::Reader::from_reader(reader);
    let header = r
        .headers()
        .map_err(|e| Error::Parse {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    let cols: Vec<&str> = header.iter().collect();
    let input_dim = cols.iter().take_while(|c| c.starts_with('x')).count();
    let gaussian = cols[input_dim..] == ["mu_hat", "sigma2_hat"];
    let classes = cols.len() - input_dim;
    let inputs_named = match input_dim {
        1 => cols[0] == "x",
        d => (1..=d).all(|i| cols[i - 1] == format!("x{i}")),
    };
    if input_dim == 0 || !inputs_named || classes == 0 || (!gaussian && cols[input_dim..].iter().enumerate().any(|(k, c)| *c != format!("p{k}"))) {
        return Err(Error::Parse {
            line: 1,
            message: format!("unrecognized predictive curve header `{}`", cols.join(",")),
        });
    }
    let mut xs = Vec::new();
    let mut gauss = Vec::new();
    let mut cats = Vec::new();
    for record in r.records() {
        let record = record.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let values = record
            .iter()
            .map(|f| {
                f.trim().parse::<f64>().map_err(|_| Error::Parse {
                    line,
                    message: format!("invalid number `{f}`"),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        xs.extend_from_slice(&values[..input_dim]);
        let tail = values[input_dim..].to_vec();
        let at_line = |e: Error| match e {
            Error::Invariant { field, reason, .. } => Error::Invariant { line, field, reason },
            Error::Support(reason) => Error::Invariant {
                line,
                field: "probabilities".into(),
                reason,
            },
            other => other,
        };
        if gaussian {
            gauss.push(PredictiveGaussian::new(tail[0], tail[1]).map_err(at_line)?);
        } else {
            cats.push(PredictiveCategorical::new(tail).map_err(at_line)?);
        }
    }
    if xs.is_empty() {
        return Err(Error::Parse {
            line: 2,
            message: "predictive curve has no rows".into(),
        });
    }
    let values = if gaussian {
        PredictiveValues::Gaussian(gauss)
    } else {
        PredictiveValues::Categorical(cats)
    };
    Ok((xs, input_dim, values))
}

pub(crate) fn csv_io(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Io(std::io::Error::other(format!("{other:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::MlpArchitecture;
    use crate::rng::rng_from_seed;
    use crate::samplers::InferenceMethod;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn g(mu: f64, sigma2: f64) -> GaussianPrediction {
        GaussianPrediction {
            mu,
            log_sigma2: sigma2.ln(),
        }
    }

    #[test]
    fn collapse_examples() {
        let p = collapse_gaussian_mixture(&[g(2.0, 1.0); 5]).unwrap();
        assert!((p.mu_hat() - 2.0).abs() < 1e-15 && (p.sigma2_hat() - 1.0).abs() < 1e-15);
        let p = collapse_gaussian_mixture(&[g(0.0, 1.0), g(2.0, 1.0)]).unwrap();
        assert!((p.mu_hat() - 1.0).abs() < 1e-15 && (p.sigma2_hat() - 2.0).abs() < 1e-15);
        let p = collapse_gaussian_mixture(&[g(-0.3, 0.7)]).unwrap();
        assert!((p.mu_hat() + 0.3).abs() < 1e-15 && (p.sigma2_hat() - 0.7).abs() < 1e-15);
        assert!(matches!(collapse_gaussian_mixture(&[]), Err(Error::Empty(_))));
    }

    #[test]
    fn average_examples() {
        let a = CategoricalPrediction::new(vec![1.0, 0.0]).unwrap();
        let b = CategoricalPrediction::new(vec![0.0, 1.0]).unwrap();
        assert_eq!(average_categorical(&[a.clone(), b]).unwrap().probs(), &[0.5, 0.5]);
        let c = CategoricalPrediction::new(vec![0.2, 0.3, 0.5]).unwrap();
        let avg = average_categorical(&[c.clone(), c.clone()]).unwrap();
        for (x, y) in avg.probs().iter().zip(c.probs()) {
            assert!((x - y).abs() < 1e-15);
        }
        assert!(average_categorical(&[a, c]).is_err());
        assert!(average_categorical(&[]).is_err());
    }

    #[test]
    fn collapse_matches_monte_carlo_moments() {
        let mut rng = rng_from_seed(17);
        for _ in 0..3 {
            let m = rng.random_range(1..6);
            let comps: Vec<_> = (0..m)
                .map(|_| g(rng.random_range(-3.0..3.0), rng.random_range(0.05..2.0)))
                .collect();
            let p = collapse_gaussian_mixture(&comps).unwrap();
            let n = 1_000_000;
            let (mut s1, mut s2) = (0.0, 0.0);
            let mut draws = Vec::with_capacity(n);
            for _ in 0..n {
                let c = comps[rng.random_range(0..m)];
                let y = Normal::new(c.mu, c.sigma2().sqrt()).unwrap().sample(&mut rng);
                s1 += y;
                draws.push(y);
            }
            let mean = s1 / n as f64;
            for y in &draws {
                s2 += (y - mean).powi(2);
            }
            let var = s2 / (n as f64 - 1.0);
            let se_mean = (var / n as f64).sqrt();
            let m4 = draws.iter().map(|y| (y - mean).powi(4)).sum::<f64>() / n as f64;
            let se_var = ((m4 - var * var) / n as f64).sqrt();
            assert!((mean - p.mu_hat()).abs() < 3.0 * se_mean);
            assert!((var - p.sigma2_hat()).abs() < 3.0 * se_var);
        }
    }

    fn regression_family() -> ModelFamily {
        let a = MlpArchitecture::dense(&[1, 1]).unwrap();
        ModelFamily::gaussian(a.clone(), a).unwrap()
    }

    #[test]
    fn single_sample_is_raw_head_output() {
        let fam = regression_family();
        let theta: ParamVector = vec![0.5, 0.1, -0.2, 0.3].into();
        let set = PosteriorSampleSet::new(vec![theta.clone()], InferenceMethod::Ensembling, serde_json::Value::Null, 0).unwrap();
        let xs = [-1.0, 0.0, 2.0];
        let PredictiveValues::Gaussian(out) = posterior_predict(&fam, &set, &xs).unwrap() else {
            panic!("expected Gaussian output")
        };
        for (x, p) in xs.iter().zip(&out) {
            assert!((p.mu_hat() - (0.5 * x + 0.1)).abs() < 1e-15);
            assert!((p.sigma2_hat() - (-0.2 * x + 0.3f64).exp()).abs() < 1e-14);
        }
    }

    #[test]
    fn constant_models_follow_collapse_formula() {
        // Zero weights: member outputs are (b_mu, exp(b_s)) everywhere.
        let fam = regression_family();
        let set = PosteriorSampleSet::new(
            vec![vec![0.0, 1.0, 0.0, 0.0].into(), vec![0.0, 3.0, 0.0, 2.0f64.ln()].into()],
            InferenceMethod::Ensembling,
            serde_json::Value::Null,
            0,
        )
        .unwrap();
        let PredictiveValues::Gaussian(out) = posterior_predict(&fam, &set, &[0.4, 7.0]).unwrap() else {
            panic!("expected Gaussian output")
        };
        for p in out {
            // mu = 2, sigma2 = ((1 + 1) + (1 + 2)) / 2
            assert!((p.mu_hat() - 2.0).abs() < 1e-15);
            assert!((p.sigma2_hat() - 2.5).abs() < 1e-14);
        }
    }

    #[test]
    fn grid_permutation_permutes_outputs() {
        let a = MlpArchitecture::dense(&[2, 4, 3]).unwrap();
        let fam = ModelFamily::categorical(a).unwrap();
        let mut rng = rng_from_seed(1);
        let samples: Vec<ParamVector> = (0..3).map(|_| fam.init_params(&mut rng)).collect();
        let set = PosteriorSampleSet::new(samples, InferenceMethod::Sgld, serde_json::Value::Null, 0).unwrap();
        let xs = [0.1, 0.2, -1.0, 3.0, 2.0, -2.0];
        let perm = [2.0, -2.0, 0.1, 0.2, -1.0, 3.0];
        let (PredictiveValues::Categorical(a), PredictiveValues::Categorical(b)) = (
            posterior_predict(&fam, &set, &xs).unwrap(),
            posterior_predict(&fam, &set, &perm).unwrap(),
        ) else {
            panic!("expected categorical output")
        };
        assert_eq!(a[0], b[1]);
        assert_eq!(a[1], b[2]);
        assert_eq!(a[2], b[0]);
    }

    #[test]
    fn subset_aggregation_matches_direct_prediction() {
        let fam = regression_family();
        let mut rng = rng_from_seed(4);
        let samples: Vec<ParamVector> = (0..5).map(|_| fam.init_params(&mut rng)).collect();
        let xs = [-2.0, 0.5, 1.5];
        let members = MemberPredictions::evaluate(&fam, &samples, &xs).unwrap();
        let subset = [1, 3, 4];
        let set = PosteriorSampleSet::new(
            subset.iter().map(|&i| samples[i].clone()).collect(),
            InferenceMethod::Ensembling,
            serde_json::Value::Null,
            0,
        )
        .unwrap();
        assert_eq!(members.aggregate(&subset).unwrap(), posterior_predict(&fam, &set, &xs).unwrap());
        assert!(members.aggregate(&[]).is_err());
        assert!(members.aggregate(&[5]).is_err());
    }

    #[test]
    fn predictive_csv_layout() {
        let values = PredictiveValues::Gaussian(vec![PredictiveGaussian::new(1.0, 2.0).unwrap()]);
        let mut buf = Vec::new();
        write_predictive_csv(&mut buf, &[0.5], 1, &values).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("x,mu_hat,sigma2_hat\n"));
        let values = PredictiveValues::Categorical(vec![PredictiveCategorical::new(vec![0.25, 0.75]).unwrap()]);
        let mut buf = Vec::new();
        write_predictive_csv(&mut buf, &[0.5, 1.0], 2, &values).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("x1,x2,p0,p1\n"));
        assert!(write_predictive_csv(Vec::new(), &[0.5, 1.0], 1, &values).is_err());
    }

    #[test]
    fn accumulator_matches_batch_aggregation() {
        let fam = regression_family();
        let mut rng = rng_from_seed(6);
        let samples: Vec<ParamVector> = (0..7).map(|_| fam.init_params(&mut rng)).collect();
        let xs: Vec<f64> = (0..20).map(|i| -4.0 + 0.4 * i as f64).collect();
        let members = MemberPredictions::evaluate(&fam, &samples, &xs).unwrap();
        let mut acc = PredictiveAccumulator::new(xs.len());
        for i in 0..members.num_members() {
            acc.add(members.member(i)).unwrap();
        }
        let (PredictiveValues::Gaussian(a), PredictiveValues::Gaussian(b)) =
            (acc.finish().unwrap(), members.aggregate_all().unwrap())
        else {
            panic!("expected Gaussian output")
        };
        for (p, q) in a.iter().zip(&b) {
            assert!((p.mu_hat() - q.mu_hat()).abs() < 1e-12);
            assert!((p.sigma2_hat() - q.sigma2_hat()).abs() < 1e-12 * q.sigma2_hat().max(1.0));
        }

        let arch = MlpArchitecture::dense(&[2, 4, 3]).unwrap();
        let fam = ModelFamily::categorical(arch).unwrap();
        let samples: Vec<ParamVector> = (0..5).map(|_| fam.init_params(&mut rng)).collect();
        let xs = [0.1, 0.2, -1.0, 3.0];
        let members = MemberPredictions::evaluate(&fam, &samples, &xs).unwrap();
        let mut acc = PredictiveAccumulator::new(2);
        for i in 0..5 {
            acc.add(members.member(i)).unwrap();
        }
        let (PredictiveValues::Categorical(a), PredictiveValues::Categorical(b)) =
            (acc.finish().unwrap(), members.aggregate_all().unwrap())
        else {
            panic!("expected categorical output")
        };
        for (p, q) in a.iter().zip(&b) {
            for (x, y) in p.probs().iter().zip(q.probs()) {
                assert!((x - y).abs() < 1e-15);
            }
        }
        assert!(PredictiveAccumulator::new(2).finish().is_err());
        assert!(acc.add(&members.member(0)[..1]).is_err());
    }

    #[test]
    fn predictive_csv_round_trip() {
        let xs: [f64; 3] = [0.5, -1.25e-7, 3.0];
        let values = PredictiveValues::Gaussian(
            xs.iter().map(|x| PredictiveGaussian::new(x.sin(), 0.1 + x * x).unwrap()).collect(),
        );
        let mut buf = Vec::new();
        write_predictive_csv(&mut buf, &xs, 1, &values).unwrap();
        let (rx, d, rv) = read_predictive_csv(buf.as_slice()).unwrap();
        assert_eq!((rx.as_slice(), d), (&xs[..], 1));
        assert_eq!(rv, values);

        let xs = [0.0, 1.0, 2.0, 3.0];
        let values = PredictiveValues::Categorical(vec![
            PredictiveCategorical::new(vec![0.1, 0.9]).unwrap(),
            PredictiveCategorical::new(vec![1.0 / 3.0, 2.0 / 3.0]).unwrap(),
        ]);
        let mut buf = Vec::new();
        write_predictive_csv(&mut buf, &xs, 2, &values).unwrap();
        let (rx, d, rv) = read_predictive_csv(buf.as_slice()).unwrap();
        assert_eq!((rx.as_slice(), d), (&xs[..], 2));
        assert_eq!(rv, values);

        assert!(read_predictive_csv("x,mu_hat,sigma2_hat\n0,1,-1\n".as_bytes()).is_err());
        assert!(read_predictive_csv("x,foo\n0,1\n".as_bytes()).is_err());
    }

    proptest! {
        #[test]
        fn epistemic_term_is_non_negative(
            comps in prop::collection::vec((-5.0f64..5.0, 0.01f64..4.0), 1..10)
        ) {
            let comps: Vec<_> = comps.into_iter().map(|(m, s)| g(m, s)).collect();
            let p = collapse_gaussian_mixture(&comps).unwrap();
            let aleatoric = comps.iter().map(|c| c.sigma2()).sum::<f64>() / comps.len() as f64;
            prop_assert!(p.sigma2_hat() >= aleatoric * (1.0 - 1e-12));
            let all_equal = comps.iter().all(|c| c.mu == comps[0].mu);
            if all_equal {
                prop_assert!((p.sigma2_hat() - aleatoric).abs() <= 1e-12 * aleatoric);
            } else {
                prop_assert!(p.sigma2_hat() > aleatoric);
            }
        }

        #[test]
        fn averaging_preserves_simplex(
            logits in prop::collection::vec(prop::collection::vec(-20.0f64..20.0, 4), 1..8)
        ) {
            let comps: Vec<_> = logits.iter().map(|l| CategoricalPrediction::from_logits(l)).collect();
            let avg = average_categorical(&comps).unwrap();
            let sum: f64 = avg.probs().iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-12);
            prop_assert!(avg.probs().iter().all(|p| *p >= 0.0));
        }
    }
}
