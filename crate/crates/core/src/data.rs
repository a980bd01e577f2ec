//! Toy data generators, datasets and CSV fixtures.
//!
//! # CSV schemas
//!
//! Regression fixture: header `mu,sigma2,target`, one prediction per row.
//!
//! Classification fixture: header `p_0,...,p_{C-1},label`, one prediction per
//! row, `label` a zero-based class index.
//!
//! Dataset: header `x_0[,x_1,...],y`; `y` is a real target or a class index.
//!
//! Values are written with 17 significant digits so a save/load round trip
//! is bit-exact.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::models::{CategoricalPrediction, GaussianPrediction};
use crate::rng::rng_from_seed;

#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    Real(Vec<f64>),
    Class { labels: Vec<usize>, classes: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    input_dim: usize,
    /// Row-major `len x input_dim`.
    inputs: Vec<f64>,
    targets: Targets,
    seed: u64,
    generator: String,
}

impl Dataset {
    pub fn regression(
        input_dim: usize,
        inputs: Vec<f64>,
        targets: Vec<f64>,
        seed: u64,
        generator: &str,
    ) -> Result<Self> {
        Self::build(input_dim, inputs, Targets::Real(targets), seed, generator)
    }

    pub fn classification(
        input_dim: usize,
        inputs: Vec<f64>,
        labels: Vec<usize>,
        classes: usize,
        seed: u64,
        generator: &str,
    ) -> Result<Self> {
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Support(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        Self::build(
            input_dim,
            inputs,
            Targets::Class { labels, classes },
            seed,
            generator,
        )
    }

    fn build(
        input_dim: usize,
        inputs: Vec<f64>,
        targets: Targets,
        seed: u64,
        generator: &str,
    ) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::config("input_dim", "must be positive"));
        }
        let n = match &targets {
            Targets::Real(y) => y.len(),
            Targets::Class { labels, .. } => labels.len(),
        };
        if inputs.len() != n * input_dim {
            return Err(Error::DimensionMismatch {
                context: "dataset inputs",
                expected: n * input_dim,
                found: inputs.len(),
            });
        }
        Ok(Self {
            input_dim,
            inputs,
            targets,
            seed,
            generator: generator.to_string(),
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len() / self.input_dim
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn input(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.input_dim..(i + 1) * self.input_dim]
    }

    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    pub fn targets(&self) -> &Targets {
        &self.targets
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn generator(&self) -> &str {
        &self.generator
    }

    /// Row-major inputs of the selected rows.
    pub fn gather_inputs(&self, indices: &[usize]) -> Vec<f64> {
        let mut out = Vec::with_capacity(indices.len() * self.input_dim);
        for &i in indices {
            out.extend_from_slice(self.input(i));
        }
        out
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = BufWriter::new(writer);
        let header: Vec<String> = (0..self.input_dim).map(|d| format!("x_{d}")).collect();
        writeln!(w, "{},y", header.join(","))?;
        for i in 0..self.len() {
            let xs: Vec<String> = self.input(i).iter().map(|v| fmt_f64(*v)).collect();
            let y = match &self.targets {
                Targets::Real(y) => fmt_f64(y[i]),
                Targets::Class { labels, .. } => labels[i].to_string(),
            };
            writeln!(w, "{},{y}", xs.join(","))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(File::create(path)?)
    }

    /// Parse a dataset CSV. With `classes = Some(c)` the `y` column is read as
    /// class labels, otherwise as real targets.
    pub fn read_csv<R: Read>(reader: R, classes: Option<usize>) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let header = rdr.headers().map_err(csv_error)?.clone();
        let cols: Vec<&str> = header.iter().collect();
        let input_dim = cols.len().saturating_sub(1);
        let expected: Vec<String> = (0..input_dim)
            .map(|d| format!("x_{d}"))
            .chain(std::iter::once("y".to_string()))
            .collect();
        if input_dim == 0 || cols != expected {
            return Err(Error::Parse {
                line: 1,
                message: format!("expected header `{}`", expected.join(",")),
            });
        }
        let mut inputs = Vec::new();
        let mut reals = Vec::new();
        let mut labels = Vec::new();
        for record in rdr.records() {
            let record = record.map_err(csv_error)?;
            let line = record_line(&record);
            for d in 0..input_dim {
                inputs.push(parse_f64(&record[d], line, &cols[d])?);
            }
            let y = &record[input_dim];
            match classes {
                Some(c) => {
                    let label = parse_label(y, line)?;
                    if label >= c {
                        return Err(invariant(line, "y", format!("label {label} >= {c} classes")));
                    }
                    labels.push(label);
                }
                None => reals.push(parse_f64(y, line, "y")?),
            }
        }
        match classes {
            Some(c) => Dataset::classification(input_dim, inputs, labels, c, 0, "csv"),
            None => Dataset::regression(input_dim, inputs, reals, 0, "csv"),
        }
    }
}

/// Mean of the toy regression generator: `sin(x)`.
pub fn toy_regression_mean(x: f64) -> f64 {
    x.sin()
}

/// Noise standard deviation of the toy regression generator:
/// `0.15 / (1 + exp(-x))`.
pub fn toy_regression_std(x: f64) -> f64 {
    0.15 / (1.0 + (-x).exp())
}

/// Sinusoid with input-dependent Gaussian noise, `x ~ Uniform(x_range)`.
pub fn gen_toy_regression(n: usize, seed: u64, x_range: (f64, f64)) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::config("n", "must be at least 1"));
    }
    if !(x_range.0 < x_range.1) {
        return Err(Error::config("x_range", "lower bound must be below upper bound"));
    }
    let rng = &mut rng_from_seed(seed);
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for _ in 0..n {
        let x = rng.random_range(x_range.0..x_range.1);
        let eps: f64 = StandardNormal.sample(rng);
        xs.push(x);
        ys.push(toy_regression_mean(x) + toy_regression_std(x) * eps);
    }
    Dataset::regression(1, xs, ys, seed, "toy-regression")
}

pub const CLASSIFICATION_X1_RANGE: (f64, f64) = (0.0, 3.0);
pub const CLASSIFICATION_X2_RANGE: (f64, f64) = (-3.0, 3.0);

/// Decision rule of the toy classification generator: class 1 iff
/// `x2 >= 1.5 sin(pi x1 / 3)`.
pub fn toy_classification_label(x1: f64, x2: f64) -> usize {
    usize::from(x2 >= 1.5 * (PI * x1 / 3.0).sin())
}

/// Two-class problem on `[0, 3] x [-3, 3]` with exactly `n_per_class` points
/// per class, drawn by rejection until both classes are full.
pub fn gen_toy_classification(n_per_class: usize, seed: u64) -> Result<Dataset> {
    if n_per_class == 0 {
        return Err(Error::config("n_per_class", "must be at least 1"));
    }
    let rng = &mut rng_from_seed(seed);
    let mut counts = [0usize; 2];
    let mut inputs = Vec::with_capacity(4 * n_per_class);
    let mut labels = Vec::with_capacity(2 * n_per_class);
    while counts[0] < n_per_class || counts[1] < n_per_class {
        let x1 = rng.random_range(CLASSIFICATION_X1_RANGE.0..=CLASSIFICATION_X1_RANGE.1);
        let x2 = rng.random_range(CLASSIFICATION_X2_RANGE.0..=CLASSIFICATION_X2_RANGE.1);
        let label = toy_classification_label(x1, x2);
        if counts[label] < n_per_class {
            counts[label] += 1;
            inputs.push(x1);
            inputs.push(x2);
            labels.push(label);
        }
    }
    Dataset::classification(2, inputs, labels, 2, seed, "toy-classification")
}

/// Reference densities of the toy generators.
#[derive(Clone, Debug, PartialEq)]
pub enum TrueDensity {
    Gaussian { mu: f64, sigma2: f64 },
    Categorical(Vec<f64>),
}

/// Exact generator density at `x`: a Gaussian for 1-D inputs, the one-hot
/// label distribution of the decision rule for 2-D inputs.
pub fn true_generator(x: &[f64]) -> Result<TrueDensity> {
    match x {
        [x] => Ok(TrueDensity::Gaussian {
            mu: toy_regression_mean(*x),
            sigma2: toy_regression_std(*x).powi(2),
        }),
        [x1, x2] => {
            let mut p = vec![0.0; 2];
            p[toy_classification_label(*x1, *x2)] = 1.0;
            Ok(TrueDensity::Categorical(p))
        }
        _ => Err(Error::DimensionMismatch {
            context: "toy generator input",
            expected: 1,
            found: x.len(),
        }),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegressionRecord {
    pub mu: f64,
    pub sigma2: f64,
    pub target: f64,
}

impl RegressionRecord {
    pub fn prediction(&self) -> GaussianPrediction {
        GaussianPrediction {
            mu: self.mu,
            log_sigma2: self.sigma2.ln(),
        }
    }
}

/// Externally produced predictions, for metric-only evaluation.
#[derive(Clone, Debug, PartialEq)]
pub enum PredictionFixture {
    Regression(Vec<RegressionRecord>),
    Classification(Vec<(CategoricalPrediction, usize)>),
}

impl PredictionFixture {
    pub fn len(&self) -> usize {
        match self {
            PredictionFixture::Regression(r) => r.len(),
            PredictionFixture::Classification(r) => r.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn write<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = BufWriter::new(writer);
        match self {
            PredictionFixture::Regression(records) => {
                writeln!(w, "mu,sigma2,target")?;
                for r in records {
                    writeln!(w, "{},{},{}", fmt_f64(r.mu), fmt_f64(r.sigma2), fmt_f64(r.target))?;
                }
            }
            PredictionFixture::Classification(records) => {
                let classes = records.first().map_or(2, |(p, _)| p.num_classes());
                let header: Vec<String> = (0..classes).map(|k| format!("p_{k}")).collect();
                writeln!(w, "{},label", header.join(","))?;
                for (p, label) in records {
                    let probs: Vec<String> = p.probs().iter().map(|v| fmt_f64(*v)).collect();
                    writeln!(w, "{},{label}", probs.join(","))?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let header = rdr.headers().map_err(csv_error)?.clone();
        let cols: Vec<&str> = header.iter().collect();
        if cols == ["mu", "sigma2", "target"] {
            let mut records = Vec::new();
            for record in rdr.records() {
                let record = record.map_err(csv_error)?;
                let line = record_line(&record);
                let mu = parse_f64(&record[0], line, "mu")?;
                let sigma2 = parse_f64(&record[1], line, "sigma2")?;
                let target = parse_f64(&record[2], line, "target")?;
                if !(sigma2 > 0.0) {
                    return Err(invariant(line, "sigma2", format!("must be > 0, got {sigma2}")));
                }
                records.push(RegressionRecord { mu, sigma2, target });
            }
            return Ok(PredictionFixture::Regression(records));
        }

        let classes = cols.len().saturating_sub(1);
        let expected: Vec<String> = (0..classes)
            .map(|k| format!("p_{k}"))
            .chain(std::iter::once("label".to_string()))
            .collect();
        if classes < 2 || cols != expected {
            return Err(Error::Parse {
                line: 1,
                message: "expected header `mu,sigma2,target` or `p_0,...,p_{C-1},label` with C >= 2"
                    .into(),
            });
        }
        let mut records = Vec::new();
        for record in rdr.records() {
            let record = record.map_err(csv_error)?;
            let line = record_line(&record);
            let mut probs = Vec::with_capacity(classes);
            for k in 0..classes {
                let p = parse_f64(&record[k], line, cols[k])?;
                if p < 0.0 {
                    return Err(invariant(line, cols[k], format!("must be >= 0, got {p}")));
                }
                probs.push(p);
            }
            let label = parse_label(&record[classes], line)?;
            if label >= classes {
                return Err(invariant(line, "label", format!("{label} >= {classes} classes")));
            }
            let total: f64 = probs.iter().sum();
            let prediction = CategoricalPrediction::new(probs)
                .map_err(|_| invariant(line, "p_*", format!("probabilities sum to {total}, not 1")))?;
            records.push((prediction, label));
        }
        Ok(PredictionFixture::Classification(records))
    }

    pub fn parse_str(s: &str) -> Result<Self> {
        Self::read(s.as_bytes())
    }
}

pub fn save_fixture(fixture: &PredictionFixture, path: &Path) -> Result<()> {
    fixture.write(File::create(path)?)
}

pub fn load_fixture(path: &Path) -> Result<PredictionFixture> {
    PredictionFixture::read(File::open(path)?)
}

/// 17 significant digits; parses back to the identical `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn csv_error(err: csv::Error) -> Error {
    let line = err.position().map_or(0, |p| p.line());
    let message = match err.kind() {
        csv::ErrorKind::UnequalLengths {
            expected_len, len, ..
        } => format!("expected {expected_len} fields, found {len}"),
        csv::ErrorKind::Utf8 { .. } => "invalid UTF-8".to_string(),
        _ => err.to_string(),
    };
    Error::Parse { line, message }
}

fn record_line(record: &csv::StringRecord) -> u64 {
    record.position().map_or(0, |p| p.line())
}

fn parse_f64(s: &str, line: u64, field: &str) -> Result<f64> {
    let v: f64 = s.parse().map_err(|_| Error::Parse {
        line,
        message: format!("field `{field}`: `{s}` is not a number"),
    })?;
    if !v.is_finite() {
        return Err(invariant(line, field, "must be finite".to_string()));
    }
    Ok(v)
}

fn parse_label(s: &str, line: u64) -> Result<usize> {
    s.parse().map_err(|_| Error::Parse {
        line,
        message: format!("`{s}` is not a class index"),
    })
}

fn invariant(line: u64, field: &str, reason: String) -> Error {
    Error::Invariant {
        line,
        field: field.to_string(),
        reason,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn regression_generator_closed_form() {
        assert_eq!(toy_regression_mean(0.0), 0.0);
        assert!((toy_regression_std(0.0) - 0.075).abs() < 1e-15);
        assert!((toy_regression_std(50.0) - 0.15).abs() < 1e-15);
        assert!((toy_regression_mean(PI / 2.0) - 1.0).abs() < 1e-15);
        let mut last = 0.0;
        for i in -100..=100 {
            let s = toy_regression_std(i as f64 * 0.1);
            assert!(s > last);
            last = s;
        }
    }

    #[test]
    fn regression_generator_window_statistics() {
        // Condition on a narrow window around x = 0 and compare with the
        // closed-form mean 0 and std 0.075.
        let data = gen_toy_regression(100_000, 1, (-3.0, 3.0)).unwrap();
        let Targets::Real(ys) = data.targets() else { unreachable!() };
        let window: Vec<f64> = (0..data.len())
            .filter(|&i| data.input(i)[0].abs() <= 0.01)
            .map(|i| ys[i])
            .collect();
        let n = window.len() as f64;
        assert!(n > 100.0);
        let mean = window.iter().sum::<f64>() / n;
        let var = window.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let sigma = 0.075;
        let se = var.sqrt() / n.sqrt();
        assert!(mean.abs() < 3.0 * se, "mean {mean}");
        // SE of the sample std for Gaussian data is about sigma / sqrt(2n).
        let std = var.sqrt();
        assert!((std - sigma).abs() < 3.0 * sigma / (2.0 * n).sqrt(), "std {std}");
    }

    #[test]
    fn regression_generator_support_and_determinism() {
        let a = gen_toy_regression(500, 3, (-3.0, 3.0)).unwrap();
        let b = gen_toy_regression(500, 3, (-3.0, 3.0)).unwrap();
        assert_eq!(a, b);
        assert!(a.inputs().iter().all(|x| (-3.0..3.0).contains(x)));
        assert!(gen_toy_regression(0, 3, (-3.0, 3.0)).is_err());
    }

    #[test]
    fn classification_generator() {
        let data = gen_toy_classification(520, 0).unwrap();
        assert_eq!(data.len(), 1040);
        let Targets::Class { labels, classes } = data.targets() else { unreachable!() };
        assert_eq!(*classes, 2);
        let ones = labels.iter().filter(|&&l| l == 1).count();
        assert_eq!((labels.len() - ones, ones), (520, 520));
        for i in 0..data.len() {
            let x = data.input(i);
            assert!((0.0..=3.0).contains(&x[0]) && (-3.0..=3.0).contains(&x[1]));
            let TrueDensity::Categorical(p) = true_generator(x).unwrap() else { unreachable!() };
            assert_eq!(p[labels[i]], 1.0);
        }
        let again = gen_toy_classification(520, 0).unwrap();
        assert_eq!(data, again);
    }

    #[test]
    fn fixture_round_trip_is_bit_exact() {
        let mut rng = rng_from_seed(5);
        let regression = PredictionFixture::Regression(
            (0..50)
                .map(|_| RegressionRecord {
                    mu: rng.random_range(-1e3..1e3),
                    sigma2: rng.random_range(1e-300..1e3),
                    target: rng.random::<f64>() * 1e-17,
                })
                .collect(),
        );
        let mut buf = Vec::new();
        regression.write(&mut buf).unwrap();
        assert_eq!(PredictionFixture::read(buf.as_slice()).unwrap(), regression);

        let classification = PredictionFixture::Classification(vec![
            (CategoricalPrediction::new(vec![0.1, 0.2, 0.7]).unwrap(), 2),
            (CategoricalPrediction::new(vec![1.0, 0.0, 0.0]).unwrap(), 1),
        ]);
        let mut buf = Vec::new();
        classification.write(&mut buf).unwrap();
        assert_eq!(PredictionFixture::read(buf.as_slice()).unwrap(), classification);
    }

    #[test]
    fn malformed_row_names_the_line() {
        let err = PredictionFixture::parse_str("mu,sigma2,target\n0,1,0\n0,abc,1\n").unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        let err = PredictionFixture::parse_str("mu,sigma2,target\n0,1\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err:?}");
    }

    #[test]
    fn invalid_sigma2_names_the_field() {
        let err = PredictionFixture::parse_str("mu,sigma2,target\n0,1,0\n0,0,1\n").unwrap_err();
        match err {
            Error::Invariant { line, field, .. } => {
                assert_eq!(line, 3);
                assert_eq!(field, "sigma2");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn classification_fixture_checks() {
        assert!(matches!(
            PredictionFixture::parse_str("p_0,p_1,label\n0.5,0.6,0\n"),
            Err(Error::Invariant { .. })
        ));
        assert!(matches!(
            PredictionFixture::parse_str("p_0,p_1,label\n0.5,0.5,2\n"),
            Err(Error::Invariant { .. })
        ));
        assert!(PredictionFixture::parse_str("a,b\n1,2\n").is_err());
    }

    #[test]
    fn dataset_csv_round_trip() {
        let data = gen_toy_classification(5, 2).unwrap();
        let mut buf = Vec::new();
        data.write_csv(&mut buf).unwrap();
        let back = Dataset::read_csv(buf.as_slice(), Some(2)).unwrap();
        assert_eq!(back.inputs(), data.inputs());
        assert_eq!(back.targets(), data.targets());

        let data = gen_toy_regression(7, 2, (-3.0, 3.0)).unwrap();
        let mut buf = Vec::new();
        data.write_csv(&mut buf).unwrap();
        let back = Dataset::read_csv(buf.as_slice(), None).unwrap();
        assert_eq!(back.targets(), data.targets());
    }
}
