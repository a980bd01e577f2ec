//! Evaluation metrics: KL divergence to a reference predictive, AUSE, AUCE,
//! ECE, RMSE, Brier score and predictive entropy.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};
use statrs::function::erf::{erfc, erfc_inv};

use crate::data::fmt_f64;
use crate::error::{Error, Result};
use crate::predictive::{csv_io, PredictiveCategorical, PredictiveGaussian, PredictiveValues};

/// Uniform tensor-product grid with endpoints included.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationGrid {
    bounds: Vec<(f64, f64)>,
    resolution: usize,
}

impl EvaluationGrid {
    pub fn new(bounds: Vec<(f64, f64)>, resolution: usize) -> Result<Self> {
        if bounds.is_empty() {
            return Err(Error::config("bounds", "need at least one axis"));
        }
        if resolution < 2 {
            return Err(Error::config("resolution", "must be at least 2"));
        }
        if bounds.iter().any(|(lo, hi)| !(lo < hi) || !lo.is_finite() || !hi.is_finite()) {
            return Err(Error::config("bounds", "each axis needs finite lo < hi"));
        }
        Ok(Self { bounds, resolution })
    }

    /// `[-7, 7]`.
    pub fn regression(resolution: usize) -> Result<Self> {
        Self::new(vec![(-7.0, 7.0)], resolution)
    }

    /// `[-6, 6] x [-6, 6]`, `resolution` points per axis.
    pub fn classification(resolution: usize) -> Result<Self> {
        Self::new(vec![(-6.0, 6.0), (-6.0, 6.0)], resolution)
    }

    pub fn input_dim(&self) -> usize {
        self.bounds.len()
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn len(&self) -> usize {
        self.resolution.pow(self.bounds.len() as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn axis(&self, d: usize) -> Vec<f64> {
        let (lo, hi) = self.bounds[d];
        let n = self.resolution - 1;
        (0..=n)
            .map(|i| if i == n { hi } else { lo + (hi - lo) * i as f64 / n as f64 })
            .collect()
    }

    /// Row-major points, first axis varying slowest.
    pub fn points(&self) -> Vec<f64> {
        let axes: Vec<Vec<f64>> = (0..self.input_dim()).map(|d| self.axis(d)).collect();
        let d = self.input_dim();
        let mut out = Vec::with_capacity(self.len() * d);
        let mut idx = vec![0usize; d];
        for _ in 0..self.len() {
            out.extend(idx.iter().enumerate().map(|(k, &i)| axes[k][i]));
            for k in (0..d).rev() {
                idx[k] += 1;
                if idx[k] < self.resolution {
                    break;
                }
                idx[k] = 0;
            }
        }
        out
    }
}

/// `KL(N(mu1, s1) || N(mu2, s2))` with variances `s1`, `s2`.
pub fn kl_gaussian(p1: (f64, f64), p2: (f64, f64)) -> Result<f64> {
    let ((mu1, v1), (mu2, v2)) = (p1, p2);
    if !(v1 > 0.0) || !(v2 > 0.0) {
        return Err(Error::Support(format!("variances must be > 0, got {v1} and {v2}")));
    }
    let kl = 0.5 * (v2 / v1).ln() + (v1 + (mu1 - mu2).powi(2)) / (2.0 * v2) - 0.5;
    if !kl.is_finite() {
        return Err(Error::non_finite("Gaussian KL"));
    }
    Ok(kl.max(0.0))
}

/// `sum_k q1_k ln(q1_k / q2_k)`, with `0 ln 0 = 0`.
pub fn kl_categorical(q1: &[f64], q2: &[f64]) -> Result<f64> {
    if q1.len() != q2.len() {
        return Err(Error::DimensionMismatch {
            context: "categorical KL",
            expected: q1.len(),
            found: q2.len(),
        });
    }
    let mut kl = 0.0;
    for (k, (&a, &b)) in q1.iter().zip(q2).enumerate() {
        if a > 0.0 {
            if !(b > 0.0) {
                return Err(Error::Support(format!(
                    "reference has zero mass at class {k} where candidate has {a}"
                )));
            }
            kl += a * (a / b).ln();
        }
    }
    Ok(kl.max(0.0))
}

pub fn kl_predictive_gaussian(p: &PredictiveGaussian, q: &PredictiveGaussian) -> Result<f64> {
    kl_gaussian((p.mu_hat(), p.sigma2_hat()), (q.mu_hat(), q.sigma2_hat()))
}

pub fn kl_predictive_categorical(p: &PredictiveCategorical, q: &PredictiveCategorical) -> Result<f64> {
    kl_categorical(p.probs(), q.probs())
}

/// Unweighted mean over grid points of `KL(candidate || reference)`.
pub fn mean_kl_to_reference(candidate: &PredictiveValues, reference: &PredictiveValues) -> Result<f64> {
    if candidate.len() != reference.len() {
        return Err(Error::DimensionMismatch {
            context: "KL grid points",
            expected: reference.len(),
            found: candidate.len(),
        });
    }
    if candidate.is_empty() {
        return Err(Error::Empty("KL grid"));
    }
    let total = match (candidate, reference) {
        (PredictiveValues::Gaussian(c), PredictiveValues::Gaussian(r)) => c
            .iter()
            .zip(r)
            .map(|(p, q)| kl_predictive_gaussian(p, q))
            .sum::<Result<f64>>()?,
        (PredictiveValues::Categorical(c), PredictiveValues::Categorical(r)) => c
            .iter()
            .zip(r)
            .map(|(p, q)| kl_predictive_categorical(p, q))
            .sum::<Result<f64>>()?,
        _ => {
            return Err(Error::Invariant {
                line: 0,
                field: "predictive".into(),
                reason: "candidate and reference have different head types".into(),
            })
        }
    };
    Ok(total / candidate.len() as f64)
}

/// [`mean_kl_to_reference`] with both predictives given as functions of the
/// grid inputs.
pub fn mean_kl_on_grid<C, R>(grid: &EvaluationGrid, candidate: C, reference: R) -> Result<f64>
where
    C: FnOnce(&[f64]) -> Result<PredictiveValues>,
    R: FnOnce(&[f64]) -> Result<PredictiveValues>,
{
    let xs = grid.points();
    mean_kl_to_reference(&candidate(&xs)?, &reference(&xs)?)
}

/// How per-sample errors are pooled in a sparsification curve.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SparsificationAggregate {
    /// Errors are residuals; pooled as `sqrt(mean(e^2))`.
    Rmse,
    /// Errors are non-negative per-sample scores (e.g. Brier); pooled as the mean.
    BrierMean,
}

impl SparsificationAggregate {
    fn loss(self, e: f64) -> f64 {
        match self {
            SparsificationAggregate::Rmse => e * e,
            SparsificationAggregate::BrierMean => e,
        }
    }

    fn finish(self, mean_loss: f64) -> f64 {
        match self {
            SparsificationAggregate::Rmse => mean_loss.sqrt(),
            SparsificationAggregate::BrierMean => mean_loss,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SparsificationCurve {
    pub fractions_removed: Vec<f64>,
    pub metric_values: Vec<f64>,
    pub oracle_values: Vec<f64>,
}

impl SparsificationCurve {
    pub fn sparsification_error(&self) -> Vec<f64> {
        self.metric_values
            .iter()
            .zip(&self.oracle_values)
            .map(|(m, o)| m - o)
            .collect()
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["fraction", "value", "oracle"]).map_err(csv_io)?;
        for ((f, v), o) in self.fractions_removed.iter().zip(&self.metric_values).zip(&self.oracle_values) {
            w.write_record([fmt_f64(*f), fmt_f64(*v), fmt_f64(*o)]).map_err(csv_io)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Pooled error of the samples left after removing the `r` highest-ranked
/// ones, for every `r` in `removals`. Samples with equal rank keys are
/// removed in expectation over their orderings: the pooled loss counts the
/// surviving share of a tie group at its group mean.
fn remaining_losses(keys: &[f64], losses: &[f64], removals: &[usize]) -> Vec<f64> {
    let n = keys.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| keys[b].total_cmp(&keys[a]));
    // Tie groups as [start, end) in `order`.
    let mut group_of = vec![0usize; n];
    let mut groups: Vec<(usize, usize, f64)> = Vec::new();
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && keys[order[end]] == keys[order[start]] {
            end += 1;
        }
        let sum: f64 = order[start..end].iter().map(|&i| losses[i]).sum();
        for slot in &mut group_of[start..end] {
            *slot = groups.len();
        }
        groups.push((start, end, sum));
        start = end;
    }
    // suffix[g] = sum of losses in groups g.. (accumulated from the end).
    let mut suffix = vec![0.0; groups.len() + 1];
    for g in (0..groups.len()).rev() {
        suffix[g] = suffix[g + 1] + groups[g].2;
    }
    removals
        .iter()
        .map(|&r| {
            if r >= n {
                return 0.0;
            }
            let g = group_of[r];
            let (gs, ge, gsum) = groups[g];
            let kept_in_group = (ge - r) as f64 / (ge - gs) as f64;
            let kept = suffix[g + 1] + kept_in_group * gsum;
            kept / (n - r) as f64
        })
        .collect()
}

/// Area under the sparsification error curve.
///
/// For `steps + 1` uniform fractions `f` in `[0, 1]`, the `ceil(f n)` samples
/// with the highest uncertainty (resp. highest error, for the oracle) are
/// removed and the rest are pooled. Both curves are divided by the value at
/// `f = 0`; the AUSE is the trapezoidal area of their difference. A zero base
/// error gives AUSE 0 and all-zero curves.
pub fn ause(
    errors: &[f64],
    uncertainty: &[f64],
    aggregate: SparsificationAggregate,
    steps: usize,
) -> Result<(f64, SparsificationCurve)> {
    if errors.len() != uncertainty.len() {
        return Err(Error::DimensionMismatch {
            context: "AUSE uncertainty",
            expected: errors.len(),
            found: uncertainty.len(),
        });
    }
    if errors.len() < 2 {
        return Err(Error::Empty("AUSE needs at least two samples"));
    }
    if steps == 0 {
        return Err(Error::config("steps", "must be at least 1"));
    }
    if errors.iter().chain(uncertainty).any(|v| !v.is_finite()) {
        return Err(Error::non_finite("AUSE input"));
    }
    if aggregate == SparsificationAggregate::BrierMean && errors.iter().any(|e| *e < 0.0) {
        return Err(Error::Support("Brier errors must be non-negative".into()));
    }
    let n = errors.len();
    let losses: Vec<f64> = errors.iter().map(|&e| aggregate.loss(e)).collect();
    let fractions: Vec<f64> = (0..=steps).map(|i| i as f64 / steps as f64).collect();
    let removals: Vec<usize> = (0..=steps).map(|i| (i * n).div_ceil(steps)).collect();

    let by_unc = remaining_losses(uncertainty, &losses, &removals);
    let by_err = remaining_losses(&losses, &losses, &removals);
    let base = aggregate.finish(by_unc[0]);
    let (metric_values, oracle_values): (Vec<f64>, Vec<f64>) = if base > 0.0 {
        (
            by_unc.iter().map(|&l| aggregate.finish(l) / base).collect(),
            by_err.iter().map(|&l| aggregate.finish(l) / base).collect(),
        )
    } else {
        (vec![0.0; steps + 1], vec![0.0; steps + 1])
    };
    let curve = SparsificationCurve {
        fractions_removed: fractions,
        metric_values,
        oracle_values,
    };
    let err = curve.sparsification_error();
    let area = trapezoid(&curve.fractions_removed, &err);
    Ok((area, curve))
}

fn trapezoid(x: &[f64], y: &[f64]) -> f64 {
    x.windows(2)
        .zip(y.windows(2))
        .map(|(xw, yw)| 0.5 * (xw[1] - xw[0]) * (yw[0] + yw[1]))
        .sum()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CalibrationCurve {
    pub confidence_levels: Vec<f64>,
    pub empirical_coverage: Vec<f64>,
}

impl CalibrationCurve {
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["p", "p_hat"]).map_err(csv_io)?;
        for (p, q) in self.confidence_levels.iter().zip(&self.empirical_coverage) {
            w.write_record([fmt_f64(*p), fmt_f64(*q)]).map_err(csv_io)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Number of confidence levels used by [`auce`].
pub const AUCE_LEVELS: usize = 100;

/// `p_k = k / 101`, `k = 1..=100`: evenly spaced, both endpoints excluded.
pub fn auce_levels() -> Vec<f64> {
    (1..=AUCE_LEVELS)
        .map(|k| k as f64 / (AUCE_LEVELS + 1) as f64)
        .collect()
}

/// Area under the calibration error curve for Gaussian predictions.
///
/// At level `p` the interval is `mu +- Phi^-1((p + 1) / 2) sigma` (closed);
/// `p_hat` is the fraction of targets it covers. AUCE is the mean of
/// `|p - p_hat|` over the levels of [`auce_levels`].
pub fn auce(predictions: &[PredictiveGaussian], targets: &[f64]) -> Result<(f64, CalibrationCurve)> {
    let pairs: Vec<(f64, f64, f64)> = predictions
        .iter()
        .map(|p| (p.mu_hat(), p.sigma_hat()))
        .zip(targets)
        .map(|((m, s), &y)| (m, s, y))
        .collect();
    if predictions.len() != targets.len() {
        return Err(Error::DimensionMismatch {
            context: "AUCE targets",
            expected: predictions.len(),
            found: targets.len(),
        });
    }
    auce_raw(&pairs)
}

/// As [`auce`], on `(mu, sigma, target)` triples; `sigma = 0` is allowed and
/// gives the point interval `{mu}`.
pub fn auce_raw(records: &[(f64, f64, f64)]) -> Result<(f64, CalibrationCurve)> {
    if records.is_empty() {
        return Err(Error::Empty("AUCE input"));
    }
    if records.iter().any(|(m, s, y)| !m.is_finite() || !s.is_finite() || !y.is_finite() || *s < 0.0) {
        return Err(Error::non_finite("AUCE input"));
    }
    // Standardized distances; coverage at level p is #{z <= z_p} / n.
    let mut z: Vec<f64> = records
        .iter()
        .map(|&(m, s, y)| {
            let d = (y - m).abs();
            if d == 0.0 {
                0.0
            } else if s == 0.0 {
                f64::INFINITY
            } else {
                d / s
            }
        })
        .collect();
    z.sort_by(f64::total_cmp);
    let n = z.len() as f64;
    let levels = auce_levels();
    let coverage: Vec<f64> = levels
        .iter()
        .map(|&p| {
            let zp = std_normal_quantile(0.5 * (p + 1.0)).expect("level in (0, 1)");
            z.partition_point(|&v| v <= zp) as f64 / n
        })
        .collect();
    let value = levels
        .iter()
        .zip(&coverage)
        .map(|(p, q)| (p - q).abs())
        .sum::<f64>()
        / levels.len() as f64;
    Ok((
        value,
        CalibrationCurve {
            confidence_levels: levels,
            empirical_coverage: coverage,
        },
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ReliabilityBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    /// Mean max-confidence in the bin; 0 when empty.
    pub confidence: f64,
    /// Fraction of correct argmax predictions; 0 when empty.
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReliabilityBins {
    pub bins: Vec<ReliabilityBin>,
}

impl ReliabilityBins {
    pub fn total(&self) -> usize {
        self.bins.iter().map(|b| b.count).sum()
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["bin", "count", "conf", "acc"]).map_err(csv_io)?;
        for (i, b) in self.bins.iter().enumerate() {
            w.write_record([i.to_string(), b.count.to_string(), fmt_f64(b.confidence), fmt_f64(b.accuracy)])
                .map_err(csv_io)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Expected calibration error with `bins` equal-width bins of max-confidence
/// over `(1/C, 1]`. A confidence of exactly `1/C` falls in the first bin.
pub fn ece(predictions: &[PredictiveCategorical], labels: &[usize], bins: usize) -> Result<(f64, ReliabilityBins)> {
    if predictions.is_empty() {
        return Err(Error::Empty("ECE input"));
    }
    if predictions.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            context: "ECE labels",
            expected: predictions.len(),
            found: labels.len(),
        });
    }
    if bins == 0 {
        return Err(Error::config("bins", "must be at least 1"));
    }
    let c = predictions[0].num_classes();
    if predictions.iter().any(|p| p.num_classes() != c) {
        return Err(Error::Support("predictions disagree on the number of classes".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Support(format!("label {bad} out of range for {c} classes")));
    }
    let lo = 1.0 / c as f64;
    let width = (1.0 - lo) / bins as f64;
    let mut count = vec![0usize; bins];
    let mut conf_sum = vec![0.0; bins];
    let mut correct = vec![0usize; bins];
    for (p, &label) in predictions.iter().zip(labels) {
        let (k, conf) = p.max_confidence();
        let b = if width > 0.0 {
            (((conf - lo) / width).ceil() as isize - 1).clamp(0, bins as isize - 1) as usize
        } else {
            0
        };
        count[b] += 1;
        conf_sum[b] += conf;
        correct[b] += usize::from(k == label);
    }
    let n = predictions.len() as f64;
    let mut value = 0.0;
    let bins: Vec<ReliabilityBin> = (0..bins)
        .map(|b| {
            let (confidence, accuracy) = if count[b] > 0 {
                (conf_sum[b] / count[b] as f64, correct[b] as f64 / count[b] as f64)
            } else {
                (0.0, 0.0)
            };
            value += count[b] as f64 / n * (accuracy - confidence).abs();
            ReliabilityBin {
                lower: lo + width * b as f64,
                upper: if b + 1 == bins { 1.0 } else { lo + width * (b + 1) as f64 },
                count: count[b],
                confidence,
                accuracy,
            }
        })
        .collect();
    Ok((value, ReliabilityBins { bins }))
}

pub fn rmse(predicted: &[f64], targets: &[f64]) -> Result<f64> {
    if predicted.len() != targets.len() {
        return Err(Error::DimensionMismatch {
            context: "RMSE targets",
            expected: predicted.len(),
            found: targets.len(),
        });
    }
    if predicted.is_empty() {
        return Err(Error::Empty("RMSE input"));
    }
    let mse = predicted
        .iter()
        .zip(targets)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / predicted.len() as f64;
    Ok(mse.sqrt())
}

/// `(sum_k (p_k - [k = label])^2, -sum_k p_k ln p_k)`.
pub fn brier_and_entropy(prediction: &PredictiveCategorical, label: usize) -> Result<(f64, f64)> {
    let probs = prediction.probs();
    if label >= probs.len() {
        return Err(Error::Support(format!(
            "label {label} out of range for {} classes",
            probs.len()
        )));
    }
    let brier = probs
        .iter()
        .enumerate()
        .map(|(k, &p)| (p - if k == label { 1.0 } else { 0.0 }).powi(2))
        .sum();
    let entropy = -probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum::<f64>();
    Ok((brier, entropy.max(0.0)))
}

pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// `Phi^-1(q)`.
pub fn std_normal_quantile(q: f64) -> Result<f64> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::Support(format!("quantile level {q} outside (0, 1)")));
    }
    Ok(-std::f64::consts::SQRT_2 * erfc_inv(2.0 * q))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepeatStats {
    pub mean: f64,
    pub std: f64,
    pub repeats: usize,
}

/// Mean and sample standard deviation (0 for a single repeat).
pub fn aggregate_repeats(values: &[f64]) -> Result<RepeatStats> {
    if values.is_empty() {
        return Err(Error::Empty("repeat values"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() == 1 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    Ok(RepeatStats {
        mean,
        std,
        repeats: values.len(),
    })
}

/// Repeat statistics of every metric for one (method, M) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub method: String,
    pub m: usize,
    pub metrics: BTreeMap<String, RepeatStats>,
}

impl MetricReport {
    pub fn new(method: impl Into<String>, m: usize) -> Self {
        Self {
            method: method.into(),
            m,
            metrics: BTreeMap::new(),
        }
    }

    pub fn record(&mut self, metric: impl Into<String>, values: &[f64]) -> Result<&RepeatStats> {
        let stats = aggregate_repeats(values)?;
        let key = metric.into();
        self.metrics.insert(key.clone(), stats);
        Ok(&self.metrics[&key])
    }
}
