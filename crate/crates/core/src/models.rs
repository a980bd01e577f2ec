//! Probabilistic output heads, MAP losses and the potential energy.
//!
//! The regression model is a pair of networks, one for the mean and one for
//! the log-variance. The classification model is a single network followed by
//! a softmax. Samplers see either model through [`ModelFamily`], which works
//! on one flat parameter vector (for regression: mean-network parameters
//! followed by log-variance-network parameters).

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Targets};
use crate::error::{Error, Result};
use crate::nn::{self, ForwardMode, MlpArchitecture, ParamVector};
use crate::rng::SeededRng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianPrediction {
    pub mu: f64,
    pub log_sigma2: f64,
}

impl GaussianPrediction {
    pub fn sigma2(&self) -> f64 {
        self.log_sigma2.exp()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoricalPrediction {
    probs: Vec<f64>,
}

impl CategoricalPrediction {
    /// Wrap a probability vector; entries must be non-negative and sum to one
    /// within `1e-9`.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Empty("categorical prediction"));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::Support(
                "probabilities must be finite and non-negative".into(),
            ));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Support(format!("probabilities sum to {total}")));
        }
        Ok(Self { probs })
    }

    pub fn from_logits(logits: &[f64]) -> Self {
        Self {
            probs: softmax(logits),
        }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn num_classes(&self) -> usize {
        self.probs.len()
    }

    /// Index and value of the largest probability.
    pub fn max_confidence(&self) -> (usize, f64) {
        self.probs
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, p)| {
                if p > best.1 {
                    (i, p)
                } else {
                    best
                }
            })
    }
}

/// Softmax with the maximum logit subtracted first.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianModel {
    pub arch_mu: MlpArchitecture,
    pub arch_sigma: MlpArchitecture,
    pub params_mu: ParamVector,
    pub params_sigma: ParamVector,
}

impl GaussianModel {
    pub fn new(
        arch_mu: MlpArchitecture,
        arch_sigma: MlpArchitecture,
        params_mu: ParamVector,
        params_sigma: ParamVector,
    ) -> Result<Self> {
        check_gaussian_archs(&arch_mu, &arch_sigma)?;
        if params_mu.len() != arch_mu.num_params() {
            return Err(Error::DimensionMismatch {
                context: "mean-network parameters",
                expected: arch_mu.num_params(),
                found: params_mu.len(),
            });
        }
        if params_sigma.len() != arch_sigma.num_params() {
            return Err(Error::DimensionMismatch {
                context: "log-variance-network parameters",
                expected: arch_sigma.num_params(),
                found: params_sigma.len(),
            });
        }
        Ok(Self {
            arch_mu,
            arch_sigma,
            params_mu,
            params_sigma,
        })
    }

    pub fn squared_norm(&self) -> f64 {
        self.params_mu.squared_norm() + self.params_sigma.squared_norm()
    }
}

fn check_gaussian_archs(mu: &MlpArchitecture, sigma: &MlpArchitecture) -> Result<()> {
    if mu.input_dim() != sigma.input_dim() {
        return Err(Error::InvalidArchitecture(
            "mean and log-variance networks must share the input dimension".into(),
        ));
    }
    if mu.output_dim() != 1 || sigma.output_dim() != 1 {
        return Err(Error::InvalidArchitecture(
            "mean and log-variance networks must have scalar output".into(),
        ));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct CategoricalModel {
    pub arch: MlpArchitecture,
    pub params: ParamVector,
}

impl CategoricalModel {
    pub fn new(arch: MlpArchitecture, params: ParamVector) -> Result<Self> {
        if arch.output_dim() < 2 {
            return Err(Error::InvalidArchitecture(
                "categorical model needs at least two classes".into(),
            ));
        }
        if params.len() != arch.num_params() {
            return Err(Error::DimensionMismatch {
                context: "categorical-network parameters",
                expected: arch.num_params(),
                found: params.len(),
            });
        }
        Ok(Self { arch, params })
    }

    pub fn num_classes(&self) -> usize {
        self.arch.output_dim()
    }
}

pub fn predict_gaussian(
    model: &GaussianModel,
    x: &[f64],
    mut mode: ForwardMode<'_>,
) -> Result<GaussianPrediction> {
    let (mu, _) = nn::forward(&model.arch_mu, &model.params_mu, x, mode.reborrow())?;
    let (s, _) = nn::forward(&model.arch_sigma, &model.params_sigma, x, mode)?;
    Ok(GaussianPrediction {
        mu: mu[0],
        log_sigma2: s[0],
    })
}

pub fn predict_categorical(
    model: &CategoricalModel,
    x: &[f64],
    mode: ForwardMode<'_>,
) -> Result<CategoricalPrediction> {
    let (logits, _) = nn::forward(&model.arch, &model.params, x, mode)?;
    Ok(CategoricalPrediction::from_logits(&logits))
}

#[derive(Clone, Debug)]
pub struct RegressionLoss {
    pub loss: f64,
    pub grad_mu: ParamVector,
    pub grad_sigma: ParamVector,
}

/// Regression MAP loss on a mini-batch.
///
/// `L = mean_i[(y_i - mu_i)^2 / sigma_i^2 + log sigma_i^2] + (1/N) theta^T theta`,
/// where theta spans both networks and `N` is the full dataset size.
pub fn map_loss_regression(
    model: &GaussianModel,
    xs: &[f64],
    ys: &[f64],
    n_total: usize,
    mut mode: ForwardMode<'_>,
) -> Result<RegressionLoss> {
    let n = ys.len();
    check_batch(n, n_total, xs.len(), model.arch_mu.input_dim())?;
    let (mu, trace_mu) = nn::forward_batch(&model.arch_mu, &model.params_mu, xs, mode.reborrow())?;
    let (s, trace_s) = nn::forward_batch(&model.arch_sigma, &model.params_sigma, xs, mode)?;
    let inv_n = 1.0 / n as f64;
    let mut data = 0.0;
    let mut d_mu = vec![0.0; n];
    let mut d_s = vec![0.0; n];
    for i in 0..n {
        let r = ys[i] - mu[i];
        let prec = (-s[i]).exp();
        data += r * r * prec + s[i];
        d_mu[i] = -2.0 * r * prec * inv_n;
        d_s[i] = (1.0 - r * r * prec) * inv_n;
    }
    let prior_w = 1.0 / n_total as f64;
    let loss = data * inv_n + prior_w * model.squared_norm();
    if !loss.is_finite() {
        return Err(Error::non_finite("regression MAP loss"));
    }
    let mut grad_mu = nn::backward(&model.arch_mu, &model.params_mu, &trace_mu, &d_mu)?;
    let mut grad_sigma = nn::backward(&model.arch_sigma, &model.params_sigma, &trace_s, &d_s)?;
    for (g, p) in grad_mu.iter_mut().zip(model.params_mu.iter()) {
        *g += 2.0 * prior_w * p;
    }
    for (g, p) in grad_sigma.iter_mut().zip(model.params_sigma.iter()) {
        *g += 2.0 * prior_w * p;
    }
    Ok(RegressionLoss {
        loss,
        grad_mu,
        grad_sigma,
    })
}

/// Classification MAP loss on a mini-batch: batch-mean cross-entropy plus
/// `(1/(2N)) theta^T theta`.
pub fn map_loss_classification(
    model: &CategoricalModel,
    xs: &[f64],
    labels: &[usize],
    n_total: usize,
    mode: ForwardMode<'_>,
) -> Result<(f64, ParamVector)> {
    let n = labels.len();
    check_batch(n, n_total, xs.len(), model.arch.input_dim())?;
    let classes = model.num_classes();
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Support(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    let (logits, trace) = nn::forward_batch(&model.arch, &model.params, xs, mode)?;
    let inv_n = 1.0 / n as f64;
    let mut data = 0.0;
    let mut d_logits = vec![0.0; logits.len()];
    for (i, (row, &label)) in logits.chunks_exact(classes).zip(labels).enumerate() {
        let logp = log_softmax(row);
        data -= logp[label];
        for k in 0..classes {
            let target = if k == label { 1.0 } else { 0.0 };
            d_logits[i * classes + k] = (logp[k].exp() - target) * inv_n;
        }
    }
    let prior_w = 0.5 / n_total as f64;
    let loss = data * inv_n + prior_w * model.params.squared_norm();
    if !loss.is_finite() {
        return Err(Error::non_finite("classification MAP loss"));
    }
    let mut grad = nn::backward(&model.arch, &model.params, &trace, &d_logits)?;
    for (g, p) in grad.iter_mut().zip(model.params.iter()) {
        *g += 2.0 * prior_w * p;
    }
    Ok((loss, grad))
}

fn check_batch(n: usize, n_total: usize, xs_len: usize, input_dim: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::Empty("mini-batch"));
    }
    if n_total < n {
        return Err(Error::config(
            "n_total",
            format!("dataset size {n_total} is smaller than the batch size {n}"),
        ));
    }
    if xs_len != n * input_dim {
        return Err(Error::DimensionMismatch {
            context: "batch inputs",
            expected: n * input_dim,
            found: xs_len,
        });
    }
    Ok(())
}

/// Architecture of one of the two supported model families.
///
/// All methods take the flat, concatenated parameter vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum ModelFamily {
    Gaussian {
        mu: MlpArchitecture,
        log_sigma2: MlpArchitecture,
    },
    Categorical {
        arch: MlpArchitecture,
    },
}

/// Per-input output of either head.
#[derive(Clone, Debug, PartialEq)]
pub enum HeadPrediction {
    Gaussian(GaussianPrediction),
    Categorical(CategoricalPrediction),
}

impl ModelFamily {
    pub fn gaussian(mu: MlpArchitecture, log_sigma2: MlpArchitecture) -> Result<Self> {
        check_gaussian_archs(&mu, &log_sigma2)?;
        Ok(ModelFamily::Gaussian { mu, log_sigma2 })
    }

    pub fn categorical(arch: MlpArchitecture) -> Result<Self> {
        if arch.output_dim() < 2 {
            return Err(Error::InvalidArchitecture(
                "categorical model needs at least two classes".into(),
            ));
        }
        Ok(ModelFamily::Categorical { arch })
    }

    pub fn input_dim(&self) -> usize {
        match self {
            ModelFamily::Gaussian { mu, .. } => mu.input_dim(),
            ModelFamily::Categorical { arch } => arch.input_dim(),
        }
    }

    pub fn num_params(&self) -> usize {
        match self {
            ModelFamily::Gaussian { mu, log_sigma2 } => mu.num_params() + log_sigma2.num_params(),
            ModelFamily::Categorical { arch } => arch.num_params(),
        }
    }

    pub fn has_dropout(&self) -> bool {
        match self {
            ModelFamily::Gaussian { mu, log_sigma2 } => {
                mu.dropout().is_some() || log_sigma2.dropout().is_some()
            }
            ModelFamily::Categorical { arch } => arch.dropout().is_some(),
        }
    }

    /// Fresh parameters from the default initializer, one network after the
    /// other.
    pub fn init_params(&self, rng: &mut SeededRng) -> ParamVector {
        match self {
            ModelFamily::Gaussian { mu, log_sigma2 } => {
                let mut p = nn::init_params(mu, rng).into_inner();
                p.extend(nn::init_params(log_sigma2, rng).into_inner());
                p.into()
            }
            ModelFamily::Categorical { arch } => nn::init_params(arch, rng),
        }
    }

    fn check_params(&self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(Error::DimensionMismatch {
                context: "model parameters",
                expected: self.num_params(),
                found: params.len(),
            });
        }
        Ok(())
    }

    pub fn gaussian_model(&self, params: &[f64]) -> Result<GaussianModel> {
        self.check_params(params)?;
        match self {
            ModelFamily::Gaussian { mu, log_sigma2 } => {
                let (pm, ps) = params.split_at(mu.num_params());
                GaussianModel::new(
                    mu.clone(),
                    log_sigma2.clone(),
                    pm.to_vec().into(),
                    ps.to_vec().into(),
                )
            }
            ModelFamily::Categorical { .. } => Err(Error::InvalidArchitecture(
                "expected a Gaussian model family".into(),
            )),
        }
    }

    pub fn categorical_model(&self, params: &[f64]) -> Result<CategoricalModel> {
        self.check_params(params)?;
        match self {
            ModelFamily::Categorical { arch } => {
                CategoricalModel::new(arch.clone(), params.to_vec().into())
            }
            ModelFamily::Gaussian { .. } => Err(Error::InvalidArchitecture(
                "expected a categorical model family".into(),
            )),
        }
    }

    /// MAP loss and gradient on the dataset rows in `indices`.
    pub fn map_loss(
        &self,
        params: &[f64],
        dataset: &Dataset,
        indices: &[usize],
        mode: ForwardMode<'_>,
    ) -> Result<(f64, ParamVector)> {
        check_indices(dataset, indices)?;
        let xs = dataset.gather_inputs(indices);
        match (self, dataset.targets()) {
            (ModelFamily::Gaussian { .. }, Targets::Real(ys)) => {
                let model = self.gaussian_model(params)?;
                let ys: Vec<f64> = indices.iter().map(|&i| ys[i]).collect();
                let out = map_loss_regression(&model, &xs, &ys, dataset.len(), mode)?;
                let mut grad = out.grad_mu.into_inner();
                grad.extend(out.grad_sigma.into_inner());
                Ok((out.loss, grad.into()))
            }
            (ModelFamily::Categorical { .. }, Targets::Class { labels, .. }) => {
                let model = self.categorical_model(params)?;
                let labels: Vec<usize> = indices.iter().map(|&i| labels[i]).collect();
                map_loss_classification(&model, &xs, &labels, dataset.len(), mode)
            }
            _ => Err(Error::InvalidArchitecture(
                "model family does not match the dataset's target type".into(),
            )),
        }
    }

    /// Summed negative log-likelihood over `indices` and its gradient
    /// (deterministic forward passes).
    pub fn nll_sum(
        &self,
        params: &[f64],
        dataset: &Dataset,
        indices: &[usize],
    ) -> Result<(f64, ParamVector)> {
        self.check_params(params)?;
        check_indices(dataset, indices)?;
        if indices.is_empty() {
            return Ok((0.0, ParamVector::zeros(params.len())));
        }
        let xs = dataset.gather_inputs(indices);
        let mut grad = vec![0.0; params.len()];
        let nll = match (self, dataset.targets()) {
            (ModelFamily::Gaussian { mu, log_sigma2 }, Targets::Real(ys)) => {
                let (pm, ps) = params.split_at(mu.num_params());
                let (m, tm) = nn::forward_batch(mu, pm, &xs, ForwardMode::Deterministic)?;
                let (s, ts) = nn::forward_batch(log_sigma2, ps, &xs, ForwardMode::Deterministic)?;
                let mut total = 0.0;
                let mut d_m = vec![0.0; indices.len()];
                let mut d_s = vec![0.0; indices.len()];
                for (k, &i) in indices.iter().enumerate() {
                    let r = ys[i] - m[k];
                    let prec = (-s[k]).exp();
                    total += 0.5 * (r * r * prec + s[k] + (2.0 * PI).ln());
                    d_m[k] = -r * prec;
                    d_s[k] = 0.5 * (1.0 - r * r * prec);
                }
                let (gm, gs) = grad.split_at_mut(mu.num_params());
                nn::backward_into(mu, pm, &tm, &d_m, gm)?;
                nn::backward_into(log_sigma2, ps, &ts, &d_s, gs)?;
                total
            }
            (ModelFamily::Categorical { arch }, Targets::Class { labels, .. }) => {
                let classes = arch.output_dim();
                let (logits, trace) = nn::forward_batch(arch, params, &xs, ForwardMode::Deterministic)?;
                let mut total = 0.0;
                let mut d = vec![0.0; logits.len()];
                for (k, (row, &i)) in logits.chunks_exact(classes).zip(indices).enumerate() {
                    let label = labels[i];
                    let logp = log_softmax(row);
                    total -= logp[label];
                    for c in 0..classes {
                        let target = if c == label { 1.0 } else { 0.0 };
                        d[k * classes + c] = logp[c].exp() - target;
                    }
                }
                nn::backward_into(arch, params, &trace, &d, &mut grad)?;
                total
            }
            _ => {
                return Err(Error::InvalidArchitecture(
                    "model family does not match the dataset's target type".into(),
                ))
            }
        };
        Ok((nll, grad.into()))
    }

    /// Predictions for a row-major batch of inputs.
    pub fn predict_batch(
        &self,
        params: &[f64],
        xs: &[f64],
        mut mode: ForwardMode<'_>,
    ) -> Result<Vec<HeadPrediction>> {
        self.check_params(params)?;
        match self {
            ModelFamily::Gaussian { mu, log_sigma2 } => {
                let (pm, ps) = params.split_at(mu.num_params());
                let (m, _) = nn::forward_batch(mu, pm, xs, mode.reborrow())?;
                let (s, _) = nn::forward_batch(log_sigma2, ps, xs, mode)?;
                Ok(m.into_iter()
                    .zip(s)
                    .map(|(mu, log_sigma2)| HeadPrediction::Gaussian(GaussianPrediction { mu, log_sigma2 }))
                    .collect())
            }
            ModelFamily::Categorical { arch } => {
                let (logits, _) = nn::forward_batch(arch, params, xs, mode)?;
                Ok(logits
                    .chunks_exact(arch.output_dim())
                    .map(|row| HeadPrediction::Categorical(CategoricalPrediction::from_logits(row)))
                    .collect())
            }
        }
    }
}

fn check_indices(dataset: &Dataset, indices: &[usize]) -> Result<()> {
    match indices.iter().find(|&&i| i >= dataset.len()) {
        Some(&bad) => Err(Error::DimensionMismatch {
            context: "dataset row index",
            expected: dataset.len(),
            found: bad,
        }),
        None => Ok(()),
    }
}

/// Potential energy `U = sum_i NLL_i + theta^T theta / 2` under the standard
/// normal prior, with its exact gradient.
pub fn potential_energy(
    family: &ModelFamily,
    dataset: &Dataset,
    params: &[f64],
) -> Result<(f64, ParamVector)> {
    let all: Vec<usize> = (0..dataset.len()).collect();
    let (nll, mut grad) = family.nll_sum(params, dataset, &all)?;
    let mut u = nll;
    for (g, p) in grad.iter_mut().zip(params) {
        u += 0.5 * p * p;
        *g += p;
    }
    if !u.is_finite() {
        return Err(Error::non_finite("potential energy"));
    }
    Ok((u, grad))
}
