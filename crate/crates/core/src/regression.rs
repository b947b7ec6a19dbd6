//! Tilted kernel density estimates and the regressions built on them.
//!
//! The density of sample-set group `g` is estimated from the whole combined
//! sample by
//!
//! ```text
//! g_hat(z) = sum_i p_i w_g(t_i) prod_l K((t_il - z_l) / h_l) / h_l
//! ```
//!
//! with `h_l = h * s_l`, where `s_l` is the pooled standard deviation of
//! coordinate `l`. The conditional mean of the response is the
//! `g_hat(x, y_c)`-weighted average of candidate responses `y_c`.
//! Nadaraya-Watson and least squares are provided as baselines.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{DrmError, Result};
use crate::estimation::FittedModel;
use crate::model::Observation;

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Smallest positive normal double, as a log.
fn ln_min_positive() -> f64 {
    f64::MIN_POSITIVE.ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kernel {
    #[default]
    Gaussian,
    Epanechnikov,
}

impl Kernel {
    pub fn log_eval(self, u: f64) -> f64 {
        match self {
            Kernel::Gaussian => -0.5 * u * u - LN_SQRT_2PI,
            Kernel::Epanechnikov => {
                if u.abs() < 1.0 {
                    (0.75 * (1.0 - u * u)).ln()
                } else {
                    f64::NEG_INFINITY
                }
            }
        }
    }

    pub fn eval(self, u: f64) -> f64 {
        match self {
            Kernel::Gaussian => (-0.5 * u * u).exp() / (2.0 * std::f64::consts::PI).sqrt(),
            Kernel::Epanechnikov => {
                if u.abs() < 1.0 {
                    0.75 * (1.0 - u * u)
                } else {
                    0.0
                }
            }
        }
    }
}

/// Weighted product-kernel density estimate on explicit points.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelDensity {
    dim: usize,
    points: Vec<f64>,
    weights: Vec<f64>,
    bandwidths: Vec<f64>,
    kernel: Kernel,
}

impl KernelDensity {
    pub fn new(
        dim: usize,
        points: Vec<f64>,
        weights: Vec<f64>,
        bandwidths: Vec<f64>,
        kernel: Kernel,
    ) -> Result<Self> {
        if points.len() != dim * weights.len() {
            return Err(DrmError::DimensionMismatch {
                expected: dim * weights.len(),
                found: points.len(),
            });
        }
        if bandwidths.len() != dim {
            return Err(DrmError::DimensionMismatch {
                expected: dim,
                found: bandwidths.len(),
            });
        }
        if bandwidths.iter().any(|h| !(*h > 0.0 && h.is_finite())) {
            return Err(DrmError::InvalidInput("bandwidths must be positive".into()));
        }
        Ok(KernelDensity {
            dim,
            points,
            weights,
            bandwidths,
            kernel,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn eval(&self, z: &[f64]) -> f64 {
        let norm: f64 = self.bandwidths.iter().product();
        let sum: f64 = self
            .points
            .chunks_exact(self.dim)
            .zip(&self.weights)
            .map(|(t, w)| {
                w * t
                    .iter()
                    .zip(z)
                    .zip(&self.bandwidths)
                    .map(|((a, b), h)| self.kernel.eval((a - b) / h))
                    .product::<f64>()
            })
            .sum();
        sum / norm
    }
}

/// Density estimate of one group from a fitted model.
#[derive(Debug, Clone, PartialEq)]
pub struct TiltedKde {
    pub group: usize,
    pub bandwidth: f64,
    pub kernel: Kernel,
    density: KernelDensity,
}

impl TiltedKde {
    /// `bandwidth` is on the standardized scale; coordinate `l` uses
    /// `bandwidth * model.scale[l]`.
    pub fn new(model: &FittedModel, group: usize, bandwidth: f64, kernel: Kernel) -> Result<Self> {
        model.check_group(group)?;
        if !(bandwidth > 0.0 && bandwidth.is_finite()) {
            return Err(DrmError::InvalidInput("bandwidth must be positive".into()));
        }
        let weights = (0..model.n())
            .map(|i| model.p_hat[i] * model.log_tilt(group, i).exp())
            .collect();
        let bandwidths = model.scale.iter().map(|s| bandwidth * s).collect();
        Ok(TiltedKde {
            group,
            bandwidth,
            kernel,
            density: KernelDensity::new(
                model.dim(),
                model.combined.values.clone(),
                weights,
                bandwidths,
                kernel,
            )?,
        })
    }

    pub fn bandwidths(&self) -> &[f64] {
        &self.density.bandwidths
    }

    pub fn eval(&self, z: &[f64]) -> f64 {
        self.density.eval(z)
    }
}

/// Which responses enter the conditional-mean average.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateSet {
    /// All `n` responses of the combined data.
    #[default]
    Combined,
    /// Only the responses observed in the predicted group.
    Group,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictOptions {
    /// Bandwidth on the standardized scale.
    pub bandwidth: f64,
    pub kernel: Kernel,
    pub candidates: CandidateSet,
}

impl Default for PredictOptions {
    fn default() -> Self {
        PredictOptions {
            bandwidth: 0.3,
            kernel: Kernel::Gaussian,
            candidates: CandidateSet::Combined,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegressionPrediction {
    pub x: Vec<f64>,
    pub group: usize,
    pub y_hat: f64,
    /// Candidate responses and their normalized weights.
    pub candidates: Vec<f64>,
    pub weights: Vec<f64>,
}

/// Reusable state for predicting one group's conditional mean.
pub struct Predictor<'a> {
    model: &'a FittedModel,
    group: usize,
    opts: PredictOptions,
    h: Vec<f64>,
    /// `log p_i + log w_g(t_i)`.
    base: Vec<f64>,
    candidates: Vec<f64>,
    /// Row-major `n x C` response kernel values, when small enough to cache.
    response_kernel: Option<Vec<f64>>,
}

const CACHE_LIMIT: usize = 16_000_000;

impl<'a> Predictor<'a> {
    pub fn new(model: &'a FittedModel, group: usize, opts: PredictOptions) -> Result<Self> {
        model.check_group(group)?;
        if !(opts.bandwidth > 0.0 && opts.bandwidth.is_finite()) {
            return Err(DrmError::InvalidInput("bandwidth must be positive".into()));
        }
        let dim = model.dim();
        let h: Vec<f64> = model.scale.iter().map(|s| opts.bandwidth * s).collect();
        let base = (0..model.n())
            .map(|i| model.p_hat[i].ln() + model.log_tilt(group, i))
            .collect();
        let candidates: Vec<f64> = (0..model.n())
            .filter(|&i| opts.candidates == CandidateSet::Combined || model.combined.group_of[i] == group)
            .map(|i| model.combined.point(i)[dim - 1])
            .collect();
        let n = model.n();
        let response_kernel = (n * candidates.len() <= CACHE_LIMIT).then(|| {
            let hy = h[dim - 1];
            let mut k = Vec::with_capacity(n * candidates.len());
            for i in 0..n {
                let yi = model.combined.point(i)[dim - 1];
                k.extend(candidates.iter().map(|yc| opts.kernel.eval((yi - yc) / hy)));
            }
            k
        });
        Ok(Predictor {
            model,
            group,
            opts,
            h,
            base,
            candidates,
            response_kernel,
        })
    }

    fn check_query(&self, x: &[f64]) -> Result<()> {
        let expected = self.model.dim() - 1;
        if x.len() != expected {
            return Err(DrmError::DimensionMismatch {
                expected,
                found: x.len(),
            });
        }
        Ok(())
    }

    /// `log p_i + log w_g(t_i) + sum_l log K((t_il - x_l) / h_l)`.
    fn covariate_log_weights(&self, x: &[f64]) -> Vec<f64> {
        (0..self.model.n())
            .map(|i| {
                let t = self.model.combined.point(i);
                self.base[i]
                    + x.iter()
                        .enumerate()
                        .map(|(l, xl)| self.opts.kernel.log_eval((t[l] - xl) / self.h[l]))
                        .sum::<f64>()
            })
            .collect()
    }

    /// Log of the normalizing constant `prod_l h_l`.
    fn log_norm(&self) -> f64 {
        self.h.iter().map(|h| h.ln()).sum()
    }

    /// Unnormalized candidate weights `g_hat(x, y_c)`, in log space.
    fn log_candidate_density(&self, la: &[f64]) -> Vec<f64> {
        let dim = self.model.dim();
        let hy = self.h[dim - 1];
        self.candidates
            .iter()
            .map(|yc| {
                let terms = la.iter().enumerate().map(|(i, a)| {
                    let yi = self.model.combined.point(i)[dim - 1];
                    a + self.opts.kernel.log_eval((yi - yc) / hy)
                });
                log_sum_exp(terms) - self.log_norm()
            })
            .collect()
    }

    fn normalize(&self, log_g: &[f64]) -> Result<Vec<f64>> {
        let top = log_g.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !(top >= ln_min_positive()) {
            return Err(DrmError::NoEffectiveSupport);
        }
        let total = log_sum_exp(log_g.iter().copied());
        Ok(log_g.iter().map(|v| (v - total).exp()).collect())
    }

    /// Exact log-space evaluation of the conditional-mean weights.
    fn weights_exact(&self, x: &[f64]) -> Result<Vec<f64>> {
        let la = self.covariate_log_weights(x);
        self.normalize(&self.log_candidate_density(&la))
    }

    fn weights(&self, x: &[f64]) -> Result<Vec<f64>> {
        let Some(kmat) = &self.response_kernel else {
            return self.weights_exact(x);
        };
        let la = self.covariate_log_weights(x);
        let shift = la.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if shift == f64::NEG_INFINITY {
            return Err(DrmError::NoEffectiveSupport);
        }
        let c = self.candidates.len();
        let mut g = vec![0.0; c];
        for (i, a) in la.iter().enumerate() {
            let a = (a - shift).exp();
            if a == 0.0 {
                continue;
            }
            let row = &kmat[i * c..(i + 1) * c];
            for (gc, k) in g.iter_mut().zip(row) {
                *gc += a * k;
            }
        }
        let top = g.iter().copied().fold(0.0, f64::max);
        if top < 1e-250 {
            // Every candidate sits far from the heavy points; redo in log space.
            return self.weights_exact(x);
        }
        if shift + top.ln() - self.log_norm() < ln_min_positive() {
            return Err(DrmError::NoEffectiveSupport);
        }
        let total: f64 = g.iter().sum();
        Ok(g.into_iter().map(|v| v / total).collect())
    }

    pub fn predict(&self, x: &[f64]) -> Result<RegressionPrediction> {
        self.check_query(x)?;
        let weights = self.weights(x)?;
        let y_hat = weighted_mean(&self.candidates, &weights);
        Ok(RegressionPrediction {
            x: x.to_vec(),
            group: self.group,
            y_hat,
            candidates: self.candidates.clone(),
            weights,
        })
    }

    pub fn predict_value(&self, x: &[f64]) -> Result<f64> {
        self.check_query(x)?;
        let weights = self.weights(x)?;
        Ok(weighted_mean(&self.candidates, &weights))
    }

    /// Predictions for many queries, evaluated in parallel, in input order.
    pub fn predict_many(&self, queries: &[Vec<f64>]) -> Vec<Result<f64>> {
        queries.par_iter().map(|x| self.predict_value(x)).collect()
    }

    /// In-sample predictions at the covariates of each observation of the
    /// predicted group, in combined-data order.
    pub fn fitted_values(&self) -> Result<Vec<f64>> {
        let dim = self.model.dim();
        let queries: Vec<Vec<f64>> = self
            .model
            .combined
            .indices_of(self.group)
            .into_iter()
            .map(|i| self.model.combined.point(i)[..dim - 1].to_vec())
            .collect();
        self.predict_many(&queries).into_iter().collect()
    }
}

fn weighted_mean(values: &[f64], weights: &[f64]) -> f64 {
    let mean: f64 = values.iter().zip(weights).map(|(v, w)| v * w).sum();
    // Keep the result inside the hull of the positively weighted values.
    let (lo, hi) = values
        .iter()
        .zip(weights)
        .filter(|(_, w)| **w > 0.0)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (v, _)| (lo.min(*v), hi.max(*v)));
    mean.clamp(lo, hi)
}

pub(crate) fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Semiparametric conditional mean of the response of group `g` at covariates `x`.
pub fn predict(
    model: &FittedModel,
    x: &[f64],
    group: usize,
    opts: &PredictOptions,
) -> Result<RegressionPrediction> {
    Predictor::new_uncached(model, group, *opts)?.predict(x)
}

impl<'a> Predictor<'a> {
    fn new_uncached(model: &'a FittedModel, group: usize, opts: PredictOptions) -> Result<Self> {
        model.check_group(group)?;
        if !(opts.bandwidth > 0.0 && opts.bandwidth.is_finite()) {
            return Err(DrmError::InvalidInput("bandwidth must be positive".into()));
        }
        let dim = model.dim();
        Ok(Predictor {
            h: model.scale.iter().map(|s| opts.bandwidth * s).collect(),
            base: (0..model.n())
                .map(|i| model.p_hat[i].ln() + model.log_tilt(group, i))
                .collect(),
            candidates: (0..model.n())
                .filter(|&i| {
                    opts.candidates == CandidateSet::Combined || model.combined.group_of[i] == group
                })
                .map(|i| model.combined.point(i)[dim - 1])
                .collect(),
            model,
            group,
            opts,
            response_kernel: None,
        })
    }
}

/// Nadaraya-Watson estimate from one sample with a product kernel over the
/// covariates and per-covariate bandwidths.
pub fn nadaraya_watson(
    sample: &[Observation],
    x: &[f64],
    bandwidths: &[f64],
    kernel: Kernel,
) -> Result<f64> {
    let first = sample
        .first()
        .ok_or_else(|| DrmError::InvalidInput("empty sample".into()))?;
    let k = first.dim() - 1;
    if x.len() != k || bandwidths.len() != k {
        return Err(DrmError::DimensionMismatch {
            expected: k,
            found: if x.len() != k { x.len() } else { bandwidths.len() },
        });
    }
    if bandwidths.iter().any(|h| !(*h > 0.0 && h.is_finite())) {
        return Err(DrmError::InvalidInput("bandwidths must be positive".into()));
    }
    let la: Vec<f64> = sample
        .iter()
        .map(|o| {
            o.covariates()
                .iter()
                .zip(x)
                .zip(bandwidths)
                .map(|((a, b), h)| kernel.log_eval((a - b) / h))
                .sum()
        })
        .collect();
    let top = la.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_norm: f64 = bandwidths.iter().map(|h| h.ln()).sum();
    if !(top - log_norm >= ln_min_positive()) {
        return Err(DrmError::NoEffectiveSupport);
    }
    let w: Vec<f64> = la.iter().map(|a| (a - top).exp()).collect();
    let total: f64 = w.iter().sum();
    let y: Vec<f64> = sample.iter().map(Observation::response).collect();
    let norm: Vec<f64> = w.iter().map(|v| v / total).collect();
    Ok(weighted_mean(&y, &norm))
}

/// Least-squares fit of the response on an intercept and the covariates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OlsFit {
    /// Intercept first, then one slope per covariate.
    pub coefficients: Vec<f64>,
    pub fitted: Vec<f64>,
}

impl OlsFit {
    pub fn predict(&self, x: &[f64]) -> f64 {
        self.coefficients[0]
            + self.coefficients[1..]
                .iter()
                .zip(x)
                .map(|(b, v)| b * v)
                .sum::<f64>()
    }

    pub fn residuals(&self, sample: &[Observation]) -> Vec<f64> {
        sample
            .iter()
            .zip(&self.fitted)
            .map(|(o, f)| o.response() - f)
            .collect()
    }
}

pub fn ols_fit(sample: &[Observation]) -> Result<OlsFit> {
    let first = sample
        .first()
        .ok_or_else(|| DrmError::InvalidInput("empty sample".into()))?;
    let p = first.dim();
    let n = sample.len();
    if n < p {
        return Err(DrmError::Singular {
            context: format!("design matrix with {n} rows and {p} columns"),
            condition: f64::INFINITY,
        });
    }
    let x = DMatrix::from_fn(n, p, |r, c| {
        if c == 0 {
            1.0
        } else {
            sample[r].covariates()[c - 1]
        }
    });
    let y = DVector::from_iterator(n, sample.iter().map(Observation::response));
    let qr = x.clone().qr();
    let r = qr.r();
    let diag: Vec<f64> = (0..p).map(|k| r[(k, k)].abs()).collect();
    let dmax = diag.iter().copied().fold(0.0, f64::max);
    let dmin = diag.iter().copied().fold(f64::INFINITY, f64::min);
    if dmin <= 1e-12 * dmax.max(1e-300) {
        return Err(DrmError::Singular {
            context: "rank-deficient design matrix".into(),
            condition: if dmin == 0.0 { f64::INFINITY } else { dmax / dmin },
        });
    }
    let qty = qr.q().transpose() * &y;
    let beta = r
        .solve_upper_triangular(&qty)
        .ok_or_else(|| DrmError::Singular {
            context: "rank-deficient design matrix".into(),
            condition: f64::INFINITY,
        })?;
    let fitted = (&x * &beta).iter().copied().collect();
    Ok(OlsFit {
        coefficients: beta.iter().copied().collect(),
        fitted,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorScores {
    pub mse: f64,
    pub mae: f64,
}

pub fn score_predictions(truth: &[f64], preds: &[f64]) -> Result<ErrorScores> {
    if truth.len() != preds.len() {
        return Err(DrmError::DimensionMismatch {
            expected: truth.len(),
            found: preds.len(),
        });
    }
    if truth.is_empty() {
        return Err(DrmError::InvalidInput("no predictions to score".into()));
    }
    let n = truth.len() as f64;
    let (se, ae) = truth
        .iter()
        .zip(preds)
        .fold((0.0, 0.0), |(se, ae), (t, p)| (se + (t - p) * (t - p), ae + (t - p).abs()));
    Ok(ErrorScores {
        mse: se / n,
        mae: ae / n,
    })
}
