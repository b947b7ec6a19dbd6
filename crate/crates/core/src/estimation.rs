//! Empirical likelihood fitting of the density ratio model.
//!
//! With the jump masses profiled out, the log empirical likelihood is
//!
//! ```text
//! l(theta) = -n log n_m - sum_i log(1 + sum_k rho_k w_k(t_i)) + sum_j sum_{t in group j} log w_j(t)
//! ```
//!
//! and the maximiser is found by damped Newton iterations on the score
//! equations, starting from `theta = 0`. The jumps are then
//! `p_i = (1/n_m) / (1 + sum_k rho_k w_k(t_i))`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{DrmError, Result};
use crate::model::{tilts_on, CombinedData, ModelParams, SampleSet, TiltWeights};

/// Solver settings for [`fit`].
#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    /// Convergence threshold on `max |score component|`.
    pub tol: f64,
    /// Convergence threshold on the relative change of the log-likelihood.
    pub rel_loglik_tol: f64,
    pub max_iter: usize,
    /// Centre and scale every coordinate by its pooled mean and sd before
    /// solving. Estimates are always reported on the raw scale.
    pub standardize: bool,
    /// Hold every `beta_j` at zero and solve for the intercepts only.
    pub fix_beta_zero: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            tol: 1e-8,
            rel_loglik_tol: 1e-12,
            max_iter: 200,
            standardize: true,
            fix_beta_zero: false,
        }
    }
}

/// Label and size of one group of the fitted sample set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupInfo {
    pub label: String,
    pub size: usize,
}

/// Result of [`fit`]: parameters, jump masses over the combined data, and
/// solver metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct FittedModel {
    pub params: ModelParams,
    pub p_hat: Vec<f64>,
    pub combined: CombinedData,
    pub groups: Vec<GroupInfo>,
    pub reference: usize,
    pub rho: Vec<f64>,
    pub log_lik: f64,
    pub converged: bool,
    pub iterations: usize,
    pub grad_norm: f64,
    /// Pooled per-coordinate mean of the combined data.
    pub center: Vec<f64>,
    /// Pooled per-coordinate standard deviation of the combined data.
    pub scale: Vec<f64>,
}

impl FittedModel {
    /// Evaluates the model quantities at fixed parameters without solving.
    pub fn at_params(data: &SampleSet, params: ModelParams) -> Result<Self> {
        let combined = data.combined();
        let rho = data.rho();
        let ws = Workspace::new(data, &combined, None);
        let eval = ws.evaluate(&params.theta(), false)?;
        let tilts = tilts_on(&params, &combined, rho.clone())?;
        let (center, scale) = combined.pooled_moments();
        let n_ref = data.groups()[data.reference()].len() as f64;
        Ok(FittedModel {
            p_hat: jumps(&tilts, n_ref),
            log_lik: eval.log_lik,
            grad_norm: max_abs(&eval.score),
            params,
            groups: group_info(data),
            reference: data.reference(),
            rho,
            converged: false,
            iterations: 0,
            combined,
            center,
            scale,
        })
    }

    pub fn q(&self) -> usize {
        self.params.q()
    }

    pub fn dim(&self) -> usize {
        self.combined.dim
    }

    pub fn n(&self) -> usize {
        self.combined.len()
    }

    pub fn group_count(&self) -> usize {
        self.groups.len()
    }

    /// Tilt index of sample-set group `g`, `None` for the reference.
    pub fn tilt_index(&self, g: usize) -> Option<usize> {
        if g == self.reference {
            None
        } else if g < self.reference {
            Some(g)
        } else {
            Some(g - 1)
        }
    }

    /// Sample-set group index of tilt `j`.
    pub fn group_of_tilt(&self, j: usize) -> usize {
        if j < self.reference {
            j
        } else {
            j + 1
        }
    }

    pub fn group_index(&self, label: &str) -> Option<usize> {
        self.groups.iter().position(|g| g.label == label)
    }

    pub(crate) fn check_group(&self, g: usize) -> Result<()> {
        if g >= self.groups.len() {
            return Err(DrmError::GroupOutOfRange {
                index: g,
                groups: self.groups.len(),
            });
        }
        Ok(())
    }

    pub fn tilts(&self) -> Result<TiltWeights> {
        tilts_on(&self.params, &self.combined, self.rho.clone())
    }

    /// `log w_g(t_i)` for sample-set group `g` (zero for the reference).
    pub fn log_tilt(&self, g: usize, i: usize) -> f64 {
        match self.tilt_index(g) {
            None => 0.0,
            Some(j) => self.params.exponent(j, self.combined.point(i)),
        }
    }

    /// Raises [`DrmError::NonConvergence`] for a fit that stopped early.
    pub fn require_converged(&self) -> Result<&Self> {
        if self.converged {
            Ok(self)
        } else {
            Err(DrmError::NonConvergence {
                iterations: self.iterations,
                grad_norm: self.grad_norm,
            })
        }
    }

    /// `sum_i p_i - 1` followed by `sum_i w_j(t_i) p_i - 1` for each tilt.
    pub fn constraint_residuals(&self) -> Vec<f64> {
        let mut out = vec![self.p_hat.iter().sum::<f64>() - 1.0];
        for j in 0..self.q() {
            let s: f64 = (0..self.n())
                .map(|i| self.params.exponent(j, self.combined.point(i)).exp() * self.p_hat[i])
                .sum();
            out.push(s - 1.0);
        }
        out
    }
}

fn group_info(data: &SampleSet) -> Vec<GroupInfo> {
    data.groups()
        .iter()
        .map(|g| GroupInfo {
            label: g.label.clone(),
            size: g.len(),
        })
        .collect()
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn jumps(tilts: &TiltWeights, n_ref: f64) -> Vec<f64> {
    (0..tilts.n())
        .map(|i| (-tilts.log_denominator(i)).exp() / n_ref)
        .collect()
}

/// Jump masses `p_i = (1/n_m) / (1 + sum_k rho_k w_k(t_i))` at the given parameters.
pub fn p_hat(params: &ModelParams, data: &SampleSet) -> Result<Vec<f64>> {
    let tilts = crate::model::tilt_weights(params, data)?;
    let n_ref = data.groups()[data.reference()].len() as f64;
    Ok(jumps(&tilts, n_ref))
}

/// Profile log empirical likelihood at `params`.
pub fn profile_log_likelihood(params: &ModelParams, data: &SampleSet) -> Result<f64> {
    check_params(params, data)?;
    let combined = data.combined();
    Ok(Workspace::new(data, &combined, None)
        .evaluate(&params.theta(), false)?
        .log_lik)
}

/// Gradient of the profile log-likelihood in `theta` layout.
pub fn score(params: &ModelParams, data: &SampleSet) -> Result<Vec<f64>> {
    check_params(params, data)?;
    let combined = data.combined();
    Ok(Workspace::new(data, &combined, None)
        .evaluate(&params.theta(), false)?
        .score)
}

fn check_params(params: &ModelParams, data: &SampleSet) -> Result<()> {
    if params.q() != data.q() {
        return Err(DrmError::DimensionMismatch {
            expected: data.q(),
            found: params.q(),
        });
    }
    if params.dim() != data.dim() {
        return Err(DrmError::DimensionMismatch {
            expected: data.dim(),
            found: params.dim(),
        });
    }
    Ok(())
}

/// Combined data prepared for repeated likelihood evaluations.
struct Workspace {
    dim: usize,
    q: usize,
    points: Vec<f64>,
    tilt_of: Vec<Option<usize>>,
    n_tilt: Vec<f64>,
    n_ref: f64,
    ln_rho: Vec<f64>,
}

struct Evaluation {
    log_lik: f64,
    score: Vec<f64>,
    /// Negative Hessian, present when requested.
    info: Option<DMatrix<f64>>,
}

impl Workspace {
    fn new(data: &SampleSet, combined: &CombinedData, transform: Option<(&[f64], &[f64])>) -> Self {
        let dim = combined.dim;
        let points = match transform {
            None => combined.values.clone(),
            Some((center, scale)) => combined
                .values
                .iter()
                .enumerate()
                .map(|(k, v)| (v - center[k % dim]) / scale[k % dim])
                .collect(),
        };
        let tilted = data.tilted_groups();
        let tilt_of = combined
            .group_of
            .iter()
            .map(|g| tilted.iter().position(|t| t == g))
            .collect();
        let n_tilt = tilted
            .iter()
            .map(|&g| data.groups()[g].len() as f64)
            .collect();
        Workspace {
            dim,
            q: data.q(),
            points,
            tilt_of,
            n_tilt,
            n_ref: data.groups()[data.reference()].len() as f64,
            ln_rho: data.rho().iter().map(|r| r.ln()).collect(),
        }
    }

    fn n(&self) -> usize {
        self.tilt_of.len()
    }

    fn n_params(&self) -> usize {
        self.q * (1 + self.dim)
    }

    fn evaluate(&self, theta: &[f64], with_info: bool) -> Result<Evaluation> {
        let (q, dim) = (self.q, self.dim);
        let params = ModelParams::from_theta(q, dim, theta)?;
        let np = self.n_params();
        let mut log_lik = -(self.n() as f64) * self.n_ref.ln();
        let mut score = vec![0.0; np];
        let mut info = with_info.then(|| DMatrix::<f64>::zeros(np, np));
        for j in 0..q {
            score[j] = self.n_tilt[j];
        }
        let mut eta = vec![0.0; q];
        let mut pi = vec![0.0; q];
        let mut phi = vec![0.0; 1 + dim];
        phi[0] = 1.0;
        for i in 0..self.n() {
            let t = &self.points[i * dim..(i + 1) * dim];
            for j in 0..q {
                let e = params.exponent(j, t);
                if !e.is_finite() || e > crate::model::MAX_EXPONENT {
                    return Err(DrmError::NumericOverflow { index: i, exponent: e });
                }
                eta[j] = e + self.ln_rho[j];
            }
            let log_d = crate::model::log1p_sum_exp(eta.iter().copied());
            log_lik -= log_d;
            if let Some(j) = self.tilt_of[i] {
                log_lik += eta[j] - self.ln_rho[j];
                for l in 0..dim {
                    score[q + j * dim + l] += t[l];
                }
            }
            for j in 0..q {
                pi[j] = (eta[j] - log_d).exp();
                score[j] -= pi[j];
                for l in 0..dim {
                    score[q + j * dim + l] -= pi[j] * t[l];
                }
            }
            if let Some(info) = info.as_mut() {
                phi[1..].copy_from_slice(t);
                for j in 0..q {
                    for jp in j..q {
                        let c = if j == jp {
                            pi[j] * (1.0 - pi[j])
                        } else {
                            -pi[j] * pi[jp]
                        };
                        for a in 0..=dim {
                            let r = param_index(q, dim, j, a);
                            for b in 0..=dim {
                                let s = param_index(q, dim, jp, b);
                                info[(r, s)] += c * phi[a] * phi[b];
                            }
                        }
                    }
                }
            }
        }
        if let Some(info) = info.as_mut() {
            // Only blocks with j <= j' were accumulated.
            for j in 0..q {
                for jp in (j + 1)..q {
                    for a in 0..=dim {
                        for b in 0..=dim {
                            let r = param_index(q, dim, j, a);
                            let s = param_index(q, dim, jp, b);
                            info[(s, r)] = info[(r, s)];
                        }
                    }
                }
            }
        }
        Ok(Evaluation {
            log_lik,
            score,
            info,
        })
    }
}

/// Position in `theta` of component `a` of the `(1, t')` block of tilt `j`:
/// `a = 0` is `alpha_j`, `a = l + 1` is `beta_{j,l}`.
pub(crate) fn param_index(q: usize, dim: usize, j: usize, a: usize) -> usize {
    if a == 0 {
        j
    } else {
        q + j * dim + (a - 1)
    }
}

/// Ratio of extreme eigenvalues of a symmetric matrix.
pub(crate) fn condition_estimate(m: &DMatrix<f64>) -> f64 {
    let eig = m.clone().symmetric_eigen();
    let (lo, hi) = eig
        .eigenvalues
        .iter()
        .fold((f64::INFINITY, 0.0_f64), |(lo, hi), v| (lo.min(v.abs()), hi.max(v.abs())));
    if lo == 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

/// Smallest eigenvalue of the standardized information per observation
/// below which a stationary point is treated as a separated (infinite)
/// solution.
const SEPARATION_EIGENVALUE: f64 = 1e-10;

/// Fits the density ratio model by maximising the profile empirical
/// likelihood.
///
/// A fit that exhausts `max_iter`, or whose samples are separated so that no
/// finite maximiser exists, is returned with `converged = false` and the last
/// iterate; see [`FittedModel::require_converged`].
pub fn fit(data: &SampleSet, opts: &FitOptions) -> Result<FittedModel> {
    let q = data.q();
    let dim = data.dim();
    let np = q * (1 + dim);
    let n = data.total();
    if n < np + 1 {
        return Err(DrmError::InvalidInput(format!(
            "need at least {} observations for {} parameters, found {n}",
            np + 1,
            np
        )));
    }
    let combined = data.combined();
    let (center, scale) = combined.pooled_moments();
    if let Some(l) = scale.iter().position(|s| *s == 0.0 || !s.is_finite()) {
        return Err(DrmError::DegenerateInput(format!(
            "coordinate {l} is constant across the combined data"
        )));
    }
    let ws = if opts.standardize {
        Workspace::new(data, &combined, Some((&center, &scale)))
    } else {
        Workspace::new(data, &combined, None)
    };

    let free: Vec<usize> = if opts.fix_beta_zero {
        (0..q).collect()
    } else {
        (0..np).collect()
    };
    let merit = |s: &[f64]| free.iter().map(|&k| s[k] * s[k]).sum::<f64>().sqrt();
    let sup = |s: &[f64]| free.iter().fold(0.0_f64, |m, &k| m.max(s[k].abs()));

    let mut theta = vec![0.0; np];
    let mut cur = ws.evaluate(&theta, true)?;
    let mut prev_loglik: Option<f64> = None;
    let mut iterations = 0;
    let mut converged = false;
    loop {
        let small_score = sup(&cur.score) <= opts.tol;
        let small_change = prev_loglik.is_none_or(|p| {
            (cur.log_lik - p).abs() <= opts.rel_loglik_tol * cur.log_lik.abs().max(1.0)
        });
        if small_score && small_change {
            converged = true;
            break;
        }
        if iterations >= opts.max_iter {
            break;
        }
        iterations += 1;

        let info = cur.info.as_ref().expect("information requested");
        let sub = DMatrix::from_fn(free.len(), free.len(), |r, c| info[(free[r], free[c])]);
        let rhs = DVector::from_iterator(free.len(), free.iter().map(|&k| cur.score[k]));
        let step = match sub.clone().cholesky() {
            Some(ch) => ch.solve(&rhs),
            None => {
                return Err(DrmError::Singular {
                    context: "Newton information matrix".into(),
                    condition: condition_estimate(&sub),
                })
            }
        };
        if step.iter().any(|v| !v.is_finite()) {
            return Err(DrmError::Singular {
                context: "Newton information matrix".into(),
                condition: condition_estimate(&sub),
            });
        }

        let base = merit(&cur.score);
        let mut lambda = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let mut trial = theta.clone();
            for (s, &k) in step.iter().zip(&free) {
                trial[k] += lambda * s;
            }
            match ws.evaluate(&trial, true) {
                Ok(ev) if merit(&ev.score) < base => {
                    accepted = Some((trial, ev));
                    break;
                }
                Ok(_) | Err(DrmError::NumericOverflow { .. }) => lambda *= 0.5,
                Err(e) => return Err(e),
            }
        }
        match accepted {
            Some((t, ev)) => {
                prev_loglik = Some(cur.log_lik);
                theta = t;
                cur = ev;
            }
            None => {
                // No step improves the score: at the solution up to rounding.
                converged = small_score;
                break;
            }
        }
    }

    if converged {
        // Separated samples drive the estimate to infinity: the score
        // vanishes while the standardized information collapses.
        let info = cur.info.as_ref().expect("information requested");
        let sub = DMatrix::from_fn(free.len(), free.len(), |r, c| info[(free[r], free[c])]);
        let min_eig = sub.symmetric_eigenvalues().min();
        converged = min_eig / n as f64 > SEPARATION_EIGENVALUE;
    }

    let grad_norm = sup(&cur.score);
    let working = ModelParams::from_theta(q, dim, &theta)?;
    let params = if opts.standardize {
        to_raw_scale(&working, &center, &scale)
    } else {
        working
    };
    let rho = data.rho();
    let tilts = tilts_on(&params, &combined, rho.clone())?;
    let n_ref = data.groups()[data.reference()].len() as f64;
    let raw = Workspace::new(data, &combined, None).evaluate(&params.theta(), false)?;
    Ok(FittedModel {
        p_hat: jumps(&tilts, n_ref),
        log_lik: raw.log_lik,
        params,
        groups: group_info(data),
        reference: data.reference(),
        rho,
        converged,
        iterations,
        grad_norm,
        combined,
        center,
        scale,
    })
}

/// Maps a tilt on standardized coordinates `z = (t - c) / s` back to raw `t`.
fn to_raw_scale(p: &ModelParams, center: &[f64], scale: &[f64]) -> ModelParams {
    let beta: Vec<Vec<f64>> = p
        .beta
        .iter()
        .map(|b| b.iter().zip(scale).map(|(b, s)| b / s).collect())
        .collect();
    let alpha = p
        .alpha
        .iter()
        .zip(&beta)
        .map(|(a, b)| a - b.iter().zip(center).map(|(b, c)| b * c).sum::<f64>())
        .collect();
    ModelParams { alpha, beta }
}

/// An `L`-dimensional step distribution: masses placed on support points.
#[derive(Debug, Clone, PartialEq)]
pub struct StepCdf {
    dim: usize,
    points: Vec<f64>,
    masses: Vec<f64>,
}

impl StepCdf {
    pub fn new(dim: usize, points: Vec<f64>, masses: Vec<f64>) -> Result<Self> {
        if dim == 0 || points.len() != dim * masses.len() {
            return Err(DrmError::DimensionMismatch {
                expected: dim * masses.len(),
                found: points.len(),
            });
        }
        if masses.iter().any(|m| !(m.is_finite() && *m >= 0.0)) {
            return Err(DrmError::InvalidInput("masses must be finite and nonnegative".into()));
        }
        Ok(StepCdf { dim, points, masses })
    }

    pub fn masses(&self) -> &[f64] {
        &self.masses
    }

    pub fn total_mass(&self) -> f64 {
        self.masses.iter().sum()
    }

    /// `sum_i mass_i * I(point_i <= t)` with the componentwise order.
    pub fn eval(&self, t: &[f64]) -> f64 {
        debug_assert_eq!(t.len(), self.dim);
        self.points
            .chunks_exact(self.dim)
            .zip(&self.masses)
            .filter(|(p, _)| p.iter().zip(t).all(|(a, b)| a <= b))
            .map(|(_, m)| m)
            .sum()
    }
}

/// Estimated reference distribution `G`.
pub fn reference_cdf(model: &FittedModel) -> StepCdf {
    StepCdf {
        dim: model.dim(),
        points: model.combined.values.clone(),
        masses: model.p_hat.clone(),
    }
}

/// Estimated distribution of sample-set group `g`: masses `w_g(t_i) p_i`.
/// For the reference group this is [`reference_cdf`].
pub fn tilted_cdf(model: &FittedModel, g: usize) -> Result<StepCdf> {
    model.check_group(g)?;
    let masses = (0..model.n())
        .map(|i| model.log_tilt(g, i).exp() * model.p_hat[i])
        .collect();
    Ok(StepCdf {
        dim: model.dim(),
        points: model.combined.values.clone(),
        masses,
    })
}
